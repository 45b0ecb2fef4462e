//! Frozen decoder-only transformer with per-layer injection hooks.
//!
//! Architecture: learned token + absolute position embeddings, pre-norm
//! residual blocks (RMSNorm gains only, causal multi-head attention, tanh
//! GELU MLP), a final RMSNorm, and an output head tied to the embedding
//! transpose.
//!
//! Three token ids (the two text placeholders and the image-side context
//! slot) are "reserved": their embedding rows are pinned to zero and their
//! sequence positions receive no position embedding, so the layer-1 input
//! row at a reserved position is exactly the zero vector. Injection
//! OVERWRITES the hidden row at a reserved position at the input of each
//! layer it targets; a forward with no plan is therefore the plain frozen
//! model, and overwriting a layer-1 row with zeros is a no-op.
//!
//! `layer_inputs` are captured before the overwrite at every layer, which
//! makes them pure frozen-model activations regardless of the plan.
//!
//! Manual backward pass. Gradients never flow through an overwritten row to
//! the layers below (the overwrite severs that dependence); they are instead
//! reported per plan entry, which is exactly the gradient the context banks
//! train on. Parameter gradients are optional and only used by pretraining.

use crate::error::{CoarError, Result};
use crate::mat::{mm, mm_abt, mm_abt_acc, mm_atb_acc, Mat};
use crate::math;
use crate::rng::Rng;
use crate::sequences::{TokenSequence, Vocabulary};
use crate::toyworld::{quantize, Codebook, SubjectSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl BackboneConfig {
    /// The pretrained desk-scale model.
    pub fn standard() -> Self {
        BackboneConfig {
            dim: 64,
            n_heads: 4,
            n_layers: 12,
            vocab_size: Vocabulary::standard().size(),
            max_seq: 80,
        }
    }

    /// Small instance for gradient checks: D=16, 2 layers, |V|=32.
    pub fn small() -> Self {
        BackboneConfig {
            dim: 16,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 32,
            max_seq: 24,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(CoarError::invalid("backbone dimensions must be nonzero"));
        }
        if self.dim % self.n_heads != 0 {
            return Err(CoarError::invalid(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(CoarError::invalid("vocab and context sizes must be nonzero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub w2: Mat,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    /// `[vocab_size, dim]`; also the transposed output head.
    pub embed: Mat,
    /// `[max_seq, dim]` learned absolute positions.
    pub pos: Mat,
    pub layers: Vec<LayerParams>,
    /// Final pre-head norm gain.
    pub gf: Vec<f64>,
    pub frozen: bool,
}

impl BackboneParams {
    /// Pretraining start: small gaussian weights, zero out-projections so
    /// every residual branch starts silent, unit gains, pinned-zero rows for
    /// the reserved token ids.
    pub fn init(config: &BackboneConfig, seed: u64, reserved_ids: &[usize]) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(seed, "backbone/init");
        let mut params = Self::build(config, &mut rng, true);
        for l in &mut params.layers {
            l.wo.fill(0.0);
            l.w2.fill(0.0);
        }
        for &id in reserved_ids {
            params.embed.row_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(params)
    }

    /// Fully random instance for numerical tests; nothing is zeroed, so
    /// every gradient path is exercised.
    pub fn random(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(seed, "backbone/random");
        Ok(Self::build(config, &mut rng, false))
    }

    fn build(config: &BackboneConfig, rng: &mut Rng, unit_gains: bool) -> Self {
        let d = config.dim;
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| 0.02 * rng.gaussian()).collect(),
            )
        };
        let embed = mat(config.vocab_size, d);
        let pos = mat(config.max_seq, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
                w1: mat(d, config.d_ff()),
                w2: mat(config.d_ff(), d),
                g1: vec![1.0; d],
                g2: vec![1.0; d],
            });
        }
        let mut gf = vec![1.0; d];
        if !unit_gains {
            let mut jitter = |g: &mut Vec<f64>| {
                for v in g.iter_mut() {
                    *v = 1.0 + 0.1 * rng.gaussian();
                }
            };
            for l in &mut layers {
                let (g1, g2) = (&mut l.g1, &mut l.g2);
                jitter(g1);
                jitter(g2);
            }
            jitter(&mut gf);
        }
        BackboneParams {
            config: config.clone(),
            embed,
            pos,
            layers,
            gf,
            frozen: false,
        }
    }

    /// Walk every tensor in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        f("embed", &self.embed.data);
        f("pos", &self.pos.data);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.wq"), &l.wq.data);
            f(&format!("layer{i}.wk"), &l.wk.data);
            f(&format!("layer{i}.wv"), &l.wv.data);
            f(&format!("layer{i}.wo"), &l.wo.data);
            f(&format!("layer{i}.w1"), &l.w1.data);
            f(&format!("layer{i}.w2"), &l.w2.data);
            f(&format!("layer{i}.g1"), &l.g1);
            f(&format!("layer{i}.g2"), &l.g2);
        }
        f("gf", &self.gf);
    }

    /// Mutable walk in exactly the [`BackboneParams::visit`] order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("embed", &mut self.embed.data);
        f("pos", &mut self.pos.data);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.wq"), &mut l.wq.data);
            f(&format!("layer{i}.wk"), &mut l.wk.data);
            f(&format!("layer{i}.wv"), &mut l.wv.data);
            f(&format!("layer{i}.wo"), &mut l.wo.data);
            f(&format!("layer{i}.w1"), &mut l.w1.data);
            f(&format!("layer{i}.w2"), &mut l.w2.data);
            f(&format!("layer{i}.g1"), &mut l.g1);
            f(&format!("layer{i}.g2"), &mut l.g2);
        }
        f("gf", &mut self.gf);
    }

    /// FNV-1a over every parameter's little-endian bytes. Used by the
    /// frozen-purity checks and the audit trail.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        self.visit(|_, data| {
            for v in data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(PRIME);
                }
            }
        });
        h
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, data| n += data.len());
        n
    }
}

/// One overwrite: at the input of `layer` (1-based), replace the hidden row
/// at `position` with `vector`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f64>,
}

/// The full set of overwrites for one forward pass, plus the bank names
/// they came from (for manifests and debugging).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectionPlan {
    pub entries: Vec<PlanEntry>,
    pub sources: Vec<String>,
}

impl InjectionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Check the plan against a sequence: positions must be reserved slots,
    /// layers in range and, per position, contiguous from 1.
    pub fn validate(&self, seq: &TokenSequence, config: &BackboneConfig) -> Result<()> {
        let reserved = seq.reserved_positions();
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.position >= seq.len() {
                return Err(CoarError::invalid(format!(
                    "plan position {} outside sequence of length {}",
                    e.position,
                    seq.len()
                )));
            }
            if !reserved.contains(&e.position) {
                return Err(CoarError::invalid(format!(
                    "plan position {} is not a reserved slot",
                    e.position
                )));
            }
            if e.layer == 0 || e.layer > config.n_layers {
                return Err(CoarError::invalid(format!(
                    "plan layer {} outside 1..={}",
                    e.layer, config.n_layers
                )));
            }
            if e.vector.len() != config.dim {
                return Err(CoarError::invalid(format!(
                    "plan vector has dim {}, model dim is {}",
                    e.vector.len(),
                    config.dim
                )));
            }
            if seen.contains(&(e.layer, e.position)) {
                return Err(CoarError::invalid(format!(
                    "duplicate plan entry at layer {} position {}",
                    e.layer, e.position
                )));
            }
            seen.push((e.layer, e.position));
        }
        // Per position, the layer set must be exactly 1..=N.
        let mut positions: Vec<usize> = seen.iter().map(|&(_, p)| p).collect();
        positions.sort_unstable();
        positions.dedup();
        for p in positions {
            let mut layers: Vec<usize> =
                seen.iter().filter(|&&(_, q)| q == p).map(|&(l, _)| l).collect();
            layers.sort_unstable();
            for (want, &got) in (1..=layers.len()).zip(layers.iter()) {
                if want != got {
                    return Err(CoarError::invalid(format!(
                        "plan layers for position {p} are not contiguous from 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    CausalIdentity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub size: usize,
    pub kind: MaskKind,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for r in 0..size {
            for c in 0..=r {
                allowed[r * size + c] = true;
            }
        }
        AttentionMask {
            size,
            kind: MaskKind::Causal,
            allowed,
        }
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.size + c]
    }

    fn disallow(&mut self, r: usize, c: usize) {
        self.allowed[r * self.size + c] = false;
    }

    /// Number of allowed (row, col) pairs.
    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }
}

/// Causal mask with mutual subject/style blindness: subject context
/// positions (text placeholder [V] and the first image-side slot) and style
/// context positions ([S] and the second slot) cannot attend to each other.
/// Everything else keeps its causal permissions.
pub fn build_identity_mask(seq: &TokenSequence) -> Result<AttentionMask> {
    if seq.v_positions.is_empty()
        || seq.s_positions.is_empty()
        || seq.ctx_img_positions.len() != 2
    {
        return Err(CoarError::invalid(
            "identity mask needs both subject and style context positions",
        ));
    }
    let mut subject = seq.v_positions.clone();
    subject.push(seq.ctx_img_positions[0]);
    let mut style = seq.s_positions.clone();
    style.push(seq.ctx_img_positions[1]);

    let mut mask = AttentionMask::causal(seq.len());
    mask.kind = MaskKind::CausalIdentity;
    for &a in &subject {
        for &b in &style {
            mask.disallow(a, b);
            mask.disallow(b, a);
        }
    }
    Ok(mask)
}

struct LayerCache {
    inv_rms1: Vec<f64>,
    x_hat1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head S×S attention probabilities.
    probs: Vec<Mat>,
    /// Concatenated head outputs before the out-projection.
    ctx: Mat,
    inv_rms2: Vec<f64>,
    x_hat2: Mat,
    u: Mat,
    tanh_u: Mat,
    act: Mat,
}

pub struct ForwardRecord {
    /// `[S, vocab_size]` unnormalized next-token scores.
    pub logits: Mat,
    /// Input to each layer, captured BEFORE injection: frozen-model
    /// activations.
    pub layer_inputs: Vec<Mat>,
    /// Final normed hidden state feeding the head.
    pub final_normed: Mat,
    /// Attention probabilities, `attention[layer][head]` of shape S×S.
    pub seq_len: usize,
    caches: Vec<LayerCache>,
    final_inv_rms: Vec<f64>,
}

impl ForwardRecord {
    /// Attention probability at (layer, head, row, col), zero where masked.
    pub fn attention_prob(&self, layer: usize, head: usize, r: usize, c: usize) -> f64 {
        self.caches[layer].probs[head].get(r, c)
    }
}

fn rmsnorm(x: &Mat, gain: &[f64], x_hat: &mut Mat, inv_rms: &mut Vec<f64>, y: &mut Mat) {
    let d = x.cols;
    inv_rms.clear();
    for r in 0..x.rows {
        let row = x.row(r);
        let ms: f64 = math::dot(row, row) / d as f64;
        let ir = 1.0 / math::sqrt(ms + RMS_EPS);
        inv_rms.push(ir);
        let hat = x_hat.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            hat[j] = v * ir;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = x_hat.get(r, j) * gain[j];
        }
    }
}

/// Accumulates the input gradient into `dx`; accumulates `dgain`.
fn rmsnorm_backward(
    dy: &Mat,
    x_hat: &Mat,
    inv_rms: &[f64],
    gain: &[f64],
    dx: &mut Mat,
    mut dgain: Option<&mut Vec<f64>>,
) {
    let d = dy.cols;
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let hat = x_hat.row(r);
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * hat[j];
            }
        }
        // dx_hat = dy ⊙ g; dx = ir (dx_hat − x_hat · mean(dx_hat ⊙ x_hat))
        let mut s = 0.0;
        for j in 0..d {
            s += dyr[j] * gain[j] * hat[j];
        }
        s /= d as f64;
        let ir = inv_rms[r];
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] += ir * (dyr[j] * gain[j] - hat[j] * s);
        }
    }
}

fn check_finite(m: &Mat, layer: usize, what: &str) -> Result<()> {
    for &v in &m.data {
        if !v.is_finite() {
            return Err(CoarError::numeric(
                format!("non-finite activation in {what}"),
                Some(layer),
            ));
        }
    }
    Ok(())
}

/// Run the model. Injection overwrites rows at the input of the targeted
/// layers; `layer_inputs` are captured before each overwrite.
pub fn forward(
    params: &BackboneParams,
    seq: &TokenSequence,
    plan: &InjectionPlan,
    mask: &AttentionMask,
) -> Result<ForwardRecord> {
    let cfg = &params.config;
    let s = seq.len();
    let d = cfg.dim;
    if s == 0 {
        return Err(CoarError::invalid("empty sequence"));
    }
    if s > cfg.max_seq {
        return Err(CoarError::invalid(format!(
            "sequence length {s} exceeds max {}",
            cfg.max_seq
        )));
    }
    if mask.size != s {
        return Err(CoarError::invalid(format!(
            "mask size {} does not match sequence length {s}",
            mask.size
        )));
    }
    for &id in &seq.ids {
        if id >= cfg.vocab_size {
            return Err(CoarError::invalid(format!(
                "token id {id} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }
    plan.validate(seq, cfg)?;

    // Embedding: token + position, except reserved slots which stay zero.
    let reserved = seq.reserved_positions();
    let mut x = Mat::zeros(s, d);
    for (p, &id) in seq.ids.iter().enumerate() {
        if reserved.contains(&p) {
            continue;
        }
        let row = x.row_mut(p);
        let e = params.embed.row(id);
        let pe = params.pos.row(p);
        for j in 0..d {
            row[j] = e[j] + pe[j];
        }
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let d_ff = cfg.d_ff();

    let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
    let mut caches = Vec::with_capacity(cfg.n_layers);

    // Reused temporaries.
    let mut y1 = Mat::zeros(s, d);
    let mut y2 = Mat::zeros(s, d);
    let mut qh = Mat::zeros(s, dh);
    let mut kh = Mat::zeros(s, dh);
    let mut vh = Mat::zeros(s, dh);
    let mut scores = Mat::zeros(s, s);

    for (li, layer) in params.layers.iter().enumerate() {
        let layer_1b = li + 1;
        layer_inputs.push(x.clone());
        for e in &plan.entries {
            if e.layer == layer_1b {
                x.row_mut(e.position).copy_from_slice(&e.vector);
            }
        }
        let mut x_hat1 = Mat::zeros(s, d);
        let mut inv_rms1 = Vec::with_capacity(s);
        rmsnorm(&x, &layer.g1, &mut x_hat1, &mut inv_rms1, &mut y1);

        let mut q = Mat::zeros(s, d);
        let mut k = Mat::zeros(s, d);
        let mut v = Mat::zeros(s, d);
        mm(&y1, &layer.wq, &mut q);
        mm(&y1, &layer.wk, &mut k);
        mm(&y1, &layer.wv, &mut v);

        let mut ctx = Mat::zeros(s, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            for r in 0..s {
                qh.row_mut(r).copy_from_slice(&q.row(r)[off..off + dh]);
                kh.row_mut(r).copy_from_slice(&k.row(r)[off..off + dh]);
                vh.row_mut(r).copy_from_slice(&v.row(r)[off..off + dh]);
            }
            mm_abt(&qh, &kh, &mut scores);
            for r in 0..s {
                let row = scores.row_mut(r);
                for c in 0..s {
                    if mask.is_allowed(r, c) {
                        row[c] *= scale;
                    } else {
                        row[c] = f64::NEG_INFINITY;
                    }
                }
                math::softmax_in_place(row);
            }
            let p = scores.clone();
            // ctx_h = P · v_h, written into the head's columns.
            let mut ctxh = Mat::zeros(s, dh);
            mm(&p, &vh, &mut ctxh);
            for r in 0..s {
                ctx.row_mut(r)[off..off + dh].copy_from_slice(ctxh.row(r));
            }
            probs.push(p);
        }

        let mut attn_out = Mat::zeros(s, d);
        mm(&ctx, &layer.wo, &mut attn_out);
        let mut x1 = x.clone();
        for (a, b) in x1.data.iter_mut().zip(&attn_out.data) {
            *a += b;
        }

        let mut x_hat2 = Mat::zeros(s, d);
        let mut inv_rms2 = Vec::with_capacity(s);
        rmsnorm(&x1, &layer.g2, &mut x_hat2, &mut inv_rms2, &mut y2);

        let mut u = Mat::zeros(s, d_ff);
        mm(&y2, &layer.w1, &mut u);
        let mut tanh_u = Mat::zeros(s, d_ff);
        let mut act = Mat::zeros(s, d_ff);
        for i in 0..u.data.len() {
            let uu = u.data[i];
            let t = math::tanh(math::GELU_C * (uu + math::GELU_A * uu * uu * uu));
            tanh_u.data[i] = t;
            act.data[i] = 0.5 * uu * (1.0 + t);
        }
        let mut mlp_out = Mat::zeros(s, d);
        mm(&act, &layer.w2, &mut mlp_out);
        let mut x2 = x1.clone();
        for (a, b) in x2.data.iter_mut().zip(&mlp_out.data) {
            *a += b;
        }
        check_finite(&x2, layer_1b, "block output")?;

        caches.push(LayerCache {
            inv_rms1,
            x_hat1,
            q,
            k,
            v,
            probs,
            ctx,
            inv_rms2,
            x_hat2,
            u,
            tanh_u,
            act,
        });
        x = x2;
    }

    let final_input = x;
    let mut final_normed = Mat::zeros(s, d);
    let mut final_hat = Mat::zeros(s, d);
    let mut final_inv_rms = Vec::with_capacity(s);
    rmsnorm(
        &final_input,
        &params.gf,
        &mut final_hat,
        &mut final_inv_rms,
        &mut final_normed,
    );
    // Tied head: logits = normed · embedᵀ.
    let mut logits = Mat::zeros(s, cfg.vocab_size);
    mm_abt(&final_normed, &params.embed, &mut logits);
    check_finite(&logits, cfg.n_layers, "logits")?;

    Ok(ForwardRecord {
        logits,
        layer_inputs,
        final_normed: final_hat,
        seq_len: s,
        caches,
        final_inv_rms,
    })
}

/// Mirror of the parameter tree, for pretraining.
pub struct BackboneGrads {
    pub embed: Mat,
    pub pos: Mat,
    pub layers: Vec<LayerGrads>,
    pub gf: Vec<f64>,
}

pub struct LayerGrads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub w2: Mat,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl BackboneGrads {
    /// Read-only walk in exactly the [`BackboneParams::visit`] order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        f("embed", &self.embed.data);
        f("pos", &self.pos.data);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.wq"), &l.wq.data);
            f(&format!("layer{i}.wk"), &l.wk.data);
            f(&format!("layer{i}.wv"), &l.wv.data);
            f(&format!("layer{i}.wo"), &l.wo.data);
            f(&format!("layer{i}.w1"), &l.w1.data);
            f(&format!("layer{i}.w2"), &l.w2.data);
            f(&format!("layer{i}.g1"), &l.g1);
            f(&format!("layer{i}.g2"), &l.g2);
        }
        f("gf", &self.gf);
    }

    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.dim;
        BackboneGrads {
            embed: Mat::zeros(cfg.vocab_size, d),
            pos: Mat::zeros(cfg.max_seq, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerGrads {
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    w1: Mat::zeros(d, cfg.d_ff()),
                    w2: Mat::zeros(cfg.d_ff(), d),
                    g1: vec![0.0; d],
                    g2: vec![0.0; d],
                })
                .collect(),
            gf: vec![0.0; d],
        }
    }
}

pub struct BackwardOutput {
    /// d(loss)/d(injected vector), aligned with `plan.entries`.
    pub plan_grads: Vec<Vec<f64>>,
    /// Present when parameter gradients were requested.
    pub params: Option<BackboneGrads>,
}

/// Backpropagate `dlogits` through a recorded forward. Gradient into an
/// overwritten row is reported for its plan entry and cut before flowing to
/// the layer below.
pub fn backward(
    params: &BackboneParams,
    seq: &TokenSequence,
    plan: &InjectionPlan,
    record: &ForwardRecord,
    dlogits: &Mat,
    want_param_grads: bool,
) -> BackwardOutput {
    let cfg = &params.config;
    let s = record.seq_len;
    let d = cfg.dim;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let d_ff = cfg.d_ff();
    assert_eq!(dlogits.rows, s);
    assert_eq!(dlogits.cols, cfg.vocab_size);

    let mut grads = want_param_grads.then(|| BackboneGrads::zeros(cfg));
    let mut plan_grads: Vec<Vec<f64>> = plan.entries.iter().map(|_| vec![0.0; d]).collect();

    // Head (tied weights): logits = ŷ Eᵀ with ŷ the gained final norm.
    let mut dfinal_normed = Mat::zeros(s, d);
    mm(dlogits, &params.embed, &mut dfinal_normed);
    if let Some(g) = grads.as_mut() {
        // Recompute the gained final norm output for the weight gradient.
        let mut yf = Mat::zeros(s, d);
        for r in 0..s {
            let hat = record.final_normed.row(r);
            let yr = yf.row_mut(r);
            for j in 0..d {
                yr[j] = hat[j] * params.gf[j];
            }
        }
        mm_atb_acc(dlogits, &yf, &mut g.embed);
    }

    let mut dx = Mat::zeros(s, d);
    rmsnorm_backward(
        &dfinal_normed,
        &record.final_normed,
        &record.final_inv_rms,
        &params.gf,
        &mut dx,
        grads.as_mut().map(|g| &mut g.gf),
    );

    // Temporaries reused across layers.
    let mut dqh = Mat::zeros(s, dh);
    let mut dkh = Mat::zeros(s, dh);
    let mut dvh = Mat::zeros(s, dh);
    let mut dscores = Mat::zeros(s, s);
    let mut dp = Mat::zeros(s, s);
    let mut qh = Mat::zeros(s, dh);
    let mut kh = Mat::zeros(s, dh);
    let mut vh = Mat::zeros(s, dh);
    let mut ctxh = Mat::zeros(s, dh);

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let cache = &record.caches[li];
        let layer_1b = li + 1;

        // MLP half: x2 = x1 + gelu(ŷ2 W1) W2, dx currently = dx2.
        let mut da = Mat::zeros(s, d_ff);
        mm_abt(&dx, &layer.w2, &mut da);
        if let Some(g) = grads.as_mut() {
            mm_atb_acc(&cache.act, &dx, &mut g.layers[li].w2);
        }
        let mut du = da; // reuse buffer
        for i in 0..du.data.len() {
            du.data[i] *= math::gelu_deriv(cache.u.data[i], cache.tanh_u.data[i]);
        }
        let mut dy2 = Mat::zeros(s, d);
        mm_abt(&du, &layer.w1, &mut dy2);
        if let Some(g) = grads.as_mut() {
            let mut y2 = Mat::zeros(s, d);
            for r in 0..s {
                let hat = cache.x_hat2.row(r);
                let yr = y2.row_mut(r);
                for j in 0..d {
                    yr[j] = hat[j] * layer.g2[j];
                }
            }
            mm_atb_acc(&y2, &du, &mut g.layers[li].w1);
        }
        // dx1 = dx2 (residual) + norm backward of dy2.
        rmsnorm_backward(
            &dy2,
            &cache.x_hat2,
            &cache.inv_rms2,
            &layer.g2,
            &mut dx,
            grads.as_mut().map(|g| &mut g.layers[li].g2),
        );

        // Attention half: x1 = x0 + (heads(ŷ1) concat) Wo.
        let dattn_out = dx.clone();
        let mut dctx = Mat::zeros(s, d);
        mm_abt(&dattn_out, &layer.wo, &mut dctx);
        if let Some(g) = grads.as_mut() {
            mm_atb_acc(&cache.ctx, &dattn_out, &mut g.layers[li].wo);
        }

        let mut dq = Mat::zeros(s, d);
        let mut dk = Mat::zeros(s, d);
        let mut dv = Mat::zeros(s, d);
        for h in 0..n_heads {
            let off = h * dh;
            for r in 0..s {
                qh.row_mut(r).copy_from_slice(&cache.q.row(r)[off..off + dh]);
                kh.row_mut(r).copy_from_slice(&cache.k.row(r)[off..off + dh]);
                vh.row_mut(r).copy_from_slice(&cache.v.row(r)[off..off + dh]);
                ctxh.row_mut(r).copy_from_slice(&dctx.row(r)[off..off + dh]);
            }
            let p = &cache.probs[h];
            // dP = dctx_h v_hᵀ ; dv_h = Pᵀ dctx_h
            mm_abt(&ctxh, &vh, &mut dp);
            dvh.fill(0.0);
            mm_atb_acc(p, &ctxh, &mut dvh);
            // Softmax rows: ds = p ⊙ (dp − Σ dp p). Masked cells have p=0.
            for r in 0..s {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let inner = math::dot(pr, dpr);
                let dsr = dscores.row_mut(r);
                for c in 0..s {
                    dsr[c] = pr[c] * (dpr[c] - inner);
                }
            }
            // scores = scale q_h k_hᵀ
            mm(&dscores, &kh, &mut dqh);
            dkh.fill(0.0);
            mm_atb_acc(&dscores, &qh, &mut dkh);
            for r in 0..s {
                let dqr = &mut dq.row_mut(r)[off..off + dh];
                for (a, b) in dqr.iter_mut().zip(dqh.row(r)) {
                    *a = b * scale;
                }
                let dkr = &mut dk.row_mut(r)[off..off + dh];
                for (a, b) in dkr.iter_mut().zip(dkh.row(r)) {
                    *a = b * scale;
                }
                dv.row_mut(r)[off..off + dh].copy_from_slice(dvh.row(r));
            }
        }

        let mut dy1 = Mat::zeros(s, d);
        mm_abt(&dq, &layer.wq, &mut dy1);
        mm_abt_acc(&dk, &layer.wk, &mut dy1);
        mm_abt_acc(&dv, &layer.wv, &mut dy1);
        if let Some(g) = grads.as_mut() {
            let mut y1 = Mat::zeros(s, d);
            for r in 0..s {
                let hat = cache.x_hat1.row(r);
                let yr = y1.row_mut(r);
                for j in 0..d {
                    yr[j] = hat[j] * layer.g1[j];
                }
            }
            mm_atb_acc(&y1, &dq, &mut g.layers[li].wq);
            mm_atb_acc(&y1, &dk, &mut g.layers[li].wk);
            mm_atb_acc(&y1, &dv, &mut g.layers[li].wv);
        }
        // dx0 = dx1 (residual) + norm backward.
        rmsnorm_backward(
            &dy1,
            &cache.x_hat1,
            &cache.inv_rms1,
            &layer.g1,
            &mut dx,
            grads.as_mut().map(|g| &mut g.layers[li].g1),
        );

        // Injection cut: the overwrite severed dependence on the row below.
        for (ei, e) in plan.entries.iter().enumerate() {
            if e.layer == layer_1b {
                plan_grads[ei].copy_from_slice(dx.row(e.position));
                dx.row_mut(e.position).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    // Embedding lookup. Reserved rows are constants (zero), their gradient
    // goes nowhere.
    if let Some(g) = grads.as_mut() {
        let reserved = seq.reserved_positions();
        for (p, &id) in seq.ids.iter().enumerate() {
            if reserved.contains(&p) {
                continue;
            }
            let src = dx.row(p);
            let er = g.embed.row_mut(id);
            for j in 0..d {
                er[j] += src[j];
            }
            let pr = g.pos.row_mut(p);
            for j in 0..d {
                pr[j] += src[j];
            }
        }
    }

    BackwardOutput {
        plan_grads,
        params: grads,
    }
}

/// Frozen-model anchor: mean layer-input activation over all image-token
/// positions of every reference, layers 1..=n, no injection.
pub fn capture_subject_stats(
    params: &BackboneParams,
    vocab: &Vocabulary,
    subject: &SubjectSet,
    cb: &Codebook,
    n: usize,
) -> Result<Mat> {
    if subject.references.is_empty() {
        return Err(CoarError::invalid("subject has no references"));
    }
    let prompt =
        crate::sequences::tokenize_prompt(vocab, "a photo of [V] [Class]", subject.class_name)?;
    let refs: Vec<&crate::toyworld::PixelGrid> = subject.references.iter().collect();
    capture_image_stats(params, vocab, &prompt.tokens, &refs, cb, n)
}

/// The single-reference analog for styles, captured under the style prompt.
pub fn capture_style_stats(
    params: &BackboneParams,
    vocab: &Vocabulary,
    style: &crate::toyworld::StyleSet,
    cb: &Codebook,
    n: usize,
) -> Result<Mat> {
    let class = vocab
        .word_id(crate::toyworld::CLASS_WORDS[style.content_class])
        .ok_or_else(|| CoarError::invalid("style content class outside vocabulary"))?;
    let prompt = crate::sequences::tokenize_prompt(
        vocab,
        "a photo of a [Class] in [S] style",
        class,
    )?;
    capture_image_stats(params, vocab, &prompt.tokens, &[&style.reference], cb, n)
}

fn capture_image_stats(
    params: &BackboneParams,
    vocab: &Vocabulary,
    prompt_tokens: &[crate::sequences::TokenId],
    references: &[&crate::toyworld::PixelGrid],
    cb: &Codebook,
    n: usize,
) -> Result<Mat> {
    if n == 0 || n > params.config.n_layers {
        return Err(CoarError::invalid(format!(
            "capture depth {n} outside 1..={}",
            params.config.n_layers
        )));
    }
    let mut acc = Mat::zeros(n, params.config.dim);
    let mut count = 0usize;
    for reference in references {
        let codes = quantize(reference, cb)?;
        let image: Vec<usize> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        let seq = crate::sequences::assemble(vocab, prompt_tokens, &image, 0)?;
        let mask = AttentionMask::causal(seq.len());
        let record = forward(params, &seq, &InjectionPlan::empty(), &mask)?;
        for layer in 0..n {
            let li = &record.layer_inputs[layer];
            for p in seq.image_span.0..seq.image_span.1 {
                let row = li.row(p);
                let ar = acc.row_mut(layer);
                for j in 0..row.len() {
                    ar[j] += row[j];
                }
            }
        }
        count += seq.image_span.1 - seq.image_span.0;
    }
    let inv = 1.0 / count as f64;
    for v in &mut acc.data {
        *v *= inv;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::{assemble, tokenize_prompt};
    use crate::toyworld::{build_codebook, make_subject};

    /// A sequence over raw ids with no reserved slots, for harness tests.
    fn bare_seq(ids: Vec<usize>) -> TokenSequence {
        let n = ids.len();
        TokenSequence {
            ids,
            text_span: (0, 0),
            image_span: (0, n),
            v_positions: vec![],
            s_positions: vec![],
            ctx_img_positions: vec![],
            labels_mask: vec![true; n],
        }
    }

    /// Like `bare_seq` but with chosen reserved positions.
    fn seq_with_reserved(ids: Vec<usize>, reserved: Vec<usize>) -> TokenSequence {
        let n = ids.len();
        let mut s = bare_seq(ids);
        s.ctx_img_positions = reserved;
        s.labels_mask = vec![true; n];
        s
    }

    #[test]
    fn straight_line_oracle_matches_forward() {
        // D=4, two heads, one layer, |V|=6, S=3: every step re-done with
        // plain scalar loops below.
        let cfg = BackboneConfig {
            dim: 4,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 6,
            max_seq: 3,
        };
        let params = BackboneParams::random(&cfg, 11).unwrap();
        let seq = bare_seq(vec![2, 0, 5]);
        let mask = AttentionMask::causal(3);
        let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();

        let d = 4usize;
        let dh = 2usize;
        let s = 3usize;
        // Embedding + positions.
        let mut x = [[0.0f64; 4]; 3];
        for p in 0..s {
            for j in 0..d {
                x[p][j] = params.embed.get(seq.ids[p], j) + params.pos.get(p, j);
            }
        }
        let rms_norm = |row: &[f64; 4], gain: &[f64]| -> [f64; 4] {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let ir = 1.0 / (ms + RMS_EPS).sqrt();
            let mut out = [0.0; 4];
            for j in 0..d {
                out[j] = row[j] * ir * gain[j];
            }
            out
        };
        let l = &params.layers[0];
        let matvec = |w: &Mat, v: &[f64; 4]| -> [f64; 4] {
            let mut out = [0.0; 4];
            for o in 0..d {
                for i in 0..d {
                    out[o] += v[i] * w.get(i, o);
                }
            }
            out
        };
        let mut q = [[0.0; 4]; 3];
        let mut k = [[0.0; 4]; 3];
        let mut v = [[0.0; 4]; 3];
        let mut y1 = [[0.0; 4]; 3];
        for p in 0..s {
            y1[p] = rms_norm(&x[p], &l.g1);
            q[p] = matvec(&l.wq, &y1[p]);
            k[p] = matvec(&l.wk, &y1[p]);
            v[p] = matvec(&l.wv, &y1[p]);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = [[0.0; 4]; 3];
        for h in 0..2 {
            let off = h * dh;
            for r in 0..s {
                let mut scores = [f64::NEG_INFINITY; 3];
                for c in 0..=r {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += q[r][off + j] * k[c][off + j];
                    }
                    scores[c] = dot * scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs = [0.0; 3];
                let mut z = 0.0;
                for c in 0..s {
                    if scores[c] > f64::NEG_INFINITY {
                        probs[c] = (scores[c] - m).exp();
                        z += probs[c];
                    }
                }
                for c in 0..s {
                    probs[c] /= z;
                    assert!(
                        (rec.attention_prob(0, h, r, c) - probs[c]).abs() < 1e-12,
                        "prob mismatch at h={h} r={r} c={c}"
                    );
                }
                for j in 0..dh {
                    let mut acc = 0.0;
                    for c in 0..s {
                        acc += probs[c] * v[c][off + j];
                    }
                    ctx[r][off + j] = acc;
                }
            }
        }
        let mut x1 = [[0.0; 4]; 3];
        for p in 0..s {
            let ao = matvec(&l.wo, &ctx[p]);
            for j in 0..d {
                x1[p][j] = x[p][j] + ao[j];
            }
        }
        let mut x2 = [[0.0; 4]; 3];
        for p in 0..s {
            let y2 = rms_norm(&x1[p], &l.g2);
            let mut u = [0.0f64; 16];
            for o in 0..16 {
                for i in 0..d {
                    u[o] += y2[i] * l.w1.get(i, o);
                }
            }
            let mut m = [0.0f64; 4];
            for o in 0..d {
                for i in 0..16 {
                    let t = (math::GELU_C * (u[i] + math::GELU_A * u[i].powi(3))).tanh();
                    m[o] += 0.5 * u[i] * (1.0 + t) * l.w2.get(i, o);
                }
            }
            for j in 0..d {
                x2[p][j] = x1[p][j] + m[j];
            }
        }
        for p in 0..s {
            let yf = rms_norm(&x2[p], &params.gf);
            for t in 0..cfg.vocab_size {
                let mut logit = 0.0;
                for j in 0..d {
                    logit += yf[j] * params.embed.get(t, j);
                }
                assert!(
                    (logit - rec.logits.get(p, t)).abs() < 1e-12,
                    "logit mismatch at p={p} t={t}"
                );
            }
        }
    }

    #[test]
    fn zero_overwrite_at_reserved_slot_is_a_no_op() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 3).unwrap();
        let seq = seq_with_reserved(vec![1, 3, 5, 7, 2], vec![2]);
        let mask = AttentionMask::causal(seq.len());
        let plain = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        let plan = InjectionPlan {
            entries: vec![PlanEntry {
                layer: 1,
                position: 2,
                vector: vec![0.0; cfg.dim],
            }],
            sources: vec![],
        };
        let injected = forward(&params, &seq, &plan, &mask).unwrap();
        for (a, b) in plain.logits.data.iter().zip(&injected.logits.data) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn injection_changes_rows_and_layer_inputs_stay_frozen() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 4).unwrap();
        let seq = seq_with_reserved(vec![1, 3, 5, 7, 2, 9], vec![1, 4]);
        let mask = AttentionMask::causal(seq.len());
        let plain = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        let plan = InjectionPlan {
            entries: vec![
                PlanEntry {
                    layer: 1,
                    position: 1,
                    vector: vec![0.3; cfg.dim],
                },
                PlanEntry {
                    layer: 2,
                    position: 1,
                    vector: vec![-0.2; cfg.dim],
                },
            ],
            sources: vec![],
        };
        let injected = forward(&params, &seq, &plan, &mask).unwrap();
        assert_ne!(plain.logits.data, injected.logits.data);
        // Captured layer inputs at layer 1 are pre-injection at that layer,
        // so they agree with the plain run; deeper captures differ because
        // layer 1's overwrite has propagated.
        assert_eq!(plain.layer_inputs[0].data, injected.layer_inputs[0].data);
        assert_ne!(plain.layer_inputs[1].data, injected.layer_inputs[1].data);
    }

    #[test]
    fn removing_a_deep_entry_leaves_shallow_layer_inputs_alone() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 5).unwrap();
        let seq = seq_with_reserved(vec![0, 2, 4, 6, 8], vec![3]);
        let mask = AttentionMask::causal(seq.len());
        let full = InjectionPlan {
            entries: vec![
                PlanEntry {
                    layer: 1,
                    position: 3,
                    vector: vec![0.5; cfg.dim],
                },
                PlanEntry {
                    layer: 2,
                    position: 3,
                    vector: vec![0.7; cfg.dim],
                },
            ],
            sources: vec![],
        };
        let shallow = InjectionPlan {
            entries: full.entries[..1].to_vec(),
            sources: vec![],
        };
        let a = forward(&params, &seq, &full, &mask).unwrap();
        let b = forward(&params, &seq, &shallow, &mask).unwrap();
        // Dropping the layer-2 entry cannot change anything captured at or
        // before layer 2's input.
        assert_eq!(a.layer_inputs[0].data, b.layer_inputs[0].data);
        assert_eq!(a.layer_inputs[1].data, b.layer_inputs[1].data);
        assert_ne!(a.logits.data, b.logits.data);
    }

    #[test]
    fn causality_holds_under_random_perturbation() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 6).unwrap();
        let mut rng = Rng::from_u64(77);
        for _ in 0..8 {
            let n = 6;
            let ids: Vec<usize> = (0..n).map(|_| rng.below(cfg.vocab_size)).collect();
            let seq = bare_seq(ids.clone());
            let mask = AttentionMask::causal(n);
            let base = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
            let j = 1 + rng.below(n - 1);
            let mut altered = ids;
            altered[j] = (altered[j] + 1 + rng.below(cfg.vocab_size - 1)) % cfg.vocab_size;
            let seq2 = bare_seq(altered);
            let pert = forward(&params, &seq2, &InjectionPlan::empty(), &mask).unwrap();
            for p in 0..j {
                for t in 0..cfg.vocab_size {
                    assert_eq!(
                        base.logits.get(p, t),
                        pert.logits.get(p, t),
                        "position {p} changed after perturbing {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_never_mutates_the_parameters() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 7).unwrap();
        let before = params.content_hash();
        let seq = seq_with_reserved(vec![1, 2, 3, 4], vec![1]);
        let plan = InjectionPlan {
            entries: vec![PlanEntry {
                layer: 1,
                position: 1,
                vector: vec![0.9; cfg.dim],
            }],
            sources: vec![],
        };
        let mask = AttentionMask::causal(4);
        forward(&params, &seq, &plan, &mask).unwrap();
        assert_eq!(params.content_hash(), before);
    }

    #[test]
    fn softmaxed_logits_normalize_at_every_position() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 8).unwrap();
        let seq = bare_seq(vec![5, 1, 9, 30, 22, 17, 2]);
        let mask = AttentionMask::causal(seq.len());
        let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        for p in 0..seq.len() {
            let mut row: Vec<f64> = rec.logits.row(p).to_vec();
            math::softmax_in_place(&mut row);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "position {p}: {sum}");
        }
    }

    #[test]
    fn plan_validation_rejects_bad_entries() {
        let cfg = BackboneConfig::small();
        let seq = seq_with_reserved(vec![1, 2, 3, 4, 5], vec![2]);
        let entry = |layer: usize, position: usize, dim: usize| PlanEntry {
            layer,
            position,
            vector: vec![0.0; dim],
        };
        let cases = vec![
            // out of range position
            vec![entry(1, 9, cfg.dim)],
            // not a reserved slot
            vec![entry(1, 0, cfg.dim)],
            // layer out of range
            vec![entry(3, 2, cfg.dim)],
            vec![entry(0, 2, cfg.dim)],
            // wrong width
            vec![entry(1, 2, cfg.dim + 1)],
            // duplicate
            vec![entry(1, 2, cfg.dim), entry(1, 2, cfg.dim)],
            // gap: layer 2 without layer 1
            vec![entry(2, 2, cfg.dim)],
        ];
        for entries in cases {
            let plan = InjectionPlan {
                entries,
                sources: vec![],
            };
            assert!(plan.validate(&seq, &cfg).is_err());
        }
    }

    #[test]
    fn overflowing_activations_report_the_layer() {
        let cfg = BackboneConfig::small();
        let mut params = BackboneParams::random(&cfg, 9).unwrap();
        // A poisoned projection entry propagates into the first block
        // output; the error must name the layer it surfaced in.
        params.layers[0].wq.set(0, 0, f64::NAN);
        let seq = bare_seq(vec![3, 3, 3]);
        let mask = AttentionMask::causal(3);
        match forward(&params, &seq, &InjectionPlan::empty(), &mask) {
            Err(CoarError::NumericFailure { layer, .. }) => assert!(layer.is_some()),
            Err(other) => panic!("expected numeric failure, got {other:?}"),
            Ok(_) => panic!("expected numeric failure, got a successful forward"),
        }
    }

    #[test]
    fn identity_mask_flips_exactly_the_causal_cross_pairs() {
        let vocab = Vocabulary::standard();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class] in [S] style", class).unwrap();
        let image: Vec<usize> = (0..64).map(|i| vocab.image_id(i % 64)).collect();
        let seq = assemble(&vocab, &p.tokens, &image, 2).unwrap();
        let causal = AttentionMask::causal(seq.len());
        let masked = build_identity_mask(&seq).unwrap();
        assert_eq!(masked.kind, MaskKind::CausalIdentity);

        let subject = [seq.v_positions[0], seq.ctx_img_positions[0]];
        let style = [seq.s_positions[0], seq.ctx_img_positions[1]];
        let mut expected_flips = 0;
        for &a in &subject {
            for &b in &style {
                if causal.is_allowed(a, b) {
                    expected_flips += 1;
                }
                if causal.is_allowed(b, a) {
                    expected_flips += 1;
                }
            }
        }
        let actual_flips = causal.allowed_count() - masked.allowed_count();
        assert_eq!(actual_flips, expected_flips);
        // Image tokens still see all four context positions.
        for p in seq.image_span.0..seq.image_span.1 {
            for &c in subject.iter().chain(style.iter()) {
                assert!(masked.is_allowed(p, c));
            }
        }
        // And the cross pairs are blocked in both directions.
        for &a in &subject {
            for &b in &style {
                assert!(!masked.is_allowed(a, b));
                assert!(!masked.is_allowed(b, a));
            }
        }
    }

    #[test]
    fn identity_mask_flip_count_on_the_hand_example() {
        // Subject positions {4,10}, style {7,11}: causal cross pairs are
        // (10,7), (7,4), (11,4), (11,10) — four flips.
        let mut seq = bare_seq((0..13).map(|i| i % 5).collect());
        seq.v_positions = vec![4];
        seq.s_positions = vec![7];
        seq.ctx_img_positions = vec![10, 11];
        let causal = AttentionMask::causal(13);
        let masked = build_identity_mask(&seq).unwrap();
        assert_eq!(causal.allowed_count() - masked.allowed_count(), 4);
    }

    #[test]
    fn identity_mask_requires_both_groups() {
        let vocab = Vocabulary::standard();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class]", class).unwrap();
        let image: Vec<usize> = (0..64).map(|i| vocab.image_id(i % 64)).collect();
        let seq = assemble(&vocab, &p.tokens, &image, 1).unwrap();
        assert!(build_identity_mask(&seq).is_err());
    }

    #[test]
    fn masked_attention_probability_is_exactly_zero() {
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 10).unwrap();
        let vocab = Vocabulary::standard();
        let class = vocab.word_id("tee").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class] in [S] style", class).unwrap();
        let image: Vec<usize> = (0..64).map(|i| vocab.image_id((i * 7) % 64)).collect();
        let seq = assemble(&vocab, &p.tokens, &image, 2).unwrap();
        let mask = build_identity_mask(&seq).unwrap();
        let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        let (vp, sp) = (seq.v_positions[0], seq.s_positions[0]);
        let (c0, c1) = (seq.ctx_img_positions[0], seq.ctx_img_positions[1]);
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_heads {
                for &(r, c) in &[(sp, vp), (c0, sp), (c1, vp), (c1, c0)] {
                    if r > c {
                        assert_eq!(rec.attention_prob(layer, head, r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn capture_matches_two_loop_oracle() {
        let cb = build_codebook(64, 12, 7).unwrap();
        let subject = make_subject(5, &cb);
        let vocab = Vocabulary::standard();
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 21).unwrap();
        let n = 3;
        let got = capture_subject_stats(&params, &vocab, &subject, &cb, n).unwrap();

        // Oracle: accumulate every activation, then divide once.
        let prompt =
            tokenize_prompt(&vocab, "a photo of [V] [Class]", subject.class_name).unwrap();
        let mut acc = vec![vec![0.0f64; cfg.dim]; n];
        let mut count = 0usize;
        for r in &subject.references {
            let codes = quantize(r, &cb).unwrap();
            let image: Vec<usize> = codes.iter().map(|&c| vocab.image_id(c)).collect();
            let seq = assemble(&vocab, &prompt.tokens, &image, 0).unwrap();
            let mask = AttentionMask::causal(seq.len());
            let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
            for layer in 0..n {
                for p in seq.image_span.0..seq.image_span.1 {
                    for j in 0..cfg.dim {
                        acc[layer][j] += rec.layer_inputs[layer].get(p, j);
                    }
                }
            }
            count += 64;
        }
        for layer in 0..n {
            for j in 0..cfg.dim {
                let want = acc[layer][j] / count as f64;
                assert!(
                    (got.get(layer, j) - want).abs() < 1e-12,
                    "layer {layer} dim {j}"
                );
            }
        }
    }

    #[test]
    fn capture_of_a_single_activation_is_that_activation() {
        // One reference, one image token: the mean is the activation itself.
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 22).unwrap();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 3).unwrap();
        let mut subject = make_subject(1, &cb);
        // Shrink to a single 1x1 reference.
        let patch = cb.centroid(17).to_vec();
        subject.references = vec![crate::toyworld::PixelGrid {
            width: 1,
            height: 1,
            patches: patch,
        }];
        let got = capture_subject_stats(&params, &vocab, &subject, &cb, 2).unwrap();

        let prompt =
            tokenize_prompt(&vocab, "a photo of [V] [Class]", subject.class_name).unwrap();
        let seq = assemble(&vocab, &prompt.tokens, &[vocab.image_id(17)], 0).unwrap();
        let mask = AttentionMask::causal(seq.len());
        let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        let p = seq.image_span.0;
        for layer in 0..2 {
            for j in 0..cfg.dim {
                assert_eq!(got.get(layer, j), rec.layer_inputs[layer].get(p, j));
            }
        }
    }

    #[test]
    fn capture_over_duplicate_references_equals_single_capture() {
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 23).unwrap();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 3).unwrap();
        let mut subject = make_subject(2, &cb);
        subject.references.truncate(1);
        let single = capture_subject_stats(&params, &vocab, &subject, &cb, 4).unwrap();
        subject.references = vec![
            subject.references[0].clone(),
            subject.references[0].clone(),
        ];
        let doubled = capture_subject_stats(&params, &vocab, &subject, &cb, 4).unwrap();
        for (a, b) in single.data.iter().zip(&doubled.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn style_capture_means_over_the_single_reference() {
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 24).unwrap();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 3).unwrap();
        let style = crate::toyworld::make_style(11, &cb);
        let n = 3;
        let got = capture_style_stats(&params, &vocab, &style, &cb, n).unwrap();

        let class = vocab
            .word_id(crate::toyworld::CLASS_WORDS[style.content_class])
            .unwrap();
        let prompt =
            tokenize_prompt(&vocab, "a photo of a [Class] in [S] style", class).unwrap();
        let codes = quantize(&style.reference, &cb).unwrap();
        let image: Vec<usize> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        let seq = assemble(&vocab, &prompt.tokens, &image, 0).unwrap();
        let mask = AttentionMask::causal(seq.len());
        let rec = forward(&params, &seq, &InjectionPlan::empty(), &mask).unwrap();
        let span = seq.image_span.1 - seq.image_span.0;
        for layer in 0..n {
            for j in 0..cfg.dim {
                let mut want = 0.0;
                for p in seq.image_span.0..seq.image_span.1 {
                    want += rec.layer_inputs[layer].get(p, j);
                }
                want /= span as f64;
                assert!((got.get(layer, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        // Loss linear in the logits so central differences are essentially
        // exact; touches every parameter family.
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 31).unwrap();
        let seq = seq_with_reserved(vec![1, 5, 9, 13, 2, 7], vec![2]);
        let plan = InjectionPlan {
            entries: vec![
                PlanEntry {
                    layer: 1,
                    position: 2,
                    vector: vec![0.11; cfg.dim],
                },
                PlanEntry {
                    layer: 2,
                    position: 2,
                    vector: vec![-0.07; cfg.dim],
                },
            ],
            sources: vec![],
        };
        let mask = AttentionMask::causal(seq.len());
        let mut crng = Rng::from_u64(55);
        let coeffs = Mat::from_vec(
            seq.len(),
            cfg.vocab_size,
            (0..seq.len() * cfg.vocab_size)
                .map(|_| crng.gaussian())
                .collect(),
        );
        let loss = |p: &BackboneParams, plan: &InjectionPlan| -> f64 {
            let rec = forward(p, &seq, plan, &mask).unwrap();
            rec.logits.frob_dot(&coeffs)
        };
        let rec = forward(&params, &seq, &plan, &mask).unwrap();
        let out = backward(&params, &seq, &plan, &rec, &coeffs, true);
        let g = out.params.as_ref().unwrap();

        let h = 1e-5;
        let check = |name: &str, analytic: f64, poke: &dyn Fn(&mut BackboneParams, f64)| {
            let mut pp = params.clone();
            poke(&mut pp, h);
            let up = loss(&pp, &plan);
            let mut pm = params.clone();
            poke(&mut pm, -h);
            let down = loss(&pm, &plan);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-5,
                "{name}: fd {fd} vs analytic {analytic}"
            );
        };
        check("embed[5][3]", g.embed.get(5, 3), &|p, e| {
            let v = p.embed.get(5, 3);
            p.embed.set(5, 3, v + e);
        });
        check("pos[1][2]", g.pos.get(1, 2), &|p, e| {
            let v = p.pos.get(1, 2);
            p.pos.set(1, 2, v + e);
        });
        check("wq0[0][4]", g.layers[0].wq.get(0, 4), &|p, e| {
            let v = p.layers[0].wq.get(0, 4);
            p.layers[0].wq.set(0, 4, v + e);
        });
        check("wo1[3][3]", g.layers[1].wo.get(3, 3), &|p, e| {
            let v = p.layers[1].wo.get(3, 3);
            p.layers[1].wo.set(3, 3, v + e);
        });
        check("w1_0[2][9]", g.layers[0].w1.get(2, 9), &|p, e| {
            let v = p.layers[0].w1.get(2, 9);
            p.layers[0].w1.set(2, 9, v + e);
        });
        check("w2_1[11][0]", g.layers[1].w2.get(11, 0), &|p, e| {
            let v = p.layers[1].w2.get(11, 0);
            p.layers[1].w2.set(11, 0, v + e);
        });
        check("g1_0[6]", g.layers[0].g1[6], &|p, e| {
            p.layers[0].g1[6] += e;
        });
        check("g2_1[0]", g.layers[1].g2[0], &|p, e| {
            p.layers[1].g2[0] += e;
        });
        check("gf[1]", g.gf[1], &|p, e| {
            p.gf[1] += e;
        });

        // Injected-vector gradients through the same linear loss.
        for (ei, e) in plan.entries.iter().enumerate() {
            for j in [0usize, cfg.dim - 1] {
                let mut plus = plan.clone();
                plus.entries[ei].vector[j] += h;
                let mut minus = plan.clone();
                minus.entries[ei].vector[j] -= h;
                let fd = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h);
                let analytic = out.plan_grads[ei][j];
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom < 1e-5,
                    "plan entry {ei} (layer {}) dim {j}: fd {fd} vs {analytic}",
                    e.layer
                );
            }
        }
    }

    #[test]
    fn gradient_is_cut_below_an_overwritten_row() {
        // With entries at layers 1 and 2 on the same position, the layer-1
        // entry's gradient must be unaffected by what the layer-2 overwrite
        // replaced, and the embedding under the reserved slot gets nothing.
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 41).unwrap();
        let seq = seq_with_reserved(vec![1, 5, 9, 13], vec![1]);
        let mask = AttentionMask::causal(seq.len());
        let plan = InjectionPlan {
            entries: vec![
                PlanEntry {
                    layer: 1,
                    position: 1,
                    vector: vec![0.2; cfg.dim],
                },
                PlanEntry {
                    layer: 2,
                    position: 1,
                    vector: vec![0.4; cfg.dim],
                },
            ],
            sources: vec![],
        };
        let rec = forward(&params, &seq, &plan, &mask).unwrap();
        let dlogits = Mat::from_vec(
            seq.len(),
            cfg.vocab_size,
            (0..seq.len() * cfg.vocab_size).map(|i| (i % 7) as f64 * 0.1).collect(),
        );
        let out = backward(&params, &seq, &plan, &rec, &dlogits, true);
        // The layer-2 overwrite cut the path: row 1's gradient at the layer-2
        // input goes entirely to that plan entry, and what reaches the
        // layer-1 entry flows only through OTHER rows (attention).
        assert!(out.plan_grads[1].iter().any(|&v| v != 0.0));
        // Perturbing the layer-1 vector still changes the loss only via rows
        // other than the overwritten one; the finite-difference agreement is
        // covered above. Here: the reserved position's token embedding got no
        // gradient (its input row is a constant).
        let g = out.params.unwrap();
        // The reserved position's input row is a constant, so the lookup
        // path contributes nothing: its position embedding gets no gradient
        // (embed rows still do, via the tied head).
        assert!(g.pos.row(1).iter().all(|&v| v == 0.0));
        assert!(g.pos.row(0).iter().any(|&v| v != 0.0));
    }
}
