//! Optimization loops: context banks against a frozen backbone, and the
//! one loop that is allowed to touch the backbone itself.
//!
//! Bank training owns exactly the 2*N*D scalars of one bank. The backbone
//! is taken by shared reference, so freezing is structural, not a promise;
//! a hash check at the end documents it anyway.
//!
//! Every run is a pure function of (seed, config, world): data order is
//! round robin, class priors are sampled once up front, and the optimizer
//! carries no hidden state across calls.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{
    backward, capture_style_stats, capture_subject_stats, forward, AttentionMask,
    BackboneConfig, BackboneGrads, BackboneParams, InjectionPlan,
};
use crate::context::{
    capture_class_hidden, capture_word_hidden, new_bank, BankKind, ContextBank, InitPolicy,
};
use crate::error::{CoarError, Result};
use crate::losses::{
    ntp_loss, prepare_class_refs, total_objective, total_objective_cached, ClassRef,
    LossConfig, LossReport,
};
use crate::mat::Mat;
use crate::math;
use crate::rng::Rng;
use crate::sampler::{generate, DecodeConfig};
use crate::sequences::{assemble, tokenize_prompt, TokenId, TokenSequence, Vocabulary};
use crate::toyworld::{
    class_spec, codes_to_grid, quantize, render_codes, Codebook, PixelGrid, StyleSet,
    SubjectSet, CLASS_WORDS, IMAGE_TOKENS, N_CLASSES,
};

/// The prompt every subject trains and decodes under.
pub const SUBJECT_TEMPLATE: &str = "a photo of [V] [Class]";
/// The prompt style banks train under.
pub const STYLE_TEMPLATE: &str = "a photo of a [Class] in [S] style";
/// The prompt class priors are sampled from.
pub const PRIOR_TEMPLATE: &str = "a photo of a [Class]";
/// Class prompts held out from prior generation, for drift measurement.
pub const HELD_OUT_TEMPLATES: [&str; 2] = ["a picture of a [Class]", "a [Class] in fog"];

/// Adaptive-moment settings. No weight decay anywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoarError::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(CoarError::invalid("eps must be positive and finite"));
        }
        Ok(())
    }
}

/// Bank-training settings. `steps == 0` is accepted and returns the bank
/// exactly as initialized, which smoke tests and the initialization
/// identity check rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Subject sequences per step. The objective aggregates the full class
    /// batch separately, so this stays at 1.
    pub batch_size: usize,
    /// How many leading layers receive context rows.
    pub n_layers: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Class priors sampled for the preservation term; 6 to 8.
    pub n_class_images: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn subject() -> Self {
        TrainConfig {
            lr: 1e-2,
            steps: 1000,
            batch_size: 1,
            n_layers: 9,
            loss: LossConfig::default(),
            seed: 0,
            n_class_images: 8,
            adam: AdamConfig::default(),
        }
    }

    pub fn style() -> Self {
        TrainConfig {
            steps: 600,
            n_layers: 3,
            loss: LossConfig { alpha: 0.0, ..LossConfig::default() },
            ..TrainConfig::subject()
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoarError::invalid("lr must be positive and finite"));
        }
        if self.batch_size != 1 {
            return Err(CoarError::invalid("bank training uses batch size 1"));
        }
        if self.n_layers == 0 || self.n_layers > backbone.n_layers {
            return Err(CoarError::invalid(format!(
                "n_layers {} outside 1..={}",
                self.n_layers, backbone.n_layers
            )));
        }
        if !(6..=8).contains(&self.n_class_images) {
            return Err(CoarError::invalid("n_class_images must be 6, 7, or 8"));
        }
        self.loss.validate()?;
        self.adam.validate()
    }
}

/// Flat first/second-moment state over a fixed-size parameter set. The
/// running beta powers stand in for step counting.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    b1t: f64,
    b2t: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], b1t: 1.0, b2t: 1.0 }
    }

    /// Advance one step and return the bias-correction denominators.
    fn correctors(&mut self, cfg: &AdamConfig) -> (f64, f64) {
        self.b1t *= cfg.beta1;
        self.b2t *= cfg.beta2;
        (1.0 - self.b1t, 1.0 - self.b2t)
    }

    /// One update over `params`, consuming `grads` entry by entry. Both
    /// iterators must walk the same fixed order every call.
    fn step<'a, 'b>(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        grads: impl Iterator<Item = &'a f64>,
        params: impl Iterator<Item = &'b mut f64>,
    ) {
        let (c1, c2) = self.correctors(cfg);
        let mut i = 0;
        for (g, p) in grads.zip(params) {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            *p -= lr * mh / (math::sqrt(vh) + cfg.eps);
            i += 1;
        }
        debug_assert_eq!(i, self.m.len());
    }
}

fn require_frozen(params: &BackboneParams) -> Result<()> {
    if !params.frozen {
        return Err(CoarError::invalid("bank training requires a frozen backbone"));
    }
    Ok(())
}

/// Sample class-conditioned sequences from the frozen model for the prior
/// term: "a photo of a [Class]", top-k 20 at temperature 1, one reserved
/// slot so the bank's plan applies.
pub fn generate_class_priors(
    params: &BackboneParams,
    vocab: &Vocabulary,
    class_name: TokenId,
    n: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if !(6..=8).contains(&n) {
        return Err(CoarError::invalid("class prior count must be 6, 7, or 8"));
    }
    let prompt = tokenize_prompt(vocab, PRIOR_TEMPLATE, class_name)?;
    // BOS + prompt + BOI + CTX + image + EOI inside the window.
    let budget = params.config.max_seq.saturating_sub(prompt.tokens.len() + 4);
    let len = IMAGE_TOKENS.min(budget);
    if len == 0 {
        return Err(CoarError::invalid("no room for image tokens in the window"));
    }
    let mut master = Rng::substream(seed, "trainer/priors");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let dc = DecodeConfig::topk(master.next_u64(), len);
        let tail = generate(params, vocab, &[], PRIOR_TEMPLATE, class_name, &dc)?;
        out.push(assemble(vocab, &prompt.tokens, &tail, 1)?);
    }
    Ok(out)
}

fn diverged(detail: &str, step: usize) -> CoarError {
    CoarError::NumericFailure {
        detail: detail.into(),
        layer: None,
        last_good_step: step.checked_sub(1),
    }
}

/// The shared inner loop: evaluate at the current bank, record, update.
/// The report at index s is therefore the loss BEFORE update s, and index
/// 0 is the initialization loss.
fn run_bank_training(
    params: &BackboneParams,
    bank: &mut ContextBank,
    subject_seqs: &[TokenSequence],
    class_refs: &[ClassRef],
    cfg: &TrainConfig,
) -> Result<Vec<LossReport>> {
    if subject_seqs.is_empty() {
        return Err(CoarError::invalid("training needs at least one sequence"));
    }
    let mut adam = Adam::new(bank.param_count());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut baseline = 0.0;
    let mut high_streak = 0usize;
    for step in 0..cfg.steps {
        let seq = &subject_seqs[step % subject_seqs.len()];
        let (report, grads) = total_objective_cached(
            params,
            bank,
            core::slice::from_ref(seq),
            class_refs,
            &cfg.loss,
            step,
        )?;
        if !report.total.is_finite() {
            return Err(diverged("total loss is not finite", step));
        }
        if step == 0 {
            baseline = report.total;
        }
        high_streak = if step > 0 && report.total > 10.0 * baseline {
            high_streak + 1
        } else {
            0
        };
        history.push(report);
        if high_streak >= 50 {
            return Err(diverged(
                "loss exceeded 10x its starting value for 50 consecutive steps",
                step,
            ));
        }
        let [gv, gi] = grads.flat();
        let [pv, pi] = bank.trainable_mut();
        adam.step(
            &cfg.adam,
            cfg.lr,
            gv.iter().chain(gi.iter()),
            pv.iter_mut().chain(pi.iter_mut()),
        );
    }
    Ok(history)
}

fn subject_sequences(
    vocab: &Vocabulary,
    subject: &SubjectSet,
    cb: &Codebook,
) -> Result<Vec<TokenSequence>> {
    let prompt = tokenize_prompt(vocab, SUBJECT_TEMPLATE, subject.class_name)?;
    let mut seqs = Vec::with_capacity(subject.references.len());
    for r in &subject.references {
        let codes = quantize(r, cb)?;
        let image: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        seqs.push(assemble(vocab, &prompt.tokens, &image, 1)?);
    }
    Ok(seqs)
}

/// Learn a subject bank. Initialization anchors p_I to the mean reference
/// activations and p_v to the class word's layerwise hidden states; the
/// loop then walks the references round robin with the class-prior batch
/// folded into every step.
pub fn train_subject(
    params: &BackboneParams,
    vocab: &Vocabulary,
    subject: &SubjectSet,
    cb: &Codebook,
    cfg: &TrainConfig,
) -> Result<(ContextBank, Vec<LossReport>)> {
    cfg.validate(&params.config)?;
    require_frozen(params)?;
    let mut bank = new_bank(
        cfg.n_layers,
        params.config.dim,
        BankKind::Subject,
        subject.class_name,
        cfg.seed,
        InitPolicy::Zero,
    )?;
    let e = capture_subject_stats(params, vocab, subject, cb, cfg.n_layers)?;
    let word = capture_class_hidden(params, vocab, subject.class_name, cfg.n_layers)?;
    bank.init_from_activations(&e, &word)?;

    let dpp_active = cfg.steps > 0
        && cfg.loss.alpha > 0.0
        && (cfg.loss.lambda1 > 0.0 || cfg.loss.lambda2 > 0.0);
    let refs = if dpp_active {
        let priors =
            generate_class_priors(params, vocab, subject.class_name, cfg.n_class_images, cfg.seed)?;
        prepare_class_refs(params, &priors)?
    } else {
        Vec::new()
    };
    let seqs = subject_sequences(vocab, subject, cb)?;

    let hash_before = params.content_hash();
    let history = run_bank_training(params, &mut bank, &seqs, &refs, cfg)?;
    debug_assert_eq!(params.content_hash(), hash_before);
    Ok((bank, history))
}

/// Learn a style bank from its single reference. The preservation term is
/// forced off, the anchor is the style image's own activations, and p_v
/// starts from the word "style" in the style prompt.
pub fn train_style(
    params: &BackboneParams,
    vocab: &Vocabulary,
    style: &StyleSet,
    cb: &Codebook,
    cfg: &TrainConfig,
) -> Result<(ContextBank, Vec<LossReport>)> {
    let mut cfg = cfg.clone();
    cfg.loss.alpha = 0.0;
    cfg.validate(&params.config)?;
    require_frozen(params)?;
    let class = vocab
        .word_id(CLASS_WORDS[style.content_class])
        .ok_or_else(|| CoarError::invalid("style content class outside vocabulary"))?;
    let style_word = vocab
        .word_id("style")
        .ok_or_else(|| CoarError::invalid("vocabulary lacks the word \"style\""))?;
    let mut bank = new_bank(
        cfg.n_layers,
        params.config.dim,
        BankKind::Style,
        class,
        cfg.seed,
        InitPolicy::Zero,
    )?;
    let e = capture_style_stats(params, vocab, style, cb, cfg.n_layers)?;
    let word = capture_word_hidden(params, vocab, STYLE_TEMPLATE, class, style_word, cfg.n_layers)?;
    bank.init_from_activations(&e, &word)?;

    let prompt = tokenize_prompt(vocab, STYLE_TEMPLATE, class)?;
    let codes = quantize(&style.reference, cb)?;
    let image: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
    let seq = assemble(vocab, &prompt.tokens, &image, 1)?;

    let hash_before = params.content_hash();
    let history = run_bank_training(params, &mut bank, core::slice::from_ref(&seq), &[], &cfg)?;
    debug_assert_eq!(params.content_hash(), hash_before);
    Ok((bank, history))
}

/// Worst finite-difference disagreement over every trainable scalar.
/// `side` 0 is p_v, 1 is p_I; `index` is row-major within that stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_side: usize,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Central differences against the analytic bank gradient, every scalar.
/// Differences below 1e-8 count as exact so flat regions do not divide by
/// noise.
pub fn gradcheck(
    params: &BackboneParams,
    bank: &ContextBank,
    subject_batch: &[TokenSequence],
    class_batch: &[TokenSequence],
    cfg: &LossConfig,
    h: f64,
) -> Result<GradcheckReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(CoarError::invalid("step size must be positive and finite"));
    }
    let (_, grads) = total_objective(params, bank, subject_batch, class_batch, cfg, 0)?;
    let flat = grads.flat();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_side: 0,
        worst_index: 0,
        n_checked: 0,
    };
    for side in 0..2 {
        for idx in 0..flat[side].len() {
            let mut plus = bank.clone();
            plus.trainable_mut()[side][idx] += h;
            let mut minus = bank.clone();
            minus.trainable_mut()[side][idx] -= h;
            let fp = total_objective(params, &plus, subject_batch, class_batch, cfg, 0)?.0.total;
            let fm = total_objective(params, &minus, subject_batch, class_batch, cfg, 0)?.0.total;
            let fd = (fp - fm) / (2.0 * h);
            let diff = (flat[side][idx] - fd).abs();
            let err = if diff <= 1e-8 { 0.0 } else { diff / fd.abs().max(1e-8) };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_side = side;
                report.worst_index = idx;
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

/// One sweep row: train at depth `n_layers`, then score the bank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub n_layers: usize,
    pub final_ntp: f64,
    pub fidelity: f64,
    pub drift: f64,
}

/// Train one bank per depth with otherwise identical settings and report
/// final training loss, greedy-decode fidelity, and held-out drift.
pub fn sweep_layers(
    params: &BackboneParams,
    vocab: &Vocabulary,
    subject: &SubjectSet,
    cb: &Codebook,
    ns: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if ns.is_empty() {
        return Err(CoarError::invalid("sweep needs at least one depth"));
    }
    if cfg.steps == 0 {
        return Err(CoarError::invalid("sweep rows need at least one step"));
    }
    let prompt = tokenize_prompt(vocab, SUBJECT_TEMPLATE, subject.class_name)?;
    let budget = params.config.max_seq.saturating_sub(prompt.tokens.len() + 4);
    let t = IMAGE_TOKENS.min(budget);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut c = cfg.clone();
        c.n_layers = n;
        let (bank, history) = train_subject(params, vocab, subject, cb, &c)?;
        let tokens = generate(
            params,
            vocab,
            &[&bank],
            SUBJECT_TEMPLATE,
            subject.class_name,
            &DecodeConfig::greedy(t),
        )?;
        let fidelity = crate::audit::fidelity_proxy(params, vocab, &tokens, subject, cb)?;
        let drift =
            crate::audit::drift_kl(params, vocab, &bank, &HELD_OUT_TEMPLATES, 4, cfg.seed)?;
        rows.push(SweepRow {
            n_layers: n,
            final_ntp: history.last().expect("steps >= 1").ntp,
            fidelity,
            drift,
        });
    }
    Ok(rows)
}

/// Settings for the one loop that updates backbone weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop early once the class-conditional cross-entropy drops below
    /// this.
    pub target_ce: f64,
    /// Evaluate every this many steps.
    pub eval_every: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch_size: 8,
            lr: 3e-3,
            target_ce: 0.35,
            eval_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoarError::invalid("lr must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(CoarError::invalid("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(CoarError::invalid("eval_every must be at least 1"));
        }
        if !self.target_ce.is_finite() {
            return Err(CoarError::invalid("target_ce must be finite"));
        }
        self.adam.validate()
    }
}

/// What the pretraining loop did.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps_run: usize,
    /// Class-conditional cross-entropy at the end.
    pub final_class_ce: f64,
    pub reached_target: bool,
    /// (step, class-conditional cross-entropy) at each evaluation.
    pub evals: Vec<(usize, f64)>,
}

/// Mean cross-entropy of canonical class images under the class prompt,
/// one noiseless render per class the vocabulary knows.
pub fn class_conditional_ce(
    params: &BackboneParams,
    vocab: &Vocabulary,
    cb: &Codebook,
) -> Result<f64> {
    let mut rng = Rng::substream(0, "pretrain/eval");
    let mut sum = 0.0;
    let mut n = 0usize;
    for idx in 0..N_CLASSES {
        let Some(class) = vocab.word_id(CLASS_WORDS[idx]) else {
            continue;
        };
        let spec = class_spec(idx);
        let codes = render_codes(idx, 0, spec.fg_codes[0], spec.bg_codes[0], 0, 0);
        if codes.iter().any(|&c| c >= cb.size) {
            continue;
        }
        let grid = codes_to_grid(cb, &codes, 0.0, &mut rng);
        let image: Vec<TokenId> = quantize(&grid, cb)?
            .iter()
            .map(|&c| vocab.image_id(c))
            .collect();
        let prompt = tokenize_prompt(vocab, PRIOR_TEMPLATE, class)?;
        let seq = assemble(vocab, &prompt.tokens, &image, 0)?;
        let mask = AttentionMask::causal(seq.len());
        let record = forward(params, &seq, &InjectionPlan::empty(), &mask)?;
        sum += ntp_loss(&record.logits, &seq)?;
        n += 1;
    }
    if n == 0 {
        return Err(CoarError::invalid("no class fits this vocabulary and codebook"));
    }
    Ok(sum / n as f64)
}

/// Plain next-token pretraining of every backbone parameter on the toy
/// corpus. The only mutation of backbone weights in the whole crate; the
/// model comes out frozen. Embedding rows of the reserved ids stay pinned
/// at zero throughout.
pub fn pretrain_backbone(
    params: &mut BackboneParams,
    vocab: &Vocabulary,
    cb: &Codebook,
    corpus: &[(Vec<TokenId>, PixelGrid)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if params.frozen {
        return Err(CoarError::invalid("refusing to update a frozen backbone"));
    }
    if corpus.is_empty() && cfg.steps > 0 {
        return Err(CoarError::invalid("pretraining needs a corpus"));
    }
    let mut seqs = Vec::with_capacity(corpus.len());
    for (prompt, grid) in corpus {
        let image: Vec<TokenId> = quantize(grid, cb)?
            .iter()
            .map(|&c| vocab.image_id(c))
            .collect();
        seqs.push(assemble(vocab, prompt, &image, 0)?);
    }

    let n_params = params.param_count();
    let mut adam = Adam::new(n_params);
    let mut flat_grads = vec![0.0; n_params];
    let reserved = [vocab.placeholder_v(), vocab.placeholder_s(), vocab.ctx_img()];
    let vocab_size = params.config.vocab_size;
    let dim = params.config.dim;
    let mut prob = vec![0.0; vocab_size];
    let mut evals = Vec::new();
    let mut reached_target = false;
    let mut steps_run = 0usize;

    for step in 0..cfg.steps {
        flat_grads.iter_mut().for_each(|g| *g = 0.0);
        let mut step_loss = 0.0;
        for b in 0..cfg.batch_size {
            let seq = &seqs[(step * cfg.batch_size + b) % seqs.len()];
            let mask = AttentionMask::causal(seq.len());
            let record = forward(params, seq, &InjectionPlan::empty(), &mask)?;
            step_loss += ntp_loss(&record.logits, seq)?;

            let labeled: Vec<usize> =
                (0..seq.len()).filter(|&t| seq.labels_mask[t]).collect();
            let w = 1.0 / (cfg.batch_size as f64 * labeled.len() as f64);
            let mut dlogits = Mat::zeros(seq.len(), vocab_size);
            for &t in &labeled {
                prob.copy_from_slice(record.logits.row(t - 1));
                math::softmax_in_place(&mut prob);
                let drow = dlogits.row_mut(t - 1);
                for v in 0..vocab_size {
                    drow[v] = w * prob[v];
                }
                drow[seq.ids[t] as usize] -= w;
            }
            let out = backward(params, seq, &InjectionPlan::empty(), &record, &dlogits, true);
            let grads: BackboneGrads = out.params.expect("param grads requested");
            let mut cursor = 0usize;
            grads.visit(|_, data| {
                for (acc, g) in flat_grads[cursor..cursor + data.len()].iter_mut().zip(data) {
                    *acc += g;
                }
                cursor += data.len();
            });
        }
        if !step_loss.is_finite() {
            return Err(diverged("pretraining loss is not finite", step));
        }
        // The embed block leads the flat order; pin the reserved rows.
        for &id in &reserved {
            flat_grads[id * dim..(id + 1) * dim].iter_mut().for_each(|g| *g = 0.0);
        }
        let mut cursor = 0usize;
        let (c1, c2) = adam.correctors(&cfg.adam);
        let (m, v) = (&mut adam.m, &mut adam.v);
        params.visit_mut(|_, data| {
            for p in data.iter_mut() {
                let g = flat_grads[cursor];
                m[cursor] = cfg.adam.beta1 * m[cursor] + (1.0 - cfg.adam.beta1) * g;
                v[cursor] = cfg.adam.beta2 * v[cursor] + (1.0 - cfg.adam.beta2) * g * g;
                *p -= cfg.lr * (m[cursor] / c1) / (math::sqrt(v[cursor] / c2) + cfg.adam.eps);
                cursor += 1;
            }
        });
        debug_assert_eq!(cursor, n_params);
        steps_run = step + 1;

        if steps_run % cfg.eval_every == 0 {
            let ce = class_conditional_ce(params, vocab, cb)?;
            evals.push((steps_run, ce));
            if ce < cfg.target_ce {
                reached_target = true;
                break;
            }
        }
    }

    let final_class_ce = match evals.last() {
        Some(&(step, ce)) if step == steps_run => ce,
        _ => {
            let ce = class_conditional_ce(params, vocab, cb)?;
            evals.push((steps_run, ce));
            ce
        }
    };
    params.frozen = true;
    Ok(PretrainReport {
        steps_run,
        final_class_ce,
        reached_target: reached_target || final_class_ce < cfg.target_ce,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{build_codebook, make_pretrain_corpus, make_style, make_subject};

    /// Frozen random backbone and the full-size world. Training against it
    /// is meaningless but mechanically identical to the real thing.
    fn fixture() -> (BackboneParams, Vocabulary, Codebook) {
        let cfg = BackboneConfig::standard();
        let mut params = BackboneParams::random(&cfg, 41).unwrap();
        params.frozen = true;
        (params, Vocabulary::standard(), build_codebook(64, 12, 7).unwrap())
    }

    /// Prior term off: most tests exercise the loop, not the class batch.
    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            n_layers: 2,
            seed: 5,
            loss: LossConfig { alpha: 0.0, ..LossConfig::default() },
            ..TrainConfig::subject()
        }
    }

    #[test]
    fn priors_are_deterministic_and_counted() {
        let (params, vocab, _) = fixture();
        let class = vocab.word_id("ring").unwrap();
        let a = generate_class_priors(&params, &vocab, class, 6, 3).unwrap();
        let b = generate_class_priors(&params, &vocab, class, 6, 3).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ids, y.ids);
        }
        // Samples differ from each other and carry one context slot.
        assert!(a.windows(2).any(|w| w[0].ids != w[1].ids));
        for seq in &a {
            assert_eq!(seq.ctx_img_positions.len(), 1);
        }
        assert!(generate_class_priors(&params, &vocab, class, 5, 3).is_err());
        assert!(generate_class_priors(&params, &vocab, class, 9, 3).is_err());
        assert!(generate_class_priors(&params, &vocab, vocab.bos(), 8, 3).is_err());
    }

    #[test]
    fn zero_steps_returns_the_initialized_bank() {
        let (params, vocab, cb) = fixture();
        let subject = make_subject(2, &cb);
        let (bank, history) =
            train_subject(&params, &vocab, &subject, &cb, &quick_cfg(0)).unwrap();
        assert!(history.is_empty());
        let e = capture_subject_stats(&params, &vocab, &subject, &cb, 2).unwrap();
        let w = capture_class_hidden(&params, &vocab, subject.class_name, 2).unwrap();
        assert_eq!(bank.p_i.data, e.data);
        assert_eq!(bank.p_v.data, w.data);
        assert_eq!(bank.casr_anchor.as_ref().unwrap().data, e.data);
        assert_eq!(crate::losses::casr_loss(&bank).unwrap(), 0.0);
    }

    #[test]
    fn same_seed_reproduces_the_bank_bit_for_bit() {
        let (params, vocab, cb) = fixture();
        let subject = make_subject(2, &cb);
        let cfg = quick_cfg(5);
        let (a, ha) = train_subject(&params, &vocab, &subject, &cb, &cfg).unwrap();
        let (b, hb) = train_subject(&params, &vocab, &subject, &cb, &cfg).unwrap();
        assert_eq!(a.p_v.data, b.p_v.data);
        assert_eq!(a.p_i.data, b.p_i.data);
        assert_eq!(ha.len(), 5);
        for (x, y) in ha.iter().zip(&hb) {
            assert_eq!(x.total, y.total);
        }
        // Updates actually moved the bank off its initialization.
        let e = capture_subject_stats(&params, &vocab, &subject, &cb, 2).unwrap();
        assert_ne!(a.p_i.data, e.data);
    }

    #[test]
    fn backbone_bytes_survive_training() {
        // Full path including the class-prior batch.
        let (params, vocab, cb) = fixture();
        let subject = make_subject(3, &cb);
        let cfg = TrainConfig {
            steps: 2,
            n_layers: 2,
            seed: 5,
            n_class_images: 6,
            ..TrainConfig::subject()
        };
        let before = params.content_hash();
        let (_, history) = train_subject(&params, &vocab, &subject, &cb, &cfg).unwrap();
        assert_eq!(params.content_hash(), before);
        assert!(history.iter().all(|r| r.dpp_kl >= 0.0 && r.dpp_ntp > 0.0));
    }

    #[test]
    fn training_requires_a_frozen_backbone() {
        let (mut params, vocab, cb) = fixture();
        params.frozen = false;
        let subject = make_subject(2, &cb);
        assert!(train_subject(&params, &vocab, &subject, &cb, &quick_cfg(1)).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let (params, _, _) = fixture();
        let base = quick_cfg(1);
        for bad in [
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { lr: f64::NAN, ..base.clone() },
            TrainConfig { batch_size: 2, ..base.clone() },
            TrainConfig { n_layers: 0, ..base.clone() },
            TrainConfig { n_layers: 13, ..base.clone() },
            TrainConfig { n_class_images: 5, ..base.clone() },
            TrainConfig { n_class_images: 9, ..base.clone() },
        ] {
            assert!(bad.validate(&params.config).is_err());
        }
        assert!(base.validate(&params.config).is_ok());
        assert_eq!(TrainConfig::subject().steps, 1000);
        assert_eq!(TrainConfig::subject().n_layers, 9);
        assert_eq!(TrainConfig::style().steps, 600);
        assert_eq!(TrainConfig::style().n_layers, 3);
        assert_eq!(TrainConfig::style().loss.alpha, 0.0);
    }

    #[test]
    fn style_training_never_pays_a_prior_term() {
        let (params, vocab, cb) = fixture();
        let style = make_style(4, &cb);
        let mut cfg = TrainConfig { steps: 4, seed: 2, ..TrainConfig::style() };
        // Even a config that asks for the prior term gets it forced off.
        cfg.loss.alpha = 1.0;
        let (bank, history) = train_style(&params, &vocab, &style, &cb, &cfg).unwrap();
        assert_eq!(bank.kind, BankKind::Style);
        assert_eq!(bank.n_layers, 3);
        assert_eq!(bank.param_count(), 2 * 3 * params.config.dim);
        assert_eq!(history.len(), 4);
        for r in &history {
            assert_eq!(r.dpp_ntp, 0.0);
            assert_eq!(r.dpp_kl, 0.0);
            assert_eq!(r.total, r.ntp + cfg.loss.beta * r.casr);
        }
        // Anchored to its own capture, so the pull term starts at zero.
        assert_eq!(history[0].casr, 0.0);
    }

    #[test]
    fn gradcheck_validates_every_scalar_on_the_small_config() {
        let cfg = BackboneConfig::small();
        let params = BackboneParams::random(&cfg, 31).unwrap();
        let vocab = Vocabulary::with_sizes(12, 12).unwrap();
        let class: TokenId = 9;
        let mut bank =
            new_bank(2, cfg.dim, BankKind::Subject, class, 8, InitPolicy::RandomNormal).unwrap();
        let anchor = Mat::from_vec(2, cfg.dim, (0..2 * cfg.dim).map(|i| 0.01 * i as f64).collect());
        let hidden = bank.p_v.clone();
        bank.init_from_activations(&anchor, &hidden).unwrap();
        for v in bank.p_i.data.iter_mut() {
            *v += 0.02;
        }
        let image: Vec<TokenId> = (0..8).map(|c| vocab.image_id(c % vocab.n_image)).collect();
        let prompt = tokenize_prompt(&vocab, SUBJECT_TEMPLATE, class).unwrap();
        let subject = [assemble(&vocab, &prompt.tokens, &image, 1).unwrap()];
        let class_prompt = tokenize_prompt(&vocab, PRIOR_TEMPLATE, class).unwrap();
        let class_batch = [assemble(&vocab, &class_prompt.tokens, &image, 1).unwrap()];
        let report = gradcheck(
            &params,
            &bank,
            &subject,
            &class_batch,
            &LossConfig::default(),
            1e-4,
        )
        .unwrap();
        assert_eq!(report.n_checked, 2 * 2 * cfg.dim);
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at side {} index {}",
            report.max_rel_err,
            report.worst_side,
            report.worst_index
        );
        assert!(gradcheck(&params, &bank, &subject, &class_batch, &LossConfig::default(), 0.0)
            .is_err());
    }

    #[test]
    fn sweep_emits_one_row_per_depth() {
        let (params, vocab, cb) = fixture();
        let subject = make_subject(2, &cb);
        let cfg = quick_cfg(2);
        let rows = sweep_layers(&params, &vocab, &subject, &cb, &[1, 2], &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n_layers, 1);
        assert_eq!(rows[1].n_layers, 2);
        for row in &rows {
            assert!(row.final_ntp.is_finite());
            assert!((-1.0..=1.0).contains(&row.fidelity));
            assert!(row.drift >= 0.0);
        }
        let again = sweep_layers(&params, &vocab, &subject, &cb, &[1, 2], &cfg).unwrap();
        assert_eq!(rows, again);
        assert!(sweep_layers(&params, &vocab, &subject, &cb, &[], &cfg).is_err());
    }

    #[test]
    fn pretraining_updates_and_freezes_the_backbone() {
        let cfg = BackboneConfig::standard();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 7).unwrap();
        let reserved = [vocab.placeholder_v(), vocab.placeholder_s(), vocab.ctx_img()];
        let mut params = BackboneParams::init(&cfg, 3, &reserved).unwrap();
        let corpus = make_pretrain_corpus(3, 16, &cb).unwrap();
        let pcfg = PretrainConfig {
            steps: 2,
            batch_size: 2,
            eval_every: 1,
            target_ce: 0.0,
            ..PretrainConfig::default()
        };
        let before = params.content_hash();
        let report = pretrain_backbone(&mut params, &vocab, &cb, &corpus, &pcfg).unwrap();
        assert_ne!(params.content_hash(), before);
        assert!(params.frozen);
        assert_eq!(report.steps_run, 2);
        assert_eq!(report.evals.len(), 2);
        assert!(!report.reached_target);
        // Reserved embedding rows stayed pinned at zero.
        for &id in &reserved {
            assert!(params.embed.row(id).iter().all(|&v| v == 0.0));
        }
        // A frozen backbone refuses further pretraining.
        assert!(pretrain_backbone(&mut params, &vocab, &cb, &corpus, &pcfg).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_lowers_the_loss() {
        let cfg = BackboneConfig::standard();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 7).unwrap();
        let reserved = [vocab.placeholder_v(), vocab.placeholder_s(), vocab.ctx_img()];
        let corpus = make_pretrain_corpus(5, 8, &cb).unwrap();
        let corpus_ce = |params: &BackboneParams| -> f64 {
            let mut sum = 0.0;
            for (prompt, grid) in &corpus {
                let image: Vec<TokenId> = quantize(grid, &cb)
                    .unwrap()
                    .iter()
                    .map(|&c| vocab.image_id(c))
                    .collect();
                let seq = assemble(&vocab, prompt, &image, 0).unwrap();
                let mask = AttentionMask::causal(seq.len());
                let rec = forward(params, &seq, &InjectionPlan::empty(), &mask).unwrap();
                sum += ntp_loss(&rec.logits, &seq).unwrap();
            }
            sum / corpus.len() as f64
        };
        let pcfg = PretrainConfig {
            steps: 30,
            batch_size: 2,
            eval_every: 1000,
            target_ce: 0.0,
            ..PretrainConfig::default()
        };
        let run = || {
            let mut params = BackboneParams::init(&cfg, 3, &reserved).unwrap();
            let start = corpus_ce(&params);
            let report = pretrain_backbone(&mut params, &vocab, &cb, &corpus, &pcfg).unwrap();
            (params.content_hash(), start, corpus_ce(&params), report)
        };
        let (ha, start_a, end_a, ra) = run();
        let (hb, _, _, rb) = run();
        assert_eq!(ha, hb);
        assert_eq!(ra, rb);
        assert!(end_a < start_a, "{end_a} should drop below {start_a}");
        assert!(ra.final_class_ce.is_finite());
        assert_eq!(ra.evals.len(), 1);
    }

    #[test]
    fn zero_step_pretraining_yields_a_valid_frozen_checkpoint() {
        let cfg = BackboneConfig::standard();
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 7).unwrap();
        let mut params = BackboneParams::init(&cfg, 3, &[vocab.ctx_img()]).unwrap();
        let before = params.content_hash();
        let report =
            pretrain_backbone(&mut params, &vocab, &cb, &[], &PretrainConfig {
                steps: 0,
                ..PretrainConfig::default()
            })
            .unwrap();
        assert_eq!(params.content_hash(), before);
        assert!(params.frozen);
        assert_eq!(report.steps_run, 0);
        assert!(report.final_class_ce.is_finite());
        // Frozen means bank training now accepts it.
        let subject = make_subject(2, &cb);
        let (_, history) =
            train_subject(&params, &vocab, &subject, &cb, &quick_cfg(1)).unwrap();
        assert_eq!(history.len(), 1);
    }
}
