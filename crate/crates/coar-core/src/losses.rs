//! Training objectives and their analytic gradients w.r.t. bank entries.
//!
//! Three terms combine into the objective: next-token cross-entropy over the
//! labeled image positions, a dual-pass prior term that pins the injected
//! model's class-image predictions to the frozen model's own, and a pull of
//! p_I back toward its initialization anchor. Gradients flow into the bank
//! arrays only; no backbone tensor ever accumulates anything.
//!
//! All per-sequence losses are position means, not sums, so magnitudes stay
//! comparable across image lengths; batch terms are means over sequences.

use crate::backbone::{backward, forward, AttentionMask, BackboneParams, InjectionPlan};
use crate::context::{make_plan, BankKind, ContextBank};
use crate::error::{CoarError, Result};
use crate::mat::Mat;
use crate::math;
use crate::sequences::TokenSequence;
use alloc::format;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the prior-preservation pair.
    pub alpha: f64,
    /// Weight of the anchor pull on p_I.
    pub beta: f64,
    /// Cross-entropy share inside the prior term.
    pub lambda1: f64,
    /// Divergence share inside the prior term.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1e-2, beta: 5e-4, lambda1: 0.5, lambda2: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoarError::invalid(format!(
                    "loss coefficient {name} must be a nonnegative finite number"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub ntp: f64,
    pub dpp_ntp: f64,
    pub dpp_kl: f64,
    pub casr: f64,
    pub total: f64,
    pub step: usize,
}

impl LossReport {
    pub fn combine(cfg: &LossConfig, ntp: f64, dpp_ntp: f64, dpp_kl: f64, casr: f64, step: usize) -> Self {
        let total = ntp + cfg.alpha * (cfg.lambda1 * dpp_ntp + cfg.lambda2 * dpp_kl) + cfg.beta * casr;
        LossReport { ntp, dpp_ntp, dpp_kl, casr, total, step }
    }
}

/// Gradient buffers shaped like one bank's trainable arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub p_v: Mat,
    pub p_i: Mat,
}

impl BankGrads {
    pub fn zeros(bank: &ContextBank) -> Self {
        BankGrads {
            p_v: Mat::zeros(bank.n_layers, bank.dim),
            p_i: Mat::zeros(bank.n_layers, bank.dim),
        }
    }

    /// Flat views matching [`ContextBank::trainable_mut`] order.
    pub fn flat(&self) -> [&[f64]; 2] {
        [&self.p_v.data, &self.p_i.data]
    }
}

/// Mean cross-entropy of the labeled positions: the row at t−1 is scored
/// against the token at t.
pub fn ntp_loss(logits: &Mat, seq: &TokenSequence) -> Result<f64> {
    let labeled: Vec<usize> = (0..seq.len()).filter(|&t| seq.labels_mask[t]).collect();
    if labeled.is_empty() {
        return Err(CoarError::invalid("sequence has no labeled positions"));
    }
    if logits.rows != seq.len() {
        return Err(CoarError::invalid("logits row count does not match sequence"));
    }
    let mut sum = 0.0;
    for &t in &labeled {
        let row = logits.row(t - 1);
        sum += math::log_sum_exp(row) - row[seq.ids[t] as usize];
    }
    Ok(sum / labeled.len() as f64)
}

/// Mean over rows of D(p_ref ‖ p_q) where both operands are exp-normalized
/// logits. The reference side is treated as constant; only q carries
/// gradient in the callers that differentiate this.
pub fn kl_divergence(logits_ref: &Mat, logits_q: &Mat) -> Result<f64> {
    if logits_ref.rows != logits_q.rows || logits_ref.cols != logits_q.cols {
        return Err(CoarError::invalid("divergence operands must share a shape"));
    }
    if logits_ref.rows == 0 {
        return Err(CoarError::invalid("divergence over zero rows"));
    }
    let mut sum = 0.0;
    for r in 0..logits_ref.rows {
        let zr = logits_ref.row(r);
        let zq = logits_q.row(r);
        let lr = math::log_sum_exp(zr);
        let lq = math::log_sum_exp(zq);
        let mut row_kl = 0.0;
        for v in 0..logits_ref.cols {
            let logp = zr[v] - lr;
            row_kl += math::exp(logp) * (logp - (zq[v] - lq));
        }
        sum += row_kl;
    }
    Ok((sum / logits_ref.rows as f64).max(0.0))
}

/// Mean over layers of the squared distance between p_I and its anchor.
pub fn casr_loss(bank: &ContextBank) -> Result<f64> {
    let anchor = bank
        .casr_anchor
        .as_ref()
        .ok_or_else(|| CoarError::invalid("bank has no anchor to regularize against"))?;
    let n = bank.n_layers as f64;
    let sum: f64 = bank
        .p_i
        .data
        .iter()
        .zip(&anchor.data)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok(sum / n)
}

/// Rows that predict the labeled positions: logits row t−1 for each labeled
/// t, in position order.
pub(crate) fn predicting_rows(logits: &Mat, seq: &TokenSequence) -> Mat {
    let labeled: Vec<usize> = (0..seq.len()).filter(|&t| seq.labels_mask[t]).collect();
    let mut out = Mat::zeros(labeled.len(), logits.cols);
    for (i, &t) in labeled.iter().enumerate() {
        out.row_mut(i).copy_from_slice(logits.row(t - 1));
    }
    out
}

/// Prior-preservation value: for each class sequence, one pass without any
/// injection and one with the bank's image-side plan, compared at the
/// labeled rows. Returns the weighted scalar plus the unweighted parts
/// (mean cross-entropy, mean divergence).
pub fn dpp_loss(
    params: &BackboneParams,
    bank: &ContextBank,
    class_batch: &[TokenSequence],
    cfg: &LossConfig,
) -> Result<(f64, (f64, f64))> {
    if cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0 {
        return Ok((0.0, (0.0, 0.0)));
    }
    if class_batch.is_empty() {
        return Err(CoarError::invalid("prior term needs at least one class sequence"));
    }
    let mut ntp_sum = 0.0;
    let mut kl_sum = 0.0;
    for seq in class_batch {
        let mask = AttentionMask::causal(seq.len());
        let zs = forward(params, seq, &InjectionPlan::empty(), &mask)?;
        let plan = make_plan(&[bank], seq)?;
        let prior = forward(params, seq, &plan, &mask)?;
        ntp_sum += ntp_loss(&prior.logits, seq)?;
        kl_sum += kl_divergence(&predicting_rows(&zs.logits, seq), &predicting_rows(&prior.logits, seq))?;
    }
    let b = class_batch.len() as f64;
    let parts = (ntp_sum / b, kl_sum / b);
    Ok((cfg.lambda1 * parts.0 + cfg.lambda2 * parts.1, parts))
}

/// A class sequence bundled with its zero-shot reference rows. The
/// reference pass never depends on the bank, so a training loop computes
/// it once and reuses it at every step.
#[derive(Clone, Debug)]
pub struct ClassRef {
    pub seq: TokenSequence,
    /// Zero-shot logits at the predicting rows, in labeled-position order.
    pub zs_rows: Mat,
}

/// Run the injection-free pass over each class sequence and keep only the
/// rows the prior term compares against.
pub fn prepare_class_refs(
    params: &BackboneParams,
    class_batch: &[TokenSequence],
) -> Result<Vec<ClassRef>> {
    let mut out = Vec::with_capacity(class_batch.len());
    for seq in class_batch {
        let mask = AttentionMask::causal(seq.len());
        let zs = forward(params, seq, &InjectionPlan::empty(), &mask)?;
        out.push(ClassRef {
            seq: seq.clone(),
            zs_rows: predicting_rows(&zs.logits, seq),
        });
    }
    Ok(out)
}

/// Add `scale` times the entry gradients of `plan` into the bank buffers,
/// routing by position role: image-slot entries belong to p_I, placeholder
/// entries to p_v.
fn accumulate_plan_grads(
    bank: &ContextBank,
    seq: &TokenSequence,
    plan: &InjectionPlan,
    plan_grads: &[Vec<f64>],
    scale: f64,
    out: &mut BankGrads,
) {
    let text_positions = match bank.kind {
        BankKind::Subject => &seq.v_positions,
        BankKind::Style => &seq.s_positions,
    };
    for (entry, grad) in plan.entries.iter().zip(plan_grads) {
        let target = if seq.ctx_img_positions.contains(&entry.position) {
            out.p_i.row_mut(entry.layer - 1)
        } else if text_positions.contains(&entry.position) {
            out.p_v.row_mut(entry.layer - 1)
        } else {
            continue;
        };
        for (t, g) in target.iter_mut().zip(grad) {
            *t += scale * g;
        }
    }
}

/// Softmax of `row` written into `buf`.
fn softmax_row(row: &[f64], buf: &mut [f64]) {
    buf.copy_from_slice(row);
    math::softmax_in_place(buf);
}

/// The combined objective and its gradient w.r.t. the bank's entries.
/// Backbone parameters receive nothing: the backward passes only harvest
/// the injected-row gradients. Recomputes the zero-shot reference pass on
/// every call; training loops precompute it once and use the cached form.
pub fn total_objective(
    params: &BackboneParams,
    bank: &ContextBank,
    subject_batch: &[TokenSequence],
    class_batch: &[TokenSequence],
    cfg: &LossConfig,
    step: usize,
) -> Result<(LossReport, BankGrads)> {
    cfg.validate()?;
    let refs = if cfg.alpha > 0.0 && (cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0) {
        prepare_class_refs(params, class_batch)?
    } else {
        Vec::new()
    };
    total_objective_cached(params, bank, subject_batch, &refs, cfg, step)
}

/// [`total_objective`] with the zero-shot rows supplied by the caller.
pub fn total_objective_cached(
    params: &BackboneParams,
    bank: &ContextBank,
    subject_batch: &[TokenSequence],
    class_refs: &[ClassRef],
    cfg: &LossConfig,
    step: usize,
) -> Result<(LossReport, BankGrads)> {
    cfg.validate()?;
    if subject_batch.is_empty() {
        return Err(CoarError::invalid("objective needs at least one training sequence"));
    }
    let mut grads = BankGrads::zeros(bank);
    let vocab_size = params.config.vocab_size;
    let b = subject_batch.len() as f64;

    let mut ntp = 0.0;
    let mut prob = alloc::vec![0.0; vocab_size];
    for seq in subject_batch {
        let mask = AttentionMask::causal(seq.len());
        let plan = make_plan(&[bank], seq)?;
        let record = forward(params, seq, &plan, &mask)?;
        ntp += ntp_loss(&record.logits, seq)?;

        let labeled: Vec<usize> = (0..seq.len()).filter(|&t| seq.labels_mask[t]).collect();
        let w = 1.0 / (b * labeled.len() as f64);
        let mut dlogits = Mat::zeros(seq.len(), vocab_size);
        for &t in &labeled {
            softmax_row(record.logits.row(t - 1), &mut prob);
            let drow = dlogits.row_mut(t - 1);
            for v in 0..vocab_size {
                drow[v] = w * prob[v];
            }
            drow[seq.ids[t] as usize] -= w;
        }
        let out = backward(params, seq, &plan, &record, &dlogits, false);
        accumulate_plan_grads(bank, seq, &plan, &out.plan_grads, 1.0, &mut grads);
    }
    ntp /= b;

    let mut dpp_ntp = 0.0;
    let mut dpp_kl = 0.0;
    if cfg.alpha > 0.0 && (cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0) {
        if class_refs.is_empty() {
            return Err(CoarError::invalid("prior term needs at least one class sequence"));
        }
        let bc = class_refs.len() as f64;
        let mut prob_zs = alloc::vec![0.0; vocab_size];
        for cref in class_refs {
            let seq = &cref.seq;
            let mask = AttentionMask::causal(seq.len());
            let plan = make_plan(&[bank], seq)?;
            let prior = forward(params, seq, &plan, &mask)?;
            dpp_ntp += ntp_loss(&prior.logits, seq)?;
            dpp_kl += kl_divergence(&cref.zs_rows, &predicting_rows(&prior.logits, seq))?;

            let labeled: Vec<usize> = (0..seq.len()).filter(|&t| seq.labels_mask[t]).collect();
            let w = 1.0 / (bc * labeled.len() as f64);
            let w_ce = cfg.alpha * cfg.lambda1 * w;
            let w_kl = cfg.alpha * cfg.lambda2 * w;
            let mut dlogits = Mat::zeros(seq.len(), vocab_size);
            for (i, &t) in labeled.iter().enumerate() {
                softmax_row(prior.logits.row(t - 1), &mut prob);
                softmax_row(cref.zs_rows.row(i), &mut prob_zs);
                let drow = dlogits.row_mut(t - 1);
                for v in 0..vocab_size {
                    drow[v] = w_ce * prob[v] + w_kl * (prob[v] - prob_zs[v]);
                }
                drow[seq.ids[t] as usize] -= w_ce;
            }
            let out = backward(params, seq, &plan, &prior, &dlogits, false);
            accumulate_plan_grads(bank, seq, &plan, &out.plan_grads, 1.0, &mut grads);
        }
        dpp_ntp /= bc;
        dpp_kl /= bc;
    }

    let mut casr = 0.0;
    if cfg.beta > 0.0 {
        casr = casr_loss(bank)?;
        let anchor = bank.casr_anchor.as_ref().unwrap();
        let w = cfg.beta * 2.0 / bank.n_layers as f64;
        for (g, (p, a)) in grads.p_i.data.iter_mut().zip(bank.p_i.data.iter().zip(&anchor.data)) {
            *g += w * (p - a);
        }
    }

    Ok((LossReport::combine(cfg, ntp, dpp_ntp, dpp_kl, casr, step), grads))
}
