//! Parameter accounting and desk-scale quality proxies.
//!
//! The counting side is exact integer arithmetic: how many scalars a
//! context bank trains versus a low-rank-adapter setup of the same
//! ambition. The proxy side reuses the frozen backbone as its own feature
//! extractor, since no external encoder exists at this scale. Proxies are
//! for directional comparisons between runs, never for absolute claims.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{forward, AttentionMask, BackboneParams, InjectionPlan};
use crate::context::{make_plan, ContextBank};
use crate::error::{CoarError, Result};
use crate::losses::{kl_divergence, predicting_rows};
use crate::math;
use crate::rng::Rng;
use crate::sampler::{generate, DecodeConfig};
use crate::sequences::{assemble, tokenize_prompt, TokenId, TokenSequence, Vocabulary};
use crate::toyworld::{quantize, Codebook, SubjectSet, IMAGE_TOKENS};

/// One row of the accounting table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub method: String,
    pub count: u64,
    /// The arithmetic that produced `count`, spelled out for diffing.
    pub formula: String,
}

/// Trainable scalars in one context bank: two streams of N layerwise
/// D-vectors.
pub fn context_param_count(n_layers: usize, dim: usize) -> u64 {
    assert!(n_layers >= 1 && dim >= 1);
    2 * n_layers as u64 * dim as u64
}

/// Trainable scalars a rank-r adapter pair adds across m attention
/// modules, four projections each: m * 2 * 4 * d * r.
pub fn lora_param_estimate(dim: usize, rank: usize, n_attention_modules: usize) -> u64 {
    assert!(dim >= 1 && rank >= 1 && n_attention_modules >= 1);
    8 * dim as u64 * rank as u64 * n_attention_modules as u64
}

/// The accounting table the `audit` command prints: the context-bank
/// count at full scale next to adapter estimates for a diffusion-sized
/// and a language-sized model, plus their union.
pub fn reference_param_table() -> Vec<ParamAudit> {
    let ctx = context_param_count(9, 4096);
    let lora_img = lora_param_estimate(3072, 64, 48);
    let lora_lang = lora_param_estimate(4096, 64, 32);
    vec![
        ParamAudit {
            method: String::from("layerwise context tokens"),
            count: ctx,
            formula: String::from("2 * 9 * 4096"),
        },
        ParamAudit {
            method: String::from("low-rank adapters, image model"),
            count: lora_img,
            formula: String::from("8 * 3072 * 64 * 48"),
        },
        ParamAudit {
            method: String::from("low-rank adapters, language model"),
            count: lora_lang,
            formula: String::from("8 * 4096 * 64 * 32"),
        },
        ParamAudit {
            method: String::from("low-rank adapters, both models"),
            count: lora_img + lora_lang,
            formula: String::from("8*3072*64*48 + 8*4096*64*32"),
        },
    ]
}

/// Sample class-conditioned sequences from the frozen model, zero-shot,
/// one reserved slot each so an injected pass can be compared later.
/// Templates rotate round robin; each sample draws its own stream.
pub fn sample_class_sequences(
    params: &BackboneParams,
    vocab: &Vocabulary,
    class_name: TokenId,
    templates: &[&str],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if templates.is_empty() {
        return Err(CoarError::invalid("drift needs at least one class template"));
    }
    if n_samples == 0 {
        return Err(CoarError::invalid("drift needs at least one sample"));
    }
    let mut master = Rng::substream(seed, "audit/drift");
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let template = templates[i % templates.len()];
        let prompt = tokenize_prompt(vocab, template, class_name)?;
        // BOS + prompt + BOI + CTX + image + EOI must fit the window.
        let budget = params
            .config
            .max_seq
            .saturating_sub(prompt.tokens.len() + 4);
        let len = IMAGE_TOKENS.min(budget);
        if len == 0 {
            return Err(CoarError::invalid("no room for image tokens in the window"));
        }
        let dc = DecodeConfig::topk(master.next_u64(), len);
        let tail = generate(params, vocab, &[], template, class_name, &dc)?;
        out.push(assemble(vocab, &prompt.tokens, &tail, 1)?);
    }
    Ok(out)
}

/// Mean per-position divergence between the zero-shot and injected
/// next-token distributions on the given sequences. `None` runs the
/// identical pass twice and is exactly zero, which pins the floor.
pub fn drift_kl_on(
    params: &BackboneParams,
    bank: Option<&ContextBank>,
    seqs: &[TokenSequence],
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(CoarError::invalid("drift needs at least one sequence"));
    }
    let mut acc = 0.0;
    for seq in seqs {
        let mask = AttentionMask::causal(seq.len());
        let zs = forward(params, seq, &InjectionPlan::empty(), &mask)?;
        let plan = match bank {
            Some(b) => make_plan(&[b], seq)?,
            None => InjectionPlan::empty(),
        };
        let inj = forward(params, seq, &plan, &mask)?;
        acc += kl_divergence(
            &predicting_rows(&zs.logits, seq),
            &predicting_rows(&inj.logits, seq),
        )?;
    }
    Ok(acc / seqs.len() as f64)
}

/// Drift of a trained bank on held-out class prompts: sample zero-shot
/// class sequences for the bank's own class, then measure how far the
/// injected distribution moves on them.
pub fn drift_kl(
    params: &BackboneParams,
    vocab: &Vocabulary,
    bank: &ContextBank,
    templates: &[&str],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let seqs =
        sample_class_sequences(params, vocab, bank.class_name, templates, n_samples, seed)?;
    drift_kl_on(params, Some(bank), &seqs)
}

/// Frozen-model feature of an image token list: mean of the final normed
/// hidden state over the image positions, no injection.
pub fn activation_feature(
    params: &BackboneParams,
    vocab: &Vocabulary,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    let seq = assemble(vocab, &[], tokens, 0)?;
    let mask = AttentionMask::causal(seq.len());
    let record = forward(params, &seq, &InjectionPlan::empty(), &mask)?;
    let mut feat = vec![0.0; params.config.dim];
    for p in seq.image_span.0..seq.image_span.1 {
        let row = record.final_normed.row(p);
        for (f, v) in feat.iter_mut().zip(row) {
            *f += v;
        }
    }
    let inv = 1.0 / (seq.image_span.1 - seq.image_span.0) as f64;
    for f in &mut feat {
        *f *= inv;
    }
    Ok(feat)
}

/// Best cosine match against a set of reference features.
pub fn fidelity_from_features(generated: &[f64], references: &[Vec<f64>]) -> f64 {
    assert!(!references.is_empty());
    let mut best = -1.0;
    for r in references {
        let c = math::cosine(generated, r);
        if c > best {
            best = c;
        }
    }
    best
}

/// Subject fidelity proxy: cosine between the generated image's frozen
/// feature and its nearest reference feature. Self-match is 1 up to
/// rounding; unrelated content lands well below.
pub fn fidelity_proxy(
    params: &BackboneParams,
    vocab: &Vocabulary,
    generated: &[TokenId],
    subject: &SubjectSet,
    cb: &Codebook,
) -> Result<f64> {
    if subject.references.is_empty() {
        return Err(CoarError::invalid("subject has no references"));
    }
    let gen_feat = activation_feature(params, vocab, generated)?;
    let mut ref_feats = Vec::with_capacity(subject.references.len());
    for r in &subject.references {
        let codes = quantize(r, cb)?;
        let tokens: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        ref_feats.push(activation_feature(params, vocab, &tokens)?);
    }
    Ok(fidelity_from_features(&gen_feat, &ref_feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::context::{new_bank, BankKind, InitPolicy};
    use crate::toyworld::{build_codebook, make_subject};

    fn standard_fixture() -> (BackboneParams, Vocabulary, Codebook) {
        let cfg = BackboneConfig::standard();
        let params = BackboneParams::random(&cfg, 77).unwrap();
        (params, Vocabulary::standard(), build_codebook(64, 12, 7).unwrap())
    }

    #[test]
    fn context_counts_are_exact() {
        assert_eq!(context_param_count(9, 4096), 73_728);
        assert_eq!(context_param_count(3, 64), 384);
        assert_eq!(context_param_count(1, 1), 2);
    }

    #[test]
    fn adapter_estimates_are_exact() {
        let img = lora_param_estimate(3072, 64, 48);
        let lang = lora_param_estimate(4096, 64, 32);
        assert_eq!(img, 75_497_472);
        assert_eq!(lang, 67_108_864);
        assert_eq!(img + lang, 142_606_336);
    }

    #[test]
    fn table_counts_recompute_from_their_inputs() {
        let table = reference_param_table();
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].count, context_param_count(9, 4096));
        assert_eq!(table[1].count, lora_param_estimate(3072, 64, 48));
        assert_eq!(table[2].count, lora_param_estimate(4096, 64, 32));
        assert_eq!(table[3].count, table[1].count + table[2].count);
        for row in &table {
            assert!(!row.method.is_empty() && !row.formula.is_empty());
        }
    }

    #[test]
    fn sampled_sequences_are_deterministic_and_slot_bearing() {
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("ring").unwrap();
        let templates = ["a picture of a [Class]", "the [Class] at night"];
        let a = sample_class_sequences(&params, &vocab, class, &templates, 3, 9).unwrap();
        let b = sample_class_sequences(&params, &vocab, class, &templates, 3, 9).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ids, y.ids);
        }
        for seq in &a {
            assert_eq!(seq.ctx_img_positions.len(), 1);
            assert_eq!(seq.image_span.1 - seq.image_span.0, IMAGE_TOKENS);
            assert!(seq.labels_mask[seq.image_span.0]);
        }
        // Different seeds explore different continuations.
        let c = sample_class_sequences(&params, &vocab, class, &templates, 3, 10).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.ids != y.ids));
    }

    #[test]
    fn sampling_rejects_degenerate_requests() {
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("ring").unwrap();
        assert!(sample_class_sequences(&params, &vocab, class, &[], 3, 0).is_err());
        assert!(
            sample_class_sequences(&params, &vocab, class, &["a [Class]"], 0, 0).is_err()
        );
    }

    #[test]
    fn no_injection_drifts_exactly_zero() {
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("blob").unwrap();
        let seqs =
            sample_class_sequences(&params, &vocab, class, &["a photo of a [Class]"], 2, 4)
                .unwrap();
        assert_eq!(drift_kl_on(&params, None, &seqs).unwrap(), 0.0);
    }

    #[test]
    fn bank_reproducing_frozen_rows_drifts_exactly_zero() {
        // p_i rows copied from the uninjected pass make every overwrite
        // write back the bits already there.
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("blob").unwrap();
        let seqs =
            sample_class_sequences(&params, &vocab, class, &["a photo of a [Class]"], 1, 4)
                .unwrap();
        let n = 5;
        let mut bank = new_bank(n, params.config.dim, BankKind::Subject, class, 1, InitPolicy::Zero)
            .unwrap();
        let mask = AttentionMask::causal(seqs[0].len());
        let record = forward(&params, &seqs[0], &InjectionPlan::empty(), &mask).unwrap();
        let ctx = seqs[0].ctx_img_positions[0];
        for layer in 0..n {
            bank.p_i
                .row_mut(layer)
                .copy_from_slice(record.layer_inputs[layer].row(ctx));
        }
        assert_eq!(drift_kl_on(&params, Some(&bank), &seqs).unwrap(), 0.0);
    }

    #[test]
    fn random_bank_drift_is_positive() {
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("blob").unwrap();
        let bank = new_bank(
            4,
            params.config.dim,
            BankKind::Subject,
            class,
            2,
            InitPolicy::RandomNormal,
        )
        .unwrap();
        let drift = drift_kl(
            &params,
            &vocab,
            &bank,
            &["a picture of a [Class]"],
            2,
            6,
        )
        .unwrap();
        assert!(drift >= 0.0);
        assert!(drift > 0.0, "random overwrites should move the distribution");
    }

    #[test]
    fn drift_means_over_sequences() {
        let (params, vocab, _) = standard_fixture();
        let class = vocab.word_id("cross").unwrap();
        let seqs = sample_class_sequences(
            &params,
            &vocab,
            class,
            &["a photo of a [Class]", "the [Class] in snow"],
            2,
            8,
        )
        .unwrap();
        let bank = new_bank(
            3,
            params.config.dim,
            BankKind::Subject,
            class,
            3,
            InitPolicy::RandomNormal,
        )
        .unwrap();
        let both = drift_kl_on(&params, Some(&bank), &seqs).unwrap();
        let first = drift_kl_on(&params, Some(&bank), &seqs[..1]).unwrap();
        let second = drift_kl_on(&params, Some(&bank), &seqs[1..]).unwrap();
        assert!((both - 0.5 * (first + second)).abs() < 1e-15);
        assert!(drift_kl_on(&params, Some(&bank), &[]).is_err());
    }

    #[test]
    fn fidelity_of_a_reference_with_itself_is_one() {
        let (params, vocab, cb) = standard_fixture();
        let subject = make_subject(5, &cb);
        let codes = quantize(&subject.references[0], &cb).unwrap();
        let tokens: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        let f = fidelity_proxy(&params, &vocab, &tokens, &subject, &cb).unwrap();
        assert!((f - 1.0).abs() < 1e-9);
    }

    #[test]
    fn foreign_subject_scores_below_self() {
        let (params, vocab, cb) = standard_fixture();
        let ours = make_subject(5, &cb);
        let theirs = make_subject(9, &cb);
        assert_ne!(ours.class_name, theirs.class_name, "fixture seeds must differ in class");
        let own_codes = quantize(&ours.references[0], &cb).unwrap();
        let own: Vec<TokenId> = own_codes.iter().map(|&c| vocab.image_id(c)).collect();
        let other_codes = quantize(&theirs.references[0], &cb).unwrap();
        let other: Vec<TokenId> = other_codes.iter().map(|&c| vocab.image_id(c)).collect();
        let self_f = fidelity_proxy(&params, &vocab, &own, &ours, &cb).unwrap();
        let cross_f = fidelity_proxy(&params, &vocab, &other, &ours, &cb).unwrap();
        assert!(cross_f < self_f);
    }

    #[test]
    fn fidelity_ignores_reference_order() {
        let (params, vocab, cb) = standard_fixture();
        let mut subject = make_subject(5, &cb);
        let codes = quantize(&subject.references[1], &cb).unwrap();
        let tokens: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        let a = fidelity_proxy(&params, &vocab, &tokens, &subject, &cb).unwrap();
        subject.references.reverse();
        let b = fidelity_proxy(&params, &vocab, &tokens, &subject, &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_features_score_zero() {
        let gen = vec![1.0, 0.0, 0.0];
        let refs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, -2.0]];
        assert_eq!(fidelity_from_features(&gen, &refs), 0.0);
    }
}
