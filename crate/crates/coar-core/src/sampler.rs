//! Autoregressive image decoding with injected context, plus the
//! training-free subject–style composition path.
//!
//! Decoding rebuilds the full forward pass per emitted token; at this scale
//! a key-value cache buys nothing worth its complexity. During image
//! decoding every non-image id is hard-masked, since a model this small
//! happily emits text ids mid-image otherwise.
//!
//! Composition never touches any parameter: both banks are injected into
//! one sequence with two image slots (subject first) and the identity mask
//! keeps the two concept groups from attending to each other.

use crate::backbone::{
    build_identity_mask, forward, AttentionMask, BackboneParams, InjectionPlan,
};
use crate::context::{make_plan, BankKind, ContextBank};
use crate::error::{CoarError, Result};
use crate::math;
use crate::rng::Rng;
use crate::sequences::{tokenize_prompt, Prompt, TokenId, TokenSequence, Vocabulary};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Number of image tokens to emit.
    pub max_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::topk(0, crate::toyworld::IMAGE_TOKENS)
    }
}

impl DecodeConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, k: 1, temperature: 1.0, seed: 0, max_tokens }
    }

    pub fn topk(seed: u64, max_tokens: usize) -> Self {
        DecodeConfig { mode: DecodeMode::TopK, k: 20, temperature: 1.0, seed, max_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(CoarError::invalid("decoding zero tokens is pointless"));
        }
        if self.mode == DecodeMode::TopK {
            if self.k < 1 {
                return Err(CoarError::invalid("top-k needs k >= 1"));
            }
            if !(self.temperature > 0.0) || !self.temperature.is_finite() {
                return Err(CoarError::invalid("top-k needs a positive temperature"));
            }
        }
        Ok(())
    }
}

/// The growing decode sequence: BOS, prompt, BOI, image slots, emitted tail.
fn decode_seq(vocab: &Vocabulary, prompt: &Prompt, n_ctx: usize, tail: &[TokenId]) -> TokenSequence {
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(&prompt.tokens);
    ids.push(vocab.boi());
    let ctx_start = ids.len();
    for _ in 0..n_ctx {
        ids.push(vocab.ctx_img());
    }
    let image_start = ids.len();
    ids.extend_from_slice(tail);
    let len = ids.len();
    TokenSequence {
        ids,
        text_span: (1, 1 + prompt.tokens.len()),
        image_span: (image_start, len),
        v_positions: prompt.v_positions.iter().map(|p| p + 1).collect(),
        s_positions: prompt.s_positions.iter().map(|p| p + 1).collect(),
        ctx_img_positions: (ctx_start..ctx_start + n_ctx).collect(),
        labels_mask: vec![false; len],
    }
}

/// Pick the next image token from one logits row. Non-image ids never
/// appear: only the image range is scanned, which is the hard mask.
fn select_token(row: &[f64], vocab: &Vocabulary, dc: &DecodeConfig, rng: &mut Rng) -> TokenId {
    match dc.mode {
        DecodeMode::Greedy => {
            let mut best = vocab.image_id(0);
            let mut best_v = row[best as usize];
            for code in 1..vocab.n_image {
                let id = vocab.image_id(code);
                let v = row[id as usize];
                if v > best_v {
                    best = id;
                    best_v = v;
                }
            }
            best
        }
        DecodeMode::TopK => {
            let mut scored: Vec<(TokenId, f64)> = (0..vocab.n_image)
                .map(|code| {
                    let id = vocab.image_id(code);
                    (id, row[id as usize])
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(dc.k.min(scored.len()));
            let mut weights: Vec<f64> = scored.iter().map(|(_, v)| v / dc.temperature).collect();
            math::softmax_in_place(&mut weights);
            scored[rng.categorical(&weights)].0
        }
    }
}

fn decode(
    params: &BackboneParams,
    vocab: &Vocabulary,
    banks: &[&ContextBank],
    template: &str,
    class_name: TokenId,
    dc: &DecodeConfig,
    identity_mask: bool,
) -> Result<Vec<TokenId>> {
    dc.validate()?;
    let prompt = tokenize_prompt(vocab, template, class_name)?;
    let wants_subject = !prompt.v_positions.is_empty();
    let wants_style = !prompt.s_positions.is_empty();
    let has_subject = banks.iter().any(|b| b.kind == BankKind::Subject);
    let has_style = banks.iter().any(|b| b.kind == BankKind::Style);
    if wants_subject != has_subject || wants_style != has_style {
        return Err(CoarError::invalid(
            "prompt placeholders do not match the provided banks",
        ));
    }
    let n_ctx = banks.len();
    let prefix_len = 2 + prompt.tokens.len() + n_ctx;
    if prefix_len + dc.max_tokens > params.config.max_seq {
        return Err(CoarError::invalid(format!(
            "decode of {} tokens exceeds the {}-position window",
            dc.max_tokens, params.config.max_seq
        )));
    }
    let mut rng = Rng::substream(dc.seed, "sampler/topk");
    let mut tail: Vec<TokenId> = Vec::with_capacity(dc.max_tokens);
    for _ in 0..dc.max_tokens {
        let seq = decode_seq(vocab, &prompt, n_ctx, &tail);
        let plan = if banks.is_empty() {
            InjectionPlan::empty()
        } else {
            make_plan(banks, &seq)?
        };
        let mask = if identity_mask {
            build_identity_mask(&seq)?
        } else {
            AttentionMask::causal(seq.len())
        };
        let record = forward(params, &seq, &plan, &mask)?;
        tail.push(select_token(record.logits.row(seq.len() - 1), vocab, dc, &mut rng));
    }
    Ok(tail)
}

/// Decode image tokens for a prompt with zero, one, or two injected banks
/// under the plain causal mask.
pub fn generate(
    params: &BackboneParams,
    vocab: &Vocabulary,
    banks: &[&ContextBank],
    template: &str,
    class_name: TokenId,
    dc: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    decode(params, vocab, banks, template, class_name, dc, false)
}

/// Subject–style composition: both banks injected into a two-slot sequence
/// under the identity mask. Nothing is trained or updated anywhere.
pub fn compose(
    params: &BackboneParams,
    vocab: &Vocabulary,
    subject: &ContextBank,
    style: &ContextBank,
    template: &str,
    class_name: TokenId,
    dc: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    if subject.kind != BankKind::Subject || style.kind != BankKind::Style {
        return Err(CoarError::invalid("composition takes one subject bank and one style bank"));
    }
    if !template.contains("[Class]") {
        return Err(CoarError::invalid("composition prompt must name the class"));
    }
    decode(params, vocab, &[subject, style], template, class_name, dc, true)
}
