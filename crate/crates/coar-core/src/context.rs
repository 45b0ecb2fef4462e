//! Learnable concept state: the context bank P = {p_v, p_I}.
//!
//! A bank holds one N×D array per modality; those 2·N·D scalars are the
//! ONLY trainable state during customization. `p_I` starts as the frozen
//! model's mean image activation (the same statistic CASR later anchors
//! to); `p_v` starts as the class word's layerwise activations, with a
//! random-normal fallback kept behind a switch for ablation.
//!
//! `make_plan` turns banks plus a sequence layout into the concrete list of
//! (layer, position, vector) overwrites the backbone applies. Subject banks
//! own the first image-side slot, style banks the second; the text-side
//! entry is skipped for sequences without the matching placeholder (class
//! prior passes have no [V]).

use crate::backbone::{forward, AttentionMask, BackboneParams, InjectionPlan, PlanEntry};
use crate::error::{CoarError, Result};
use crate::mat::Mat;
use crate::rng::Rng;
use crate::sequences::{tokenize_prompt, TokenId, TokenSequence, Vocabulary};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankKind {
    Subject,
    Style,
}

impl BankKind {
    pub fn name(self) -> &'static str {
        match self {
            BankKind::Subject => "subject",
            BankKind::Style => "style",
        }
    }
}

/// How a fresh bank's arrays are filled before (or instead of) the
/// activation-based initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPolicy {
    /// Zeros; the standard path overwrites via [`ContextBank::init_from_activations`].
    Zero,
    /// Gaussian with σ = 0.02, for ablations.
    RandomNormal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBank {
    pub kind: BankKind,
    /// Insertion depth N: layers 1..=N receive this bank's vectors.
    pub n_layers: usize,
    pub dim: usize,
    pub class_name: TokenId,
    /// Text-side vectors, row i-1 targets layer i.
    pub p_v: Mat,
    /// Image-side vectors.
    pub p_i: Mat,
    /// Frozen copy of the activation statistic p_I was initialized from;
    /// the regularizer pulls p_I back toward it. Never updated.
    pub casr_anchor: Option<Mat>,
    pub seed: u64,
}

pub fn new_bank(
    n: usize,
    d: usize,
    kind: BankKind,
    class_name: TokenId,
    seed: u64,
    policy: InitPolicy,
) -> Result<ContextBank> {
    if n == 0 || d == 0 {
        return Err(CoarError::invalid("bank dimensions must be at least 1"));
    }
    let fill = |name: &str| -> Mat {
        match policy {
            InitPolicy::Zero => Mat::zeros(n, d),
            InitPolicy::RandomNormal => {
                let mut rng = Rng::substream(seed, name);
                Mat::from_vec(n, d, (0..n * d).map(|_| 0.02 * rng.gaussian()).collect())
            }
        }
    };
    Ok(ContextBank {
        kind,
        n_layers: n,
        dim: d,
        class_name,
        p_v: fill("bank/p_v"),
        p_i: fill("bank/p_i"),
        casr_anchor: None,
        seed,
    })
}

impl ContextBank {
    /// Exactly the trainable scalar count.
    pub fn param_count(&self) -> usize {
        2 * self.n_layers * self.dim
    }

    /// Standard initialization: `p_I` and the anchor from the reference-image
    /// activation means, `p_v` from the concept word's activations.
    pub fn init_from_activations(&mut self, e_anchor: &Mat, word_hidden: &Mat) -> Result<()> {
        for (name, m) in [("anchor", e_anchor), ("word activations", word_hidden)] {
            if m.rows != self.n_layers || m.cols != self.dim {
                return Err(CoarError::invalid(format!(
                    "{name} shape {}x{} does not match bank {}x{}",
                    m.rows, m.cols, self.n_layers, self.dim
                )));
            }
        }
        self.p_i = e_anchor.clone();
        self.casr_anchor = Some(e_anchor.clone());
        self.p_v = word_hidden.clone();
        Ok(())
    }

    /// Flat views over the trainable state, p_v rows then p_i rows. The
    /// optimizer walks exactly these slices and nothing else.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.p_v.data, &mut self.p_i.data]
    }

    pub fn trainable(&self) -> [&[f64]; 2] {
        [&self.p_v.data, &self.p_i.data]
    }
}

/// Frozen activations of `word` at each layer input under `template`.
/// The sequence is text-only: BOS followed by the prompt tokens.
pub fn capture_word_hidden(
    params: &BackboneParams,
    vocab: &Vocabulary,
    template: &str,
    class_name: TokenId,
    word: TokenId,
    n: usize,
) -> Result<Mat> {
    if n == 0 || n > params.config.n_layers {
        return Err(CoarError::invalid(format!(
            "capture depth {n} outside 1..={}",
            params.config.n_layers
        )));
    }
    let prompt = tokenize_prompt(vocab, template, class_name)?;
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(&prompt.tokens);
    let target = ids
        .iter()
        .position(|&t| t == word)
        .ok_or_else(|| CoarError::invalid(format!("word {word} not present in template")))?;
    let len = ids.len();
    let seq = TokenSequence {
        ids,
        text_span: (1, len),
        image_span: (len, len),
        v_positions: prompt.v_positions.iter().map(|p| p + 1).collect(),
        s_positions: prompt.s_positions.iter().map(|p| p + 1).collect(),
        ctx_img_positions: vec![],
        labels_mask: vec![false; len],
    };
    let mask = AttentionMask::causal(seq.len());
    let record = forward(params, &seq, &InjectionPlan::empty(), &mask)?;
    let mut out = Mat::zeros(n, params.config.dim);
    for layer in 0..n {
        out.row_mut(layer)
            .copy_from_slice(record.layer_inputs[layer].row(target));
    }
    Ok(out)
}

/// The class word's activations under the class-prior prompt, used to
/// initialize a subject bank's text side.
pub fn capture_class_hidden(
    params: &BackboneParams,
    vocab: &Vocabulary,
    class_name: TokenId,
    n: usize,
) -> Result<Mat> {
    capture_word_hidden(params, vocab, "a photo of a [Class]", class_name, class_name, n)
}

/// Build the overwrite list for up to two banks against a sequence layout.
/// Subject banks claim image slot 0 and the [V] position; style banks claim
/// slot 1 (slot 0 when alone) and [S]. Text entries are omitted when the
/// sequence has no matching placeholder.
pub fn make_plan(banks: &[&ContextBank], seq: &TokenSequence) -> Result<InjectionPlan> {
    if banks.is_empty() || banks.len() > 2 {
        return Err(CoarError::invalid("a plan takes one or two banks"));
    }
    if banks.len() == 2 && banks[0].kind == banks[1].kind {
        return Err(CoarError::invalid(format!(
            "two {} banks in one plan",
            banks[0].kind.name()
        )));
    }
    // Subject first, so image slots always assign subject→0, style→1.
    let mut ordered: Vec<&ContextBank> = banks.to_vec();
    ordered.sort_by_key(|b| match b.kind {
        BankKind::Subject => 0,
        BankKind::Style => 1,
    });

    let mut entries = Vec::new();
    let mut sources = Vec::new();
    for (slot, bank) in ordered.iter().enumerate() {
        let text_positions = match bank.kind {
            BankKind::Subject => &seq.v_positions,
            BankKind::Style => &seq.s_positions,
        };
        if text_positions.len() > 1 {
            return Err(CoarError::invalid(
                "multiple placeholders of one kind are not supported",
            ));
        }
        let ctx_pos = *seq.ctx_img_positions.get(slot).ok_or_else(|| {
            CoarError::invalid(format!(
                "sequence has no image context slot {slot} for the {} bank",
                bank.kind.name()
            ))
        })?;
        if let Some(&vp) = text_positions.first() {
            for i in 1..=bank.n_layers {
                entries.push(PlanEntry {
                    layer: i,
                    position: vp,
                    vector: bank.p_v.row(i - 1).to_vec(),
                });
            }
        }
        for i in 1..=bank.n_layers {
            entries.push(PlanEntry {
                layer: i,
                position: ctx_pos,
                vector: bank.p_i.row(i - 1).to_vec(),
            });
        }
        sources.push(String::from(bank.kind.name()));
    }
    Ok(InjectionPlan { entries, sources })
}
