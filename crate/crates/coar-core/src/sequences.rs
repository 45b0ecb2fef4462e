//! Vocabulary and mixed text+image sequence assembly.
//!
//! A sequence is laid out as `BOS, text.., BOI, CTX_IMG×n, image.., EOI`.
//! The CTX_IMG slots sit directly before the first image token and are where
//! image-side context vectors get injected; `[V]`/`[S]` markers in a prompt
//! become single placeholder tokens on the text side. Loss labels live on
//! image positions only.

use crate::error::{CoarError, Result};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

pub type TokenId = usize;

/// Offsets of the eight special tokens after the text and image ranges.
const SPECIALS: usize = 8;

const WORDS: [&str; 64] = [
    // function words the prompt templates use
    "a", "photo", "of", "in", "the", "style", "on", "with", "at",
    // class names, one per shape program
    "blob", "cross", "ring", "hbar", "vbar", "checker", "diag", "frame", "dots", "tee",
    // background contexts
    "snow", "grass", "night", "water", "sand", "fog",
    // caption filler
    "picture", "image", "view", "scene", "icon", "tile", "drawing", "sketch", "print",
    "shot", "bright", "dark", "small", "large", "tiny", "huge", "plain", "fancy", "soft",
    "sharp", "red", "blue", "green", "gray", "bold", "faint", "clear", "noisy", "clean",
    "rough", "smooth", "flat", "deep", "pale", "vivid", "warm", "cool", "crisp", "mild",
];

/// Disjoint id ranges: `[0, n_text)` text, `[n_text, n_text+n_image)` image
/// codes, then the eight specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub n_text: usize,
    pub n_image: usize,
}

impl Vocabulary {
    /// The full-size vocabulary: 64 words, 64 image codes, 8 specials = 136.
    pub fn standard() -> Self {
        Vocabulary {
            n_text: 64,
            n_image: 64,
        }
    }

    /// Reduced vocabulary for small test harnesses. Words are only defined
    /// for ids that fit inside the standard word table.
    pub fn with_sizes(n_text: usize, n_image: usize) -> Result<Self> {
        if n_text == 0 || n_image == 0 {
            return Err(CoarError::invalid("vocabulary ranges must be nonempty"));
        }
        Ok(Vocabulary { n_text, n_image })
    }

    pub fn size(&self) -> usize {
        self.n_text + self.n_image + SPECIALS
    }

    pub fn bos(&self) -> TokenId {
        self.n_text + self.n_image
    }
    pub fn eos(&self) -> TokenId {
        self.bos() + 1
    }
    pub fn boi(&self) -> TokenId {
        self.bos() + 2
    }
    pub fn eoi(&self) -> TokenId {
        self.bos() + 3
    }
    pub fn placeholder_v(&self) -> TokenId {
        self.bos() + 4
    }
    pub fn placeholder_s(&self) -> TokenId {
        self.bos() + 5
    }
    pub fn ctx_img(&self) -> TokenId {
        self.bos() + 6
    }
    pub fn pad(&self) -> TokenId {
        self.bos() + 7
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        id < self.n_text
    }
    pub fn is_image(&self, id: TokenId) -> bool {
        id >= self.n_text && id < self.n_text + self.n_image
    }

    /// Token id for image code `code`.
    pub fn image_id(&self, code: usize) -> TokenId {
        debug_assert!(code < self.n_image);
        self.n_text + code
    }

    /// Image code for an image token id.
    pub fn image_code(&self, id: TokenId) -> usize {
        debug_assert!(self.is_image(id));
        id - self.n_text
    }

    pub fn word(&self, id: TokenId) -> Option<&'static str> {
        if self.is_text(id) && id < WORDS.len() {
            Some(WORDS[id])
        } else {
            None
        }
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        WORDS[..self.n_text.min(WORDS.len())]
            .iter()
            .position(|&w| w == word)
    }

    /// Human-readable role for dumps and error messages.
    pub fn role_name(&self, id: TokenId) -> &'static str {
        if self.is_text(id) {
            "text"
        } else if self.is_image(id) {
            "image"
        } else if id == self.bos() {
            "bos"
        } else if id == self.eos() {
            "eos"
        } else if id == self.boi() {
            "boi"
        } else if id == self.eoi() {
            "eoi"
        } else if id == self.placeholder_v() {
            "placeholder_v"
        } else if id == self.placeholder_s() {
            "placeholder_s"
        } else if id == self.ctx_img() {
            "ctx_img"
        } else if id == self.pad() {
            "pad"
        } else {
            "out_of_range"
        }
    }
}

/// A tokenized prompt with the recorded marker slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    /// Indices into `tokens` holding PLACEHOLDER_V.
    pub v_positions: Vec<usize>,
    /// Indices into `tokens` holding PLACEHOLDER_S.
    pub s_positions: Vec<usize>,
}

/// Turn a whitespace template into prompt tokens. `[V]` and `[S]` each became
/// one placeholder token; `[Class]` becomes `class_name`.
pub fn tokenize_prompt(vocab: &Vocabulary, template: &str, class_name: TokenId) -> Result<Prompt> {
    if !vocab.is_text(class_name) {
        return Err(CoarError::invalid(format!(
            "class_name {class_name} is not a text token"
        )));
    }
    let mut tokens = Vec::new();
    let mut v_positions = Vec::new();
    let mut s_positions = Vec::new();
    for piece in template.split_whitespace() {
        match piece {
            "[V]" => {
                v_positions.push(tokens.len());
                tokens.push(vocab.placeholder_v());
            }
            "[S]" => {
                s_positions.push(tokens.len());
                tokens.push(vocab.placeholder_s());
            }
            "[Class]" => tokens.push(class_name),
            w if w.contains('[') || w.contains(']') => {
                return Err(CoarError::invalid(format!("malformed marker {w:?}")));
            }
            w => match vocab.word_id(w) {
                Some(id) => tokens.push(id),
                None => return Err(CoarError::invalid(format!("unknown word {w:?}"))),
            },
        }
    }
    Ok(Prompt {
        tokens,
        v_positions,
        s_positions,
    })
}

/// An assembled training or decoding sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Half-open range of prompt text positions.
    pub text_span: (usize, usize),
    /// Half-open range of image token positions.
    pub image_span: (usize, usize),
    pub v_positions: Vec<usize>,
    pub s_positions: Vec<usize>,
    /// Reserved image-side context slots, subject slot first.
    pub ctx_img_positions: Vec<usize>,
    /// True exactly where next-token loss applies.
    pub labels_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions whose rows are reserved for injected context vectors.
    pub fn reserved_positions(&self) -> Vec<usize> {
        let mut out = self.v_positions.clone();
        out.extend_from_slice(&self.s_positions);
        out.extend_from_slice(&self.ctx_img_positions);
        out
    }

    /// JSON-ready (index, id, role) records.
    pub fn dump_roles(&self, vocab: &Vocabulary) -> Vec<(usize, TokenId, String)> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (i, id, vocab.role_name(id).to_string()))
            .collect()
    }
}

/// Build `BOS, text.., BOI, CTX_IMG×n_ctx_img, image.., EOI`, recording the
/// marker and context slots. Placeholder positions are recovered by scanning
/// the text tokens.
pub fn assemble(
    vocab: &Vocabulary,
    text: &[TokenId],
    image: &[TokenId],
    n_ctx_img: usize,
) -> Result<TokenSequence> {
    if n_ctx_img > 2 {
        return Err(CoarError::invalid(format!(
            "n_ctx_img must be 0, 1, or 2, got {n_ctx_img}"
        )));
    }
    if image.is_empty() {
        return Err(CoarError::invalid("image token list is empty"));
    }
    for &t in image {
        if !vocab.is_image(t) {
            return Err(CoarError::invalid(format!(
                "token {t} in image list has role {}",
                vocab.role_name(t)
            )));
        }
    }

    let l = text.len();
    let mut ids = Vec::with_capacity(1 + l + 1 + n_ctx_img + image.len() + 1);
    ids.push(vocab.bos());
    ids.extend_from_slice(text);
    ids.push(vocab.boi());
    for _ in 0..n_ctx_img {
        ids.push(vocab.ctx_img());
    }
    let image_start = ids.len();
    ids.extend_from_slice(image);
    ids.push(vocab.eoi());

    let text_span = (1, 1 + l);
    let image_span = (image_start, image_start + image.len());
    let mut v_positions = Vec::new();
    let mut s_positions = Vec::new();
    for (i, &t) in text.iter().enumerate() {
        if t == vocab.placeholder_v() {
            v_positions.push(1 + i);
        } else if t == vocab.placeholder_s() {
            s_positions.push(1 + i);
        }
    }
    let ctx_img_positions: Vec<usize> = (0..n_ctx_img).map(|k| 2 + l + k).collect();

    let mut labels_mask = vec![false; ids.len()];
    for m in labels_mask[image_span.0..image_span.1].iter_mut() {
        *m = true;
    }

    Ok(TokenSequence {
        ids,
        text_span,
        image_span,
        v_positions,
        s_positions,
        ctx_img_positions,
        labels_mask,
    })
}

/// Recover the original text and image token lists.
pub fn disassemble(seq: &TokenSequence) -> (Vec<TokenId>, Vec<TokenId>) {
    let text = seq.ids[seq.text_span.0..seq.text_span.1].to_vec();
    let image = seq.ids[seq.image_span.0..seq.image_span.1].to_vec();
    (text, image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn standard_vocab_has_136_ids_with_disjoint_roles() {
        let vocab = v();
        assert_eq!(vocab.size(), 136);
        let mut counts = std::collections::HashMap::new();
        for id in 0..vocab.size() {
            *counts.entry(vocab.role_name(id)).or_insert(0usize) += 1;
        }
        assert_eq!(counts["text"], 64);
        assert_eq!(counts["image"], 64);
        for special in [
            "bos",
            "eos",
            "boi",
            "eoi",
            "placeholder_v",
            "placeholder_s",
            "ctx_img",
            "pad",
        ] {
            assert_eq!(counts[special], 1, "{special}");
        }
    }

    #[test]
    fn subject_prompt_puts_one_placeholder_at_fourth_position() {
        let vocab = v();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class]", class).unwrap();
        assert_eq!(p.tokens.len(), 5);
        assert_eq!(p.v_positions, vec![3]);
        assert!(p.s_positions.is_empty());
        assert_eq!(p.tokens[3], vocab.placeholder_v());
        assert_eq!(p.tokens[4], class);
    }

    #[test]
    fn class_prior_prompt_has_no_placeholders() {
        let vocab = v();
        let class = vocab.word_id("cross").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of a [Class]", class).unwrap();
        assert!(p.v_positions.is_empty() && p.s_positions.is_empty());
        assert_eq!(p.tokens.len(), 5);
    }

    #[test]
    fn composed_prompt_records_both_marker_kinds() {
        let vocab = v();
        let class = vocab.word_id("tee").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class] in [S] style", class).unwrap();
        assert_eq!(p.v_positions.len(), 1);
        assert_eq!(p.s_positions.len(), 1);
    }

    #[test]
    fn unknown_word_and_malformed_marker_are_rejected() {
        let vocab = v();
        let class = vocab.word_id("blob").unwrap();
        assert!(tokenize_prompt(&vocab, "a zebra", class).is_err());
        assert!(tokenize_prompt(&vocab, "a [V]x photo", class).is_err());
        assert!(tokenize_prompt(&vocab, "a [[V]] photo", class).is_err());
    }

    fn demo_image(vocab: &Vocabulary, t: usize) -> Vec<TokenId> {
        (0..t).map(|i| vocab.image_id(i % vocab.n_image)).collect()
    }

    #[test]
    fn assembled_length_follows_the_layout() {
        let vocab = v();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class] in the snow", class).unwrap();
        assert_eq!(p.tokens.len(), 8);
        let seq = assemble(&vocab, &p.tokens, &demo_image(&vocab, 64), 1).unwrap();
        assert_eq!(seq.len(), 1 + 8 + 1 + 1 + 64 + 1);
        assert_eq!(seq.ids[0], vocab.bos());
        assert_eq!(seq.ids[9], vocab.boi());
        assert_eq!(seq.ids[10], vocab.ctx_img());
        assert_eq!(*seq.ids.last().unwrap(), vocab.eoi());
        assert_eq!(seq.ctx_img_positions, vec![10]);
        assert_eq!(seq.image_span, (11, 75));
    }

    #[test]
    fn zero_context_sequence_has_no_ctx_slots() {
        let vocab = v();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of a [Class]", class).unwrap();
        let seq = assemble(&vocab, &p.tokens, &demo_image(&vocab, 64), 0).unwrap();
        assert!(seq.ctx_img_positions.is_empty());
        assert!(!seq.ids.contains(&vocab.ctx_img()));
    }

    #[test]
    fn two_context_slots_sit_adjacent_before_the_image() {
        let vocab = v();
        let class = vocab.word_id("ring").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class] in [S] style", class).unwrap();
        let seq = assemble(&vocab, &p.tokens, &demo_image(&vocab, 64), 2).unwrap();
        assert_eq!(seq.ctx_img_positions.len(), 2);
        assert_eq!(seq.ctx_img_positions[1], seq.ctx_img_positions[0] + 1);
        assert_eq!(seq.ctx_img_positions[1] + 1, seq.image_span.0);
    }

    #[test]
    fn labels_cover_image_positions_exactly_and_skip_reserved_slots() {
        let vocab = v();
        let class = vocab.word_id("dots").unwrap();
        let p = tokenize_prompt(&vocab, "a photo of [V] [Class]", class).unwrap();
        let seq = assemble(&vocab, &p.tokens, &demo_image(&vocab, 64), 1).unwrap();
        for (i, &labeled) in seq.labels_mask.iter().enumerate() {
            let in_image = i >= seq.image_span.0 && i < seq.image_span.1;
            assert_eq!(labeled, in_image, "position {i}");
        }
        for pos in seq.reserved_positions() {
            assert!(!seq.labels_mask[pos]);
            assert!(pos < seq.image_span.0);
        }
    }

    #[test]
    fn disassemble_round_trips() {
        let vocab = v();
        let class = vocab.word_id("vbar").unwrap();
        let p = tokenize_prompt(&vocab, "a bright photo of [V] [Class]", class).unwrap();
        let image = demo_image(&vocab, 64);
        for n in 0..=2 {
            let seq = assemble(&vocab, &p.tokens, &image, n).unwrap();
            let (t, i) = disassemble(&seq);
            assert_eq!(t, p.tokens);
            assert_eq!(i, image);
        }
    }

    #[test]
    fn invalid_assemblies_are_rejected() {
        let vocab = v();
        assert!(assemble(&vocab, &[0, 1], &[], 1).is_err());
        assert!(assemble(&vocab, &[0, 1], &demo_image(&vocab, 4), 3).is_err());
        // text token smuggled into the image list
        assert!(assemble(&vocab, &[0], &[0], 1).is_err());
    }
}
