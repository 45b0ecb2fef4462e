//! Deterministic quality judges shared by the command line and the
//! acceptance gate.
//!
//! Two notions of agreement:
//! * positional match, the fraction of grid cells holding the same code,
//!   used against a subject's own references;
//! * shape classification, which fits every class mask (all variants, all
//!   translations the corpus uses) over a decoded grid and scores how well
//!   the cells split into one inside code and one outside code. It never
//!   looks at which codes, so palette swaps and context backgrounds do not
//!   fool it.

use coar_core::sampler::generate;
use coar_core::toyworld::{
    quantize, render_codes, CLASS_WORDS, GRID, IMAGE_TOKENS, N_CLASSES, N_VARIANTS,
};
use coar_core::{BackboneParams, CoarError, Codebook, DecodeConfig, PixelGrid, TokenId, Vocabulary};

/// Fraction of positions where the two code grids agree.
pub fn positional_match(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "grids must be the same size");
    assert!(!a.is_empty());
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / a.len() as f64
}

/// Best positional match between a decoded image and any one reference.
pub fn best_reference_match(
    vocab: &Vocabulary,
    cb: &Codebook,
    decoded: &[TokenId],
    references: &[PixelGrid],
) -> coar_core::Result<f64> {
    if references.is_empty() {
        return Err(CoarError::invalid("no references to match against"));
    }
    let codes = decoded_codes(vocab, decoded)?;
    let mut best = 0.0f64;
    for r in references {
        let ref_codes = quantize(r, cb)?;
        if ref_codes.len() != codes.len() {
            return Err(CoarError::invalid("reference grid size mismatch"));
        }
        best = best.max(positional_match(&codes, &ref_codes));
    }
    Ok(best)
}

fn decoded_codes(vocab: &Vocabulary, decoded: &[TokenId]) -> coar_core::Result<Vec<usize>> {
    decoded
        .iter()
        .map(|&t| {
            if vocab.is_image(t) {
                Ok(vocab.image_code(t))
            } else {
                Err(CoarError::invalid(format!("token {t} is not an image token")))
            }
        })
        .collect()
}

/// How well one mask explains the grid: cells inside the mask should share
/// one code and cells outside another, and the two must differ. Returns the
/// explained fraction, 0 when the grid is flat under this mask.
fn mask_fit(codes: &[usize], pattern: &[usize]) -> f64 {
    let max_code = codes.iter().copied().max().unwrap_or(0);
    let mut in_counts = vec![0usize; max_code + 1];
    let mut out_counts = vec![0usize; max_code + 1];
    for (&c, &p) in codes.iter().zip(pattern) {
        if p == 1 {
            in_counts[c] += 1;
        } else {
            out_counts[c] += 1;
        }
    }
    let argmax = |counts: &[usize]| -> (usize, usize) {
        let mut best = (0usize, 0usize);
        for (code, &n) in counts.iter().enumerate() {
            if n > best.1 {
                best = (code, n);
            }
        }
        best
    };
    let (mode_in, hits_in) = argmax(&in_counts);
    let (mode_out, hits_out) = argmax(&out_counts);
    if mode_in == mode_out {
        return 0.0;
    }
    (hits_in + hits_out) as f64 / codes.len() as f64
}

/// Nearest-shape classification over every class, variant, and the one-cell
/// translations the corpus generator uses. Returns the winning class and
/// its fit; ties go to the lowest class index.
pub fn classify_shape(codes: &[usize]) -> (usize, f64) {
    assert_eq!(codes.len(), IMAGE_TOKENS, "expected a full {GRID}x{GRID} grid");
    let mut best = (0usize, f64::MIN);
    for class_idx in 0..N_CLASSES {
        for variant in 0..N_VARIANTS {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let pattern = render_codes(class_idx, variant, 1, 0, dx, dy);
                    let fit = mask_fit(codes, &pattern);
                    if fit > best.1 {
                        best = (class_idx, fit);
                    }
                }
            }
        }
    }
    best
}

/// Greedy zero-shot decode per class; a class counts as consistent when the
/// shape classifier picks it back out with a majority fit. Returns the
/// consistent fraction and the per-class (predicted, fit) table.
pub fn class_consistency(
    params: &BackboneParams,
    vocab: &Vocabulary,
) -> coar_core::Result<(f64, Vec<(usize, f64)>)> {
    let dc = DecodeConfig::greedy(IMAGE_TOKENS);
    let mut table = Vec::with_capacity(N_CLASSES);
    let mut consistent = 0usize;
    for (class_idx, word) in CLASS_WORDS.iter().enumerate() {
        let class = vocab
            .word_id(word)
            .ok_or_else(|| CoarError::invalid("class word missing from vocabulary"))?;
        let tokens = generate(params, vocab, &[], "a photo of a [Class]", class, &dc)?;
        let codes = decoded_codes(vocab, &tokens)?;
        let (predicted, fit) = classify_shape(&codes);
        if predicted == class_idx && fit > 0.5 {
            consistent += 1;
        }
        table.push((predicted, fit));
    }
    Ok((consistent as f64 / N_CLASSES as f64, table))
}
