//! Procedural multimodal data at desk scale.
//!
//! An "image" is an 8×8 grid of patches; each patch is a 12-dim vector that
//! quantizes to one of 64 codebook entries. Ten shape programs play the role
//! of object classes. Every class owns a small palette of foreground and
//! background codes, six extra codes act as background contexts (snow,
//! grass, ...), and the last eight codes are spare material for styles.
//!
//! Code budget: 10×3 fg (0..30), 10×2 bg (30..50), 6 context bg (50..56),
//! 8 spare (56..64).
//!
//! A subject is a (shape, variant) with a foreground color borrowed from a
//! DIFFERENT class's palette, so its references genuinely surprise the
//! pretrained model. References vary by ±1 toroidal translation and a couple
//! of flipped cells. Everything is a pure function of its seed.

use crate::error::{CoarError, Result};
use crate::rng::Rng;
use crate::sequences::{tokenize_prompt, TokenId, Vocabulary};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub const GRID: usize = 8;
pub const IMAGE_TOKENS: usize = GRID * GRID;
pub const PATCH_DIM: usize = 12;
pub const CODEBOOK_SIZE: usize = 64;
pub const N_CLASSES: usize = 10;
pub const N_VARIANTS: usize = 4;
/// Per-dimension amplitude of patch noise. Codebook construction keeps
/// centroids further apart than twice the worst-case noise norm, so
/// quantization of noisy renders is unambiguous.
pub const NOISE_AMP: f64 = 0.02;
const MIN_CENTROID_DIST: f64 = 0.25;

pub const CLASS_WORDS: [&str; N_CLASSES] = [
    "blob", "cross", "ring", "hbar", "vbar", "checker", "diag", "frame", "dots", "tee",
];
pub const CONTEXT_WORDS: [&str; 6] = ["snow", "grass", "night", "water", "sand", "fog"];

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub patch_dim: usize,
    /// Row-major `[size, patch_dim]`.
    pub centroids: Vec<f64>,
    pub seed: u64,
}

impl Codebook {
    #[inline]
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.patch_dim..(k + 1) * self.patch_dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major `[width·height, patch_dim]`.
    pub patches: Vec<f64>,
}

impl PixelGrid {
    pub fn patch_dim(&self) -> usize {
        self.patches.len() / (self.width * self.height)
    }

    #[inline]
    pub fn patch(&self, idx: usize) -> &[f64] {
        let p = self.patch_dim();
        &self.patches[idx * p..(idx + 1) * p]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSet {
    /// Text token id of the class word.
    pub class_name: TokenId,
    pub references: Vec<PixelGrid>,
    pub seed: u64,
    // Generator internals, kept for evaluation and debugging.
    pub class_idx: usize,
    pub variant: usize,
    pub fg_code: usize,
    pub bg_code: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleSet {
    pub style_name: String,
    pub reference: PixelGrid,
    pub seed: u64,
    /// Overlay program index (stripes, checker tint, frame tint).
    pub overlay: usize,
    /// Spare code the overlay paints with.
    pub style_code: usize,
    /// Class of the content the reference happens to show.
    pub content_class: usize,
}

/// Class palette. Fixed structurally; only centroid values vary with the
/// codebook seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSpec {
    pub name: &'static str,
    pub token: TokenId,
    pub fg_codes: [usize; 3],
    pub bg_codes: [usize; 2],
    pub n_variants: usize,
}

pub fn class_spec(idx: usize) -> ClassSpec {
    assert!(idx < N_CLASSES);
    let vocab = Vocabulary::standard();
    ClassSpec {
        name: CLASS_WORDS[idx],
        token: vocab.word_id(CLASS_WORDS[idx]).expect("class word in vocab"),
        fg_codes: [3 * idx, 3 * idx + 1, 3 * idx + 2],
        bg_codes: [30 + 2 * idx, 31 + 2 * idx],
        n_variants: N_VARIANTS,
    }
}

/// Background code for context word index (into [`CONTEXT_WORDS`]).
pub fn context_bg_code(ctx: usize) -> usize {
    assert!(ctx < CONTEXT_WORDS.len());
    50 + ctx
}

/// Spare codes styles draw from.
pub fn spare_codes() -> core::ops::Range<usize> {
    56..CODEBOOK_SIZE
}

/// Codebook plus the seed that grew it. The class table is structural, so
/// this is the whole world description.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub codebook: Codebook,
}

impl World {
    pub fn standard(seed: u64) -> Self {
        let codebook = build_codebook(CODEBOOK_SIZE, PATCH_DIM, seed)
            .expect("standard dimensions are valid");
        World { seed, codebook }
    }

    pub fn classes(&self) -> Vec<ClassSpec> {
        (0..N_CLASSES).map(class_spec).collect()
    }
}

/// Rejection-sample `k` centroids in [0.1, 0.9]^p with pairwise distance
/// at least [`MIN_CENTROID_DIST`].
pub fn build_codebook(k: usize, p: usize, seed: u64) -> Result<Codebook> {
    if k < 2 {
        return Err(CoarError::invalid("codebook needs at least 2 entries"));
    }
    if p == 0 {
        return Err(CoarError::invalid("patch dimension must be nonzero"));
    }
    let mut rng = Rng::substream(seed, "world/codebook");
    let mut centroids: Vec<f64> = Vec::with_capacity(k * p);
    let mut candidate = Vec::with_capacity(p);
    let mut attempts = 0usize;
    while centroids.len() < k * p {
        candidate.clear();
        for _ in 0..p {
            candidate.push(0.1 + 0.8 * rng.uniform());
        }
        let ok = centroids.chunks_exact(p).all(|c| {
            let d2: f64 = c
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2 >= MIN_CENTROID_DIST * MIN_CENTROID_DIST
        });
        if ok {
            centroids.extend_from_slice(&candidate);
        }
        attempts += 1;
        if attempts > 100_000 {
            return Err(CoarError::invalid(
                "codebook rejection sampling failed; k too large for spacing",
            ));
        }
    }
    Ok(Codebook {
        size: k,
        patch_dim: p,
        centroids,
        seed,
    })
}

/// Nearest centroid per patch, Euclidean, ties to the lowest id.
pub fn quantize(grid: &PixelGrid, cb: &Codebook) -> Result<Vec<usize>> {
    if grid.patch_dim() != cb.patch_dim {
        return Err(CoarError::invalid(format!(
            "patch dim {} does not match codebook dim {}",
            grid.patch_dim(),
            cb.patch_dim
        )));
    }
    let n = grid.width * grid.height;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let patch = grid.patch(i);
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for k in 0..cb.size {
            let c = cb.centroid(k);
            let mut d2 = 0.0;
            for (a, b) in patch.iter().zip(c) {
                let d = a - b;
                d2 += d * d;
            }
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Exact centroid lookup for each code.
pub fn dequantize(codes: &[usize], width: usize, height: usize, cb: &Codebook) -> PixelGrid {
    assert_eq!(codes.len(), width * height);
    let mut patches = Vec::with_capacity(codes.len() * cb.patch_dim);
    for &c in codes {
        patches.extend_from_slice(cb.centroid(c));
    }
    PixelGrid {
        width,
        height,
        patches,
    }
}

/// Rotate (x, y) by `quarter` 90° turns inside the grid.
fn rotate(quarter: usize, x: usize, y: usize) -> (usize, usize) {
    match quarter % 4 {
        0 => (x, y),
        1 => (GRID - 1 - y, x),
        2 => (GRID - 1 - x, GRID - 1 - y),
        _ => (y, GRID - 1 - x),
    }
}

/// Foreground mask for a class variant, before translation.
pub fn shape_mask(class_idx: usize, variant: usize) -> [bool; IMAGE_TOKENS] {
    let v = variant % N_VARIANTS;
    let mut mask = [false; IMAGE_TOKENS];
    let mut set = |x: usize, y: usize| mask[y * GRID + x] = true;
    match class_idx {
        // blob: diamond of radius 2
        0 => {
            let (cx, cy) = (3 + v % 2, 3 + v / 2);
            for y in 0..GRID {
                for x in 0..GRID {
                    let d = x.abs_diff(cx) + y.abs_diff(cy);
                    if d <= 2 {
                        set(x, y);
                    }
                }
            }
        }
        // cross: one full row and one full column
        1 => {
            let r = 2 + 2 * (v % 2);
            let c = 3 + v / 2;
            for i in 0..GRID {
                set(i, r);
                set(c, i);
            }
        }
        // ring: perimeter of a 5x5 box
        2 => {
            let (x0, y0) = (1 + v % 2, 1 + v / 2);
            for i in 0..5 {
                set(x0 + i, y0);
                set(x0 + i, y0 + 4);
                set(x0, y0 + i);
                set(x0 + 4, y0 + i);
            }
        }
        // hbar: three full rows
        3 => {
            let r = 1 + v;
            for y in r..r + 3 {
                for x in 0..GRID {
                    set(x, y);
                }
            }
        }
        // vbar: three full columns
        4 => {
            let c = 1 + v;
            for x in c..c + 3 {
                for y in 0..GRID {
                    set(x, y);
                }
            }
        }
        // checker: fine or coarse parity pattern
        5 => {
            for y in 0..GRID {
                for x in 0..GRID {
                    let on = if v < 2 {
                        (x + y) % 2 == v
                    } else {
                        (x / 2 + y / 2) % 2 == v % 2
                    };
                    if on {
                        set(x, y);
                    }
                }
            }
        }
        // diag: thick diagonal band, both orientations
        6 => {
            for y in 0..GRID {
                for x in 0..GRID {
                    let yy = if v % 2 == 0 { y } else { GRID - 1 - y };
                    if x.abs_diff(yy) <= 1 + v / 2 {
                        set(x, y);
                    }
                }
            }
        }
        // frame: border ring, optionally inset or cornerless
        7 => {
            let inset = v / 2;
            let lo = inset;
            let hi = GRID - 1 - inset;
            for i in lo..=hi {
                set(i, lo);
                set(i, hi);
                set(lo, i);
                set(hi, i);
            }
            if v % 2 == 1 {
                for &(x, y) in &[(lo, lo), (lo, hi), (hi, lo), (hi, hi)] {
                    mask[y * GRID + x] = false;
                }
            }
        }
        // dots: four 2x2 blocks
        8 => {
            let (ox, oy) = (v % 2, v / 2);
            for &(bx, by) in &[(1, 1), (1, 5), (5, 1), (5, 5)] {
                for dy in 0..2 {
                    for dx in 0..2 {
                        set(bx + ox + dx, by + oy + dy);
                    }
                }
            }
        }
        // tee: top bar plus center stem, rotated by variant
        9 => {
            for x in 0..GRID {
                let (rx, ry) = rotate(v, x, 1);
                set(rx, ry);
            }
            for y in 2..7 {
                for x in 3..5 {
                    let (rx, ry) = rotate(v, x, y);
                    set(rx, ry);
                }
            }
        }
        _ => panic!("class index {class_idx} out of range"),
    }
    mask
}

/// Code grid for a rendered class image: shape mask translated toroidally,
/// fg where masked, bg elsewhere.
pub fn render_codes(
    class_idx: usize,
    variant: usize,
    fg_code: usize,
    bg_code: usize,
    dx: i64,
    dy: i64,
) -> Vec<usize> {
    let mask = shape_mask(class_idx, variant);
    let g = GRID as i64;
    let mut codes = Vec::with_capacity(IMAGE_TOKENS);
    for y in 0..g {
        for x in 0..g {
            // source cell that lands here after translating by (dx, dy)
            let sx = (x - dx).rem_euclid(g) as usize;
            let sy = (y - dy).rem_euclid(g) as usize;
            codes.push(if mask[sy * GRID + sx] { fg_code } else { bg_code });
        }
    }
    codes
}

/// Dequantize plus per-dimension uniform noise in [-amp, amp], clamped to
/// the unit interval. Centroids live in [0.1, 0.9], so the clamp never fires
/// for the standard amplitude.
pub fn codes_to_grid(cb: &Codebook, codes: &[usize], amp: f64, rng: &mut Rng) -> PixelGrid {
    let mut grid = dequantize(codes, GRID, GRID, cb);
    if amp > 0.0 {
        for v in &mut grid.patches {
            *v = (*v + amp * (2.0 * rng.uniform() - 1.0)).clamp(0.0, 1.0);
        }
    }
    grid
}

/// 3 to 5 reference renders of one procedural identity. The foreground code
/// comes from a different class's palette.
pub fn make_subject(seed: u64, cb: &Codebook) -> SubjectSet {
    let mut rng = Rng::substream(seed, "world/subject");
    let class_idx = rng.below(N_CLASSES);
    let variant = rng.below(N_VARIANTS);
    let donor = (class_idx + 1 + rng.below(N_CLASSES - 1)) % N_CLASSES;
    let fg_code = class_spec(donor).fg_codes[rng.below(3)];
    let bg_code = class_spec(class_idx).bg_codes[rng.below(2)];
    let n_refs = 3 + rng.below(3);
    let mut references = Vec::with_capacity(n_refs);
    for _ in 0..n_refs {
        let dx = rng.between(-1, 1);
        let dy = rng.between(-1, 1);
        let mut codes = render_codes(class_idx, variant, fg_code, bg_code, dx, dy);
        for _ in 0..2 {
            let cell = rng.below(IMAGE_TOKENS);
            codes[cell] = rng.below(cb.size);
        }
        references.push(codes_to_grid(cb, &codes, NOISE_AMP, &mut rng));
    }
    SubjectSet {
        class_name: class_spec(class_idx).token,
        references,
        seed,
        class_idx,
        variant,
        fg_code,
        bg_code,
    }
}

/// One reference image defining a palette/texture overlay.
pub fn make_style(seed: u64, cb: &Codebook) -> StyleSet {
    let mut rng = Rng::substream(seed, "world/style");
    let overlay = rng.below(3);
    let style_code = 56 + rng.below(CODEBOOK_SIZE - 56);
    let content_class = rng.below(N_CLASSES);
    let variant = rng.below(N_VARIANTS);
    let spec = class_spec(content_class);
    let fg = spec.fg_codes[rng.below(3)];
    let bg = spec.bg_codes[rng.below(2)];
    let mut codes = render_codes(content_class, variant, fg, bg, 0, 0);
    apply_style_overlay(&mut codes, overlay, style_code, bg);
    let reference = codes_to_grid(cb, &codes, NOISE_AMP, &mut rng);
    let overlay_name = ["stripes", "weave", "border"][overlay];
    StyleSet {
        style_name: format!("{overlay_name}-{style_code}"),
        reference,
        seed,
        overlay,
        style_code,
        content_class,
    }
}

/// Paint the overlay onto background cells only, so the content stays
/// recognizable underneath the style.
pub fn apply_style_overlay(codes: &mut [usize], overlay: usize, style_code: usize, bg_code: usize) {
    for y in 0..GRID {
        for x in 0..GRID {
            let idx = y * GRID + x;
            if codes[idx] != bg_code {
                continue;
            }
            let hit = match overlay {
                0 => y % 2 == 0,
                1 => (x + y) % 2 == 0,
                _ => x == 0 || y == 0 || x == GRID - 1 || y == GRID - 1,
            };
            if hit {
                codes[idx] = style_code;
            }
        }
    }
}

/// Caption+image pairs covering every class, with occasional context
/// backgrounds and a sprinkle of off-palette cells.
pub fn make_pretrain_corpus(
    seed: u64,
    n: usize,
    cb: &Codebook,
) -> Result<Vec<(Vec<TokenId>, PixelGrid)>> {
    if n == 0 {
        return Err(CoarError::invalid("corpus size must be at least 1"));
    }
    let vocab = Vocabulary::standard();
    let mut rng = Rng::substream(seed, "world/corpus");
    let mut class_order: Vec<usize> = (0..n).map(|i| i % N_CLASSES).collect();
    rng.shuffle(&mut class_order);

    let mut out = Vec::with_capacity(n);
    for &class_idx in &class_order {
        let spec = class_spec(class_idx);
        let variant = rng.below(spec.n_variants);
        let fg = spec.fg_codes[rng.below(3)];
        let own_bg = spec.bg_codes[rng.below(2)];
        let ctx = if rng.uniform() < 0.35 {
            Some(rng.below(CONTEXT_WORDS.len()))
        } else {
            None
        };
        let bg = ctx.map(context_bg_code).unwrap_or(own_bg);
        let dx = rng.between(-1, 1);
        let dy = rng.between(-1, 1);
        let mut codes = render_codes(class_idx, variant, fg, bg, dx, dy);
        for code in codes.iter_mut() {
            if rng.uniform() < 0.05 {
                *code = rng.below(cb.size);
            }
        }
        let grid = codes_to_grid(cb, &codes, NOISE_AMP, &mut rng);
        let template = caption_template(&mut rng, ctx);
        let prompt = tokenize_prompt(&vocab, &template, spec.token)?;
        out.push((prompt.tokens, grid));
    }
    Ok(out)
}

const ADJECTIVES: [&str; 12] = [
    "bright", "dark", "small", "large", "plain", "soft", "sharp", "bold", "faint", "clear",
    "smooth", "pale",
];
const NOUNS: [&str; 6] = ["picture", "image", "view", "icon", "tile", "print"];

/// Captions come in lengths 5, 8, and 10 and mention the context word when
/// one is active.
fn caption_template(rng: &mut Rng, ctx: Option<usize>) -> String {
    let adj = ADJECTIVES[rng.below(ADJECTIVES.len())];
    let adj2 = ADJECTIVES[rng.below(ADJECTIVES.len())];
    let noun = NOUNS[rng.below(NOUNS.len())];
    let noun2 = NOUNS[rng.below(NOUNS.len())];
    let len_pick = rng.below(3);
    match (ctx, len_pick) {
        (Some(c), 0) => format!("a [Class] in the {}", CONTEXT_WORDS[c]),
        (Some(c), 1) => format!("a photo of a [Class] in the {}", CONTEXT_WORDS[c]),
        (Some(c), _) => format!(
            "a {adj} photo of a {adj2} [Class] in the {}",
            CONTEXT_WORDS[c]
        ),
        (None, 0) => String::from("a photo of a [Class]"),
        (None, 1) => format!("a {adj} photo of a {adj2} [Class] {noun}"),
        (None, _) => format!("the photo of a {adj} [Class] {noun} with {adj2} {noun2}"),
    }
}
