//! Binary PPM output for pixel grids, plus the decode-side hop from image
//! tokens back to patches.
//!
//! A 12-value patch renders as a 2x2 pixel block, values laid out as
//! `(py*2 + px)*3 + channel`, so a GRID x GRID image lands on disk as
//! 2*GRID x 2*GRID pixels. Patch values live in [0,1] by construction;
//! rendering clamps anyway so a malformed grid cannot wrap a channel.

use std::fs;
use std::path::Path;

use coar_core::toyworld::dequantize;
use coar_core::{Codebook, CoarError, PixelGrid, TokenId, Vocabulary};

const PX: usize = 2;
const CHANNELS: usize = 3;

/// Map decoded image tokens back onto a full grid of codebook patches.
/// The token list must be exactly one grid's worth of image-role tokens.
pub fn tokens_to_grid(
    vocab: &Vocabulary,
    cb: &Codebook,
    tokens: &[TokenId],
    width: usize,
    height: usize,
) -> coar_core::Result<PixelGrid> {
    if tokens.len() != width * height {
        return Err(CoarError::invalid(format!(
            "{} image tokens cannot fill a {width}x{height} grid",
            tokens.len()
        )));
    }
    let mut codes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if !vocab.is_image(t) {
            return Err(CoarError::invalid(format!("token {t} is not an image token")));
        }
        let code = vocab.image_code(t);
        if code >= cb.size {
            return Err(CoarError::invalid(format!(
                "image code {code} is outside the {}-entry codebook",
                cb.size
            )));
        }
        codes.push(code);
    }
    Ok(dequantize(&codes, width, height, cb))
}

/// Render to binary PPM (P6, 8 bits per channel).
pub fn grid_to_ppm(grid: &PixelGrid) -> coar_core::Result<Vec<u8>> {
    if grid.patch_dim() != PX * PX * CHANNELS {
        return Err(CoarError::invalid(format!(
            "patch dim {} is not renderable as {PX}x{PX} RGB pixels",
            grid.patch_dim()
        )));
    }
    let w = grid.width * PX;
    let h = grid.height * PX;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + w * h * CHANNELS, 0);
    for gy in 0..grid.height {
        for gx in 0..grid.width {
            let patch = grid.patch(gy * grid.width + gx);
            for py in 0..PX {
                for px in 0..PX {
                    for c in 0..CHANNELS {
                        let v = patch[(py * PX + px) * CHANNELS + c].clamp(0.0, 1.0);
                        let row = gy * PX + py;
                        let col = gx * PX + px;
                        out[header + (row * w + col) * CHANNELS + c] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, grid: &PixelGrid) -> coar_core::Result<()> {
    let bytes = grid_to_ppm(grid)?;
    fs::write(path, bytes).map_err(|e| CoarError::invalid(format!("write {path:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use coar_core::toyworld::{build_codebook, make_subject, quantize, GRID};

    #[test]
    fn single_patch_renders_its_four_pixels_in_order() {
        let mut patch = vec![0.0; 12];
        // One saturated channel per pixel: R, G, B, then mid gray.
        patch[0] = 1.0;
        patch[3 + 1] = 1.0;
        patch[6 + 2] = 1.0;
        patch[9] = 0.5;
        patch[10] = 0.5;
        patch[11] = 0.5;
        let grid = PixelGrid { width: 1, height: 1, patches: patch };
        let ppm = grid_to_ppm(&grid).expect("render");
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        let px = &ppm[header.len()..];
        assert_eq!(px, &[255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128]);
    }

    #[test]
    fn out_of_range_values_clamp_instead_of_wrapping() {
        let mut patch = vec![0.5; 12];
        patch[0] = -3.0;
        patch[1] = 7.0;
        let grid = PixelGrid { width: 1, height: 1, patches: patch };
        let px = &grid_to_ppm(&grid).expect("render")[b"P6\n2 2\n255\n".len()..];
        assert_eq!(px[0], 0);
        assert_eq!(px[1], 255);
    }

    #[test]
    fn reference_grids_render_at_full_size() {
        let cb = build_codebook(64, 12, 7).expect("codebook");
        let subject = make_subject(4, &cb);
        let ppm = grid_to_ppm(&subject.references[0]).expect("render");
        let header = format!("P6\n{0} {0}\n255\n", 2 * GRID).into_bytes();
        assert_eq!(&ppm[..header.len()], header.as_slice());
        assert_eq!(ppm.len(), header.len() + (2 * GRID) * (2 * GRID) * 3);
    }

    #[test]
    fn tokens_round_trip_through_the_vocab_to_centroids() {
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 7).expect("codebook");
        let subject = make_subject(4, &cb);
        let codes = quantize(&subject.references[0], &cb).expect("quantize");
        let tokens: Vec<TokenId> = codes.iter().map(|&c| vocab.image_id(c)).collect();
        let grid = tokens_to_grid(&vocab, &cb, &tokens, GRID, GRID).expect("grid");
        assert_eq!(grid, dequantize(&codes, GRID, GRID, &cb));
    }

    #[test]
    fn wrong_counts_and_roles_are_rejected() {
        let vocab = Vocabulary::standard();
        let cb = build_codebook(64, 12, 7).expect("codebook");
        let short = vec![vocab.image_id(0); 63];
        assert!(tokens_to_grid(&vocab, &cb, &short, GRID, GRID).is_err());
        let mut bad = vec![vocab.image_id(0); 64];
        bad[5] = 0; // a text token
        assert!(tokens_to_grid(&vocab, &cb, &bad, GRID, GRID).is_err());
    }

    #[test]
    fn odd_patch_dims_are_not_renderable() {
        let grid = PixelGrid { width: 2, height: 1, patches: vec![0.2; 16] };
        assert!(grid_to_ppm(&grid).is_err());
    }
}
