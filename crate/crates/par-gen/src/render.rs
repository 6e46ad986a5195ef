//! Binary PPM (P6) output for token grids and heatmaps.
//!
//! Video grids stack frames vertically. Token grids render as grayscale by
//! codebook position; heatmaps use a blue-white-red ramp after min-max
//! normalization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Coord, GridShape, TokenGrid};

/// Writes raw RGB pixels as a P6 file.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::DimMismatch {
            context: "ppm".into(),
            expected: (width * height * 3).to_string(),
            got: rgb.len().to_string(),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale rendering of a token grid; frames stacked top to bottom, each
/// cell scaled to `scale x scale` pixels.
pub fn token_grid_pixels(grid: &TokenGrid, vocab: usize, scale: usize) -> (usize, usize, Vec<u8>) {
    let s = grid.shape;
    let (w, h) = (s.w * scale, s.t * s.h * scale);
    let mut rgb = vec![0u8; w * h * 3];
    let denom = (vocab.max(2) - 1) as f64;
    for t in 0..s.t {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = grid.get(Coord::new(t, y, x)) as f64 / denom;
                let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                for py in 0..scale {
                    for px in 0..scale {
                        let row = (t * s.h + y) * scale + py;
                        let col = x * scale + px;
                        let o = (row * w + col) * 3;
                        rgb[o] = g;
                        rgb[o + 1] = g;
                        rgb[o + 2] = g;
                    }
                }
            }
        }
    }
    (w, h, rgb)
}

pub fn write_token_grid(
    path: impl AsRef<Path>,
    grid: &TokenGrid,
    vocab: usize,
    scale: usize,
) -> Result<()> {
    let (w, h, rgb) = token_grid_pixels(grid, vocab, scale);
    write_ppm(path, w, h, &rgb)
}

fn ramp(v: f64) -> [u8; 3] {
    // 0 -> blue, 0.5 -> white, 1 -> red.
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v * 2.0;
        (t, t, 1.0)
    } else {
        let t = (v - 0.5) * 2.0;
        (1.0, 1.0 - t, 1.0 - t)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Heatmap of per-position values (raster-major over the shape); frames
/// stack vertically.
pub fn heatmap_pixels(
    values: &[f64],
    shape: GridShape,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if values.len() != shape.token_count() {
        return Err(Error::DimMismatch {
            context: "heatmap".into(),
            expected: shape.token_count().to_string(),
            got: values.len().to_string(),
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-300 { 1.0 } else { hi - lo };
    let (w, h) = (shape.w * scale, shape.t * shape.h * scale);
    let mut rgb = vec![0u8; w * h * 3];
    for (i, &v) in values.iter().enumerate() {
        let c = shape.unflat(i);
        let px = ramp((v - lo) / span);
        for py in 0..scale {
            for pxx in 0..scale {
                let row = (c.t * shape.h + c.y) * scale + py;
                let col = c.x * scale + pxx;
                let o = (row * w + col) * 3;
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    Ok((w, h, rgb))
}

pub fn write_heatmap(
    path: impl AsRef<Path>,
    values: &[f64],
    shape: GridShape,
    scale: usize,
) -> Result<()> {
    let (w, h, rgb) = heatmap_pixels(values, shape, scale)?;
    write_ppm(path, w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let dir = std::env::temp_dir().join("par_gen_render_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let shape = GridShape::image(2, 3, 1).unwrap();
        let grid = TokenGrid::new(shape, vec![0, 1, 2, 3, 4, 5], 0).unwrap();
        write_token_grid(&path, &grid, 6, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n6 4\n255\n"));
        assert_eq!(bytes.len(), b"P6\n6 4\n255\n".len() + 6 * 4 * 3);
    }

    #[test]
    fn heatmap_normalizes_degenerate_input() {
        let shape = GridShape::image(2, 2, 1).unwrap();
        let (w, h, rgb) = heatmap_pixels(&[1.0; 4], shape, 1).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(rgb.len(), 12);
    }
}
