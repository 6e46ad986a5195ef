//! Token-grid geometry: shapes, coordinates, and region arithmetic.
//!
//! A token grid is `t` latent frames of `h` rows by `w` columns. Every frame
//! is tiled into `m * m` equal regions of `(h/m) x (w/m)` cells each; the
//! region grid drives the generation order built in [`crate::order`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A coordinate in a `t x h x w` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coord {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl Coord {
    pub fn new(t: usize, y: usize, x: usize) -> Self {
        Self { t, y, x }
    }

    /// Chebyshev distance over the spatial axes only.
    pub fn chebyshev(&self, other: &Coord) -> usize {
        self.y.abs_diff(other.y).max(self.x.abs_diff(other.x))
    }

    /// Euclidean distance over the spatial axes only.
    pub fn euclidean(&self, other: &Coord) -> f64 {
        let dy = self.y.abs_diff(other.y) as f64;
        let dx = self.x.abs_diff(other.x) as f64;
        (dy * dy + dx * dx).sqrt()
    }
}

/// Shape of a token grid plus the region side count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    /// Latent frame count (1 for images).
    pub t: usize,
    /// Rows per frame.
    pub h: usize,
    /// Columns per frame.
    pub w: usize,
    /// Regions per spatial axis; each frame holds `m * m` regions.
    pub m: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize, m: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::BadShape(format!("all dims must be >= 1, got {t}x{h}x{w}")));
        }
        if m == 0 {
            return Err(Error::BadShape("m must be >= 1".into()));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::ShapeNotDivisible { h, w, m });
        }
        Ok(Self { t, h, w, m })
    }

    pub fn image(h: usize, w: usize, m: usize) -> Result<Self> {
        Self::new(1, h, w, m)
    }

    pub fn token_count(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Tokens predicted per parallel step: `n = m^2`.
    pub fn group_size(&self) -> usize {
        self.m * self.m
    }

    /// Tokens per region per frame: `k = (h/m) * (w/m)`.
    pub fn tokens_per_region(&self) -> usize {
        (self.h / self.m) * (self.w / self.m)
    }

    pub fn region_rows(&self) -> usize {
        self.h / self.m
    }

    pub fn region_cols(&self) -> usize {
        self.w / self.m
    }

    /// Flat raster index of a coordinate.
    pub fn flat(&self, c: Coord) -> usize {
        (c.t * self.h + c.y) * self.w + c.x
    }

    /// Inverse of [`flat`](Self::flat).
    pub fn unflat(&self, i: usize) -> Coord {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let t = i / (self.w * self.h);
        Coord { t, y, x }
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.t < self.t && c.y < self.h && c.x < self.w
    }

    /// Region index (raster over regions) of a coordinate's spatial position.
    pub fn region_of(&self, c: Coord) -> usize {
        (c.y / self.region_rows()) * self.m + c.x / self.region_cols()
    }

    /// Within-region raster offset of a coordinate.
    pub fn region_offset(&self, c: Coord) -> usize {
        (c.y % self.region_rows()) * self.region_cols() + c.x % self.region_cols()
    }

    /// Coordinate of `offset` within `region` of frame `t`.
    pub fn region_coord(&self, t: usize, region: usize, offset: usize) -> Coord {
        let rh = self.region_rows();
        let rw = self.region_cols();
        let ry = region / self.m;
        let rx = region % self.m;
        Coord { t, y: ry * rh + offset / rw, x: rx * rw + offset % rw }
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{} (m={})", self.t, self.h, self.w, self.m)
    }
}

/// A fully populated grid of token ids with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub shape: GridShape,
    /// Raster-major token ids, length `t * h * w`.
    pub tokens: Vec<u32>,
    pub label: u32,
}

impl TokenGrid {
    pub fn new(shape: GridShape, tokens: Vec<u32>, label: u32) -> Result<Self> {
        if tokens.len() != shape.token_count() {
            return Err(Error::DimMismatch {
                context: "TokenGrid".into(),
                expected: shape.token_count().to_string(),
                got: tokens.len().to_string(),
            });
        }
        Ok(Self { shape, tokens, label })
    }

    pub fn get(&self, c: Coord) -> u32 {
        self.tokens[self.shape.flat(c)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_dims() {
        assert!(matches!(
            GridShape::new(1, 5, 4, 2),
            Err(Error::ShapeNotDivisible { h: 5, w: 4, m: 2 })
        ));
        assert!(GridShape::new(1, 4, 6, 2).is_ok());
        assert!(GridShape::new(0, 4, 4, 2).is_err());
        assert!(GridShape::new(1, 4, 4, 0).is_err());
    }

    #[test]
    fn region_round_trip() {
        let s = GridShape::new(2, 6, 4, 2).unwrap();
        for t in 0..2 {
            for y in 0..6 {
                for x in 0..4 {
                    let c = Coord::new(t, y, x);
                    let r = s.region_of(c);
                    let o = s.region_offset(c);
                    assert_eq!(s.region_coord(t, r, o), c);
                    assert_eq!(s.unflat(s.flat(c)), c);
                }
            }
        }
    }

    #[test]
    fn non_square_regions() {
        // 6x4 with m=2 gives 3x2 regions.
        let s = GridShape::new(1, 6, 4, 2).unwrap();
        assert_eq!(s.region_rows(), 3);
        assert_eq!(s.region_cols(), 2);
        assert_eq!(s.tokens_per_region(), 6);
        assert_eq!(s.region_of(Coord::new(0, 3, 1)), 2);
        assert_eq!(s.region_of(Coord::new(0, 2, 2)), 1);
    }
}
