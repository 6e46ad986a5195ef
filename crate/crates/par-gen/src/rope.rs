//! Multi-axis rotary position embeddings.
//!
//! Rotation angles are keyed by a token's grid coordinate, not by its slot
//! in the (reordered) sequence, so relative spatial offsets survive the
//! non-local ordering. The head dimension is split evenly across axes
//! (2 for images: y,x; 3 for video: t,y,x) and each axis applies the
//! standard rotary frequency ladder over its share of dimension pairs.

use crate::error::{Error, Result};
use crate::grid::Coord;
use crate::real::Real;

/// Precomputed sin/cos tables for one axis count and head dimension.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub head_dim: usize,
    pub axes: usize,
    /// Coordinate bound per axis (exclusive).
    pub max_coords: Vec<usize>,
    /// Pairs per axis = head_dim / (2 * axes).
    pairs_per_axis: usize,
    /// `[axis][coord * pairs_per_axis + pair]` -> (cos, sin).
    cos_sin: Vec<Vec<(f64, f64)>>,
}

impl RopeTable {
    /// Rotation angles for one axis value: `coord * base^(-2i/d_axis)` where
    /// `d_axis = head_dim / axes`.
    pub fn angle(&self, base: f64, coord: usize, pair: usize) -> f64 {
        let d_axis = (self.head_dim / self.axes) as f64;
        coord as f64 * base.powf(-2.0 * pair as f64 / d_axis)
    }

    pub fn pairs_per_axis(&self) -> usize {
        self.pairs_per_axis
    }

    fn cos_sin(&self, axis: usize, coord: usize, pair: usize) -> (f64, f64) {
        self.cos_sin[axis][coord * self.pairs_per_axis + pair]
    }
}

/// Builds a table covering coordinates `0..max_coords[axis]` per axis.
pub fn build_rope_table(
    head_dim: usize,
    axes: usize,
    max_coords: &[usize],
    base: f64,
) -> Result<RopeTable> {
    if axes == 0 || head_dim == 0 || head_dim % (2 * axes) != 0 {
        return Err(Error::BadHeadDim { head_dim, axes });
    }
    if max_coords.len() != axes {
        return Err(Error::BadHeadDim { head_dim, axes });
    }
    if base <= 1.0 {
        return Err(Error::BadModelConfig(format!("rope base must exceed 1, got {base}")));
    }
    let pairs_per_axis = head_dim / (2 * axes);
    let mut table = RopeTable {
        head_dim,
        axes,
        max_coords: max_coords.to_vec(),
        pairs_per_axis,
        cos_sin: Vec::with_capacity(axes),
    };
    for axis in 0..axes {
        let mut v = Vec::with_capacity(max_coords[axis] * pairs_per_axis);
        for coord in 0..max_coords[axis] {
            for pair in 0..pairs_per_axis {
                let a = table.angle(base, coord, pair);
                v.push((a.cos(), a.sin()));
            }
        }
        table.cos_sin.push(v);
    }
    Ok(table)
}

fn coord_components(c: Coord, axes: usize) -> [usize; 3] {
    // 2 axes: (y, x); 3 axes: (t, y, x).
    if axes == 2 {
        [c.y, c.x, 0]
    } else {
        [c.t, c.y, c.x]
    }
}

/// Rotates one head vector in place by the angles of `coord`. `None` leaves
/// the vector untouched (identity rotation).
pub fn apply_rope<T: Real>(v: &mut [T], coord: Option<Coord>, table: &RopeTable) -> Result<()> {
    if v.len() != table.head_dim {
        return Err(Error::BadVectorLen { got: v.len(), expected: table.head_dim });
    }
    let Some(c) = coord else { return Ok(()) };
    let comps = coord_components(c, table.axes);
    for axis in 0..table.axes {
        let coord = comps[axis];
        if coord >= table.max_coords[axis] {
            return Err(Error::RopeCoordOutOfRange {
                coord,
                axis,
                bound: table.max_coords[axis],
            });
        }
        let off = axis * table.pairs_per_axis * 2;
        for pair in 0..table.pairs_per_axis {
            let (cos, sin) = table.cos_sin(axis, coord, pair);
            let (cos, sin) = (T::from_f64(cos), T::from_f64(sin));
            let a = v[off + 2 * pair];
            let b = v[off + 2 * pair + 1];
            v[off + 2 * pair] = a * cos - b * sin;
            v[off + 2 * pair + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Inverse rotation; used when backpropagating through [`apply_rope`].
pub fn apply_rope_inverse<T: Real>(
    v: &mut [T],
    coord: Option<Coord>,
    table: &RopeTable,
) -> Result<()> {
    if v.len() != table.head_dim {
        return Err(Error::BadVectorLen { got: v.len(), expected: table.head_dim });
    }
    let Some(c) = coord else { return Ok(()) };
    let comps = coord_components(c, table.axes);
    for axis in 0..table.axes {
        let coord = comps[axis];
        if coord >= table.max_coords[axis] {
            return Err(Error::RopeCoordOutOfRange {
                coord,
                axis,
                bound: table.max_coords[axis],
            });
        }
        let off = axis * table.pairs_per_axis * 2;
        for pair in 0..table.pairs_per_axis {
            let (cos, sin) = table.cos_sin(axis, coord, pair);
            let (cos, sin) = (T::from_f64(cos), T::from_f64(sin));
            let a = v[off + 2 * pair];
            let b = v[off + 2 * pair + 1];
            v[off + 2 * pair] = a * cos + b * sin;
            v[off + 2 * pair + 1] = b * cos - a * sin;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }


    #[test]
    fn rejects_indivisible_head_dim() {
        assert!(build_rope_table(6, 2, &[4, 4], 10000.0).is_err());
        assert!(build_rope_table(8, 3, &[4, 4, 4], 10000.0).is_err());
        assert!(build_rope_table(12, 3, &[4, 4, 4], 10000.0).is_ok());
    }

    #[test]
    fn origin_is_identity() {
        let table = build_rope_table(8, 2, &[4, 4], 10000.0).unwrap();
        let mut v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let orig = v.clone();
        apply_rope(&mut v, Some(Coord::new(0, 0, 0)), &table).unwrap();
        assert_eq!(v, orig);
        apply_rope(&mut v, None, &table).unwrap();
        assert_eq!(v, orig);
    }

    #[test]
    fn first_axis_angles_match_the_closed_form() {
        let table = build_rope_table(8, 2, &[4, 4], 10000.0).unwrap();
        // coordinate (y=1, x=0): first-axis pair angles 1 * base^(-2i/4),
        // second-axis pairs stay at angle 0.
        for pair in 0..2 {
            let expect = 10000f64.powf(-2.0 * pair as f64 / 4.0);
            assert!((table.angle(10000.0, 1, pair) - expect).abs() < 1e-12);
            let (cos, sin) = table.cos_sin(0, 1, pair);
            assert!((cos - expect.cos()).abs() < 1e-12);
            assert!((sin - expect.sin()).abs() < 1e-12);
        }
        let mut v = vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        apply_rope(&mut v, Some(Coord::new(0, 1, 0)), &table).unwrap();
        // Second-axis half (dims 4..8) untouched for x=0.
        assert_eq!(&v[4..], &[1.0, 0.0, 1.0, 0.0]);
        assert!((v[0] - 1f64.cos()).abs() < 1e-12);
        assert!((v[1] - 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn three_axes_split_evenly() {
        let table = build_rope_table(12, 3, &[2, 2, 2], 10000.0).unwrap();
        assert_eq!(table.pairs_per_axis(), 2);
    }

    #[test]
    fn coordinate_out_of_range_is_rejected() {
        let table = build_rope_table(8, 2, &[4, 4], 10000.0).unwrap();
        let mut v = vec![0.0f64; 8];
        assert!(apply_rope(&mut v, Some(Coord::new(0, 4, 0)), &table).is_err());
    }

    #[test]
    fn relative_identity_specific_pair() {
        let table = build_rope_table(8, 2, &[8, 8], 10000.0).unwrap();
        let mut rng = Rng::seeded(7);
        let q: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
        let rot = |v: &[f64], c: Coord| {
            let mut out = v.to_vec();
            apply_rope(&mut out, Some(c), &table).unwrap();
            out
        };
        let lhs = dot(&rot(&q, Coord::new(0, 3, 5)), &rot(&k, Coord::new(0, 1, 4)));
        let rhs = dot(&rot(&q, Coord::new(0, 2, 1)), &rot(&k, Coord::new(0, 0, 0)));
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }

    #[test]
    fn inverse_undoes_rotation() {
        let table = build_rope_table(12, 3, &[3, 5, 5], 10000.0).unwrap();
        let mut rng = Rng::seeded(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..12).map(|_| rng.normal_f64()).collect();
            let c = Coord::new(
                rng.below(3) as usize,
                rng.below(5) as usize,
                rng.below(5) as usize,
            );
            let mut w = v.clone();
            apply_rope(&mut w, Some(c), &table).unwrap();
            apply_rope_inverse(&mut w, Some(c), &table).unwrap();
            for (a, b) in v.iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn norm_preserved(seed in 0u64..500) {
            let table = build_rope_table(8, 2, &[16, 16], 10000.0).unwrap();
            let mut rng = Rng::seeded(seed);
            let v: Vec<f32> = (0..8).map(|_| rng.normal_f64() as f32).collect();
            let c = Coord::new(0, rng.below(16) as usize, rng.below(16) as usize);
            let mut w = v.clone();
            apply_rope(&mut w, Some(c), &table).unwrap();
            let n0 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let n1 = w.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-6);
        }

        #[test]
        fn relative_identity_fuzzed(seed in 0u64..300) {
            let table = build_rope_table(8, 2, &[32, 32], 10000.0).unwrap();
            let mut rng = Rng::seeded(seed ^ 0x9e37);
            let q: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
            let dy = rng.below(16) as usize;
            let dx = rng.below(16) as usize;
            let (y1, x1) = (rng.below(16) as usize, rng.below(16) as usize);
            let rot = |v: &[f64], c: Coord| {
                let mut out = v.to_vec();
                apply_rope(&mut out, Some(c), &table).unwrap();
                out
            };
            let a = dot(
                &rot(&q, Coord::new(0, y1 + dy, x1 + dx)),
                &rot(&k, Coord::new(0, y1, x1)),
            );
            let b = dot(&rot(&q, Coord::new(0, dy, dx)), &rot(&k, Coord::new(0, 0, 0)));
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn table_is_keyed_by_coordinate_not_sequence_position() {
        // Rotating the same (vector, coordinate) pairs in two different
        // orders gives identical per-token results.
        let table = build_rope_table(8, 2, &[4, 4], 10000.0).unwrap();
        let mut rng = Rng::seeded(11);
        let vecs: Vec<Vec<f64>> =
            (0..16).map(|_| (0..8).map(|_| rng.normal_f64()).collect()).collect();
        let coords: Vec<Coord> =
            (0..16).map(|i| Coord::new(0, i / 4, i % 4)).collect();
        let order_a: Vec<usize> = (0..16).collect();
        let order_b: Vec<usize> = (0..16).rev().collect();
        let run = |order: &[usize]| {
            let mut out = vec![vec![0.0f64; 8]; 16];
            for &i in order {
                let mut v = vecs[i].clone();
                apply_rope(&mut v, Some(coords[i]), &table).unwrap();
                out[i] = v;
            }
            out
        };
        assert_eq!(run(&order_a), run(&order_b));
    }

    #[test]
    fn per_block_rotation_has_unit_determinant() {
        let table = build_rope_table(8, 2, &[6, 6], 10000.0).unwrap();
        for axis in 0..2 {
            for coord in 0..6 {
                for pair in 0..2 {
                    let (c, s) = table.cos_sin(axis, coord, pair);
                    assert!((c * c + s * s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
