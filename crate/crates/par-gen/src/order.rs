//! Non-local token ordering and group schedules.
//!
//! The generation sequence is rebuilt from the raster grid in two stages:
//! the initial token of every region of the first frame is emitted one at a
//! time (stage 1), then tokens at matching within-region offsets across all
//! regions are emitted as parallel groups of `n = m^2` (stage 2), frames in
//! temporal order and offsets in within-region raster order.
//!
//! Two baseline orders used for comparisons are built here as well: a raster
//! order with adjacent groups of `n`, and the cross-region order without the
//! sequential stage.

use crate::error::{Error, Result};
use crate::grid::{Coord, GridShape};

/// Generation stage of a scheduled step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sequential,
    Parallel,
}

/// One scheduled step: a contiguous span of sequence positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpan {
    pub start: usize,
    pub len: usize,
    pub stage: Stage,
}

impl GroupSpan {
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered list of generation steps over sequence positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchedule {
    pub steps: Vec<GroupSpan>,
}

impl GroupSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn covered_positions(&self) -> usize {
        self.steps.iter().map(|s| s.len).sum()
    }
}

/// Bijection between grid coordinates and sequence positions, with the
/// group schedule that drives decoding.
#[derive(Debug, Clone)]
pub struct OrderPlan {
    pub shape: GridShape,
    /// Sequence position -> grid coordinate.
    pub perm: Vec<Coord>,
    /// Flat raster index -> sequence position.
    pub inv_perm: Vec<usize>,
    pub schedule: GroupSchedule,
    /// Tokens per parallel step, `n = m^2`.
    pub n: usize,
    /// Tokens per region per frame, `k = (h/m) * (w/m)`.
    pub k: usize,
}

impl OrderPlan {
    /// Sequence position of a coordinate.
    pub fn seq_of(&self, c: Coord) -> Result<usize> {
        if !self.shape.contains(c) {
            return Err(Error::CoordOutOfRange {
                t: c.t,
                y: c.y,
                x: c.x,
                shape: self.shape.to_string(),
            });
        }
        Ok(self.inv_perm[self.shape.flat(c)])
    }

    /// Coordinate at a sequence position.
    pub fn coord_of(&self, seq: usize) -> Result<Coord> {
        self.perm.get(seq).copied().ok_or(Error::SeqIndexOutOfRange {
            index: seq,
            count: self.perm.len(),
        })
    }

    /// Number of sequential stage-1 steps at the head of the schedule.
    pub fn sequential_prefix(&self) -> usize {
        self.schedule
            .steps
            .iter()
            .take_while(|s| s.stage == Stage::Sequential)
            .count()
    }

    /// Rearranges a raster-major token grid into sequence order.
    pub fn tokens_to_sequence(&self, raster: &[u32]) -> Vec<u32> {
        self.perm.iter().map(|&c| raster[self.shape.flat(c)]).collect()
    }

    /// Rearranges a sequence-ordered token list back into raster order.
    pub fn sequence_to_tokens(&self, seq: &[u32]) -> Vec<u32> {
        let mut out = vec![0u32; seq.len()];
        for (pos, &c) in self.perm.iter().enumerate() {
            out[self.shape.flat(c)] = seq[pos];
        }
        out
    }
}

/// Number of generation steps: `m^2` sequential plus `(t*h*w - m^2) / m^2`
/// parallel.
pub fn step_count(shape: GridShape) -> usize {
    let n = shape.group_size();
    n + (shape.token_count() - n) / n
}

fn finish_plan(shape: GridShape, perm: Vec<Coord>, steps: Vec<GroupSpan>) -> OrderPlan {
    debug_assert_eq!(perm.len(), shape.token_count());
    let mut inv_perm = vec![usize::MAX; perm.len()];
    for (pos, &c) in perm.iter().enumerate() {
        inv_perm[shape.flat(c)] = pos;
    }
    debug_assert!(inv_perm.iter().all(|&p| p != usize::MAX));
    OrderPlan {
        shape,
        perm,
        inv_perm,
        schedule: GroupSchedule { steps },
        n: shape.group_size(),
        k: shape.tokens_per_region(),
    }
}

/// Builds the cross-region order: stage-1 region-initial tokens of the first
/// frame, then parallel groups of matching within-region offsets across all
/// regions, frames in temporal order.
pub fn build_order_plan(shape: GridShape) -> Result<OrderPlan> {
    let shape = GridShape::new(shape.t, shape.h, shape.w, shape.m)?;
    let n = shape.group_size();
    let k = shape.tokens_per_region();
    let mut perm = Vec::with_capacity(shape.token_count());
    let mut steps = Vec::with_capacity(step_count(shape));

    // Stage 1: initial token of each region of frame 0, regions in raster order.
    for region in 0..n {
        steps.push(GroupSpan { start: perm.len(), len: 1, stage: Stage::Sequential });
        perm.push(shape.region_coord(0, region, 0));
    }
    // Stage 2: one group per (frame, within-region offset); frame 0 skips
    // offset 0, later frames cover every offset.
    for t in 0..shape.t {
        let first_offset = if t == 0 { 1 } else { 0 };
        for offset in first_offset..k {
            steps.push(GroupSpan { start: perm.len(), len: n, stage: Stage::Parallel });
            for region in 0..n {
                perm.push(shape.region_coord(t, region, offset));
            }
        }
    }
    Ok(finish_plan(shape, perm, steps))
}

/// Builds the raster-scan order with adjacent groups: the first `n` raster
/// tokens one at a time, then consecutive runs of `n`. Baseline for
/// order-pattern comparisons.
pub fn build_raster_plan(shape: GridShape) -> Result<OrderPlan> {
    let shape = GridShape::new(shape.t, shape.h, shape.w, shape.m)?;
    let n = shape.group_size();
    let count = shape.token_count();
    let perm: Vec<Coord> = (0..count).map(|i| shape.unflat(i)).collect();
    let mut steps = Vec::with_capacity(step_count(shape));
    for i in 0..n {
        steps.push(GroupSpan { start: i, len: 1, stage: Stage::Sequential });
    }
    let mut start = n;
    while start < count {
        steps.push(GroupSpan { start, len: n, stage: Stage::Parallel });
        start += n;
    }
    Ok(finish_plan(shape, perm, steps))
}

/// Builds the cross-region order with no sequential stage: region-initial
/// tokens become the first parallel group. Baseline for the stage-1 ablation.
pub fn build_all_parallel_plan(shape: GridShape) -> Result<OrderPlan> {
    let shape = GridShape::new(shape.t, shape.h, shape.w, shape.m)?;
    let n = shape.group_size();
    let k = shape.tokens_per_region();
    let mut perm = Vec::with_capacity(shape.token_count());
    let mut steps = Vec::new();
    for t in 0..shape.t {
        for offset in 0..k {
            steps.push(GroupSpan { start: perm.len(), len: n, stage: Stage::Parallel });
            for region in 0..n {
                perm.push(shape.region_coord(t, region, offset));
            }
        }
    }
    Ok(finish_plan(shape, perm, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_perm(plan: &OrderPlan) -> Vec<usize> {
        plan.perm.iter().map(|&c| plan.shape.flat(c)).collect()
    }

    #[test]
    fn order_4x4_m2_matches_hand_enumeration() {
        let plan = build_order_plan(GridShape::image(4, 4, 2).unwrap()).unwrap();
        assert_eq!(
            flat_perm(&plan),
            vec![0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15]
        );
    }

    #[test]
    fn m1_is_raster_identity() {
        let plan = build_order_plan(GridShape::image(3, 5, 1).unwrap()).unwrap();
        assert_eq!(flat_perm(&plan), (0..15).collect::<Vec<_>>());
        assert!(plan.schedule.steps.iter().all(|s| s.len == 1));
        assert_eq!(plan.schedule.len(), 15);
    }

    #[test]
    fn stage1_coords_24x24_m2() {
        let plan = build_order_plan(GridShape::image(24, 24, 2).unwrap()).unwrap();
        let stage1: Vec<Coord> = plan.perm[..4].to_vec();
        assert_eq!(
            stage1,
            vec![
                Coord::new(0, 0, 0),
                Coord::new(0, 0, 12),
                Coord::new(0, 12, 0),
                Coord::new(0, 12, 12)
            ]
        );
        let parallel = plan
            .schedule
            .steps
            .iter()
            .filter(|s| s.stage == Stage::Parallel)
            .count();
        assert_eq!(parallel, 143);
        assert!(plan
            .schedule
            .steps
            .iter()
            .filter(|s| s.stage == Stage::Parallel)
            .all(|s| s.len == 4));
    }

    #[test]
    fn step_counts_match_published_values() {
        let cases = [
            ((1, 24, 24, 2), 147),
            ((1, 24, 24, 4), 51),
            ((5, 16, 16, 2), 323),
            ((5, 16, 16, 4), 95),
        ];
        for ((t, h, w, m), expect) in cases {
            assert_eq!(step_count(GridShape::new(t, h, w, m).unwrap()), expect);
        }
        // m=1 degenerates to one step per token.
        assert_eq!(step_count(GridShape::image(7, 9, 1).unwrap()), 63);
    }

    #[test]
    fn video_stage1_only_in_frame_0() {
        let plan = build_order_plan(GridShape::new(5, 16, 16, 2).unwrap()).unwrap();
        assert_eq!(plan.sequential_prefix(), 4);
        assert!(plan.perm[..4].iter().all(|c| c.t == 0));
        // Frames appear in temporal order along the sequence.
        let mut last_frame = 0;
        for c in &plan.perm {
            assert!(c.t >= last_frame);
            last_frame = c.t;
        }
        assert_eq!(plan.schedule.len(), 323);
    }

    #[test]
    fn position_map_round_trip_and_examples() {
        let plan = build_order_plan(GridShape::image(4, 4, 2).unwrap()).unwrap();
        assert_eq!(plan.coord_of(0).unwrap(), Coord::new(0, 0, 0));
        assert_eq!(plan.coord_of(4).unwrap(), Coord::new(0, 0, 1));
        for seq in 0..16 {
            let c = plan.coord_of(seq).unwrap();
            assert_eq!(plan.seq_of(c).unwrap(), seq);
        }
        assert!(plan.coord_of(16).is_err());
        assert!(plan.seq_of(Coord::new(0, 4, 0)).is_err());

        let raster = build_order_plan(GridShape::image(6, 6, 1).unwrap()).unwrap();
        for seq in 0..36 {
            assert_eq!(raster.shape.flat(raster.coord_of(seq).unwrap()), seq);
        }
    }

    #[test]
    fn groups_are_cross_region_same_offset_same_frame() {
        for shape in [
            GridShape::image(4, 4, 2).unwrap(),
            GridShape::image(8, 6, 2).unwrap(),
            GridShape::new(3, 4, 4, 2).unwrap(),
            GridShape::image(8, 8, 4).unwrap(),
        ] {
            let plan = build_order_plan(shape).unwrap();
            for span in plan.schedule.steps.iter().filter(|s| s.stage == Stage::Parallel) {
                let coords: Vec<Coord> = span.positions().map(|p| plan.perm[p]).collect();
                assert_eq!(coords.len(), plan.n);
                let offsets: Vec<usize> =
                    coords.iter().map(|&c| shape.region_offset(c)).collect();
                assert!(offsets.windows(2).all(|w| w[0] == w[1]));
                assert!(coords.windows(2).all(|w| w[0].t == w[1].t));
                let mut regions: Vec<usize> =
                    coords.iter().map(|&c| shape.region_of(c)).collect();
                regions.sort_unstable();
                assert_eq!(regions, (0..plan.n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn group_members_are_spatially_distant() {
        // Chebyshev distance within a parallel group is at least
        // min(h/m, w/m).
        for shape in [
            GridShape::image(8, 8, 2).unwrap(),
            GridShape::image(12, 8, 2).unwrap(),
            GridShape::image(8, 8, 4).unwrap(),
        ] {
            let plan = build_order_plan(shape).unwrap();
            let min_dist = shape.region_rows().min(shape.region_cols());
            for span in plan.schedule.steps.iter().filter(|s| s.stage == Stage::Parallel) {
                let coords: Vec<Coord> = span.positions().map(|p| plan.perm[p]).collect();
                for i in 0..coords.len() {
                    for j in i + 1..coords.len() {
                        assert!(
                            coords[i].chebyshev(&coords[j]) >= min_dist,
                            "{:?} vs {:?} in {shape}",
                            coords[i],
                            coords[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn within_region_raster_order_along_sequence() {
        for shape in [
            GridShape::image(6, 6, 2).unwrap(),
            GridShape::new(2, 4, 4, 2).unwrap(),
        ] {
            let plan = build_order_plan(shape).unwrap();
            // For each (frame, region), within-region offsets must increase.
            let mut last: std::collections::HashMap<(usize, usize), usize> = Default::default();
            for &c in &plan.perm {
                let key = (c.t, shape.region_of(c));
                let off = shape.region_offset(c);
                if let Some(prev) = last.get(&key) {
                    assert!(off > *prev);
                }
                last.insert(key, off);
            }
        }
    }

    #[test]
    fn schedule_covers_everything_and_matches_step_count() {
        for shape in [
            GridShape::image(4, 4, 2).unwrap(),
            GridShape::image(8, 6, 2).unwrap(),
            GridShape::new(3, 4, 4, 2).unwrap(),
            GridShape::image(5, 5, 1).unwrap(),
        ] {
            let plan = build_order_plan(shape).unwrap();
            assert_eq!(plan.schedule.len(), step_count(shape));
            assert_eq!(plan.schedule.covered_positions(), shape.token_count());
            for s in &plan.schedule.steps {
                match s.stage {
                    Stage::Sequential => assert_eq!(s.len, 1),
                    Stage::Parallel => assert_eq!(s.len, plan.n),
                }
            }
        }
    }

    #[test]
    fn raster_plan_is_identity_with_adjacent_blocks() {
        let shape = GridShape::image(4, 4, 2).unwrap();
        let plan = build_raster_plan(shape).unwrap();
        assert_eq!(flat_perm(&plan), (0..16).collect::<Vec<_>>());
        assert_eq!(plan.schedule.len(), step_count(shape));
        assert_eq!(plan.sequential_prefix(), 4);
    }

    #[test]
    fn all_parallel_plan_has_no_sequential_stage() {
        let shape = GridShape::image(4, 4, 2).unwrap();
        let plan = build_all_parallel_plan(shape).unwrap();
        assert_eq!(plan.sequential_prefix(), 0);
        assert_eq!(plan.schedule.len(), 4);
        assert_eq!(plan.schedule.covered_positions(), 16);
        // Same grouping as the standard plan, including the initial tokens
        // as group 0.
        assert_eq!(flat_perm(&plan), vec![0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15]);
    }

    #[test]
    fn rejects_indivisible_shapes() {
        assert!(build_order_plan(GridShape { t: 1, h: 5, w: 4, m: 2 }).is_err());
    }

    proptest! {
        #[test]
        fn perm_is_a_bijection(
            t in 1usize..3,
            rh in 1usize..5,
            rw in 1usize..5,
            m in 1usize..4,
        ) {
            let shape = GridShape::new(t, rh * m, rw * m, m).unwrap();
            let plan = build_order_plan(shape).unwrap();
            for seq in 0..shape.token_count() {
                prop_assert_eq!(plan.seq_of(plan.coord_of(seq).unwrap()).unwrap(), seq);
            }
            let mut seen = vec![false; shape.token_count()];
            for &c in &plan.perm {
                let f = shape.flat(c);
                prop_assert!(!seen[f]);
                seen[f] = true;
            }
        }
    }
}
