//! Model-facing sequence layout and attention masks.
//!
//! The input sequence is one label slot, the token slots in generation
//! order, and `n - 1` learned transition slots spliced in so that the first
//! parallel step has `n` query slots. Every input slot at position `p`
//! predicts sequence token `p` (the token that will occupy input slot
//! `p + n` in the parallel region, `p + 1` in the sequential prefix); the
//! final `n` slots predict nothing.
//!
//! Attention is bidirectional inside a group and causal across groups: a
//! query sees a key iff the key's group does not come later than its own.

use crate::error::{Error, Result};
use crate::grid::Coord;
use crate::order::OrderPlan;

/// What an input slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// The class-label slot (always first).
    Label,
    /// A visual token, identified by its sequence position.
    Token(usize),
    /// Learned transition embedding `i` (1-based, `1..=n-1`).
    Transition(usize),
}

/// Contiguous run of slot indices forming one attention group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotGroup {
    pub start: usize,
    pub len: usize,
}

impl SlotGroup {
    pub fn slots(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Coordinate assignment for slots that hold no visual token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum TransitionRope {
    /// Label and transition slots rotate by the identity (no coordinate).
    #[default]
    Identity,
    /// Transition slots inherit the grid coordinate of the token they
    /// predict; the label slot stays at the identity.
    PredictedToken,
}

/// The full input-slot sequence for one grid, with target mapping and
/// attention grouping.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub plan: OrderPlan,
    pub slots: Vec<Slot>,
    /// Input slot -> sequence position it predicts, or `None`.
    pub target_of: Vec<Option<usize>>,
    /// Ordered partition of slot indices.
    pub attn_groups: Vec<SlotGroup>,
    /// Slot index -> attention group index.
    pub group_of: Vec<usize>,
}

impl SequenceLayout {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn token_count(&self) -> usize {
        self.plan.perm.len()
    }

    pub fn group_size(&self) -> usize {
        self.plan.n
    }

    pub fn targeted_count(&self) -> usize {
        self.target_of.iter().filter(|t| t.is_some()).count()
    }

    /// Grid coordinate of each slot under the given transition policy.
    /// Slots without a coordinate rotate by the identity.
    pub fn slot_coords(&self, mode: TransitionRope) -> Vec<Option<Coord>> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Slot::Label => None,
                Slot::Token(seq) => Some(self.plan.perm[*seq]),
                Slot::Transition(_) => match mode {
                    TransitionRope::Identity => None,
                    TransitionRope::PredictedToken => {
                        self.target_of[i].map(|seq| self.plan.perm[seq])
                    }
                },
            })
            .collect()
    }

    /// Token sequence values for each slot given a raster-major grid.
    /// Label and transition slots yield `None`.
    pub fn slot_tokens(&self, sequence_tokens: &[u32]) -> Vec<Option<u32>> {
        self.slots
            .iter()
            .map(|slot| match slot {
                Slot::Token(seq) => Some(sequence_tokens[*seq]),
                _ => None,
            })
            .collect()
    }
}

/// Builds the slot sequence, target mapping, and attention grouping for a
/// plan. Plans with a sequential stage get the `[label, v1..vn, M1..M(n-1),
/// v(n+1)..]` arrangement; all-parallel plans put the transition slots
/// directly after the label so the first group still has `n` query slots.
pub fn build_sequence_layout(plan: &OrderPlan) -> SequenceLayout {
    let n = plan.n;
    let token_count = plan.perm.len();
    let seq_prefix = plan.sequential_prefix();
    debug_assert!(seq_prefix == 0 || seq_prefix == n);

    let mut slots = Vec::with_capacity(token_count + n);
    let mut attn_groups: Vec<SlotGroup> = Vec::new();

    slots.push(Slot::Label);
    if seq_prefix > 0 {
        // Label and the first n-1 token slots are singleton groups.
        attn_groups.push(SlotGroup { start: 0, len: 1 });
        for seq in 0..n {
            if seq < n - 1 {
                attn_groups.push(SlotGroup { start: slots.len(), len: 1 });
            } else {
                // v_n opens the transition group.
                attn_groups.push(SlotGroup { start: slots.len(), len: n });
            }
            slots.push(Slot::Token(seq));
        }
        for i in 1..n {
            slots.push(Slot::Transition(i));
        }
        for seq in n..token_count {
            if (seq - n) % n == 0 {
                attn_groups.push(SlotGroup { start: slots.len(), len: n });
            }
            slots.push(Slot::Token(seq));
        }
    } else {
        // No sequential stage: label plus transitions form the first group.
        attn_groups.push(SlotGroup { start: 0, len: n });
        for i in 1..n {
            slots.push(Slot::Transition(i));
        }
        for seq in 0..token_count {
            if seq % n == 0 {
                attn_groups.push(SlotGroup { start: slots.len(), len: n });
            }
            slots.push(Slot::Token(seq));
        }
    }
    debug_assert_eq!(slots.len(), token_count + n);

    // Slot p predicts sequence token p while p < K; the final n slots are
    // inputs only.
    let target_of: Vec<Option<usize>> = (0..slots.len())
        .map(|p| (p < token_count).then_some(p))
        .collect();

    let mut group_of = vec![0usize; slots.len()];
    for (g, span) in attn_groups.iter().enumerate() {
        for s in span.slots() {
            group_of[s] = g;
        }
    }

    SequenceLayout { plan: plan.clone(), slots, target_of, attn_groups, group_of }
}

/// Attention pattern inside a prediction group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum WithinGroup {
    /// Every slot of a group sees the whole group.
    #[default]
    Full,
    /// Slots of a group see only earlier slots of the group. Ablation
    /// baseline; strictly less context.
    Causal,
}

/// Boolean visibility relation over (query slot, key slot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub size: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.size + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.visible[q * self.size + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.visible[q * self.size..(q + 1) * self.size]
    }

    /// Restriction to the first `len` slots. Visibility only ever points
    /// backwards, so the restriction is self-contained.
    pub fn prefix(&self, len: usize) -> Self {
        assert!(len <= self.size);
        let mut visible = vec![false; len * len];
        for q in 0..len {
            visible[q * len..(q + 1) * len]
                .copy_from_slice(&self.visible[q * self.size..q * self.size + len]);
        }
        Self { size: len, visible }
    }

    /// Plain lower-triangular causal mask (every slot its own group).
    pub fn causal(size: usize) -> Self {
        let mut visible = vec![false; size * size];
        for q in 0..size {
            for k in 0..=q {
                visible[q * size + k] = true;
            }
        }
        Self { size, visible }
    }
}

/// Builds the group-wise mask: bidirectional within a group, full access to
/// all earlier groups, nothing later.
pub fn build_attention_mask(layout: &SequenceLayout) -> AttentionMask {
    build_attention_mask_with(layout, WithinGroup::Full)
}

/// Mask builder with a selectable within-group pattern.
pub fn build_attention_mask_with(layout: &SequenceLayout, within: WithinGroup) -> AttentionMask {
    let size = layout.slot_count();
    let mut visible = vec![false; size * size];
    for q in 0..size {
        let end = match within {
            // Visibility is a prefix: everything through the end of q's group.
            WithinGroup::Full => {
                let g = &layout.attn_groups[layout.group_of[q]];
                g.start + g.len
            }
            WithinGroup::Causal => q + 1,
        };
        for k in 0..end {
            visible[q * size + k] = true;
        }
    }
    AttentionMask { size, visible }
}

/// Recomputes the group relation pair by pair and reports every cell where
/// `mask` disagrees, as `(query, key)` pairs.
pub fn verify_mask(mask: &AttentionMask, layout: &SequenceLayout) -> Result<Vec<(usize, usize)>> {
    if mask.size != layout.slot_count() {
        return Err(Error::MaskSizeMismatch { got: mask.size, expected: layout.slot_count() });
    }
    let mut violations = Vec::new();
    for q in 0..mask.size {
        for k in 0..mask.size {
            let expect = layout.group_of[k] <= layout.group_of[q];
            if mask.visible(q, k) != expect {
                violations.push((q, k));
            }
        }
    }
    Ok(violations)
}
