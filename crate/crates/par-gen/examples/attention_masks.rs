//! Sequence layout and group-wise attention masks, rendered as ASCII.
//!
//! ```text
//! cargo run --example attention_masks
//! ```

use par_gen::grid::GridShape;
use par_gen::layout::{
    build_attention_mask_with, build_sequence_layout, verify_mask, Slot, WithinGroup,
};
use par_gen::order::build_order_plan;

fn main() -> par_gen::Result<()> {
    let shape = GridShape::image(4, 4, 2)?;
    let plan = build_order_plan(shape)?;
    let layout = build_sequence_layout(&plan);

    println!("slots ({} total):", layout.slot_count());
    for (i, slot) in layout.slots.iter().enumerate() {
        let name = match slot {
            Slot::Label => "label".to_string(),
            Slot::Token(seq) => format!("v{}", seq + 1),
            Slot::Transition(k) => format!("M{k}"),
        };
        let target = layout.target_of[i]
            .map(|t| format!("predicts v{}", t + 1))
            .unwrap_or_else(|| "input only".into());
        println!("  slot {i:>2} group {} {name:<5} {target}", layout.group_of[i]);
    }

    for within in [WithinGroup::Full, WithinGroup::Causal] {
        let mask = build_attention_mask_with(&layout, within);
        println!("\nmask, {within:?} within groups (rows = queries):");
        for q in 0..mask.size {
            let row: String =
                (0..mask.size).map(|k| if mask.visible(q, k) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
        if within == WithinGroup::Full {
            let violations = verify_mask(&mask, &layout)?;
            println!("verify_mask against the group relation: {} violations", violations.len());
        }
    }
    Ok(())
}
