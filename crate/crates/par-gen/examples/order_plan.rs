//! Build generation orders and inspect their schedules.
//!
//! ```text
//! cargo run --example order_plan
//! ```

use par_gen::grid::GridShape;
use par_gen::order::{build_order_plan, build_raster_plan, step_count, Stage};

fn main() -> par_gen::Result<()> {
    // The worked 4x4 example with 2x2 regions: four region-initial tokens
    // one at a time, then groups of four at matching within-region offsets.
    let shape = GridShape::image(4, 4, 2)?;
    let plan = build_order_plan(shape)?;
    println!("order for {shape} (sequence position shown at its grid cell):");
    let mut cell = vec![0usize; shape.token_count()];
    for (seq, &c) in plan.perm.iter().enumerate() {
        cell[shape.flat(c)] = seq;
    }
    for y in 0..shape.h {
        let row: Vec<String> = (0..shape.w).map(|x| format!("{:>3}", cell[y * shape.w + x])).collect();
        println!("  {}", row.join(" "));
    }
    println!("schedule:");
    for (i, span) in plan.schedule.steps.iter().enumerate() {
        let stage = match span.stage {
            Stage::Sequential => "sequential",
            Stage::Parallel => "parallel ",
        };
        let coords: Vec<String> = span
            .positions()
            .map(|p| {
                let c = plan.perm[p];
                format!("({},{})", c.y, c.x)
            })
            .collect();
        println!("  step {i:>2} {stage} {}", coords.join(" "));
    }

    // Step arithmetic on the shapes the library is typically run at.
    println!("\nstep counts (m*m tokens per parallel step):");
    for (t, h, w, m) in [(1, 24, 24, 1), (1, 24, 24, 2), (1, 24, 24, 4), (5, 16, 16, 2), (5, 16, 16, 4)] {
        let s = GridShape::new(t, h, w, m)?;
        println!(
            "  {s}: {} tokens in {} steps",
            s.token_count(),
            step_count(s)
        );
    }

    // The raster-adjacent baseline groups consecutive tokens instead.
    let raster = build_raster_plan(shape)?;
    let group: Vec<String> = raster.schedule.steps[4]
        .positions()
        .map(|p| format!("({},{})", raster.perm[p].y, raster.perm[p].x))
        .collect();
    println!("\nraster baseline, first parallel group: {}", group.join(" "));
    let ours: Vec<String> = plan.schedule.steps[4]
        .positions()
        .map(|p| format!("({},{})", plan.perm[p].y, plan.perm[p].x))
        .collect();
    println!("distant grouping, first parallel group: {}", ours.join(" "));
    Ok(())
}
