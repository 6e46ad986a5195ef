//! Dependency analysis on a correlated synthetic field: pairwise
//! conditional-entropy maps and the entropy increase of parallel
//! generation under distant vs raster orders.
//!
//! ```text
//! cargo run --example entropy_maps
//! ```

use par_gen::entropy::{pairwise_entropy_map, parallel_entropy_diff, EntropyConfig};
use par_gen::grid::GridShape;
use par_gen::order::{build_order_plan, build_raster_plan};
use par_gen::render::write_heatmap;
use par_gen::synthetic::{gen_synthetic_dataset, SyntheticConfig};

fn print_map(values: &[f64], shape: GridShape) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ramp = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for y in 0..shape.h {
        let row: String = (0..shape.w)
            .map(|x| {
                let v = values[y * shape.w + x];
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                ramp[((t * 9.0).round() as usize).min(9)]
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> par_gen::Result<()> {
    let shape = GridShape::image(8, 8, 2)?;
    let data = gen_synthetic_dataset(&SyntheticConfig::correlated_field(shape, 3.0, 21), 6000)?;
    let cfg = EntropyConfig::default();
    std::fs::create_dir_all("examples-out")?;

    // Conditional entropy of every position given the token at (3, 3):
    // nearby positions are easier to predict (darker in the PPM, lower
    // characters here). The reference itself sits at the floor value;
    // clamp it to the scale of the rest for display.
    let reference = shape.flat(par_gen::grid::Coord::new(0, 3, 3));
    let mut map = pairwise_entropy_map(&data.features, reference, &cfg)?;
    let lowest_other = map
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != reference)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    map[reference] = lowest_other;
    println!("conditional entropy given position (3,3)  [low ' ' .. high '@']:");
    print_map(&map, shape);
    write_heatmap("examples-out/pairwise.ppm", &map, shape, 24)?;

    // Entropy increase when switching from one-at-a-time generation to
    // groups of four, under both orders.
    let ours = parallel_entropy_diff(&data.features, &build_order_plan(shape)?, &cfg)?;
    let raster = parallel_entropy_diff(&data.features, &build_raster_plan(shape)?, &cfg)?;
    println!("\nentropy increase from parallel grouping, distant order (mean {:.4}):", ours.mean_parallel_diff());
    print_map(&ours.diff_map(), shape);
    println!("\nentropy increase from parallel grouping, raster order (mean {:.4}):", raster.mean_parallel_diff());
    print_map(&raster.diff_map(), shape);
    write_heatmap("examples-out/diff_distant.ppm", &ours.diff_map(), shape, 24)?;
    write_heatmap("examples-out/diff_raster.ppm", &raster.diff_map(), shape, 24)?;
    println!("\nheatmaps written to examples-out/*.ppm");
    Ok(())
}
