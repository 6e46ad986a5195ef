//! Wall-clock speedup of grouped decoding at batch size 1.
//!
//! ```text
//! cargo run --example speedup_bench                  # desk-scale model
//! PAR_BENCH_BIG=1 cargo run --example speedup_bench  # weights past the cache
//! ```
//!
//! Grouped decoding pays off when each step is dominated by streaming the
//! weights: chunked steps reuse each streamed row across the whole group.
//! A model that fits in the CPU cache hides that cost, so the small
//! profile understates the speedup; the big profile (hundreds of MB of
//! weights) shows the memory-bound regime.

use par_gen::bench::bench;
use par_gen::model::ModelConfig;

fn main() -> par_gen::Result<()> {
    let big = std::env::var_os("PAR_BENCH_BIG").is_some();
    let template = if big {
        ModelConfig { layers: 8, hidden: 1024, heads: 8, vocab: 64, ..ModelConfig::desk_default() }
    } else {
        ModelConfig::desk_default()
    };
    let weight_mb = 4.0 * 16.0 * (template.hidden * template.hidden * template.layers) as f64
        / (1024.0 * 1024.0);
    println!(
        "profile: {} layers, hidden {} (~{weight_mb:.0} MB of weights), 24x24 grid, batch 1",
        template.layers, template.hidden
    );
    let report = bench(&template, (1, 24, 24), &[1, 2, 4], 3, 7, None)?;
    print!("{}", report.to_csv());
    if !big {
        println!("\n(set PAR_BENCH_BIG=1 for the memory-bound profile)");
    }
    Ok(())
}
