//! Wall-clock benchmarking of the generation engine.
//!
//! Rows compare the same architecture at different region counts `m` on one
//! grid, batch size 1, median over repetitions. Step counts come straight
//! from the schedule arithmetic; the speedup column is relative to the
//! token-by-token baseline (`m = 1`).

use std::time::Instant;

use crate::decode::{generate, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::layout::build_sequence_layout;
use crate::model::{init_model, Model, ModelConfig};
use crate::order::{build_order_plan, step_count};

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub m: usize,
    pub group_size: usize,
    pub steps: usize,
    pub median_seconds: f64,
    pub tokens_per_sec: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub shape_t: usize,
    pub shape_h: usize,
    pub shape_w: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,group_size,steps,median_seconds,tokens_per_sec,speedup\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.1},{:.3}\n",
                r.m, r.group_size, r.steps, r.median_seconds, r.tokens_per_sec, r.speedup
            ));
        }
        out
    }
}

/// Builds a model per `m` (same architecture template, random weights
/// unless a trained model of matching `m` is supplied) and times
/// generation. Timing runs are strictly serialized.
pub fn bench(
    template: &ModelConfig,
    shape_thw: (usize, usize, usize),
    m_values: &[usize],
    reps: usize,
    seed: u64,
    trained: Option<&Model<f32>>,
) -> Result<BenchReport> {
    if reps == 0 || m_values.is_empty() {
        return Err(Error::BadModelConfig("need at least one rep and one m".into()));
    }
    let (t, h, w) = shape_thw;
    let mut rows = Vec::with_capacity(m_values.len());
    let mut baseline: Option<f64> = None;
    for &m in m_values {
        let grid = GridShape::new(t, h, w, m)?;
        let plan = build_order_plan(grid)?;
        let layout = build_sequence_layout(&plan);
        let owned;
        let model: &Model<f32> = match trained {
            Some(mdl) if mdl.config.grid == grid => mdl,
            _ => {
                let mut cfg = template.clone();
                cfg.grid = grid;
                cfg.max_slots = grid.token_count() + grid.group_size();
                owned = init_model(cfg, seed)?;
                &owned
            }
        };
        let sampler = SamplerConfig { seed, ..Default::default() };
        // Warmup run, then timed repetitions at batch size 1.
        generate(model, &layout, 0, &sampler)?;
        let mut times = Vec::with_capacity(reps);
        for rep in 0..reps {
            let s = SamplerConfig { seed: seed ^ (rep as u64 + 1), ..Default::default() };
            let start = Instant::now();
            let out = generate(model, &layout, 0, &s)?;
            times.push(start.elapsed().as_secs_f64());
            debug_assert_eq!(out.tokens.len(), grid.token_count());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        let steps = step_count(grid);
        if m == 1 {
            baseline = Some(median);
        }
        let speedup = baseline.map(|b| b / median).unwrap_or(f64::NAN);
        rows.push(BenchRow {
            m,
            group_size: grid.group_size(),
            steps,
            median_seconds: median,
            tokens_per_sec: grid.token_count() as f64 / median,
            speedup,
        });
    }
    Ok(BenchReport { shape_t: t, shape_h: h, shape_w: w, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_has_exact_step_columns() {
        let mut cfg = ModelConfig::desk_default();
        cfg.layers = 1;
        cfg.hidden = 32;
        cfg.heads = 2;
        cfg.vocab = 8;
        let report = bench(&cfg, (1, 8, 8), &[1, 2], 1, 3, None).unwrap();
        assert_eq!(report.rows[0].steps, 64);
        assert_eq!(report.rows[1].steps, 4 + 60 / 4);
        assert!((report.rows[0].speedup - 1.0).abs() < 1e-12);
        assert!(report.rows[1].median_seconds > 0.0);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 3);
    }
}
