//! Conditional-entropy dependency analysis.
//!
//! Token dependencies are probed through regression residuals: predict a
//! target token's continuous feature from a conditioning set with ridge
//! least squares, take the residual covariance, and bound the conditional
//! entropy by the Gaussian maximum-entropy value
//! `0.5 * log((2*pi*e)^d * |Sigma|)`. The bound is a proxy for trends, not
//! an exact entropy. Two analyses are built on it: per-position maps of
//! `H(v_i | v_j)` against a reference position, and the per-position
//! entropy increase when switching from one-token-at-a-time generation to
//! grouped parallel generation under a given order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Coord, GridShape};
use crate::linalg::{cholesky_in_place, cholesky_solve, sym_eigenvalues};
use crate::order::{OrderPlan, Stage};

/// Continuous per-position features for a set of samples
/// (`samples x positions x dim`, row-major).
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub samples: usize,
    pub positions: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(samples: usize, positions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 || positions == 0 || dim == 0 {
            return Err(Error::InsufficientSamples("empty feature grid".into()));
        }
        if data.len() != samples * positions * dim {
            return Err(Error::DimMismatch {
                context: "FeatureGrid".into(),
                expected: (samples * positions * dim).to_string(),
                got: data.len().to_string(),
            });
        }
        Ok(Self { samples, positions, dim, data })
    }

    pub fn feature(&self, sample: usize, pos: usize) -> &[f64] {
        let o = (sample * self.positions + pos) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Stacks the features of `positions` into an `samples x (|positions| * dim)`
    /// design matrix.
    pub fn design(&self, positions: &[usize]) -> Vec<f64> {
        let cols = positions.len() * self.dim;
        let mut out = vec![0.0f64; self.samples * cols];
        for s in 0..self.samples {
            for (pi, &p) in positions.iter().enumerate() {
                out[s * cols + pi * self.dim..s * cols + (pi + 1) * self.dim]
                    .copy_from_slice(self.feature(s, p));
            }
        }
        out
    }

    /// Reorders positions; used for equivariance checks.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.positions {
            return Err(Error::DimMismatch {
                context: "permutation".into(),
                expected: self.positions.to_string(),
                got: perm.len().to_string(),
            });
        }
        let mut data = vec![0.0; self.data.len()];
        for s in 0..self.samples {
            for (new_pos, &old_pos) in perm.iter().enumerate() {
                let src = (s * self.positions + old_pos) * self.dim;
                let dst = (s * self.positions + new_pos) * self.dim;
                data[dst..dst + self.dim].copy_from_slice(&self.data[src..src + self.dim]);
            }
        }
        Self::new(self.samples, self.positions, self.dim, data)
    }
}

/// Fitted ridge predictor from a conditioning set to a target.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    /// `cond_dim x target_dim` coefficients (centered variables).
    pub weights: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub ridge: f64,
}

/// Result of [`fit_residuals`]: the predictor and its training residuals.
#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub model: ResidualModel,
    /// `samples x target_dim`, mean-centered by construction.
    pub residuals: Vec<f64>,
}

/// Least-squares fit of `targets ~ conditioning` with ridge strength
/// `ridge`, both centered; returns the residual matrix.
pub fn fit_residuals(
    conditioning: &[f64],
    targets: &[f64],
    samples: usize,
    cond_dim: usize,
    target_dim: usize,
    ridge: f64,
) -> Result<ResidualFit> {
    if samples == 0
        || conditioning.len() != samples * cond_dim
        || targets.len() != samples * target_dim
        || target_dim == 0
    {
        return Err(Error::DimMismatch {
            context: "fit_residuals".into(),
            expected: format!("{samples}x{cond_dim} and {samples}x{target_dim}"),
            got: format!("{} and {}", conditioning.len(), targets.len()),
        });
    }
    if samples <= cond_dim + target_dim {
        return Err(Error::IllPosed { samples, dims: cond_dim + target_dim });
    }
    if ridge < 0.0 {
        return Err(Error::BadModelConfig("ridge must be >= 0".into()));
    }

    let x_mean: Vec<f64> = (0..cond_dim)
        .map(|j| (0..samples).map(|s| conditioning[s * cond_dim + j]).sum::<f64>() / samples as f64)
        .collect();
    let y_mean: Vec<f64> = (0..target_dim)
        .map(|j| (0..samples).map(|s| targets[s * target_dim + j]).sum::<f64>() / samples as f64)
        .collect();

    let mut weights = vec![0.0f64; cond_dim * target_dim];
    if cond_dim > 0 {
        // Normal equations on centered data: (Xc^T Xc + ridge I) W = Xc^T Yc.
        let mut gram = vec![0.0f64; cond_dim * cond_dim];
        for s in 0..samples {
            for i in 0..cond_dim {
                let xi = conditioning[s * cond_dim + i] - x_mean[i];
                for j in 0..=i {
                    gram[i * cond_dim + j] += xi * (conditioning[s * cond_dim + j] - x_mean[j]);
                }
            }
        }
        for i in 0..cond_dim {
            for j in i + 1..cond_dim {
                gram[i * cond_dim + j] = gram[j * cond_dim + i];
            }
            gram[i * cond_dim + i] += ridge;
        }
        let mut rhs = vec![0.0f64; cond_dim * target_dim];
        for s in 0..samples {
            for i in 0..cond_dim {
                let xi = conditioning[s * cond_dim + i] - x_mean[i];
                for j in 0..target_dim {
                    rhs[i * target_dim + j] += xi * (targets[s * target_dim + j] - y_mean[j]);
                }
            }
        }
        // Scale-aware pivot tolerance for the rank check.
        let scale = (0..cond_dim).map(|i| gram[i * cond_dim + i]).fold(0.0f64, f64::max);
        let tol = scale * 1e-12;
        if !cholesky_in_place(&mut gram, cond_dim, tol) {
            return Err(Error::RankDeficient);
        }
        let mut col = vec![0.0f64; cond_dim];
        for j in 0..target_dim {
            for i in 0..cond_dim {
                col[i] = rhs[i * target_dim + j];
            }
            cholesky_solve(&gram, cond_dim, &mut col);
            for i in 0..cond_dim {
                weights[i * target_dim + j] = col[i];
            }
        }
    }

    let mut residuals = vec![0.0f64; samples * target_dim];
    for s in 0..samples {
        for j in 0..target_dim {
            let mut pred = 0.0;
            for i in 0..cond_dim {
                pred += (conditioning[s * cond_dim + i] - x_mean[i]) * weights[i * target_dim + j];
            }
            residuals[s * target_dim + j] = targets[s * target_dim + j] - y_mean[j] - pred;
        }
    }
    Ok(ResidualFit { model: ResidualModel { weights, x_mean, y_mean, ridge }, residuals })
}

/// Gaussian maximum-entropy bound from a residual matrix:
/// `0.5 * sum_i ln(2 pi e * max(lambda_i, floor))` over the eigenvalues of
/// the sample covariance.
pub fn entropy_upper_bound(residuals: &[f64], target_dim: usize, floor: f64) -> Result<f64> {
    if residuals.is_empty() || target_dim == 0 || residuals.len() % target_dim != 0 {
        return Err(Error::InsufficientSamples("empty residual matrix".into()));
    }
    let m = residuals.len() / target_dim;
    let d = target_dim;
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..m).map(|s| residuals[s * d + j]).sum::<f64>() / m as f64)
        .collect();
    let denom = (m.max(2) - 1) as f64;
    let mut cov = vec![0.0f64; d * d];
    for s in 0..m {
        for i in 0..d {
            let ri = residuals[s * d + i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += ri * (residuals[s * d + j] - mean[j]) / denom;
            }
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let eig = sym_eigenvalues(&cov, d);
    let two_pi_e = std::f64::consts::TAU * std::f64::consts::E;
    Ok(0.5 * eig.iter().map(|&l| (two_pi_e * l.max(floor)).ln()).sum::<f64>())
}

/// The bound's value for an exactly-predicted target (all eigenvalues at
/// the floor).
pub fn floor_entropy(target_dim: usize, floor: f64) -> f64 {
    let two_pi_e = std::f64::consts::TAU * std::f64::consts::E;
    0.5 * target_dim as f64 * (two_pi_e * floor).ln()
}

/// Analysis knobs.
#[derive(Debug, Clone)]
pub struct EntropyConfig {
    pub ridge: f64,
    /// Eigenvalue floor for the log-determinant.
    pub floor: f64,
    /// Maximum conditioning positions; the spatially nearest prior tokens
    /// are kept.
    pub cap_positions: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { ridge: 1e-6, floor: 1e-9, cap_positions: 32 }
    }
}

/// `H(v_i | v_j)` for every position `i` against the reference `j`; the
/// entry at `j` itself sits at the floor value.
pub fn pairwise_entropy_map(
    data: &FeatureGrid,
    reference: usize,
    cfg: &EntropyConfig,
) -> Result<Vec<f64>> {
    if reference >= data.positions {
        return Err(Error::SeqIndexOutOfRange { index: reference, count: data.positions });
    }
    let d = data.dim;
    if data.samples <= 2 * d {
        return Err(Error::InsufficientSamples(format!(
            "{} samples cannot support a {d}-dim conditional fit",
            data.samples
        )));
    }
    let x = data.design(&[reference]);
    (0..data.positions)
        .into_par_iter()
        .map(|i| {
            if i == reference {
                return Ok(floor_entropy(d, cfg.floor));
            }
            let y = data.design(&[i]);
            let fit = fit_residuals(&x, &y, data.samples, d, d, cfg.ridge)?;
            entropy_upper_bound(&fit.residuals, d, cfg.floor)
        })
        .collect()
}

/// Per-position entropy bounds for one generation order.
#[derive(Debug, Clone)]
pub struct PositionEntropy {
    /// Index in the generation sequence.
    pub seq: usize,
    pub coord: Coord,
    pub stage: Stage,
    /// Bound given only completed earlier steps (parallel conditioning).
    pub h_parallel: f64,
    /// Bound given earlier steps plus same-step earlier tokens (sequential
    /// conditioning).
    pub h_sequential: f64,
    /// `h_parallel - h_sequential`; zero for sequential-stage positions.
    pub diff: f64,
    pub cond_positions: usize,
}

/// Full sequential-vs-parallel comparison for one order.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub shape: GridShape,
    pub group_size: usize,
    pub feature_dim: usize,
    pub samples: usize,
    pub ridge: f64,
    pub floor: f64,
    pub cap_positions: usize,
    /// Estimation choices not pinned by the analysis itself.
    pub predictor: &'static str,
    pub positions: Vec<PositionEntropy>,
}

impl EntropyReport {
    /// Mean entropy increase over parallel-stage positions.
    pub fn mean_parallel_diff(&self) -> f64 {
        let (sum, n) = self
            .positions
            .iter()
            .filter(|p| p.stage == Stage::Parallel)
            .fold((0.0, 0usize), |(s, n), p| (s + p.diff, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Raster-major map of the per-position increase.
    pub fn diff_map(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.shape.token_count()];
        for p in &self.positions {
            out[self.shape.flat(p.coord)] = p.diff;
        }
        out
    }
}

/// Keeps the `cap` candidates spatially closest to `target`, ties broken by
/// sequence position.
fn nearest_positions(
    plan: &OrderPlan,
    target: Coord,
    candidates: &[usize],
    cap: usize,
) -> Vec<usize> {
    if candidates.len() <= cap {
        return candidates.to_vec();
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&seq| {
            let c = plan.perm[seq];
            let dt = c.t.abs_diff(target.t) as f64;
            (c.euclidean(&target).powi(2) + dt * dt, seq)
        })
        .collect();
    scored.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored[..cap].iter().map(|&(_, s)| s).collect();
    keep.sort_unstable();
    keep
}

/// Entropy increase of grouped parallel generation over one-at-a-time
/// generation, position by position, under the order of `plan`.
///
/// For a position `q` in step `g`, the parallel conditioning set is every
/// token of steps before `g` (capped to the nearest `cap_positions`); the
/// sequential set adds the same-step tokens preceding `q`. Sequential-stage
/// positions have identical sets and report a zero increase.
pub fn parallel_entropy_diff(
    data: &FeatureGrid,
    plan: &OrderPlan,
    cfg: &EntropyConfig,
) -> Result<EntropyReport> {
    if data.positions != plan.shape.token_count() {
        return Err(Error::DimMismatch {
            context: "parallel_entropy_diff".into(),
            expected: plan.shape.token_count().to_string(),
            got: data.positions.to_string(),
        });
    }
    let d = data.dim;
    let worst_dim = (cfg.cap_positions + plan.n - 1) * d;
    if data.samples <= worst_dim + d {
        return Err(Error::ConditioningTooLarge { got: worst_dim, cap: data.samples });
    }

    let mut jobs = Vec::with_capacity(data.positions);
    for span in &plan.schedule.steps {
        for q in span.positions() {
            jobs.push((q, *span));
        }
    }
    // The feature grid is raster-indexed; sequence positions go through the
    // plan's permutation.
    let raster_of = |seq: usize| plan.shape.flat(plan.perm[seq]);
    let positions: Result<Vec<PositionEntropy>> = jobs
        .into_par_iter()
        .map(|(q, span)| {
            let coord = plan.perm[q];
            let before_step: Vec<usize> = (0..span.start).collect();
            let par_set = nearest_positions(plan, coord, &before_step, cfg.cap_positions);
            let y = data.design(&[raster_of(q)]);
            let par_cols: Vec<usize> = par_set.iter().map(|&s| raster_of(s)).collect();
            let x_par = data.design(&par_cols);
            let fit_par =
                fit_residuals(&x_par, &y, data.samples, par_set.len() * d, d, cfg.ridge)?;
            let h_par = entropy_upper_bound(&fit_par.residuals, d, cfg.floor)?;
            if span.stage == Stage::Sequential || q == span.start {
                // No same-step predecessors: both conditionings coincide.
                return Ok(PositionEntropy {
                    seq: q,
                    coord,
                    stage: span.stage,
                    h_parallel: h_par,
                    h_sequential: h_par,
                    diff: 0.0,
                    cond_positions: par_set.len(),
                });
            }
            // Nested set: capped parallel conditioning plus same-step
            // predecessors.
            let mut seq_set = par_set.clone();
            seq_set.extend(span.start..q);
            let seq_cols: Vec<usize> = seq_set.iter().map(|&s| raster_of(s)).collect();
            let x_seq = data.design(&seq_cols);
            let fit_seq =
                fit_residuals(&x_seq, &y, data.samples, seq_set.len() * d, d, cfg.ridge)?;
            let h_seq = entropy_upper_bound(&fit_seq.residuals, d, cfg.floor)?;
            Ok(PositionEntropy {
                seq: q,
                coord,
                stage: span.stage,
                h_parallel: h_par,
                h_sequential: h_seq,
                diff: h_par - h_seq,
                cond_positions: seq_set.len(),
            })
        })
        .collect();
    Ok(EntropyReport {
        shape: plan.shape,
        group_size: plan.n,
        feature_dim: d,
        samples: data.samples,
        ridge: cfg.ridge,
        floor: cfg.floor,
        cap_positions: cfg.cap_positions,
        predictor: "ridge linear least squares, centered",
        positions: positions?,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
        let mut r = vec![0.0f64; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da.sqrt() * db.sqrt())
}
