//! Synthetic token data with controllable spatial statistics.
//!
//! Each sample is a continuous scalar field over the grid: a label-dependent
//! stripe pattern with a per-sample random phase, plus a spatially
//! correlated Gaussian field (covariance `exp(-dist / corr_len)`, drawn
//! through a Cholesky factor), plus white noise. Fields are quantized by a
//! fixed uniform scalar codebook shared across positions. The pre-quantized
//! values double as the continuous features for dependency analysis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::FeatureGrid;
use crate::error::{Error, Result};
use crate::grid::{Coord, GridShape, TokenGrid};
use crate::rng::Rng;

/// Stripe axis: `Horizontal` stripes vary along y, `Vertical` along x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Per-label texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub period: f64,
    pub orientation: Orientation,
}

impl TextureSpec {
    /// Coordinate along the varying axis.
    pub fn axis_coord(&self, c: Coord) -> f64 {
        match self.orientation {
            Orientation::Horizontal => c.y as f64,
            Orientation::Vertical => c.x as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub shape: GridShape,
    pub vocab: usize,
    /// One texture per class label.
    pub textures: Vec<TextureSpec>,
    /// Stripe amplitude; 0 disables the deterministic pattern.
    pub stripe_amp: f64,
    /// Correlation length of the Gaussian field; ~0 gives white noise.
    pub corr_len: f64,
    /// Standard deviation of the correlated field.
    pub corr_scale: f64,
    /// Standard deviation of the independent noise.
    pub noise: f64,
    /// Half-range of the scalar codebook.
    pub quant_range: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Striped dataset used throughout the tests: four stripe classes over
    /// a 12x12 grid with short-range correlated noise.
    pub fn striped_default(seed: u64) -> Self {
        Self {
            shape: GridShape::image(12, 12, 2).expect("static shape"),
            vocab: 16,
            textures: vec![
                TextureSpec { period: 4.0, orientation: Orientation::Horizontal },
                TextureSpec { period: 6.0, orientation: Orientation::Horizontal },
                TextureSpec { period: 4.0, orientation: Orientation::Vertical },
                TextureSpec { period: 6.0, orientation: Orientation::Vertical },
            ],
            stripe_amp: 1.0,
            corr_len: 1.2,
            corr_scale: 0.35,
            noise: 0.1,
            quant_range: 1.8,
            seed,
        }
    }

    /// Pure correlated field (no stripes); used for dependency analysis.
    pub fn correlated_field(shape: GridShape, corr_len: f64, seed: u64) -> Self {
        Self {
            shape,
            vocab: 16,
            textures: vec![TextureSpec { period: 4.0, orientation: Orientation::Horizontal }],
            stripe_amp: 0.0,
            corr_len,
            corr_scale: 1.0,
            noise: 0.05,
            quant_range: 3.0,
            seed,
        }
    }

    pub fn labels(&self) -> usize {
        self.textures.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::BadSyntheticConfig(format!(
                "vocab must be at least 2, got {}",
                self.vocab
            )));
        }
        if self.textures.is_empty() {
            return Err(Error::BadSyntheticConfig("need at least one texture".into()));
        }
        if self.textures.iter().any(|t| t.period <= 0.0) {
            return Err(Error::BadSyntheticConfig("periods must be positive".into()));
        }
        if self.quant_range <= 0.0 {
            return Err(Error::BadSyntheticConfig("quant_range must be positive".into()));
        }
        GridShape::new(self.shape.t, self.shape.h, self.shape.w, self.shape.m)?;
        Ok(())
    }
}

/// Grids, their labels, and the pre-quantization features.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub grids: Vec<TokenGrid>,
    pub features: FeatureGrid,
    /// Codebook value of each token id.
    pub codebook: Vec<f64>,
}

/// Uniform scalar codebook over `[-range, range]`: bin centers.
pub fn scalar_codebook(vocab: usize, range: f64) -> Vec<f64> {
    let step = 2.0 * range / vocab as f64;
    (0..vocab).map(|i| -range + (i as f64 + 0.5) * step).collect()
}

/// Quantizes a value to its codebook bin.
pub fn quantize(value: f64, vocab: usize, range: f64) -> u32 {
    let step = 2.0 * range / vocab as f64;
    let bin = ((value + range) / step).floor();
    bin.clamp(0.0, (vocab - 1) as f64) as u32
}

/// Lower Cholesky factor of the exponential-decay covariance
/// `K[i][j] = exp(-dist(i,j) / corr_len)` over all grid positions. The
/// kernel is positive definite for any spatial dimension; a small jitter
/// keeps the factorization stable.
pub fn correlation_cholesky(shape: GridShape, corr_len: f64) -> Result<Vec<f64>> {
    let p = shape.token_count();
    let coords: Vec<Coord> = (0..p).map(|i| shape.unflat(i)).collect();
    let mut k = vec![0.0f64; p * p];
    for i in 0..p {
        for j in 0..=i {
            let (a, b) = (coords[i], coords[j]);
            let dt = a.t.abs_diff(b.t) as f64;
            let dist = (a.euclidean(&b).powi(2) + dt * dt).sqrt();
            let v = (-dist / corr_len).exp();
            k[i * p + j] = v;
            k[j * p + i] = v;
        }
        k[i * p + i] += 1e-9;
    }
    if !crate::linalg::cholesky_in_place(&mut k, p, 0.0) {
        return Err(Error::BadSyntheticConfig("correlation matrix not positive definite".into()));
    }
    Ok(k)
}

/// Generates `count` samples. Deterministic in `(config, count)`; sample `i`
/// only depends on `(seed, i)`, so prefixes are stable when `count` grows.
pub fn gen_synthetic_dataset(config: &SyntheticConfig, count: usize) -> Result<SyntheticDataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::InsufficientSamples("count must be positive".into()));
    }
    let shape = config.shape;
    let p = shape.token_count();
    let chol = if config.corr_len > 1e-9 && config.corr_scale != 0.0 {
        Some(correlation_cholesky(shape, config.corr_len)?)
    } else {
        None
    };
    let coords: Vec<Coord> = (0..p).map(|i| shape.unflat(i)).collect();
    let labels_n = config.labels() as u64;

    let samples: Vec<(Vec<f64>, u32)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::substream(config.seed, i as u64);
            let label = rng.below(labels_n) as u32;
            let tex = config.textures[label as usize];
            let phase = rng.uniform_f64() * std::f64::consts::TAU;
            let mut field = vec![0.0f64; p];
            if config.stripe_amp != 0.0 {
                for (f, c) in field.iter_mut().zip(&coords) {
                    *f = config.stripe_amp
                        * (std::f64::consts::TAU * tex.axis_coord(*c) / tex.period + phase).sin();
                }
            }
            match &chol {
                Some(l) => {
                    let g: Vec<f64> = (0..p).map(|_| rng.normal_f64()).collect();
                    for r in 0..p {
                        let mut acc = 0.0;
                        for c in 0..=r {
                            acc += l[r * p + c] * g[c];
                        }
                        field[r] += config.corr_scale * acc;
                    }
                }
                None => {
                    if config.corr_scale != 0.0 {
                        for f in field.iter_mut() {
                            *f += config.corr_scale * rng.normal_f64();
                        }
                    }
                }
            }
            if config.noise > 0.0 {
                for f in field.iter_mut() {
                    *f += config.noise * rng.normal_f64();
                }
            }
            (field, label)
        })
        .collect();

    let mut grids = Vec::with_capacity(count);
    let mut feat_data = Vec::with_capacity(count * p);
    for (field, label) in &samples {
        let tokens: Vec<u32> =
            field.iter().map(|&v| quantize(v, config.vocab, config.quant_range)).collect();
        grids.push(TokenGrid::new(shape, tokens, *label)?);
        feat_data.extend_from_slice(field);
    }
    let features = FeatureGrid::new(count, p, 1, feat_data)?;
    Ok(SyntheticDataset {
        config: config.clone(),
        grids,
        features,
        codebook: scalar_codebook(config.vocab, config.quant_range),
    })
}
