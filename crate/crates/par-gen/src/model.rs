//! Decoder-only transformer with label conditioning and transition
//! embeddings.
//!
//! The architecture is the usual pre-norm stack: RMSNorm, multi-head
//! attention under an arbitrary boolean visibility mask, SiLU-gated
//! feedforward at ratio 4, untied output head. Rotary angles come from each
//! slot's grid coordinate (see [`crate::rope`]); slots without a coordinate
//! rotate by the identity. Forward and backward are written out by hand so
//! the same code instantiates at 32-bit for training and 64-bit for
//! finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Coord, GridShape};
use crate::layout::{AttentionMask, SequenceLayout, Slot, TransitionRope, WithinGroup};
use crate::linalg::{axpy, dot, matmul_nn_acc, matmul_nt, matmul_tn_acc, softmax_in_place};
use crate::real::Real;
use crate::rng::Rng;
use crate::rope::{apply_rope, apply_rope_inverse, build_rope_table, RopeTable};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Token vocabulary size V.
    pub vocab: usize,
    /// Class label count C; the null label used for guidance is index C.
    pub labels: usize,
    /// Grid the model is trained for; fixes `n = m^2` and the rope bounds.
    pub grid: GridShape,
    pub max_slots: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub label_dropout: f64,
    pub rope_base: f64,
    pub transition_rope: TransitionRope,
    pub within_group: WithinGroup,
}

impl ModelConfig {
    /// Desk-scale default: 6 layers, hidden 256, 8 heads, V = 64 over a
    /// 12x12 grid with 2x2 regions.
    pub fn desk_default() -> Self {
        let grid = GridShape::image(12, 12, 2).expect("static shape");
        Self {
            layers: 6,
            hidden: 256,
            heads: 8,
            vocab: 64,
            labels: 8,
            grid,
            max_slots: grid.token_count() + grid.group_size(),
            dropout: 0.1,
            attn_dropout: 0.1,
            label_dropout: 0.1,
            rope_base: 10000.0,
            transition_rope: TransitionRope::Identity,
            within_group: WithinGroup::Full,
        }
    }

    pub fn group_size(&self) -> usize {
        self.grid.group_size()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn axes(&self) -> usize {
        if self.grid.t > 1 {
            3
        } else {
            2
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn null_label(&self) -> u32 {
        self.labels as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::BadModelConfig("layers/hidden/heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::BadModelConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        let axes = self.axes();
        if self.head_dim() % (2 * axes) != 0 {
            return Err(Error::BadHeadDim { head_dim: self.head_dim(), axes });
        }
        if self.vocab < 2 {
            return Err(Error::BadModelConfig("vocab must be at least 2".into()));
        }
        if self.labels == 0 {
            return Err(Error::BadModelConfig("need at least one label".into()));
        }
        GridShape::new(self.grid.t, self.grid.h, self.grid.w, self.grid.m)?;
        if self.max_slots < self.grid.token_count() + self.group_size() {
            return Err(Error::BadModelConfig("max_slots too small for the grid".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("label_dropout", self.label_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::BadModelConfig(format!("{name} must be in [0,1), got {p}")));
            }
        }
        if self.rope_base <= 1.0 {
            return Err(Error::BadModelConfig("rope_base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Per-layer weights; all matrices row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Vec<T>,
    pub label_emb: Vec<T>,
    pub trans_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub head: Vec<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let n = cfg.group_size();
        Self {
            tok_emb: vec![T::ZERO; cfg.vocab * h],
            label_emb: vec![T::ZERO; (cfg.labels + 1) * h],
            trans_emb: vec![T::ZERO; (n - 1) * h],
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    attn_norm: vec![T::ZERO; h],
                    wq: vec![T::ZERO; h * h],
                    wk: vec![T::ZERO; h * h],
                    wv: vec![T::ZERO; h * h],
                    wo: vec![T::ZERO; h * h],
                    mlp_norm: vec![T::ZERO; h],
                    w_gate: vec![T::ZERO; f * h],
                    w_up: vec![T::ZERO; f * h],
                    w_down: vec![T::ZERO; h * f],
                })
                .collect(),
            final_norm: vec![T::ZERO; h],
            head: vec![T::ZERO; cfg.vocab * h],
        }
    }

    /// Canonical tensor walk: `(name, dims, data)`.
    pub fn tensors(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, &Vec<T>)> {
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let mut out: Vec<(String, Vec<usize>, &Vec<T>)> = vec![
            ("tok_emb".into(), vec![cfg.vocab, h], &self.tok_emb),
            ("label_emb".into(), vec![cfg.labels + 1, h], &self.label_emb),
            ("trans_emb".into(), vec![cfg.group_size() - 1, h], &self.trans_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), vec![h], &l.attn_norm));
            out.push((format!("layer{i}.wq"), vec![h, h], &l.wq));
            out.push((format!("layer{i}.wk"), vec![h, h], &l.wk));
            out.push((format!("layer{i}.wv"), vec![h, h], &l.wv));
            out.push((format!("layer{i}.wo"), vec![h, h], &l.wo));
            out.push((format!("layer{i}.mlp_norm"), vec![h], &l.mlp_norm));
            out.push((format!("layer{i}.w_gate"), vec![f, h], &l.w_gate));
            out.push((format!("layer{i}.w_up"), vec![f, h], &l.w_up));
            out.push((format!("layer{i}.w_down"), vec![h, f], &l.w_down));
        }
        out.push(("final_norm".into(), vec![h], &self.final_norm));
        out.push(("head".into(), vec![cfg.vocab, h], &self.head));
        out
    }

    /// Mutable walk in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("label_emb".into(), &mut self.label_emb),
            ("trans_emb".into(), &mut self.trans_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.mlp_norm"), &mut l.mlp_norm));
            out.push((format!("layer{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layer{i}.w_up"), &mut l.w_up));
            out.push((format!("layer{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn count(&self) -> usize {
        let per_layer = |l: &LayerParams<T>| {
            l.attn_norm.len()
                + l.wq.len()
                + l.wk.len()
                + l.wv.len()
                + l.wo.len()
                + l.mlp_norm.len()
                + l.w_gate.len()
                + l.w_up.len()
                + l.w_down.len()
        };
        self.tok_emb.len()
            + self.label_emb.len()
            + self.trans_emb.len()
            + self.layers.iter().map(per_layer).sum::<usize>()
            + self.final_norm.len()
            + self.head.len()
    }

    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for ((_, a), b) in self.tensors_mut().into_iter().zip(other.tensors_ref()) {
            axpy(a, alpha, b);
        }
    }

    fn tensors_ref(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.label_emb, &self.trans_emb];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors_ref()
            .into_iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum()
    }
}

/// What occupies one input slot of a concrete sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotValue {
    /// Class id, or the null label for the unconditional branch.
    Label(u32),
    /// Token id.
    Token(u32),
    /// Transition embedding index (1-based).
    Transition(usize),
}

/// Fills a layout's slots with concrete values for one sample.
pub fn slot_values(layout: &SequenceLayout, seq_tokens: &[u32], label: u32) -> Vec<SlotValue> {
    layout
        .slots
        .iter()
        .map(|slot| match slot {
            Slot::Label => SlotValue::Label(label),
            Slot::Token(seq) => SlotValue::Token(seq_tokens[*seq]),
            Slot::Transition(i) => SlotValue::Transition(*i),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub rope: RopeTable,
}

pub type ModelF32 = Model<f32>;

/// Deterministically initializes a 32-bit model from `(config, seed)`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::<f32>::init(config, seed)
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rope = Self::rope_for(&config)?;
        let mut params = Params::zeros(&config);
        let mut rng = Rng::seeded(seed);
        // Residual-write matrices get the usual depth scaling.
        let resid_scale = INIT_STD / (2.0 * config.layers as f64).sqrt();
        for (name, data) in params.tensors_mut() {
            if name.ends_with("norm") {
                data.iter_mut().for_each(|v| *v = T::ONE);
            } else {
                let std = if name.ends_with(".wo") || name.ends_with(".w_down") {
                    resid_scale
                } else {
                    INIT_STD
                };
                data.iter_mut().for_each(|v| *v = T::from_f64(rng.normal_f64() * std));
            }
        }
        Ok(Self { config, params, rope })
    }

    fn rope_for(config: &ModelConfig) -> Result<RopeTable> {
        let g = config.grid;
        let max_coords: Vec<usize> =
            if config.axes() == 3 { vec![g.t, g.h, g.w] } else { vec![g.h, g.w] };
        build_rope_table(config.head_dim(), config.axes(), &max_coords, config.rope_base)
    }

    /// Casts all parameters; used to run finite-difference checks in f64.
    pub fn convert<U: Real>(&self) -> Model<U> {
        let mut params = Params::<U>::zeros(&self.config);
        for ((_, dst), src) in params.tensors_mut().into_iter().zip(self.params.tensors_ref()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = U::from_f64(s.to_f64());
            }
        }
        Model { config: self.config.clone(), params, rope: self.rope.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn embed(&self, value: SlotValue) -> Result<&[T]> {
        let h = self.config.hidden;
        match value {
            SlotValue::Label(id) => {
                if id as usize > self.config.labels {
                    return Err(Error::TokenOutOfRange { id, vocab: self.config.labels + 1 });
                }
                Ok(&self.params.label_emb[id as usize * h..(id as usize + 1) * h])
            }
            SlotValue::Token(id) => {
                if id as usize >= self.config.vocab {
                    return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab });
                }
                Ok(&self.params.tok_emb[id as usize * h..(id as usize + 1) * h])
            }
            SlotValue::Transition(i) => {
                let n = self.config.group_size();
                if i == 0 || i >= n {
                    return Err(Error::DimMismatch {
                        context: "transition index".into(),
                        expected: format!("1..{}", n - 1),
                        got: i.to_string(),
                    });
                }
                Ok(&self.params.trans_emb[(i - 1) * h..i * h])
            }
        }
    }

    /// Inference forward: logits for every slot, dropout off.
    pub fn forward(
        &self,
        values: &[SlotValue],
        coords: &[Option<Coord>],
        mask: &AttentionMask,
    ) -> Result<Vec<T>> {
        let (logits, _) = self.forward_inner(values, coords, mask, None, false)?;
        Ok(logits)
    }

    /// Training forward: retains activations; applies dropout when an rng is
    /// supplied.
    pub fn forward_training(
        &self,
        values: &[SlotValue],
        coords: &[Option<Coord>],
        mask: &AttentionMask,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(Vec<T>, ActCache<T>)> {
        let (logits, acts) = self.forward_inner(values, coords, mask, dropout_rng, true)?;
        Ok((logits, acts.expect("retained")))
    }

    fn forward_inner(
        &self,
        values: &[SlotValue],
        coords: &[Option<Coord>],
        mask: &AttentionMask,
        mut dropout_rng: Option<&mut Rng>,
        retain: bool,
    ) -> Result<(Vec<T>, Option<ActCache<T>>)> {
        let cfg = &self.config;
        let s_len = values.len();
        if s_len == 0 || s_len > cfg.max_slots {
            return Err(Error::DimMismatch {
                context: "slot count".into(),
                expected: format!("1..={}", cfg.max_slots),
                got: s_len.to_string(),
            });
        }
        if coords.len() != s_len {
            return Err(Error::DimMismatch {
                context: "coords".into(),
                expected: s_len.to_string(),
                got: coords.len().to_string(),
            });
        }
        if mask.size != s_len {
            return Err(Error::MaskSizeMismatch { got: mask.size, expected: s_len });
        }
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = vec![T::ZERO; s_len * h];
        for (s, &v) in values.iter().enumerate() {
            x[s * h..(s + 1) * h].copy_from_slice(self.embed(v)?);
        }

        let mut acts = retain.then(|| ActCache { layers: Vec::with_capacity(cfg.layers), ..ActCache::empty() });

        for layer in &self.params.layers {
            let x_in = x.clone();
            // Attention block.
            let (xn, rinv) = rmsnorm_rows(&x, &layer.attn_norm, s_len, h);
            let mut q = vec![T::ZERO; s_len * h];
            let mut k = vec![T::ZERO; s_len * h];
            let mut v = vec![T::ZERO; s_len * h];
            matmul_nt(&mut q, &xn, &layer.wq, s_len, h, h);
            matmul_nt(&mut k, &xn, &layer.wk, s_len, h, h);
            matmul_nt(&mut v, &xn, &layer.wv, s_len, h, h);
            for s in 0..s_len {
                for hd in 0..heads {
                    let o = s * h + hd * dh;
                    apply_rope(&mut q[o..o + dh], coords[s], &self.rope)?;
                    apply_rope(&mut k[o..o + dh], coords[s], &self.rope)?;
                }
            }
            // Group masks are visibility prefixes; precomputing each
            // query's span keeps the branch out of the score loop. Rows
            // with holes (test-only masks) take the general path.
            let spans: Vec<(usize, bool)> = (0..s_len)
                .map(|sq| {
                    let row = mask.row(sq);
                    let end = row.iter().rposition(|&v| v).map_or(0, |p| p + 1);
                    (end, row[..end].iter().all(|&v| v))
                })
                .collect();
            let mut probs = vec![T::ZERO; heads * s_len * s_len];
            let mut attn_keep: Option<Vec<T>> = None;
            let mut ctx = vec![T::ZERO; s_len * h];
            for hd in 0..heads {
                let poff = hd * s_len * s_len;
                for sq in 0..s_len {
                    let (end, contiguous) = spans[sq];
                    let qrow = &q[sq * h + hd * dh..sq * h + hd * dh + dh];
                    let prow = &mut probs[poff + sq * s_len..poff + (sq + 1) * s_len];
                    let mut max = T::NEG_INFINITY;
                    for t in 0..end {
                        if contiguous || mask.visible(sq, t) {
                            let sc = dot(qrow, &k[t * h + hd * dh..t * h + hd * dh + dh]) * scale;
                            prow[t] = sc;
                            max = max.max(sc);
                        }
                    }
                    let mut sum = T::ZERO;
                    for t in 0..end {
                        if contiguous || mask.visible(sq, t) {
                            prow[t] = (prow[t] - max).exp();
                            sum += prow[t];
                        }
                    }
                    let inv = T::ONE / sum;
                    for t in 0..end {
                        if contiguous || mask.visible(sq, t) {
                            prow[t] *= inv;
                        }
                    }
                }
            }
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if cfg.attn_dropout > 0.0 {
                    let keep = 1.0 - cfg.attn_dropout;
                    let mut km = vec![T::ZERO; heads * s_len * s_len];
                    for kv in km.iter_mut() {
                        *kv = if rng.bernoulli(keep) { T::from_f64(1.0 / keep) } else { T::ZERO };
                    }
                    attn_keep = Some(km);
                }
            }
            for hd in 0..heads {
                let poff = hd * s_len * s_len;
                for sq in 0..s_len {
                    let crow = &mut ctx[sq * h + hd * dh..sq * h + hd * dh + dh];
                    for t in 0..spans[sq].0 {
                        let mut p = probs[poff + sq * s_len + t];
                        if let Some(km) = &attn_keep {
                            p *= km[poff + sq * s_len + t];
                        }
                        if p.to_f64() != 0.0 {
                            axpy(crow, p, &v[t * h + hd * dh..t * h + hd * dh + dh]);
                        }
                    }
                }
            }
            let mut attn_out = vec![T::ZERO; s_len * h];
            matmul_nt(&mut attn_out, &ctx, &layer.wo, s_len, h, h);
            let resid_keep1 =
                dropout_mask(&mut dropout_rng, cfg.dropout, s_len * h);
            if let Some(km) = &resid_keep1 {
                for (a, m) in attn_out.iter_mut().zip(km) {
                    *a *= *m;
                }
            }
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += *a;
            }
            let x_mid = x.clone();

            // Feedforward block.
            let (xn2, rinv2) = rmsnorm_rows(&x, &layer.mlp_norm, s_len, h);
            let mut gate = vec![T::ZERO; s_len * f];
            let mut up = vec![T::ZERO; s_len * f];
            matmul_nt(&mut gate, &xn2, &layer.w_gate, s_len, h, f);
            matmul_nt(&mut up, &xn2, &layer.w_up, s_len, h, f);
            let mut act = vec![T::ZERO; s_len * f];
            for i in 0..s_len * f {
                act[i] = silu(gate[i]) * up[i];
            }
            let mut mlp_out = vec![T::ZERO; s_len * h];
            matmul_nt(&mut mlp_out, &act, &layer.w_down, s_len, f, h);
            let resid_keep2 =
                dropout_mask(&mut dropout_rng, cfg.dropout, s_len * h);
            if let Some(km) = &resid_keep2 {
                for (a, m) in mlp_out.iter_mut().zip(km) {
                    *a *= *m;
                }
            }
            for (xi, a) in x.iter_mut().zip(&mlp_out) {
                *xi += *a;
            }

            if let Some(acts) = acts.as_mut() {
                acts.layers.push(LayerActs {
                    x_in,
                    rinv_attn: rinv,
                    xn_attn: xn,
                    q,
                    k,
                    v,
                    probs,
                    attn_keep,
                    ctx,
                    resid_keep1,
                    x_mid,
                    rinv_mlp: rinv2,
                    xn_mlp: xn2,
                    gate,
                    up,
                    act,
                    resid_keep2,
                });
            }
        }

        let (xn_final, rinv_final) = rmsnorm_rows(&x, &self.params.final_norm, s_len, h);
        let mut logits = vec![T::ZERO; s_len * cfg.vocab];
        matmul_nt(&mut logits, &xn_final, &self.params.head, s_len, h, cfg.vocab);
        if let Some(acts) = acts.as_mut() {
            acts.x_final = x;
            acts.rinv_final = rinv_final;
            acts.xn_final = xn_final;
        }
        Ok((logits, acts))
    }

    /// Backpropagates `dlogits` through the retained activations,
    /// accumulating parameter gradients into `grads`. The mask is implicit
    /// in the retained probabilities (invisible pairs hold zero).
    pub fn backward(
        &self,
        values: &[SlotValue],
        coords: &[Option<Coord>],
        _mask: &AttentionMask,
        acts: &ActCache<T>,
        dlogits: &[T],
        grads: &mut Params<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let s_len = values.len();
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        if dlogits.len() != s_len * cfg.vocab {
            return Err(Error::DimMismatch {
                context: "dlogits".into(),
                expected: (s_len * cfg.vocab).to_string(),
                got: dlogits.len().to_string(),
            });
        }

        // Head and final norm.
        matmul_tn_acc(&mut grads.head, dlogits, &acts.xn_final, s_len, h, cfg.vocab);
        let mut dxn = vec![T::ZERO; s_len * h];
        matmul_nn_acc(&mut dxn, dlogits, &self.params.head, s_len, h, cfg.vocab);
        let mut dx = vec![T::ZERO; s_len * h];
        rmsnorm_backward(
            &mut dx,
            &mut grads.final_norm,
            &dxn,
            &acts.x_final,
            &acts.rinv_final,
            &self.params.final_norm,
            s_len,
            h,
        );

        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            let a = &acts.layers[li];
            let g = &mut grads.layers[li];

            // Feedforward block backward.
            let mut dmlp_out = dx.clone();
            if let Some(km) = &a.resid_keep2 {
                for (d, m) in dmlp_out.iter_mut().zip(km) {
                    *d *= *m;
                }
            }
            matmul_tn_acc(&mut g.w_down, &dmlp_out, &a.act, s_len, f, h);
            let mut dact = vec![T::ZERO; s_len * f];
            matmul_nn_acc(&mut dact, &dmlp_out, &layer.w_down, s_len, f, h);
            let mut dgate = vec![T::ZERO; s_len * f];
            let mut dup = vec![T::ZERO; s_len * f];
            for i in 0..s_len * f {
                let sg = silu(a.gate[i]);
                dup[i] = sg * dact[i];
                dgate[i] = a.up[i] * silu_grad(a.gate[i]) * dact[i];
            }
            matmul_tn_acc(&mut g.w_gate, &dgate, &a.xn_mlp, s_len, h, f);
            matmul_tn_acc(&mut g.w_up, &dup, &a.xn_mlp, s_len, h, f);
            let mut dxn2 = vec![T::ZERO; s_len * h];
            matmul_nn_acc(&mut dxn2, &dgate, &layer.w_gate, s_len, h, f);
            matmul_nn_acc(&mut dxn2, &dup, &layer.w_up, s_len, h, f);
            rmsnorm_backward(
                &mut dx,
                &mut g.mlp_norm,
                &dxn2,
                &a.x_mid,
                &a.rinv_mlp,
                &layer.mlp_norm,
                s_len,
                h,
            );

            // Attention block backward.
            let mut dattn_out = dx.clone();
            if let Some(km) = &a.resid_keep1 {
                for (d, m) in dattn_out.iter_mut().zip(km) {
                    *d *= *m;
                }
            }
            matmul_tn_acc(&mut g.wo, &dattn_out, &a.ctx, s_len, h, h);
            let mut dctx = vec![T::ZERO; s_len * h];
            matmul_nn_acc(&mut dctx, &dattn_out, &layer.wo, s_len, h, h);

            // Invisible pairs carry probability zero, so every gradient
            // path below vanishes through them; no mask lookups needed.
            let mut dq = vec![T::ZERO; s_len * h];
            let mut dk = vec![T::ZERO; s_len * h];
            let mut dv = vec![T::ZERO; s_len * h];
            for hd in 0..heads {
                let poff = hd * s_len * s_len;
                for sq in 0..s_len {
                    let dcrow = &dctx[sq * h + hd * dh..sq * h + hd * dh + dh];
                    // dv and dp from ctx = sum_t p'_t v_t.
                    let mut dp = vec![T::ZERO; s_len];
                    for t in 0..s_len {
                        let p_raw = a.probs[poff + sq * s_len + t];
                        if p_raw.to_f64() == 0.0 {
                            continue;
                        }
                        let keep = a
                            .attn_keep
                            .as_ref()
                            .map(|km| km[poff + sq * s_len + t])
                            .unwrap_or(T::ONE);
                        let p_eff = p_raw * keep;
                        if p_eff.to_f64() != 0.0 {
                            axpy(
                                &mut dv[t * h + hd * dh..t * h + hd * dh + dh],
                                p_eff,
                                dcrow,
                            );
                        }
                        dp[t] = dot(dcrow, &a.v[t * h + hd * dh..t * h + hd * dh + dh]) * keep;
                    }
                    // Softmax backward over the visible set.
                    let mut inner = T::ZERO;
                    for t in 0..s_len {
                        inner += a.probs[poff + sq * s_len + t] * dp[t];
                    }
                    let qrow_off = sq * h + hd * dh;
                    for t in 0..s_len {
                        let p = a.probs[poff + sq * s_len + t];
                        if p.to_f64() != 0.0 {
                            let dscore = p * (dp[t] - inner) * scale;
                            if dscore.to_f64() != 0.0 {
                                axpy(
                                    &mut dq[qrow_off..qrow_off + dh],
                                    dscore,
                                    &a.k[t * h + hd * dh..t * h + hd * dh + dh],
                                );
                                axpy(
                                    &mut dk[t * h + hd * dh..t * h + hd * dh + dh],
                                    dscore,
                                    &a.q[qrow_off..qrow_off + dh],
                                );
                            }
                        }
                    }
                }
            }
            // Undo the rotary rotation on the gradients.
            for s in 0..s_len {
                for hd in 0..heads {
                    let o = s * h + hd * dh;
                    apply_rope_inverse(&mut dq[o..o + dh], coords[s], &self.rope)?;
                    apply_rope_inverse(&mut dk[o..o + dh], coords[s], &self.rope)?;
                }
            }
            let mut dxn_attn = vec![T::ZERO; s_len * h];
            matmul_tn_acc(&mut g.wq, &dq, &a.xn_attn, s_len, h, h);
            matmul_tn_acc(&mut g.wk, &dk, &a.xn_attn, s_len, h, h);
            matmul_tn_acc(&mut g.wv, &dv, &a.xn_attn, s_len, h, h);
            matmul_nn_acc(&mut dxn_attn, &dq, &layer.wq, s_len, h, h);
            matmul_nn_acc(&mut dxn_attn, &dk, &layer.wk, s_len, h, h);
            matmul_nn_acc(&mut dxn_attn, &dv, &layer.wv, s_len, h, h);
            rmsnorm_backward(
                &mut dx,
                &mut g.attn_norm,
                &dxn_attn,
                &a.x_in,
                &a.rinv_attn,
                &layer.attn_norm,
                s_len,
                h,
            );
        }

        // Embedding gradients.
        for (s, &value) in values.iter().enumerate() {
            let drow = &dx[s * h..(s + 1) * h];
            match value {
                SlotValue::Label(id) => {
                    axpy(
                        &mut grads.label_emb[id as usize * h..(id as usize + 1) * h],
                        T::ONE,
                        drow,
                    );
                }
                SlotValue::Token(id) => {
                    axpy(
                        &mut grads.tok_emb[id as usize * h..(id as usize + 1) * h],
                        T::ONE,
                        drow,
                    );
                }
                SlotValue::Transition(i) => {
                    axpy(&mut grads.trans_emb[(i - 1) * h..i * h], T::ONE, drow);
                }
            }
        }
        Ok(())
    }
}

/// Retained activations for one forward pass.
#[derive(Debug, Clone)]
pub struct ActCache<T> {
    layers: Vec<LayerActs<T>>,
    x_final: Vec<T>,
    rinv_final: Vec<T>,
    xn_final: Vec<T>,
}

impl<T: Real> ActCache<T> {
    fn empty() -> Self {
        Self { layers: Vec::new(), x_final: Vec::new(), rinv_final: Vec::new(), xn_final: Vec::new() }
    }
}

#[derive(Debug, Clone)]
struct LayerActs<T> {
    x_in: Vec<T>,
    rinv_attn: Vec<T>,
    xn_attn: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn_keep: Option<Vec<T>>,
    ctx: Vec<T>,
    resid_keep1: Option<Vec<T>>,
    x_mid: Vec<T>,
    rinv_mlp: Vec<T>,
    xn_mlp: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
    resid_keep2: Option<Vec<T>>,
}

#[inline]
fn silu<T: Real>(z: T) -> T {
    z / (T::ONE + (-z).exp())
}

#[inline]
fn silu_grad<T: Real>(z: T) -> T {
    let sig = T::ONE / (T::ONE + (-z).exp());
    sig * (T::ONE + z * (T::ONE - sig))
}

/// RMS-normalizes each row and applies the learned scale. Returns the
/// normalized rows and the per-row reciprocal norms.
pub fn rmsnorm_rows<T: Real>(x: &[T], gain: &[T], rows: usize, h: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::ZERO; rows * h];
    let mut rinv = vec![T::ZERO; rows];
    for s in 0..rows {
        let row = &x[s * h..(s + 1) * h];
        let ms = dot(row, row).to_f64() / h as f64;
        let ri = T::from_f64(1.0 / (ms + NORM_EPS).sqrt());
        rinv[s] = ri;
        let orow = &mut out[s * h..(s + 1) * h];
        for i in 0..h {
            orow[i] = row[i] * ri * gain[i];
        }
    }
    (out, rinv)
}

#[allow(clippy::too_many_arguments)]
fn rmsnorm_backward<T: Real>(
    dx: &mut [T],
    dgain: &mut [T],
    dy: &[T],
    x: &[T],
    rinv: &[T],
    gain: &[T],
    rows: usize,
    h: usize,
) {
    let inv_h = T::from_f64(1.0 / h as f64);
    for s in 0..rows {
        let xrow = &x[s * h..(s + 1) * h];
        let dyrow = &dy[s * h..(s + 1) * h];
        let ri = rinv[s];
        // dgain_i += dy_i * x_i * rinv
        for i in 0..h {
            dgain[i] += dyrow[i] * xrow[i] * ri;
        }
        // du_i = dy_i * gain_i; dx = ri*du - ri^3/h * (du . x) * x
        let mut du_dot_x = T::ZERO;
        for i in 0..h {
            du_dot_x += dyrow[i] * gain[i] * xrow[i];
        }
        let c = ri * ri * ri * inv_h * du_dot_x;
        let dxrow = &mut dx[s * h..(s + 1) * h];
        for i in 0..h {
            dxrow[i] += ri * dyrow[i] * gain[i] - c * xrow[i];
        }
    }
}

fn dropout_mask<T: Real>(rng: &mut Option<&mut Rng>, p: f64, len: usize) -> Option<Vec<T>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    Some(
        (0..len)
            .map(|_| if rng.bernoulli(keep) { T::from_f64(1.0 / keep) } else { T::ZERO })
            .collect(),
    )
}

/// Mean cross-entropy over the targeted slots; untargeted slots are ignored.
pub fn par_loss<T: Real>(
    logits: &[T],
    layout: &SequenceLayout,
    seq_tokens: &[u32],
    vocab: usize,
) -> Result<T> {
    Ok(loss_and_dlogits(logits, layout, seq_tokens, vocab, false)?.0)
}

/// Loss plus its gradient; `want_grad` controls whether the gradient buffer
/// is populated.
pub fn loss_and_dlogits<T: Real>(
    logits: &[T],
    layout: &SequenceLayout,
    seq_tokens: &[u32],
    vocab: usize,
    want_grad: bool,
) -> Result<(T, Vec<T>)> {
    let s_len = layout.slot_count();
    if logits.len() != s_len * vocab {
        return Err(Error::DimMismatch {
            context: "logits".into(),
            expected: (s_len * vocab).to_string(),
            got: logits.len().to_string(),
        });
    }
    let targeted = layout.targeted_count();
    let inv_n = T::from_f64(1.0 / targeted as f64);
    let mut dlogits = vec![T::ZERO; if want_grad { logits.len() } else { 0 }];
    let mut loss = T::ZERO;
    for (slot, target) in layout.target_of.iter().enumerate() {
        let Some(seq) = target else { continue };
        let y = seq_tokens[*seq];
        if y as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: y, vocab });
        }
        let row = &logits[slot * vocab..(slot + 1) * vocab];
        let mut max = T::NEG_INFINITY;
        for &l in row {
            max = max.max(l);
        }
        let mut sum = T::ZERO;
        for &l in row {
            sum += (l - max).exp();
        }
        let log_z = sum.ln() + max;
        loss += (log_z - row[y as usize]) * inv_n;
        if want_grad {
            let drow = &mut dlogits[slot * vocab..(slot + 1) * vocab];
            let inv_sum = T::ONE / sum;
            for (i, &l) in row.iter().enumerate() {
                drow[i] = (l - max).exp() * inv_sum * inv_n;
            }
            drow[y as usize] -= inv_n;
        }
    }
    Ok((loss, dlogits))
}

/// Softmax of one logit row; exposed for tests and the decoder.
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}
