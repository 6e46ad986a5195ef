//! KV-cached generation: sequential stage-1 sampling, chunked parallel
//! stage-2 sampling, and classifier-free guidance.
//!
//! Decoding feeds one attention group at a time. Because visibility is
//! always "everything up to the end of my group", a chunk's queries attend
//! to the whole cache after the chunk's keys are appended; no mask is
//! materialized at inference. Every generated token draws from its own rng
//! substream keyed by `(seed, sequence index)`, so engines that chunk
//! differently (or not at all) stay seed-aligned.

use crate::error::{Error, Result};
use crate::grid::{Coord, TokenGrid};
use crate::layout::{SequenceLayout, Slot, WithinGroup};
use crate::linalg::{axpy, dot, matmul_nt};
use crate::model::{rmsnorm_rows, slot_values, Model, SlotValue};
use crate::real::Real;
use crate::rng::Rng;
use crate::rope::apply_rope;

/// Sampling controls for one generation.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// 0 disables the top-k restriction.
    pub top_k: usize,
    /// Guidance scale `s`; 1 disables the unconditional branch.
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 0, guidance_scale: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::BadSampler(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::BadSampler("guidance scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-layer key/value tensors of all slots fed so far.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KVCache<T> {
    pub fn new(layers: usize, capacity_slots: usize, hidden: usize) -> Self {
        let make = || {
            (0..layers)
                .map(|_| Vec::with_capacity(capacity_slots * hidden))
                .collect::<Vec<_>>()
        };
        Self { k: make(), v: make(), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        (&self.k[l], &self.v[l])
    }
}

/// `uncond + s * (cond - uncond)`, elementwise.
pub fn cfg_combine<T: Real>(cond: &[T], uncond: &[T], scale: f64) -> Result<Vec<T>> {
    if cond.len() != uncond.len() {
        return Err(Error::DimMismatch {
            context: "cfg_combine".into(),
            expected: cond.len().to_string(),
            got: uncond.len().to_string(),
        });
    }
    let s = T::from_f64(scale);
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| u + s * (c - u))
        .collect())
}

/// Draws one token id from a logit row: softmax at `temperature`, optionally
/// restricted to the `top_k` largest logits (boundary ties keep the lower
/// id). Consumes exactly one uniform draw.
pub fn sample_row<T: Real>(
    row: &[T],
    temperature: f64,
    top_k: usize,
    rng: &mut Rng,
    row_index: usize,
) -> Result<u32> {
    let mut candidates: Vec<(usize, f64)> = row
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            let l = l.to_f64();
            (l.is_finite()).then_some((i, l))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::DegenerateLogits { row: row_index });
    }
    candidates.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
    });
    let keep = if top_k == 0 { candidates.len() } else { top_k.min(candidates.len()) };
    let candidates = &candidates[..keep];
    let max = candidates[0].1;
    let weights: Vec<f64> =
        candidates.iter().map(|&(_, l)| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let dart = rng.uniform_f64() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if dart < acc {
            return Ok(candidates[i].0 as u32);
        }
    }
    Ok(candidates[keep - 1].0 as u32)
}

/// Samples one id per `vocab`-wide row, rows drawn independently from the
/// given stream in order.
pub fn sample_tokens<T: Real>(
    rows: &[T],
    vocab: usize,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    sampler.validate()?;
    if vocab == 0 || rows.len() % vocab != 0 {
        return Err(Error::DimMismatch {
            context: "sample_tokens".into(),
            expected: format!("multiple of {vocab}"),
            got: rows.len().to_string(),
        });
    }
    rows.chunks(vocab)
        .enumerate()
        .map(|(i, row)| sample_row(row, sampler.temperature, sampler.top_k, rng, i))
        .collect()
}

/// One incremental decoding stream: a KV cache plus the chunk math.
///
/// Each [`decode_chunk`](Self::decode_chunk) call appends the chunk's keys
/// and values and returns one logit row per chunk slot. The arithmetic
/// mirrors [`Model::forward`] kernel for kernel, so cached decoding is
/// bit-identical to re-running the full prefix.
pub struct ChunkDecoder<'a, T> {
    model: &'a Model<T>,
    cache: KVCache<T>,
    within: WithinGroup,
}

impl<'a, T: Real> ChunkDecoder<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        let cfg = &model.config;
        Self {
            model,
            cache: KVCache::new(cfg.layers, cfg.max_slots, cfg.hidden),
            within: cfg.within_group,
        }
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    /// Feeds `values` as one prediction group and returns its logit rows
    /// (`values.len() * vocab`).
    pub fn decode_chunk(
        &mut self,
        values: &[SlotValue],
        coords: &[Option<Coord>],
    ) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let c = values.len();
        if c == 0 {
            return Err(Error::ChunkMismatch("empty chunk".into()));
        }
        if coords.len() != c {
            return Err(Error::DimMismatch {
                context: "chunk coords".into(),
                expected: c.to_string(),
                got: coords.len().to_string(),
            });
        }
        let base = self.cache.len();
        if base + c > cfg.max_slots {
            return Err(Error::DecodeDesync(format!(
                "cache {} + chunk {} exceeds max_slots {}",
                base, c, cfg.max_slots
            )));
        }
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let params = &self.model.params;

        let mut x = vec![T::ZERO; c * h];
        for (s, &value) in values.iter().enumerate() {
            x[s * h..(s + 1) * h].copy_from_slice(self.model_embed(value)?);
        }

        for (l, layer) in params.layers.iter().enumerate() {
            let (xn, _) = rmsnorm_rows(&x, &layer.attn_norm, c, h);
            let mut q = vec![T::ZERO; c * h];
            let mut k = vec![T::ZERO; c * h];
            let mut v = vec![T::ZERO; c * h];
            matmul_nt(&mut q, &xn, &layer.wq, c, h, h);
            matmul_nt(&mut k, &xn, &layer.wk, c, h, h);
            matmul_nt(&mut v, &xn, &layer.wv, c, h, h);
            for s in 0..c {
                for hd in 0..heads {
                    let o = s * h + hd * dh;
                    apply_rope(&mut q[o..o + dh], coords[s], &self.model.rope)?;
                    apply_rope(&mut k[o..o + dh], coords[s], &self.model.rope)?;
                }
            }
            self.cache.k[l].extend_from_slice(&k);
            self.cache.v[l].extend_from_slice(&v);
            let ck = &self.cache.k[l];
            let cv = &self.cache.v[l];

            // Cache rows are walked t-outer with all chunk queries inside,
            // so each key/value row streams once per chunk. Per-(query,
            // head) arithmetic stays in ascending-t order, matching the
            // full forward bit for bit.
            let full = base + c;
            let vis = |sq: usize| match self.within {
                WithinGroup::Full => full,
                WithinGroup::Causal => base + sq + 1,
            };
            let mut scores = vec![T::ZERO; c * heads * full];
            for t in 0..full {
                let krow = &ck[t * h..(t + 1) * h];
                for sq in 0..c {
                    if t >= vis(sq) {
                        continue;
                    }
                    let qrow = &q[sq * h..(sq + 1) * h];
                    let srow = &mut scores[(sq * heads) * full..];
                    for hd in 0..heads {
                        srow[hd * full + t] =
                            dot(&qrow[hd * dh..(hd + 1) * dh], &krow[hd * dh..(hd + 1) * dh])
                                * scale;
                    }
                }
            }
            for sq in 0..c {
                let visible_end = vis(sq);
                for hd in 0..heads {
                    let row = &mut scores
                        [(sq * heads + hd) * full..(sq * heads + hd) * full + visible_end];
                    let mut max = T::NEG_INFINITY;
                    for sc in row.iter() {
                        max = max.max(*sc);
                    }
                    let mut sum = T::ZERO;
                    for sc in row.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let inv = T::ONE / sum;
                    for sc in row.iter_mut() {
                        *sc *= inv;
                    }
                }
            }
            let mut ctx = vec![T::ZERO; c * h];
            for t in 0..full {
                let vrow = &cv[t * h..(t + 1) * h];
                for sq in 0..c {
                    if t >= vis(sq) {
                        continue;
                    }
                    let crow = &mut ctx[sq * h..(sq + 1) * h];
                    for hd in 0..heads {
                        let p = scores[(sq * heads + hd) * full + t];
                        if p.to_f64() != 0.0 {
                            axpy(
                                &mut crow[hd * dh..(hd + 1) * dh],
                                p,
                                &vrow[hd * dh..(hd + 1) * dh],
                            );
                        }
                    }
                }
            }
            let mut attn_out = vec![T::ZERO; c * h];
            matmul_nt(&mut attn_out, &ctx, &layer.wo, c, h, h);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += *a;
            }

            let (xn2, _) = rmsnorm_rows(&x, &layer.mlp_norm, c, h);
            let mut gate = vec![T::ZERO; c * f];
            let mut up = vec![T::ZERO; c * f];
            matmul_nt(&mut gate, &xn2, &layer.w_gate, c, h, f);
            matmul_nt(&mut up, &xn2, &layer.w_up, c, h, f);
            for i in 0..c * f {
                gate[i] = gate[i] / (T::ONE + (-gate[i]).exp()) * up[i];
            }
            let mut mlp_out = vec![T::ZERO; c * h];
            matmul_nt(&mut mlp_out, &gate, &layer.w_down, c, f, h);
            for (xi, a) in x.iter_mut().zip(&mlp_out) {
                *xi += *a;
            }
        }
        self.cache.len += c;

        let (xn_final, _) = rmsnorm_rows(&x, &params.final_norm, c, h);
        let mut logits = vec![T::ZERO; c * cfg.vocab];
        matmul_nt(&mut logits, &xn_final, &params.head, c, h, cfg.vocab);
        Ok(logits)
    }

    fn model_embed(&self, value: SlotValue) -> Result<&'a [T]> {
        let cfg = &self.model.config;
        let h = cfg.hidden;
        let params = &self.model.params;
        match value {
            SlotValue::Label(id) => {
                if id as usize > cfg.labels {
                    return Err(Error::TokenOutOfRange { id, vocab: cfg.labels + 1 });
                }
                Ok(&params.label_emb[id as usize * h..(id as usize + 1) * h])
            }
            SlotValue::Token(id) => {
                if (id as usize) >= cfg.vocab {
                    return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
                }
                Ok(&params.tok_emb[id as usize * h..(id as usize + 1) * h])
            }
            SlotValue::Transition(i) => {
                let n = cfg.group_size();
                if i == 0 || i >= n {
                    return Err(Error::ChunkMismatch(format!("transition index {i} out of 1..{}", n - 1)));
                }
                Ok(&params.trans_emb[(i - 1) * h..i * h])
            }
        }
    }
}

/// Generation engine: one or two [`ChunkDecoder`] streams plus the sampling
/// state, advancing group by group through a layout.
pub struct DecodeEngine<'a, T> {
    model: &'a Model<T>,
    layout: &'a SequenceLayout,
    coords: Vec<Option<Coord>>,
    sampler: SamplerConfig,
    label: u32,
    streams: Vec<(u32, ChunkDecoder<'a, T>)>,
    next_group: usize,
    sampled: Vec<Option<u32>>,
    invocations: usize,
}

impl<'a, T: Real> DecodeEngine<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        layout: &'a SequenceLayout,
        label: u32,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        sampler.validate()?;
        if model.config.group_size() != layout.group_size() {
            return Err(Error::DimMismatch {
                context: "group size".into(),
                expected: model.config.group_size().to_string(),
                got: layout.group_size().to_string(),
            });
        }
        if layout.slot_count() > model.config.max_slots {
            return Err(Error::DimMismatch {
                context: "slots".into(),
                expected: format!("<= {}", model.config.max_slots),
                got: layout.slot_count().to_string(),
            });
        }
        if label as usize >= model.config.labels {
            return Err(Error::TokenOutOfRange { id: label, vocab: model.config.labels });
        }
        let coords = layout.slot_coords(model.config.transition_rope);
        let mut streams = vec![(label, ChunkDecoder::new(model))];
        if sampler.guidance_scale != 1.0 {
            streams.push((model.config.null_label(), ChunkDecoder::new(model)));
        }
        Ok(Self {
            model,
            layout,
            coords,
            sampler,
            label,
            streams,
            next_group: 0,
            sampled: vec![None; layout.token_count()],
            invocations: 0,
        })
    }

    /// Model invocations so far, per guidance branch.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn sampled(&self) -> &[Option<u32>] {
        &self.sampled
    }

    /// Feeds one attention group on one stream after checking that `slots`
    /// is exactly the next group. Returns the stream's logit rows.
    pub fn decode_chunk(
        &mut self,
        stream: usize,
        slots: std::ops::Range<usize>,
        values: &[SlotValue],
    ) -> Result<Vec<T>> {
        let group = self
            .layout
            .attn_groups
            .get(self.next_group)
            .ok_or_else(|| Error::ChunkMismatch("past the final group".into()))?;
        if slots.start != group.start || slots.len() != group.len {
            return Err(Error::ChunkMismatch(format!(
                "expected slots {}..{}, got {}..{}",
                group.start,
                group.start + group.len,
                slots.start,
                slots.end,
            )));
        }
        if values.len() != group.len {
            return Err(Error::ChunkMismatch(format!(
                "chunk carries {} values for a group of {}",
                values.len(),
                group.len
            )));
        }
        let decoder = &mut self.streams[stream].1;
        if decoder.len() != group.start {
            return Err(Error::DecodeDesync(format!(
                "stream {stream} cache at {} but group starts at {}",
                decoder.len(),
                group.start
            )));
        }
        decoder.decode_chunk(values, &self.coords[group.slots()])
    }

    fn group_values(&self, stream: usize) -> Result<Vec<SlotValue>> {
        let group = &self.layout.attn_groups[self.next_group];
        let label = self.streams[stream].0;
        group
            .slots()
            .map(|p| match self.layout.slots[p] {
                Slot::Label => Ok(SlotValue::Label(label)),
                Slot::Token(seq) => self.sampled[seq]
                    .map(SlotValue::Token)
                    .ok_or_else(|| Error::DecodeDesync(format!("token {seq} not yet sampled"))),
                Slot::Transition(i) => Ok(SlotValue::Transition(i)),
            })
            .collect()
    }

    /// Advances one generation step. Returns `false` once every token is
    /// sampled (the final group is never fed).
    pub fn step(&mut self) -> Result<bool> {
        if self.next_group + 1 >= self.layout.attn_groups.len() {
            return Ok(false);
        }
        let group = self.layout.attn_groups[self.next_group];
        let mut rows: Option<Vec<T>> = None;
        for stream in 0..self.streams.len() {
            let values = self.group_values(stream)?;
            let out = self.decode_chunk(stream, group.slots(), &values)?;
            rows = Some(match rows {
                None => out,
                Some(cond) => cfg_combine(&cond, &out, self.sampler.guidance_scale)?,
            });
        }
        let rows = rows.expect("at least one stream");
        if self.streams.len() == 2 {
            let (a, b) = (self.streams[0].1.len(), self.streams[1].1.len());
            if a != b {
                return Err(Error::DecodeDesync(format!("stream lengths diverged: {a} vs {b}")));
            }
        }
        let vocab = self.model.config.vocab;
        for (i, p) in group.slots().enumerate() {
            let seq = self.layout.target_of[p].ok_or_else(|| {
                Error::DecodeDesync(format!("fed slot {p} has no target"))
            })?;
            let mut rng = Rng::substream(self.sampler.seed, seq as u64);
            let id = sample_row(
                &rows[i * vocab..(i + 1) * vocab],
                self.sampler.temperature,
                self.sampler.top_k,
                &mut rng,
                seq,
            )?;
            self.sampled[seq] = Some(id);
        }
        self.next_group += 1;
        self.invocations += 1;
        Ok(true)
    }

    /// Runs to completion and assembles the raster-major grid.
    pub fn run(&mut self) -> Result<TokenGrid> {
        while self.step()? {}
        let seq: Option<Vec<u32>> = self.sampled.iter().copied().collect();
        let seq = seq.ok_or_else(|| Error::DecodeDesync("generation incomplete".into()))?;
        let raster = self.layout.plan.sequence_to_tokens(&seq);
        TokenGrid::new(self.layout.plan.shape, raster, self.label)
    }
}

/// Generates one grid with a fresh engine.
pub fn generate<T: Real>(
    model: &Model<T>,
    layout: &SequenceLayout,
    label: u32,
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    DecodeEngine::new(model, layout, label, sampler.clone())?.run()
}

/// Decodes by re-running the full prefix through [`Model::forward`] at every
/// step instead of using the cache. Reference oracle for cache equivalence;
/// byte-compatible sampling with [`DecodeEngine`].
pub fn generate_without_cache<T: Real>(
    model: &Model<T>,
    layout: &SequenceLayout,
    mask: &crate::layout::AttentionMask,
    label: u32,
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    sampler.validate()?;
    let coords = layout.slot_coords(model.config.transition_rope);
    let vocab = model.config.vocab;
    let use_guidance = sampler.guidance_scale != 1.0;
    let mut sampled: Vec<Option<u32>> = vec![None; layout.token_count()];
    for g in 0..layout.attn_groups.len() - 1 {
        let group = layout.attn_groups[g];
        let fed = group.start + group.len;
        let seq_now: Vec<u32> = sampled.iter().map(|t| t.unwrap_or(0)).collect();
        let mut rows = {
            let values = slot_values(layout, &seq_now, label);
            let logits = model.forward(&values[..fed], &coords[..fed], &mask.prefix(fed))?;
            logits[group.start * vocab..fed * vocab].to_vec()
        };
        if use_guidance {
            let values = slot_values(layout, &seq_now, model.config.null_label());
            let logits = model.forward(&values[..fed], &coords[..fed], &mask.prefix(fed))?;
            let uncond = &logits[group.start * vocab..fed * vocab];
            rows = cfg_combine(&rows, uncond, sampler.guidance_scale)?;
        }
        for (i, p) in group.slots().enumerate() {
            let seq = layout.target_of[p].expect("fed slots are targeted");
            let mut rng = Rng::substream(sampler.seed, seq as u64);
            let id = sample_row(
                &rows[i * vocab..(i + 1) * vocab],
                sampler.temperature,
                sampler.top_k,
                &mut rng,
                seq,
            )?;
            sampled[seq] = Some(id);
        }
    }
    let seq: Vec<u32> = sampled.into_iter().map(|t| t.expect("complete")).collect();
    let raster = layout.plan.sequence_to_tokens(&seq);
    TokenGrid::new(layout.plan.shape, raster, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::layout::{build_attention_mask, build_sequence_layout, TransitionRope};
    use crate::model::{init_model, ModelConfig};
    use crate::order::{build_order_plan, step_count};

    fn tiny_model(grid: GridShape, seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            vocab: 8,
            labels: 3,
            grid,
            max_slots: grid.token_count() + grid.group_size(),
            dropout: 0.0,
            attn_dropout: 0.0,
            label_dropout: 0.0,
            rope_base: 10000.0,
            transition_rope: TransitionRope::Identity,
            within_group: WithinGroup::Full,
        };
        init_model(cfg, seed).unwrap()
    }

    #[test]
    fn cfg_combine_examples() {
        let cond = vec![2.0f32, 0.0];
        let uncond = vec![1.0f32, 0.0];
        assert_eq!(cfg_combine(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(cfg_combine(&cond, &uncond, 0.0).unwrap(), uncond);
        assert_eq!(cfg_combine(&cond, &uncond, 1.5).unwrap(), vec![2.5, 0.0]);
        assert!(cfg_combine(&cond, &uncond[..1], 1.0).is_err());
    }

    #[test]
    fn top_k_one_is_argmax() {
        let row = vec![0.3f32, 2.0, -1.0, 1.9];
        for seed in 0..20 {
            let mut rng = Rng::seeded(seed);
            assert_eq!(sample_row(&row, 1.0, 1, &mut rng, 0).unwrap(), 1);
        }
    }

    #[test]
    fn oversized_top_k_is_unrestricted() {
        let row: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut r1 = Rng::seeded(3);
        let mut r2 = Rng::seeded(3);
        for i in 0..100 {
            let a = sample_row(&row, 1.0, 8000, &mut r1, i).unwrap();
            let b = sample_row(&row, 1.0, 0, &mut r2, i).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        let row = vec![3.0f64.ln() as f32, 0.0];
        let mut rng = Rng::seeded(11);
        let draws = 100_000;
        let sampler = SamplerConfig::default();
        let mut first = 0usize;
        for _ in 0..draws {
            let ids = sample_tokens(&row, 2, &sampler, &mut rng).unwrap();
            if ids[0] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn degenerate_row_is_rejected() {
        let row = vec![f32::NEG_INFINITY; 4];
        let mut rng = Rng::seeded(0);
        assert!(matches!(
            sample_row(&row, 1.0, 0, &mut rng, 7),
            Err(Error::DegenerateLogits { row: 7 })
        ));
    }

    #[test]
    fn boundary_ties_keep_the_lower_id() {
        // ids 0 and 2 tie at the k=2 boundary; id 0 must win the slot.
        let row = vec![1.0f32, 2.0, 1.0, 0.5];
        let mut rng = Rng::seeded(1);
        for i in 0..200 {
            let id = sample_row(&row, 1.0, 2, &mut rng, i).unwrap();
            assert!(id == 0 || id == 1, "unexpected id {id}");
        }
    }

    #[test]
    fn chunk_logits_match_full_forward() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 21);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let mask = build_attention_mask(&layout);
        let coords = layout.slot_coords(TransitionRope::Identity);
        let mut rng = Rng::seeded(5);
        let seq: Vec<u32> = (0..16).map(|_| rng.below(8) as u32).collect();
        let values = slot_values(&layout, &seq, 1);

        let mut dec = ChunkDecoder::new(&model);
        let vocab = model.config.vocab;
        for group in &layout.attn_groups {
            let fed = group.start + group.len;
            let rows = dec
                .decode_chunk(&values[group.slots()], &coords[group.slots()])
                .unwrap();
            let full = model
                .forward(&values[..fed], &coords[..fed], &mask.prefix(fed))
                .unwrap();
            let want = &full[group.start * vocab..fed * vocab];
            for (a, b) in rows.iter().zip(want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
        assert_eq!(dec.len(), layout.slot_count());
    }

    #[test]
    fn single_slot_chunks_are_plain_incremental_decode() {
        let grid = GridShape::image(3, 3, 1).unwrap();
        let model = tiny_model(grid, 8);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let coords = layout.slot_coords(TransitionRope::Identity);
        let mut rng = Rng::seeded(2);
        let seq: Vec<u32> = (0..9).map(|_| rng.below(8) as u32).collect();
        let values = slot_values(&layout, &seq, 0);
        let mask = build_attention_mask(&layout);

        let mut dec = ChunkDecoder::new(&model);
        let vocab = model.config.vocab;
        for p in 0..layout.slot_count() {
            let rows = dec.decode_chunk(&values[p..p + 1], &coords[p..p + 1]).unwrap();
            let full = model
                .forward(&values[..p + 1], &coords[..p + 1], &mask.prefix(p + 1))
                .unwrap();
            assert_eq!(rows, full[p * vocab..(p + 1) * vocab].to_vec());
        }
    }

    #[test]
    fn reversing_a_chunk_permutes_its_rows() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 13).convert::<f64>();
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let coords = layout.slot_coords(TransitionRope::Identity);
        let mut rng = Rng::seeded(3);
        let seq: Vec<u32> = (0..16).map(|_| rng.below(8) as u32).collect();
        let values = slot_values(&layout, &seq, 2);
        let vocab = model.config.vocab;

        // Feed the first five groups normally, then group 5 (slots 8..12)
        // forward on one stream and reversed on another.
        let feed_upto = |dec: &mut ChunkDecoder<f64>| {
            for group in &layout.attn_groups[..5] {
                dec.decode_chunk(&values[group.slots()], &coords[group.slots()]).unwrap();
            }
        };
        let group = layout.attn_groups[5];
        let mut fwd = ChunkDecoder::new(&model);
        feed_upto(&mut fwd);
        let rows_fwd = fwd
            .decode_chunk(&values[group.slots()], &coords[group.slots()])
            .unwrap();
        let mut rev = ChunkDecoder::new(&model);
        feed_upto(&mut rev);
        let rev_values: Vec<SlotValue> = group.slots().rev().map(|p| values[p]).collect();
        let rev_coords: Vec<Option<Coord>> = group.slots().rev().map(|p| coords[p]).collect();
        let rows_rev = rev.decode_chunk(&rev_values, &rev_coords).unwrap();
        for i in 0..group.len {
            let a = &rows_fwd[i * vocab..(i + 1) * vocab];
            let b = &rows_rev[(group.len - 1 - i) * vocab..(group.len - i) * vocab];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cache_prefix_never_mutates() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 4);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let coords = layout.slot_coords(TransitionRope::Identity);
        let seq: Vec<u32> = (0..16).map(|i| (i % 8) as u32).collect();
        let values = slot_values(&layout, &seq, 0);
        let mut dec = ChunkDecoder::new(&model);
        let mut snapshots: Vec<Vec<f32>> = Vec::new();
        for group in &layout.attn_groups[..6] {
            dec.decode_chunk(&values[group.slots()], &coords[group.slots()]).unwrap();
            let (k0, _) = dec.cache().layer(0);
            for (i, snap) in snapshots.iter().enumerate() {
                assert_eq!(&k0[..snap.len()], snap.as_slice(), "prefix changed after chunk {i}");
            }
            snapshots.push(k0.to_vec());
        }
    }

    #[test]
    fn engine_counts_steps_and_is_deterministic() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 30);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let sampler = SamplerConfig { seed: 77, ..Default::default() };
        let mut e1 = DecodeEngine::new(&model, &layout, 1, sampler.clone()).unwrap();
        let g1 = e1.run().unwrap();
        assert_eq!(e1.invocations(), step_count(grid));
        let mut e2 = DecodeEngine::new(&model, &layout, 1, sampler).unwrap();
        let g2 = e2.run().unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.tokens.len(), 16);
        assert!(g1.tokens.iter().all(|&t| t < 8));
    }

    #[test]
    fn guidance_runs_two_streams_in_lockstep() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 31);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let sampler = SamplerConfig { guidance_scale: 1.5, seed: 9, ..Default::default() };
        let mut engine = DecodeEngine::new(&model, &layout, 2, sampler.clone()).unwrap();
        let grid_out = engine.run().unwrap();
        assert_eq!(engine.invocations(), step_count(grid));
        // Matches the no-cache oracle under guidance too.
        let mask = build_attention_mask(&layout);
        let oracle = generate_without_cache(&model, &layout, &mask, 2, &sampler).unwrap();
        assert_eq!(grid_out, oracle);
    }

    #[test]
    fn cached_equals_uncached_greedy_and_stochastic() {
        for (grid, seed) in [
            (GridShape::image(4, 4, 2).unwrap(), 40u64),
            (GridShape::image(4, 4, 1).unwrap(), 41),
            (GridShape::image(8, 4, 2).unwrap(), 42),
        ] {
            let model = tiny_model(grid, seed);
            let plan = build_order_plan(grid).unwrap();
            let layout = build_sequence_layout(&plan);
            let mask = build_attention_mask(&layout);
            for sampler in [
                SamplerConfig { top_k: 1, seed, ..Default::default() },
                SamplerConfig { temperature: 0.9, seed, ..Default::default() },
            ] {
                let cached = generate(&model, &layout, 0, &sampler).unwrap();
                let slow = generate_without_cache(&model, &layout, &mask, 0, &sampler).unwrap();
                assert_eq!(cached, slow);
            }
        }
    }

    #[test]
    fn misaligned_chunks_are_rejected() {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let model = tiny_model(grid, 50);
        let plan = build_order_plan(grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let mut engine =
            DecodeEngine::new(&model, &layout, 0, SamplerConfig::default()).unwrap();
        // Group 0 is the label singleton; a two-slot chunk crosses it.
        let err = engine
            .decode_chunk(0, 0..2, &[SlotValue::Label(0), SlotValue::Token(0)])
            .unwrap_err();
        assert!(matches!(err, Error::ChunkMismatch(_)), "{err}");
    }
}
