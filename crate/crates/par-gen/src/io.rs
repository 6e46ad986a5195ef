//! Checkpoint and token-file persistence.
//!
//! Checkpoint layout (little-endian): magic `PARC`, u32 version = 1,
//! u32 config-blob length, UTF-8 JSON config blob, then per tensor:
//! u16 name length, name bytes, u8 dtype (0 = f32), u8 rank, rank u64 dims,
//! raw row-major f32 data.
//!
//! Token-file layout (little-endian): magic `PTOK`, u32 version = 1,
//! u32 vocab, u32 grid count, u32 t, u32 h, u32 w, then
//! `count * t * h * w` u32 token ids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PARC";
pub const TOKEN_MAGIC: [u8; 4] = *b"PTOK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.offset,
                needed: n,
                available: self.bytes.len() - self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let offset = self.offset;
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::BadMagic {
                offset,
                expected,
                found: [got[0], got[1], got[2], got[3]],
            });
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn version(&mut self) -> Result<()> {
        let offset = self.offset;
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(Error::BadVersion { offset, expected: FORMAT_VERSION, found });
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

/// Serializes a 32-bit model: config blob plus every tensor in canonical
/// order.
pub fn checkpoint_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::MalformedFile(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for (name, dims, data) in model.params.tensors(&model.config) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

/// Parses a checkpoint, verifying magic, version, and that the tensor list
/// matches the embedded config exactly.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let config_len = r.u32()? as usize;
    let blob = r.take(config_len)?;
    let config: ModelConfig = serde_json::from_slice(blob)
        .map_err(|e| Error::MalformedFile(format!("config blob: {e}")))?;
    config.validate()?;

    let mut params = Params::<f32>::zeros(&config);
    let expected = config.clone();
    for (name, dims, _) in Params::<f32>::zeros(&expected).tensors(&expected) {
        let name_len = r.u16()? as usize;
        let got_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::MalformedFile(format!("tensor name: {e}")))?
            .to_string();
        if got_name != name {
            return Err(Error::MalformedFile(format!(
                "tensor order mismatch: expected {name}, found {got_name}"
            )));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::MalformedFile(format!("unsupported dtype {dtype} for {name}")));
        }
        let rank = r.u8()? as usize;
        if rank != dims.len() {
            return Err(Error::MalformedFile(format!(
                "rank mismatch for {name}: expected {}, found {rank}",
                dims.len()
            )));
        }
        let mut got_dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_dims.push(r.u64()? as usize);
        }
        if got_dims != dims {
            return Err(Error::MalformedFile(format!(
                "dims mismatch for {name}: expected {dims:?}, found {got_dims:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let mut tensors = params.tensors_mut();
        let (_, dst) = tensors
            .iter_mut()
            .find(|(n, _)| *n == name)
            .expect("canonical tensor");
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if !r.done() {
        return Err(Error::MalformedFile(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.offset
        )));
    }
    let rope = Model::<f32>::init(config.clone(), 0)?.rope;
    Ok(Model { config, params, rope })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Grids read back from a token file. The region count is not part of the
/// format; callers pick `m` when they build plans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub vocab: u32,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub grids: Vec<Vec<u32>>,
}

/// Serializes uniformly-shaped grids.
pub fn token_bytes(grids: &[&[u32]], vocab: u32, thw: (usize, usize, usize)) -> Result<Vec<u8>> {
    let (t, h, w) = thw;
    let per = t * h * w;
    if per == 0 {
        return Err(Error::BadShape("token grids cannot be empty".into()));
    }
    for g in grids {
        if g.len() != per {
            return Err(Error::DimMismatch {
                context: "token file".into(),
                expected: per.to_string(),
                got: g.len().to_string(),
            });
        }
        if let Some(&id) = g.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab as usize });
        }
    }
    let mut out = Vec::with_capacity(24 + grids.len() * per * 4);
    out.extend_from_slice(&TOKEN_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for g in grids {
        for id in *g {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_tokens(
    grids: &[&[u32]],
    vocab: u32,
    thw: (usize, usize, usize),
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, token_bytes(grids, vocab, thw)?)?;
    Ok(())
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<TokenFile> {
    let mut r = Reader::new(bytes);
    r.magic(TOKEN_MAGIC)?;
    r.version()?;
    let vocab = r.u32()?;
    let count = r.u32()? as usize;
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let per = t * h * w;
    if per == 0 {
        return Err(Error::MalformedFile("zero-sized grid dims".into()));
    }
    let mut grids = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.take(per * 4)?;
        let mut g = Vec::with_capacity(per);
        for chunk in raw.chunks_exact(4) {
            let id = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab: vocab as usize });
            }
            g.push(id);
        }
        grids.push(g);
    }
    if !r.done() {
        return Err(Error::MalformedFile(format!(
            "{} trailing bytes after the last grid",
            bytes.len() - r.offset
        )));
    }
    Ok(TokenFile { vocab, t, h, w, grids })
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenFile> {
    tokens_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::layout::{build_attention_mask, build_sequence_layout};
    use crate::model::{init_model, slot_values, ModelConfig};
    use crate::order::build_order_plan;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> Model<f32> {
        let grid = GridShape::image(4, 4, 2).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            vocab: 9,
            labels: 3,
            grid,
            max_slots: 20,
            ..ModelConfig::desk_default()
        };
        init_model(cfg, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = small_model(3);
        let bytes = checkpoint_bytes(&model).unwrap();
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params, model.params);

        // Round-tripped weights produce identical logits.
        let plan = build_order_plan(model.config.grid).unwrap();
        let layout = build_sequence_layout(&plan);
        let mask = build_attention_mask(&layout);
        let coords = layout.slot_coords(model.config.transition_rope);
        let mut rng = Rng::seeded(1);
        let seq: Vec<u32> = (0..16).map(|_| rng.below(9) as u32).collect();
        let values = slot_values(&layout, &seq, 1);
        let a = model.forward(&values, &coords, &mask).unwrap();
        let b = loaded.forward(&values, &coords, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_size_is_exact() {
        let model = small_model(4);
        let bytes = checkpoint_bytes(&model).unwrap();
        let config_len = serde_json::to_vec(&model.config).unwrap().len();
        let tensor_bytes: usize = model
            .params
            .tensors(&model.config)
            .iter()
            .map(|(name, dims, data)| 2 + name.len() + 1 + 1 + 8 * dims.len() + 4 * data.len())
            .sum();
        assert_eq!(bytes.len(), 4 + 4 + 4 + config_len + tensor_bytes);
    }

    #[test]
    fn corrupted_magic_names_the_offset() {
        let model = small_model(5);
        let mut bytes = checkpoint_bytes(&model).unwrap();
        bytes[1] = b'X';
        match checkpoint_from_bytes(&bytes) {
            Err(Error::BadMagic { offset: 0, .. }) => {}
            other => panic!("expected BadMagic at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported_with_position() {
        let model = small_model(6);
        let bytes = checkpoint_bytes(&model).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        match checkpoint_from_bytes(cut) {
            Err(Error::Truncated { offset, needed, available }) => {
                assert!(offset > 0 && needed > available);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_is_rejected() {
        let model = small_model(7);
        let mut bytes = checkpoint_bytes(&model).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::BadVersion { offset: 4, expected: 1, found: 9 })
        ));
    }

    #[test]
    fn token_file_payload_arithmetic() {
        // 100 grids of 1x12x12 at 4 bytes per id plus a 28-byte header.
        let grids: Vec<Vec<u32>> = (0..100).map(|i| vec![(i % 64) as u32; 144]).collect();
        let refs: Vec<&[u32]> = grids.iter().map(|g| g.as_slice()).collect();
        let bytes = token_bytes(&refs, 64, (1, 12, 12)).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 12 + 100 * 144 * 4);
        let back = tokens_from_bytes(&bytes).unwrap();
        assert_eq!(back.grids.len(), 100);
        assert_eq!(back.vocab, 64);
        assert_eq!((back.t, back.h, back.w), (1, 12, 12));
    }

    #[test]
    fn token_ids_at_or_above_vocab_are_rejected() {
        let g = vec![0u32, 1, 2, 3];
        assert!(token_bytes(&[&g], 4, (1, 2, 2)).is_ok());
        assert!(matches!(
            token_bytes(&[&g], 3, (1, 2, 2)),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        ));
        // Same check on load: corrupt a stored id upward.
        let mut bytes = token_bytes(&[&g], 4, (1, 2, 2)).unwrap();
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            tokens_from_bytes(&bytes),
            Err(Error::TokenOutOfRange { id: 99, vocab: 4 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn token_round_trip(seed in 0u64..1000, count in 1usize..5, h in 1usize..5, w in 1usize..5) {
            let mut rng = Rng::seeded(seed);
            let vocab = 2 + rng.below(30) as u32;
            let grids: Vec<Vec<u32>> = (0..count)
                .map(|_| (0..h * w).map(|_| rng.below(vocab as u64) as u32).collect())
                .collect();
            let refs: Vec<&[u32]> = grids.iter().map(|g| g.as_slice()).collect();
            let bytes = token_bytes(&refs, vocab, (1, h, w)).unwrap();
            let back = tokens_from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.grids, grids);
        }
    }
}
