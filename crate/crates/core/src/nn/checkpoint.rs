//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `OHCKPT01`, a little-endian `u64` header length,
//! a JSON header (config, vocabulary hash, tensor table, optimizer
//! hyperparameters, RNG state, step, free-form metadata), then raw
//! little-endian `f32` data: parameters, followed by the optimizer's first
//! and second moments when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::config::ModelConfig;
use super::float::Float;
use super::layout::TensorInfo;
use super::model::Transformer;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const MAGIC: &[u8; 8] = b"OHCKPT01";

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::input(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::input("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::input(format!("rng word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub vocab_hash: String,
    pub rng: Option<RngState>,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorInfo>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
    step: u64,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Transformer<f32>, vocab_hash: impl Into<String>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            vocab_hash: vocab_hash.into(),
            rng: None,
            step: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: f32::DTYPE.into(),
            config: *self.model.config(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: self.model.tensors().to_vec(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            rng: self.rng.clone(),
            step: self.step,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let np = self.model.num_params();
        let blocks = if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(16 + json.len() + blocks * np * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        self.model.params().iter().for_each(|&p| p.write_le(&mut out));
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(|&p| p.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::input(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.dtype != f32::DTYPE {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let np = header.config.num_params();
        let data = &bytes[16 + hlen..];
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        if data.len() != blocks * np * 4 {
            return Err(bad("payload size does not match the tensor table"));
        }
        let read = |block: usize| -> Vec<f32> {
            data[block * np * 4..(block + 1) * np * 4]
                .chunks_exact(4)
                .map(f32::read_le)
                .collect()
        };
        let model = Transformer::from_params(header.config, read(0))?;
        if model.tensors() != header.tensors.as_slice() {
            return Err(bad("tensor table does not match the model config"));
        }
        let optimizer = header.optimizer.map(|o| AdamW {
            config: o.config,
            step: o.step,
            m: read(1),
            v: read(2),
        });
        Ok(Checkpoint {
            model,
            optimizer,
            vocab_hash: header.vocab_hash,
            rng: header.rng,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form; identifies the checkpoint in
    /// provenance records.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 9,
            max_seq_len: 12,
            seed: 1,
        };
        let model = Transformer::<f32>::new(cfg).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), model.num_params());
        opt.step = 7;
        opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f32 * 1e-3);
        opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut c = Checkpoint::new(model, "abc");
        c.optimizer = Some(opt);
        c.rng = Some(RngState::capture(&rng));
        c.step = 42;
        c.meta.insert("stage".into(), "sft".into());
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.step, 42);
        assert_eq!(back.meta["stage"], "sft");
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 5] = rng.random();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
