//! Checkpoint container and atomic file writes.
//!
//! A checkpoint is a magic line, one line of JSON header (configs, tensor
//! table, optimizer hyperparameters, schedule position, random streams),
//! then every tensor as little-endian `f32` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::DecoderConfig;
use crate::model::{ModelConfig, Viact};
use crate::numerics::{AdamWState, ParamStore, Tensor};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &str = "VIACT-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    task: String,
    model: ModelConfig,
    decoder: DecoderConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    schedule_step: u64,
    epoch: usize,
    rng: Vec<(String, RngState)>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub task: String,
    pub model: Viact,
    pub optimizer: Option<AdamWState>,
    pub schedule_step: u64,
    pub epoch: usize,
    pub rng: Vec<(String, RngState)>,
}

impl Checkpoint {
    pub fn new(task: impl Into<String>, model: Viact) -> Self {
        Self {
            task: task.into(),
            model,
            optimizer: None,
            schedule_step: 0,
            epoch: 0,
            rng: Vec::new(),
        }
    }

    pub fn rng_state(&self, name: &str) -> Option<&RngState> {
        self.rng.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let mut tensors = Vec::new();
        let mut blob: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, decay: bool, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len(),
                len: data.len(),
                decay,
            });
            blob.extend_from_slice(data);
        };
        for (_, p) in store.iter() {
            push(p.name.clone(), p.value.shape().to_vec(), p.decay, p.value.data());
        }
        let optimizer = self.optimizer.as_ref().map(|o| {
            for (kind, moments) in [("first", o.first_moments()), ("second", o.second_moments())] {
                for ((_, p), m) in store.iter().zip(moments) {
                    push(format!("optimizer.{kind}.{}", p.name), p.value.shape().to_vec(), false, m);
                }
            }
            OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }
        });
        let header = Header {
            version: CHECKPOINT_VERSION,
            task: self.task.clone(),
            model: self.model.config().clone(),
            decoder: *self.model.decoder_config(),
            tensors,
            optimizer,
            schedule_step: self.schedule_step,
            epoch: self.epoch,
            rng: self.rng.clone(),
        };
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&header)?);
        out.push(b'\n');
        out.reserve(blob.len() * 4);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("missing checkpoint magic line"))?;
        let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt("checkpoint magic is not text"))?;
        if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(fmt(&format!("not a version-{CHECKPOINT_VERSION} checkpoint: `{magic}`")));
        }
        let rest = &bytes[nl + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("missing checkpoint header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl2])?;
        let blob = &rest[nl2 + 1..];
        if !blob.len().is_multiple_of(4) {
            return Err(fmt("checkpoint payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let slice = |e: &TensorEntry| -> Result<Tensor> {
            let data = floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| fmt(&format!("tensor {} runs past the payload", e.name)))?;
            Tensor::new(e.shape.clone(), data.to_vec())
        };
        let mut store = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for e in &header.tensors {
            if let Some(name) = e.name.strip_prefix("optimizer.first.") {
                first.push((name.to_string(), slice(e)?.into_data()));
            } else if let Some(name) = e.name.strip_prefix("optimizer.second.") {
                second.push((name.to_string(), slice(e)?.into_data()));
            } else {
                store.add(e.name.clone(), slice(e)?, e.decay)?;
            }
        }
        let expected_len: usize = header.tensors.iter().map(|e| e.len).sum();
        if expected_len != floats.len() {
            return Err(fmt("checkpoint payload has trailing data"));
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut o = AdamWState::with_hyper(&store, (h.beta1, h.beta2), h.eps, h.weight_decay);
                o.step = h.step;
                let order: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
                let names_match = |v: &[(String, Vec<f32>)]| v.len() == order.len() && v.iter().zip(&order).all(|((a, _), b)| a == b);
                if !names_match(&first) || !names_match(&second) {
                    return Err(fmt("optimizer moments do not match the parameter table"));
                }
                o.set_moments(
                    first.into_iter().map(|(_, d)| d).collect(),
                    second.into_iter().map(|(_, d)| d).collect(),
                );
                Some(o)
            }
            None => None,
        };
        let model = Viact::from_store(header.model, header.decoder, store)?;
        Ok(Self {
            task: header.task,
            model,
            optimizer,
            schedule_step: header.schedule_step,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require the stored encoder configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        check_config(expected, ck.model.config())?;
        Ok(ck)
    }
}

/// First field where `found` differs from `expected`.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let e = serde_json::to_value(expected)?;
    let f = serde_json::to_value(found)?;
    if let (Some(e), Some(f)) = (e.as_object(), f.as_object()) {
        for (key, ev) in e {
            let fv = f.get(key).cloned().unwrap_or(serde_json::Value::Null);
            if *ev != fv {
                return Err(Error::ConfigMismatch {
                    field: key.clone(),
                    expected: ev.to_string(),
                    found: fv.to_string(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGrads;
    use crate::rng;

    fn micro() -> Viact {
        let mut cfg = ModelConfig::tiny().with_dims(8, 2, 1);
        cfg.patch_size = 2;
        cfg.frames = 2;
        cfg.points = 3;
        Viact::new(cfg, DecoderConfig { dim: 4, depth: 1, heads: 1 }, &mut rng::stream(3, rng::STREAM_INIT)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut m = micro();
        let mut opt = AdamWState::new(m.store());
        let mut g = ParamGrads::empty(m.store().len());
        for (id, p) in m.store().iter() {
            g.set(id, (0..p.value.numel()).map(|i| (i as f32 * 0.37).sin()).collect());
        }
        opt.step(m.store_mut(), &g, 1e-3).unwrap();
        let mut ck = Checkpoint::new("pretrain", m);
        ck.optimizer = Some(opt);
        ck.schedule_step = 17;
        ck.epoch = 3;
        let mut r = rng::stream(5, rng::STREAM_DATA);
        let _: u64 = rand::Rng::random(&mut r);
        ck.rng.push((rng::STREAM_DATA.into(), rng::RngState::capture(&r)));

        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        let b = back.to_bytes().unwrap();
        assert_eq!(a, b);
        assert_eq!(back.optimizer.as_ref().unwrap().first_moments(), ck.optimizer.as_ref().unwrap().first_moments());
        assert_eq!(back.schedule_step, 17);
        assert_eq!(back.rng_state(rng::STREAM_DATA), ck.rng_state(rng::STREAM_DATA));
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_are_rejected() {
        let ck = Checkpoint::new("track", micro());
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello\n{}\n"), Err(Error::Format(_))));

        let mut other = ck.model.config().clone();
        other.embed_dim = 16;
        match check_config(&other, ck.model.config()) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "embed_dim"),
            r => panic!("expected mismatch, got {r:?}"),
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
