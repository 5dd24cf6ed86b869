//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KLDD"  u32 version
//! u32 len, config text (UTF-8)
//! u64 epoch   u64 step
//! [u8; 32] rng seed   u64 rng stream   u128 rng word position
//! u64 adam steps
//! u32 parameter count, then per parameter:
//!     u32 len, name   u32 ndim   u64 dims…   f64 values…   f64 m…   f64 v…
//! ```
//!
//! Decoding followed by encoding reproduces the input bytes exactly.

use std::path::Path;

use kldd::model::ModelBundle;
use kldd::optim::Adam;
use kldd::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{data_err, CliError, Result};

pub const MAGIC: &[u8; 4] = b"KLDD";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub adam_steps: u64,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimiser steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: &ModelBundle, opt: &Adam, rng: &ChaCha8Rng, epoch: u64, step: u64) -> Self {
        Self {
            config: config.clone(),
            params: model.params.clone(),
            adam_m: opt.first_moments().to_vec(),
            adam_v: opt.second_moments().to_vec(),
            adam_steps: opt.steps(),
            rng: RngState::capture(rng),
            epoch,
            step,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config.to_text()?);
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&self.adam_steps.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for buf in [t.data(), &self.adam_m[i], &self.adam_v[i]] {
                for v in buf {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config = RunConfig::parse(&r.string()?).map_err(|e| format!("embedded config: {e}"))?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let adam_steps = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut adam_m, mut adam_v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
            let values = r.f64s(numel)?;
            adam_m.push(r.f64s(numel)?);
            adam_v.push(r.f64s(numel)?);
            let t = Tensor::new(&shape, values).map_err(|e| e.to_string())?;
            params.add(name, t).map_err(|e| e.to_string())?;
        }
        if r.at != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.at));
        }
        Ok(Self {
            config,
            params,
            adam_m,
            adam_v,
            adam_steps,
            rng: RngState { seed, stream, word_pos },
            epoch,
            step,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| data_err(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| data_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| data_err(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| data_err(path, e))
    }

    /// Model rebuilt from the stored config with the stored weights.
    pub fn model(&self) -> Result<ModelBundle> {
        let mut model = ModelBundle::new(self.config.model.clone(), self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(mismatch(format!(
                "checkpoint holds {} parameters, config builds {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for ((name, t), id) in self.params.iter().zip(model.params.ids().collect::<Vec<_>>()) {
            let want = model.params.get(id);
            if model.params.name(id) != name || want.shape() != t.shape() {
                return Err(mismatch(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    model.params.name(id),
                    want.shape()
                )));
            }
            model.params.set_data(id, t.data())?;
        }
        Ok(model)
    }

    pub fn optimizer(&self) -> Result<Adam> {
        Ok(Adam::from_state(
            self.config.adam,
            self.adam_m.clone(),
            self.adam_v.clone(),
            self.adam_steps,
        )?)
    }
}

fn mismatch(msg: String) -> CliError {
    CliError::Config(format!("checkpoint/config mismatch: {msg}"))
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or("truncated checkpoint")?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflows")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
