//! Versioned binary containers for trained weights and resumable trainer
//! state.
//!
//! Both files share the same conventions: an eight-byte magic, a format
//! version, the effective config as a TOML blob, and raw little-endian
//! `f64` weight vectors. Weights stay exact across a save/load round trip,
//! which the determinism and resume guarantees depend on.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::{Ablation, TrainConfig};

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRUPCKPT";
const STATE_MAGIC: &[u8; 8] = b"FRUPSTAT";
const FORMAT_VERSION: u32 = 1;

/// Trained weights plus the exact configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub ablation: Ablation,
    /// One flat `[autoencoder | head]` vector per branch; dual models hold
    /// `[low, high]`, single-branch and full-spectrum models hold one.
    pub param_sets: Vec<Vec<f64>>,
}

/// Resumable optimizer state: everything needed to continue an interrupted
/// run and reproduce its remaining epochs bit for bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub ablation: Ablation,
    /// Completed epochs.
    pub epoch: usize,
    pub best_loss: f64,
    pub strikes: usize,
    pub adam_t: u64,
    pub loss_history: Vec<f64>,
    pub param_sets: Vec<Vec<f64>>,
    pub best_params: Vec<Vec<f64>>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn f64_vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    fn f64_sets(&mut self, sets: &[Vec<f64>]) {
        self.u64(sets.len() as u64);
        for s in sets {
            self.f64_vec(s);
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))
    }
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path, magic: &[u8; 8]) -> Result<Reader> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf, pos: 0 };
        let found = r.take(8)?;
        if found != magic {
            return Err(Error::Checkpoint(format!(
                "{} is not a recognized container (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if self.pos + 8 * n > self.buf.len() {
            return Err(Error::Checkpoint("container truncated".into()));
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    fn f64_sets(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64_vec()?);
        }
        Ok(out)
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes in container".into()));
        }
        Ok(())
    }
}

fn encode_cfg(cfg: &TrainConfig, ablation: Ablation) -> Result<(Vec<u8>, u8)> {
    let text = toml::to_string(cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    Ok((text.into_bytes(), ablation.code()))
}

fn decode_cfg(bytes: &[u8], code: u8) -> Result<(TrainConfig, Ablation)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
    let cfg: TrainConfig = toml::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("config parse failed: {e}")))?;
    let ablation = Ablation::from_code(code)?;
    Ok((cfg, ablation))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (cfg_blob, code) = encode_cfg(&self.cfg, self.ablation)?;
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.bytes(&cfg_blob);
        w.u64(code as u64);
        w.f64_sets(&self.param_sets);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = Reader::open(path, CHECKPOINT_MAGIC)?;
        let cfg_blob = r.bytes()?;
        let code = r.u64()? as u8;
        let param_sets = r.f64_sets()?;
        r.done()?;
        let (cfg, ablation) = decode_cfg(&cfg_blob, code)?;
        let ckpt = Checkpoint {
            cfg,
            ablation,
            param_sets,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Rejects weight vectors that do not match the architecture implied by
    /// the stored config.
    pub fn validate(&self) -> Result<()> {
        let expect = crate::training::branch_param_count(&self.cfg)?;
        let want_sets = if self.ablation.is_dual() { 2 } else { 1 };
        if self.param_sets.len() != want_sets {
            return Err(Error::Checkpoint(format!(
                "expected {want_sets} weight sets for {}, found {}",
                self.ablation.tag(),
                self.param_sets.len()
            )));
        }
        for (i, s) in self.param_sets.iter().enumerate() {
            if s.len() != expect {
                return Err(Error::Checkpoint(format!(
                    "weight set {i} holds {} values, architecture needs {expect}",
                    s.len()
                )));
            }
        }
        Ok(())
    }
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (cfg_blob, code) = encode_cfg(&self.cfg, self.ablation)?;
        let mut w = Writer::new(STATE_MAGIC);
        w.bytes(&cfg_blob);
        w.u64(code as u64);
        w.u64(self.epoch as u64);
        w.f64(self.best_loss);
        w.u64(self.strikes as u64);
        w.u64(self.adam_t);
        w.f64_vec(&self.loss_history);
        w.f64_sets(&self.param_sets);
        w.f64_sets(&self.best_params);
        w.f64_sets(&self.adam_m);
        w.f64_sets(&self.adam_v);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let mut r = Reader::open(path, STATE_MAGIC)?;
        let cfg_blob = r.bytes()?;
        let code = r.u64()? as u8;
        let epoch = r.u64()? as usize;
        let best_loss = r.f64()?;
        let strikes = r.u64()? as usize;
        let adam_t = r.u64()?;
        let loss_history = r.f64_vec()?;
        let param_sets = r.f64_sets()?;
        let best_params = r.f64_sets()?;
        let adam_m = r.f64_sets()?;
        let adam_v = r.f64_sets()?;
        r.done()?;
        let (cfg, ablation) = decode_cfg(&cfg_blob, code)?;
        Ok(TrainState {
            cfg,
            ablation,
            epoch,
            best_loss,
            strikes,
            adam_t,
            loss_history,
            param_sets,
            best_params,
            adam_m,
            adam_v,
        })
    }

    /// The best-loss weights seen so far, as a scoring-ready checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg.clone(),
            ablation: self.ablation,
            param_sets: self.best_params.clone(),
        }
    }
}
