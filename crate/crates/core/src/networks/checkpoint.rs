//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `RENCKPT1`, u64 config length + TOML config text, u64 parameter count, then per
//! parameter: u64 name length, name, u64 rank, u64 extents, f64 values. After that:
//! u64 L + current α, u64 epochs completed, u8 optimizer flag and, when set, the two
//! optimizer states (per slot: u64 steps, u64 moment length, first moments, second moments).

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{build_model, RenModel};
use crate::autodiff::{Adam, Tensor};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RENCKPT1";

/// Optimizer moments for the two update phases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub vae: Adam,
    pub ren: Adam,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: RenModel,
    pub epochs_completed: u64,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_bytes(&mut w, self.config.to_toml().as_bytes());
        let entries = self.model.params().entries();
        put_u64(&mut w, entries.len() as u64);
        for e in entries {
            put_bytes(&mut w, e.name.as_bytes());
            put_u64(&mut w, e.value.rank() as u64);
            for &d in e.value.shape() {
                put_u64(&mut w, d as u64);
            }
            put_f64s(&mut w, e.value.data());
        }
        put_u64(&mut w, self.model.current_alpha.len() as u64);
        put_f64s(&mut w, &self.model.current_alpha);
        put_u64(&mut w, self.epochs_completed);
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                put_adam(&mut w, &o.vae);
                put_adam(&mut w, &o.ren);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.error(
                0,
                format!(
                    "expected magic {:?}, found {:?}",
                    "RENCKPT1",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let cfg_at = r.pos;
        let text = r.bytes_field()?;
        let text = std::str::from_utf8(text)
            .map_err(|e| r.error(cfg_at, format!("config is not UTF-8: {e}")))?;
        let config = ExperimentConfig::parse(text)
            .map_err(|e| r.error(cfg_at, format!("config echo: {e}")))?;
        let mut model =
            build_model(&config).map_err(|e| r.error(cfg_at, format!("rebuilding model: {e}")))?;

        let count_at = r.pos;
        let count = r.u64()? as usize;
        if count != model.params().len() {
            return Err(r.error(
                count_at,
                format!(
                    "{count} parameters stored, model has {}",
                    model.params().len()
                ),
            ));
        }
        for _ in 0..count {
            let at = r.pos;
            let name = String::from_utf8_lossy(r.bytes_field()?).into_owned();
            let id = model
                .params()
                .find(&name)
                .ok_or_else(|| r.error(at, format!("unknown parameter {name:?}")))?;
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(r.error(at, format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let expected = model.params().get(id).shape().to_vec();
            if shape != expected {
                return Err(r.error(
                    at,
                    format!("{name}: stored shape {shape:?}, model expects {expected:?}"),
                ));
            }
            let values = r.f64s(expected.iter().product())?;
            *model.params_mut().get_mut(id) = Tensor::new(shape, values)?;
        }
        let at = r.pos;
        let l = r.u64()? as usize;
        if l != model.latent_dim() {
            return Err(r.error(
                at,
                format!(
                    "alpha has {l} entries, latent size is {}",
                    model.latent_dim()
                ),
            ));
        }
        model.current_alpha = r.f64s(l)?;
        let epochs_completed = r.u64()?;
        let flag_at = r.pos;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => Some(OptimizerState {
                vae: r.adam()?,
                ren: r.adam()?,
            }),
            f => return Err(r.error(flag_at, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            model,
            epochs_completed,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_adam(w: &mut Vec<u8>, a: &Adam) {
    let (steps, m, v) = a.state();
    put_u64(w, steps.len() as u64);
    for i in 0..steps.len() {
        put_u64(w, steps[i]);
        put_u64(w, m[i].len() as u64);
        put_f64s(w, &m[i]);
        put_f64s(w, &v[i]);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: String) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: offset as u64,
            detail,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!(
                    "truncated: needed {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error(self.pos, "length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn adam(&mut self) -> Result<Adam> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(self.error(self.pos, format!("implausible optimizer slot count {n}")));
        }
        let (mut steps, mut m, mut v) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for _ in 0..n {
            steps.push(self.u64()?);
            let len = self.u64()? as usize;
            m.push(self.f64s(len)?);
            v.push(self.f64s(len)?);
        }
        Adam::from_state(steps, m, v)
    }
}
