//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TMAM"  u32 version
//! repeated: u8 kind, u64 payload length, payload
//!   kind 1  config      UTF-8 `key = value` text
//!   kind 2  progress    u64 stage-I steps, u64 stage-II steps
//!   kind 3  parameter   u32 name length, name, u32 rank, u64 dims…, f64 data…
//!   kind 4  optimizer   u64 steps, u32 slots, then per slot:
//!                       u32 name length, name, u64 n, f64 m[n], f64 v[n]
//! ```
//!
//! Scalars are stored as raw IEEE-754 bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::optim::{Adam, AdamSlot};
use crate::error::{Error, Result};
use crate::nn::TmambaModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TMAM";
pub const VERSION: u32 = 1;

const KIND_CONFIG: u8 = 1;
const KIND_PROGRESS: u8 = 2;
const KIND_PARAM: u8 = 3;
const KIND_OPTIMIZER: u8 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

/// A model with its configuration, weights and optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: TmambaModel,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
    pub progress: Progress,
}

impl Checkpoint {
    /// Freshly initialised model for `config`, seeded from `config.seed`.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = TmambaModel::new(config.model_config(), &mut store, config.seed)?;
        Ok(Self {
            config,
            model,
            store,
            optimizer: None,
            progress: Progress::default(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        record(&mut out, KIND_CONFIG, self.config.to_text().as_bytes());

        let mut p = Vec::new();
        p.extend_from_slice(&self.progress.stage1_steps.to_le_bytes());
        p.extend_from_slice(&self.progress.stage2_steps.to_le_bytes());
        record(&mut out, KIND_PROGRESS, &p);

        for (_, param) in self.store.iter() {
            let mut p = Vec::new();
            put_name(&mut p, &param.name);
            let shape = param.value.shape();
            p.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut p, param.value.data());
            record(&mut out, KIND_PARAM, &p);
        }

        if let Some(opt) = &self.optimizer {
            let mut p = Vec::new();
            p.extend_from_slice(&opt.steps.to_le_bytes());
            p.extend_from_slice(&(opt.slots.len() as u32).to_le_bytes());
            for s in &opt.slots {
                put_name(&mut p, self.store.name(s.id));
                p.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
                put_f64s(&mut p, s.m.data());
                put_f64s(&mut p, s.v.data());
            }
            record(&mut out, KIND_OPTIMIZER, &p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing TMAM magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads {VERSION})"
            )));
        }

        let mut config = None;
        let mut progress = None;
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut optimizer = None;
        while r.pos < bytes.len() {
            let kind = r.take(1)?[0];
            let len = r.u64()? as usize;
            let offset = r.pos;
            let mut body = Reader {
                bytes: r.take(len)?,
                pos: 0,
            };
            match kind {
                KIND_CONFIG => {
                    let text = std::str::from_utf8(body.bytes)
                        .map_err(|_| r.error_at(offset, "config record is not UTF-8"))?;
                    config = Some(RunConfig::parse(text)?);
                    body.pos = body.bytes.len();
                }
                KIND_PROGRESS => {
                    progress = Some(Progress {
                        stage1_steps: body.u64()?,
                        stage2_steps: body.u64()?,
                    });
                }
                KIND_PARAM => {
                    let name = body.name()?;
                    let rank = body.u32()? as usize;
                    let shape = (0..rank)
                        .map(|_| body.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n = shape.iter().product();
                    let data = body.f64s(n)?;
                    let t = Tensor::new(&shape, data)
                        .map_err(|e| r.error_at(offset, &format!("parameter `{name}`: {e}")))?;
                    if params.insert(name.clone(), t).is_some() {
                        return Err(r.error_at(offset, &format!("duplicate parameter `{name}`")));
                    }
                }
                KIND_OPTIMIZER => {
                    let steps = body.u64()?;
                    let count = body.u32()? as usize;
                    let mut slots = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        let name = body.name()?;
                        let n = body.u64()? as usize;
                        slots.push((name, body.f64s(n)?, body.f64s(n)?));
                    }
                    optimizer = Some((steps, slots));
                }
                other => return Err(r.error_at(offset, &format!("unknown record kind {other}"))),
            }
            if body.pos != body.bytes.len() {
                return Err(r.error_at(offset + body.pos, "record has trailing bytes"));
            }
        }

        let config = config.ok_or_else(|| Error::Checkpoint("no config record".into()))?;
        let progress = progress.ok_or_else(|| Error::Checkpoint("no progress record".into()))?;
        let mut ck = Checkpoint::init(config)?;
        for id in ck.store.ids().collect::<Vec<_>>() {
            let name = ck.store.name(id).to_string();
            let t = params.remove(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks parameter `{name}` required by its config"))
            })?;
            if t.shape() != ck.store.value(id).shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    ck.store.value(id).shape()
                )));
            }
            *ck.store.value_mut(id) = t;
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint parameter `{extra}` is not part of its config"
            )));
        }
        if let Some((steps, slots)) = optimizer {
            let mut opt = Adam { steps, slots: Vec::new() };
            for (name, m, v) in slots {
                let id = ck
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer slot for unknown `{name}`")))?;
                let shape = ck.store.value(id).shape().to_vec();
                let m = Tensor::new(&shape, m).map_err(|e| Error::Checkpoint(format!("`{name}` m: {e}")))?;
                let v = Tensor::new(&shape, v).map_err(|e| Error::Checkpoint(format!("`{name}` v: {e}")))?;
                opt.slots.push(AdamSlot { id, m, v });
            }
            ck.optimizer = Some(opt);
        }
        ck.progress = progress;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn record(out: &mut Vec<u8>, kind: u8, payload: &[u8]) {
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint(format!("at byte {offset}: {msg}"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error_at(self.pos, &format!("truncated: wanted {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, "name is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.error_at(self.pos, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            channels: 4,
            crop: 16,
            synthetic_size: 16,
            ..RunConfig::desk()
        }
    }

    fn perturbed() -> Checkpoint {
        let mut ck = Checkpoint::init(tiny()).unwrap();
        for id in ck.store.ids().collect::<Vec<_>>() {
            for (i, v) in ck.store.value_mut(id).data_mut().iter_mut().enumerate() {
                *v += 1e-3 * (i as f64).sin() / 3.0;
            }
        }
        let ids: Vec<_> = ck.store.ids_with_prefix("decoder").collect();
        let mut opt = Adam::new(&ck.store, ids);
        opt.steps = 17;
        opt.slots[0].m.data_mut()[0] = 0.1 + 0.2;
        opt.slots[0].v.data_mut()[0] = f64::MIN_POSITIVE;
        ck.optimizer = Some(opt);
        ck.progress = Progress {
            stage1_steps: 200,
            stage2_steps: 3,
        };
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = perturbed();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.progress, ck.progress);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((_, a), (_, b)) in ck.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_is_magic_then_version() {
        let bytes = perturbed().to_bytes();
        assert_eq!(&bytes[..4], b"TMAM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(bytes[8], KIND_CONFIG);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = perturbed().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let ck = perturbed();
        let text = ck.config.to_text().replace("channels = 4", "channels = 6");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        record(&mut bytes, KIND_CONFIG, text.as_bytes());
        let orig = ck.to_bytes();
        // splice the original records after the config record
        let cfg_len = 8 + 1 + 8 + ck.config.to_text().len();
        bytes.extend_from_slice(&orig[cfg_len..]);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Config(_))));
    }
}
