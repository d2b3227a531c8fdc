//! Checkpoint file.
//!
//! Layout (little-endian): magic `VDCK`, `u32` version, `u64` total file
//! length, `u32` header length and a UTF-8 `key = value` header, `u32`
//! parameter count, then per parameter a `u32` name length, the name, a `u8`
//! group (0 spatial, 1 temporal) and an ATNS block; then the Adam first and
//! second moments as ATNS blocks in parameter order; finally a CRC-32 of all
//! preceding bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ParamGroup, ParamStore, UNet3D, UNetConfig};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{atns, Tensor};

use super::{Adam, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model_config: UNetConfig,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    pub rng: RngState,
}

fn header<T: Scalar>(c: &Checkpoint<T>) -> String {
    let mut lines = vec![format!("dtype = {}", T::DTYPE.name())];
    for (k, v) in c.model_config.to_kv() {
        lines.push(format!("{k} = {v}"));
    }
    lines.push(format!("schedule = {}", c.schedule.kind().name()));
    lines.push(format!("diffusion_steps = {}", c.schedule.steps()));
    lines.push(format!("beta_start = {:?}", c.schedule.beta_start()));
    lines.push(format!("beta_end = {:?}", c.schedule.beta_end()));
    for (k, v) in c.train.to_kv() {
        lines.push(format!("{k} = {v}"));
    }
    lines.push(format!("step = {}", c.step));
    lines.push(format!("optimizer_step = {}", c.optimizer.steps_taken()));
    lines.push(format!("rng_seed = {}", c.rng.seed));
    lines.push(format!("rng_stream = {}", c.rng.stream));
    lines.push(format!("rng_word_pos = {}", c.rng.word_pos));
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        let head = header(self);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(head.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.group {
                ParamGroup::Spatial => 0,
                ParamGroup::Temporal => 1,
            });
            out.extend_from_slice(&atns::encode(&p.value));
        }
        for t in self.optimizer.first_moments().iter().chain(self.optimizer.second_moments()) {
            out.extend_from_slice(&atns::encode(t));
        }
        let total = (out.len() + 4) as u64;
        out[8..16].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("checkpoint preamble".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let total = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if (bytes.len() as u64) < total {
            return Err(Error::Truncated(format!("checkpoint has {} of {total} bytes", bytes.len())));
        }
        if (bytes.len() as u64) > total || total < 20 {
            return Err(Error::Format(format!("checkpoint length {} does not match {total}", bytes.len())));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        parse_body(&body[16..])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The network with the stored weights.
    pub fn model(&self) -> Result<UNet3D<T>> {
        let mut model = UNet3D::new(self.model_config.clone(), 0)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Truncated(format!("checkpoint {what}")));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        atns::read(&mut self.0)
    }
}

fn parse_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("checkpoint header line {}: `{line}`", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_body<T: Scalar>(body: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor(body);
    let head_len = cur.u32("header length")? as usize;
    let head = std::str::from_utf8(cur.take(head_len, "header")?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let mut kv = parse_header(head)?;
    let mut get = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("checkpoint header lacks `{k}`")));
    let num = |k: &str, v: String| -> Result<f64> {
        v.parse().map_err(|_| Error::Format(format!("checkpoint `{k}` = `{v}` is not a number")))
    };
    let int = |k: &str, v: String| -> Result<u128> {
        v.parse().map_err(|_| Error::Format(format!("checkpoint `{k}` = `{v}` is not an integer")))
    };

    let _dtype = get("dtype")?;
    let mut model_config = UNetConfig::default();
    for (k, _) in UNetConfig::default().to_kv() {
        let v = get(k)?;
        model_config.apply_kv(k, &v).map_err(|e| Error::Format(e.to_string()))?;
    }
    let kind_name = get("schedule")?;
    let kind = ScheduleKind::parse(&kind_name)
        .ok_or_else(|| Error::Format(format!("unknown schedule `{kind_name}`")))?;
    let steps = int("diffusion_steps", get("diffusion_steps")?)? as usize;
    let start = num("beta_start", get("beta_start")?)?;
    let end = num("beta_end", get("beta_end")?)?;
    let schedule = NoiseSchedule::new(kind, steps, start, end)?;
    let mut train = TrainConfig::default();
    for (k, _) in TrainConfig::default().to_kv() {
        let v = get(k)?;
        train.apply_kv(k, &v).map_err(|e| Error::Format(e.to_string()))?;
    }
    let step = int("step", get("step")?)? as u64;
    let opt_step = int("optimizer_step", get("optimizer_step")?)? as u64;
    let rng = RngState {
        seed: int("rng_seed", get("rng_seed")?)? as u64,
        stream: int("rng_stream", get("rng_stream")?)? as u64,
        word_pos: int("rng_word_pos", get("rng_word_pos")?)?,
    };
    if let Some(extra) = kv.keys().next() {
        return Err(Error::Format(format!("unknown checkpoint header key `{extra}`")));
    }

    let count = cur.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = cur.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(cur.take(n, "parameter name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let group = match cur.take(1, "parameter group")?[0] {
            0 => ParamGroup::Spatial,
            1 => ParamGroup::Temporal,
            g => return Err(Error::Format(format!("unknown parameter group {g}"))),
        };
        params.add(name, group, cur.tensor()?);
    }
    let m = (0..count).map(|_| cur.tensor()).collect::<Result<Vec<Tensor<T>>>>()?;
    let v = (0..count).map(|_| cur.tensor()).collect::<Result<Vec<Tensor<T>>>>()?;
    if !cur.0.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", cur.0.len())));
    }
    let optimizer = Adam::from_state(train.lr_spatial, train.lr_temporal, opt_step, m, v)?;
    Ok(Checkpoint { model_config, schedule, train, params, optimizer, step, rng })
}
