//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CRLCKPT1"
//! u32 len, canonical architecture text
//! u64 epoch, u64 step, u64 seed, u64 adam_t
//! f64 lr, f64 beta1, f64 beta2, f64 epsilon
//! u32 record count
//! records: u32 name len, name, u32 rank, u64 extents[rank], f64 payload
//! ```
//!
//! Records hold parameters under their own names, running statistics as
//! `running/{layer}/mean|var` and Adam moments as `adam/m|v/{param}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::network::Model;
use super::spec::{canonical_text, digest, parse_canonical};
use super::train::TrainState;
use crate::engine::{AdamConfig, AdamState, ParamSet, RunningStats, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRLCKPT1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let text = canonical_text(&model.spec, &model.weights);
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    for v in [state.epoch, state.step, state.seed, state.adam.t] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let c = &state.adam.config;
    for v in [c.lr, c.beta1, c.beta2, c.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let count = model.params.len() + 2 * model.running.len() + state.adam.m.len() + state.adam.v.len();
    put_u32(&mut out, count)?;
    for (name, t) in model.params.iter() {
        put_record(&mut out, name, t.shape(), t.data())?;
    }
    for (name, r) in &model.running {
        put_record(&mut out, &format!("running/{name}/mean"), &[r.mean.len()], &r.mean)?;
        put_record(&mut out, &format!("running/{name}/var"), &[r.var.len()], &r.var)?;
    }
    for (kind, map) in [("m", &state.adam.m), ("v", &state.adam.v)] {
        for (name, data) in map {
            put_record(&mut out, &format!("adam/{kind}/{name}"), &[data.len()], data)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated checkpoint: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 text in checkpoint".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint: bad magic (expected CRLCKPT1)".into()));
    }
    let text = r.string()?;
    let (spec, weights) = parse_canonical(&text)?;
    let (epoch, step, seed, t) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let config = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut running: BTreeMap<String, RunningStats> = BTreeMap::new();
    let mut adam = AdamState::new(config);
    adam.t = t;
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if let Some(rest) = name.strip_prefix("running/") {
            let (layer, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad record name {name}")))?;
            let entry = running.entry(layer.to_string()).or_insert_with(|| RunningStats::new(0));
            match field {
                "mean" => entry.mean = data,
                "var" => entry.var = data,
                _ => return Err(Error::Checkpoint(format!("bad record name {name}"))),
            }
        } else if let Some(rest) = name.strip_prefix("adam/") {
            match rest.split_once('/') {
                Some(("m", p)) => adam.m.insert(p.to_string(), data),
                Some(("v", p)) => adam.v.insert(p.to_string(), data),
                _ => return Err(Error::Checkpoint(format!("bad record name {name}"))),
            };
        } else {
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    let model = Model {
        spec,
        weights,
        params,
        running,
    };
    model.check_layout()?;
    Ok(TrainState {
        model,
        adam,
        epoch,
        step,
        seed,
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state)?)
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

/// Loads a checkpoint and insists its architecture digest equals `expected`.
pub fn load_matching(path: &Path, expected: &str) -> Result<TrainState> {
    let state = load(path)?;
    let found = digest(&state.model.spec, &state.model.weights);
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {found}, configuration {expected}"
        )));
    }
    Ok(state)
}
