//! Single-file little-endian checkpoint.
//!
//! Layout: magic `SALB1`, the 32-byte SHA-256 of the config JSON, the config
//! JSON (u32 length, bytes), the training step and Adam step (u64 each), then
//! a u32 array count and named f64 arrays (u32 name length, name, u32 rank,
//! u64 extents, data). Weights come first in registration order, followed by
//! `adam.m/<name>` and `adam.v/<name>` once the optimizer has stepped.

use std::path::Path;

use super::{ModelConfig, Trainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SALB1";

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let cfg = t.cfg();
    let json = cfg.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&cfg.digest());
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&t.state.step.to_le_bytes());
    out.extend_from_slice(&t.state.adam.step.to_le_bytes());

    let store = &t.state.store;
    let has_moments = !t.state.adam.m.is_empty();
    let count = store.len() * if has_moments { 3 } else { 1 };
    put_u32(&mut out, count);
    for (name, tensor) in store.iter() {
        put_array(&mut out, name, tensor.shape(), tensor.data());
    }
    if has_moments {
        for (prefix, moments) in [(ADAM_M, &t.state.adam.m), (ADAM_V, &t.state.adam.v)] {
            for ((name, tensor), buf) in store.iter().zip(moments) {
                put_array(&mut out, &format!("{prefix}{name}"), tensor.shape(), buf);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {} reading {n} bytes", self.at));
        };
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Rebuilds a trainer from checkpoint bytes; `path` is used for messages only.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Trainer> {
    let fail = |msg: String| Error::format(path, msg);
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(5).map_err(fail)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic, expected SALB1".into()));
    }
    let digest: [u8; 32] = r.take(32).map_err(fail)?.try_into().expect("32 bytes");
    let len = r.u32().map_err(fail)?;
    let json = std::str::from_utf8(r.take(len).map_err(fail)?)
        .map_err(|e| fail(format!("config is not UTF-8: {e}")))?;
    let cfg = ModelConfig::from_json(json)?;
    if cfg.digest() != digest {
        return Err(fail(
            "config digest does not match the embedded config".into(),
        ));
    }
    let step = r.u64().map_err(fail)?;
    let adam_step = r.u64().map_err(fail)?;
    let mut trainer = Trainer::new(&cfg)?;
    trainer.state.step = step;
    trainer.state.adam.step = adam_step;

    let count = r.u32().map_err(fail)?;
    let n_params = trainer.state.store.len();
    if count != n_params && count != 3 * n_params {
        return Err(fail(format!(
            "checkpoint holds {count} arrays, model has {n_params} parameters"
        )));
    }
    let names: Vec<String> = trainer
        .state
        .store
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for i in 0..count {
        let name_len = r.u32().map_err(fail)?;
        let name = std::str::from_utf8(r.take(name_len).map_err(fail)?)
            .map_err(|e| fail(format!("array name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32().map_err(fail)?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8).map_err(fail)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (slot, expected) = match i / n_params {
            0 => (None, names[i].clone()),
            1 => (Some(&mut m), format!("{ADAM_M}{}", names[i % n_params])),
            _ => (Some(&mut v), format!("{ADAM_V}{}", names[i % n_params])),
        };
        if name != expected {
            return Err(fail(format!(
                "array {i} is {name:?}, expected {expected:?}"
            )));
        }
        let want = trainer
            .state
            .store
            .iter()
            .nth(i % n_params)
            .expect("index")
            .1
            .shape()
            .to_vec();
        if shape != want {
            return Err(fail(format!(
                "array {name} has shape {shape:?}, expected {want:?}"
            )));
        }
        match slot {
            None => trainer.state.store.set_data(&name, &shape, data)?,
            Some(buf) => buf.push(data),
        }
    }
    if r.at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    trainer.state.adam.m = m;
    trainer.state.adam.v = v;
    Ok(trainer)
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
