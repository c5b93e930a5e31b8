//! `BEAT` checkpoint container.
//!
//! Layout (little-endian): magic `BEAT`, `u32` version, `u32` config entry
//! count followed by length-prefixed UTF-8 key and value strings, `u32` array
//! count, then per array a length-prefixed name, `u32` rank, `u32` dims and
//! `f32` data in row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::NdFloat;

use super::config::BeatConfig;
use super::params::{init_model, BeatParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BEAT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint<F: NdFloat>(params: &BeatParams<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let pairs = params.config.to_pairs();
    put_u32(&mut out, pairs.len() as u32);
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let arrays = params.arrays();
    put_u32(&mut out, arrays.len() as u32);
    for (name, a) in arrays {
        put_str(&mut out, &name);
        put_u32(&mut out, a.ndim() as u32);
        for &d in a.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in a.iter() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BeatParams<f32>> {
    let mut r = Reader { bytes };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected BEAT".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let n_pairs = r.u32("config count")?;
    let mut pairs = Vec::with_capacity(n_pairs as usize);
    for _ in 0..n_pairs {
        let k = r.string("config key")?;
        let v = r.string("config value")?;
        pairs.push((k, v));
    }
    let config = BeatConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    let n_arrays = r.u32("array count")?;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..n_arrays {
        let name = r.string("array name")?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let len: usize = dims.iter().product();
        let data = r
            .take(4 * len, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        stored.insert(name, (dims, data));
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.bytes.len())));
    }

    let mut params: BeatParams<f32> = init_model(&config, 0)?;
    for (name, mut dst) in params.arrays_mut() {
        let (dims, data) = stored
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if dims != dst.shape() {
            return Err(Error::Shape(format!(
                "array {name} is {dims:?}, config implies {:?}",
                dst.shape()
            )));
        }
        for (d, s) in dst.iter_mut().zip(data) {
            *d = s;
        }
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected array {extra}")));
    }
    Ok(params)
}

pub fn save_checkpoint<F: NdFloat>(params: &BeatParams<F>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BeatParams<f32>> {
    decode_checkpoint(&fs::read(path)?)
}
