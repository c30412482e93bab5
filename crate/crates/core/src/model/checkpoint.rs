//! Binary checkpoint: `LOOPVIT\0`, `u32` format version, `u32` length and
//! JSON of the config, `u32` block count, then per block a `u32`-prefixed
//! UTF-8 name, `u32` rank, `u32` dims and little-endian `f32` values.
//! All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::config::LoopVitConfig;
use super::forward::LoopVit;
use super::params::{param_shapes, LoopVitParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LOOPVIT\0";
pub const FORMAT_VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| ck(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

/// Serialize `model` into checkpoint bytes.
pub fn to_bytes<F: Scalar>(model: &LoopVit<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let named = model.params.named();
    put_u32(&mut out, named.len())?;
    for (name, t) in named {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ck(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Read the config stored in a checkpoint without loading the weights.
pub fn read_config(bytes: &[u8]) -> Result<LoopVitConfig> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    read_header(&mut cur)
}

fn read_header(cur: &mut Cursor<'_>) -> Result<LoopVitConfig> {
    if cur.take(8, "magic")? != MAGIC {
        return Err(ck("not a loopvit checkpoint (bad magic)"));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(ck(format!("unsupported format version {version}")));
    }
    let n = cur.u32("config length")?;
    let json = cur.take(n, "config")?;
    let cfg: LoopVitConfig = serde_json::from_slice(json).map_err(|e| ck(format!("bad config json: {e}")))?;
    cfg.validate().map_err(|e| ck(format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

/// Parse checkpoint bytes, checking every block against the stored config.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<LoopVit<F>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let cfg = read_header(&mut cur)?;
    let expected = param_shapes(&cfg);
    let expected = expected.named();
    let count = cur.u32("block count")?;
    if count != expected.len() {
        return Err(ck(format!("config implies {} blocks, file has {count}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (exp_name, exp_shape) in &expected {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?).map_err(|_| ck("block name is not UTF-8"))?;
        if name != exp_name {
            return Err(ck(format!("expected block {exp_name}, found {name}")));
        }
        let rank = cur.u32("rank")?;
        let shape = (0..rank).map(|_| cur.u32("dim")).collect::<Result<Vec<_>>>()?;
        if &shape != *exp_shape {
            return Err(ck(format!("block {name} has shape {shape:?}, config implies {exp_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| F::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push(Tensor::new(&shape, data)?.with_grad());
    }
    if cur.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mut it = tensors.into_iter();
    let params: LoopVitParams<F> = param_shapes(&cfg).try_map(|_, _| Ok(it.next().expect("count checked")))?;
    LoopVit::from_parts(cfg, params)
}

/// Load and additionally require the stored config to equal `expected`.
pub fn from_bytes_expecting<F: Scalar>(bytes: &[u8], expected: &LoopVitConfig) -> Result<LoopVit<F>> {
    let model = from_bytes(bytes)?;
    if &model.config != expected {
        return Err(ck(format!(
            "checkpoint config {} differs from the requested {}",
            serde_json::to_string(&model.config)?,
            serde_json::to_string(expected)?
        )));
    }
    Ok(model)
}

pub fn write_to<F: Scalar>(model: &LoopVit<F>, mut w: impl Write) -> Result<()> {
    w.write_all(&to_bytes(model)?).map_err(|e| Error::io("checkpoint", e))
}

pub fn read_from<F: Scalar>(mut r: impl Read) -> Result<LoopVit<F>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("checkpoint", e))?;
    from_bytes(&buf)
}

pub fn save<F: Scalar>(model: &LoopVit<F>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<LoopVit<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LoopVitConfig {
        LoopVitConfig {
            d: 8,
            heads: 2,
            t_train: 2,
            n_task_tokens: 2,
            canvas_h: 4,
            canvas_w: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact_in_f32() {
        let m: LoopVit<f32> = LoopVit::new(small(), 5).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: LoopVit<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in back.params.named().iter().zip(m.params.named()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let m: LoopVit<f32> = LoopVit::new(small(), 5).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let other = LoopVitConfig { d: 16, ..small() };
        assert!(matches!(from_bytes_expecting::<f32>(&bytes, &other), Err(Error::Checkpoint(_))));
    }
}
