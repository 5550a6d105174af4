//! Binary checkpoints: one text header line, then length-prefixed little-endian parameter
//! and batch-norm running-statistic blocks.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Model, ModelSpec};

const MAGIC: &str = "batchaug-checkpoint v1";

fn header<T: Scalar>(spec: &ModelSpec) -> String {
    format!(
        "{MAGIC} scalar={} dim={} model={}\n",
        T::NAME,
        spec.param_count(),
        spec
    )
}

fn write_block<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        v.write_le(out);
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let mut out = header::<T>(&model.spec).into_bytes();
    write_block(&mut out, model.params.flat());
    let mut running = Vec::new();
    for state in model.bn.iter().flatten() {
        running.extend_from_slice(&state.mean);
        running.extend_from_slice(&state.var);
    }
    write_block(&mut out, &running);
    w.write_all(&out)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn block<T: Scalar>(&mut self, expected: usize) -> Result<Vec<T>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        if len != expected {
            return Err(Error::Checkpoint(format!(
                "block holds {len} values, expected {expected}"
            )));
        }
        let raw = self.take(
            len.checked_mul(T::BYTES)
                .ok_or_else(|| Error::Checkpoint("block too large".into()))?,
        )?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

/// Restores a model for `spec`; the header must name the same scalar type and architecture.
pub fn read_checkpoint<T: Scalar, R: Read>(spec: &ModelSpec, mut r: R) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let found = std::str::from_utf8(&bytes[..=nl])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    if !found.starts_with(MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let want = header::<T>(spec);
    if found != want {
        return Err(Error::Checkpoint(format!(
            "header mismatch: file has `{}`, expected `{}`",
            found.trim_end(),
            want.trim_end()
        )));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: nl + 1,
    };
    let flat = cur.block::<T>(spec.param_count())?;
    let mut model = Model::with_params(spec.clone(), super::ModelParams::from_flat(spec, flat)?);
    let running_len: usize = model.bn.iter().flatten().map(|s| 2 * s.mean.len()).sum();
    let running = cur.block::<T>(running_len)?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let mut at = 0;
    for state in model.bn.iter_mut().flatten() {
        let f = state.mean.len();
        state.mean.copy_from_slice(&running[at..at + f]);
        state.var.copy_from_slice(&running[at + f..at + 2 * f]);
        at += 2 * f;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(spec: &ModelSpec, path: &Path) -> Result<Model<T>> {
    read_checkpoint(spec, std::io::BufReader::new(std::fs::File::open(path)?))
}
