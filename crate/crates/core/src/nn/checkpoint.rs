//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! | field          | bytes                                   |
//! |----------------|-----------------------------------------|
//! | magic          | `PSTRESS\0` (8 bytes)                   |
//! | format version | 4 (currently 1)                         |
//! | variant tag    | 1 (`0` = cnn, `1` = hcnn)               |
//! | n_classes      | 4                                       |
//! | tensor count   | 4                                       |
//! | per tensor     | name length (4), UTF-8 name, rank (4),  |
//! |                | extents (4 each), values (`f32` LE)     |
//!
//! Tensors are the trainable parameters followed by the batch-norm running
//! statistics. Optimizer moments are not stored.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::model::{build_model, ModelState, Variant};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 8] = b"PSTRESS\0";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(model: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.push(match model.variant {
        Variant::Cnn => 0,
        Variant::Hcnn => 1,
    });
    put_u32(&mut out, model.n_classes as u32);

    let mut tensors: Vec<(&str, &Tensor<f32>)> = model
        .trainable_names()
        .into_iter()
        .zip(model.trainable_tensors())
        .collect();
    tensors.extend(model.running_stats());
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                NnError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState<f32>, NnError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let variant = match c.take(1)?[0] {
        0 => Variant::Cnn,
        1 => Variant::Hcnn,
        tag => return Err(NnError::Checkpoint(format!("unknown variant tag {tag}"))),
    };
    let n_classes = c.u32()? as usize;
    if !(2..=3).contains(&n_classes) {
        return Err(NnError::Checkpoint(format!(
            "n_classes {n_classes} not in 2..=3"
        )));
    }
    let count = c.u32()? as usize;
    let mut found: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(4)
                .ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        found.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }

    let mut model: ModelState<f32> = build_model(variant, n_classes, 0);
    let mut fill = |name: &str, slot: &mut Tensor<f32>| -> Result<(), NnError> {
        let t = found
            .remove(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
        t.expect_shape(slot.shape(), name)?;
        *slot = t;
        Ok(())
    };
    let names = model.trainable_names();
    for (name, slot) in names.into_iter().zip(model.trainable_tensors_mut()) {
        fill(name, slot)?;
    }
    let names: Vec<&str> = model.running_stats().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.into_iter().zip(model.running_stats_mut()) {
        fill(name, slot)?;
    }
    if let Some(extra) = found.keys().next() {
        return Err(NnError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn write_checkpoint(model: &ModelState<f32>, mut w: impl Write) -> Result<(), NnError> {
    w.write_all(&encode(model))
        .map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelState<f32>, NnError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    decode(&buf)
}
