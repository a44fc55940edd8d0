//! Weight file: little-endian, magic `RGTW`, version 1, tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u32` rank, `u32` dims, `f32` payload.

use std::path::Path;

use super::{LayerSpec, Model};
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_file, Reader, Writer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RGTW";
const VERSION: u32 = 1;

pub fn write_weight_file(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        w.u16(len);
        w.bytes(name_bytes);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.data());
    }
    write_file(path, &w.into_inner())
}

pub fn read_weight_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("{name}: implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, format!("{name}: dimension overflow")))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(&dims, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &*p.value))
        .collect();
    write_weight_file(path, &tensors)
}

/// Loads parameters for the given architecture. Tensor count, names and
/// shapes must all agree with `layers`.
pub fn load_weights(path: &Path, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Model> {
    let tensors = read_weight_file(path)?;
    Model::from_params(input_shape, layers, tensors).map_err(|e| match e {
        Error::Dimension(msg) => Error::format(path, msg),
        other => other,
    })
}
