//! Dataset file: little-endian, magic `RGTD`, version 1, then `u32` sample
//! count, channels, height, width. Each sample is `u32` id, `u8` label, the
//! `f32` image, then object and lesion masks as one byte per pixel.

use std::path::Path;

use super::{LabeledSample, Mask};
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_file, Reader, Writer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RGTD";
const VERSION: u32 = 1;
const CHANNELS: usize = 3;

pub fn save_dataset(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let (h, w) = match samples.first() {
        Some(s) => (s.image.shape()[1], s.image.shape()[2]),
        None => (0, 0),
    };
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(VERSION);
    out.u32(samples.len() as u32);
    out.u32(CHANNELS as u32);
    out.u32(h as u32);
    out.u32(w as u32);
    for s in samples {
        if s.image.shape() != [CHANNELS, h, w] {
            return Err(Error::dim(format!(
                "sample {} has shape {:?}, expected [{CHANNELS}, {h}, {w}]",
                s.id,
                s.image.shape()
            )));
        }
        out.u32(s.id);
        out.u8(s.label);
        out.f32s(s.image.data());
        out.bytes(s.object_mask.data());
        out.bytes(s.lesion_mask.data());
    }
    write_file(path, &out.into_inner())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    if c != CHANNELS {
        return Err(r.err(format!("expected {CHANNELS} channels, found {c}")));
    }
    if n > 0 && (h == 0 || w == 0) {
        return Err(r.err("zero image size"));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.u32()?;
        let label = r.u8()?;
        if label > 1 {
            return Err(r.err(format!("sample {id} has label {label}")));
        }
        let image = Tensor::new(&[c, h, w], r.f32s(c * h * w)?)?;
        let object_mask = Mask::new(h, w, r.bytes(h * w)?.to_vec()).map_err(|_| r.err("bad object mask"))?;
        let lesion_mask = Mask::new(h, w, r.bytes(h * w)?.to_vec()).map_err(|_| r.err("bad lesion mask"))?;
        samples.push(LabeledSample {
            id,
            label,
            image,
            object_mask,
            lesion_mask,
        });
    }
    r.finish()?;
    Ok(samples)
}
