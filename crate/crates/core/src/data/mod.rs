//! Synthetic lesion-classification data with segmentation masks.

mod augment;
mod generate;
mod io;

pub use augment::{augment, Transform};
pub use generate::{generate, generate_with_offset, GeneratorConfig};
pub use io::{load_dataset, save_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H×W` mask (one byte per pixel, 0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Mask> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} needs {} bytes, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::dim("mask values must be 0 or 1"));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }

    /// Pixels set here but not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a != 0 && b == 0) as u8)
            .collect();
        Mask { data, ..*self }
    }

    /// The mask as `f32` 0/1 values, shaped `[H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Image, object mask, lesion mask and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u32,
    pub label: u8,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub object_mask: Mask,
    pub lesion_mask: Mask,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<()> {
        let [_, h, w] = <[usize; 3]>::try_from(self.image.shape())
            .map_err(|_| Error::dim(format!("sample {} image must be [C,H,W]", self.id)))?;
        for m in [&self.object_mask, &self.lesion_mask] {
            if m.height != h || m.width != w {
                return Err(Error::dim(format!("sample {} mask size differs from image", self.id)));
            }
        }
        if self.lesion_mask.count() == 0 {
            return Err(Error::Score(format!("sample {} has an empty lesion mask", self.id)));
        }
        if !self.lesion_mask.is_subset_of(&self.object_mask) {
            return Err(Error::dim(format!("sample {} lesion extends outside the object", self.id)));
        }
        Ok(())
    }
}
