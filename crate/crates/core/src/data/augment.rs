use rand::Rng;

use super::{LabeledSample, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rigid transform applied identically to the image and both masks:
/// `quarter_turns` clockwise rotations by 90°, then the flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Transform {
    /// Uniform over rotations and independent flips. Non-square images only
    /// get half turns.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Transform {
        let turns = rng.random_range(0..4u8);
        Transform {
            quarter_turns: if square { turns } else { turns & 2 },
            flip_horizontal: rng.random(),
            flip_vertical: rng.random(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns % 4 == 0 && !self.flip_horizontal && !self.flip_vertical
    }

    /// Source pixel for output pixel `(y, x)` of an `h×w` plane.
    fn source(&self, h: usize, w: usize, mut y: usize, mut x: usize) -> (usize, usize) {
        if self.flip_vertical {
            y = h - 1 - y;
        }
        if self.flip_horizontal {
            x = w - 1 - x;
        }
        for _ in 0..self.quarter_turns % 4 {
            // inverse of one clockwise turn on a square plane
            (y, x) = (h - 1 - x, y);
        }
        (y, x)
    }

    fn plane<T: Copy>(&self, h: usize, w: usize, src: &[T], dst: &mut [T]) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, w, y, x);
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
}

/// Applies `t` to a sample. Odd quarter turns need a square image.
pub fn augment(sample: &LabeledSample, t: Transform) -> Result<LabeledSample> {
    let shape = sample.image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if t.quarter_turns % 2 == 1 && h != w {
        return Err(Error::dim(format!("90 degree rotation needs a square image, got {h}x{w}")));
    }
    if t.is_identity() {
        return Ok(sample.clone());
    }
    let mut image = vec![0.0f32; c * h * w];
    for (src, dst) in sample.image.data().chunks(h * w).zip(image.chunks_mut(h * w)) {
        t.plane(h, w, src, dst);
    }
    let mask = |m: &Mask| {
        let mut out = vec![0u8; h * w];
        t.plane(h, w, m.data(), &mut out);
        Mask::new(h, w, out)
    };
    Ok(LabeledSample {
        id: sample.id,
        label: sample.label,
        image: Tensor::new(&[c, h, w], image)?,
        object_mask: mask(&sample.object_mask)?,
        lesion_mask: mask(&sample.lesion_mask)?,
    })
}
