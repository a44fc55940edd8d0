use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSample, Mask};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 200;
const CHANNEL_BASE: [f32; 3] = [0.45, 0.40, 0.50];
const CHANNEL_GAIN: [f32; 3] = [1.0, 0.8, 0.6];
const BACKGROUND_RIPPLE: f32 = 0.08;
const DISTRACTOR_INTENSITY: f32 = 0.9;

/// Parameters of the synthetic lesion task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    /// Per-class size of the validation split written next to the training split.
    pub validation_per_class: usize,
    /// Lesion area as a fraction of the object area.
    pub lesion_area_min: f32,
    pub lesion_area_max: f32,
    /// Lesion texture amplitude δ.
    pub contrast: f32,
    /// Probability ρ that the distractor accompanies class 1 (and 1−ρ for class 0).
    pub distractor_correlation: f32,
    /// Standard deviation σ of the additive pixel noise.
    pub noise: f32,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            samples_per_class: 400,
            validation_per_class: 100,
            lesion_area_min: 0.05,
            lesion_area_max: 0.15,
            contrast: 0.35,
            distractor_correlation: 0.9,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image size {}x{} below 16x16", self.height, self.width));
        }
        if !(self.lesion_area_min > 0.0 && self.lesion_area_min <= self.lesion_area_max && self.lesion_area_max < 1.0) {
            return bad(format!(
                "lesion area range [{}, {}] must satisfy 0 < min <= max < 1",
                self.lesion_area_min, self.lesion_area_max
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_correlation) {
            return bad(format!("distractor_correlation {} outside [0,1]", self.distractor_correlation));
        }
        if !(self.noise >= 0.0) || !(self.contrast >= 0.0) {
            return bad("noise and contrast must be non-negative".into());
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f32 + 0.5 - self.cy, x as f32 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0
    }

    fn raster(&self, h: usize, w: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.contains(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

struct Layout {
    object: Mask,
    lesion: Mask,
    distractor: Option<Mask>,
}

fn layout(cfg: &GeneratorConfig, label: u8, rng: &mut rng::Rng) -> Result<Layout> {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f32, w as f32);
    let side = hf.min(wf);
    for _ in 0..MAX_ATTEMPTS {
        let object = Ellipse {
            cy: hf / 2.0 + rng.random_range(-0.05..0.05) * hf,
            cx: wf / 2.0 + rng.random_range(-0.05..0.05) * wf,
            ry: rng.random_range(0.30..0.40) * hf,
            rx: rng.random_range(0.30..0.40) * wf,
            angle: rng.random_range(0.0..PI),
        };
        let object_mask = object.raster(h, w);
        let area = object_mask.count() as f32;

        let fraction = rng.random_range(cfg.lesion_area_min..=cfg.lesion_area_max);
        let aspect = rng.random_range(0.75..1.33f32);
        let ry = (fraction * area / (PI * aspect)).sqrt();
        let (radius, theta) = (rng.random::<f32>().sqrt() * 0.55, rng.random_range(0.0..2.0 * PI));
        let (u, v) = (radius * theta.sin(), radius * theta.cos());
        let (s, c) = object.angle.sin_cos();
        let (du, dv) = (u * object.ry, v * object.rx);
        let lesion = Ellipse {
            cy: object.cy + du * c - dv * s,
            cx: object.cx + du * s + dv * c,
            ry,
            rx: ry * aspect,
            angle: rng.random_range(0.0..PI),
        };
        let lesion_mask = lesion.raster(h, w);

        let p_distractor = if label == 1 {
            cfg.distractor_correlation
        } else {
            1.0 - cfg.distractor_correlation
        };
        let present = rng.random::<f32>() < p_distractor;
        let corner = rng.random_range(0..4u8);

        let count = lesion_mask.count() as f32;
        let in_range = count >= cfg.lesion_area_min * area && count <= cfg.lesion_area_max * area && count > 0.0;
        if !in_range || !lesion_mask.is_subset_of(&object_mask) {
            continue;
        }
        let distractor = if present {
            let margin = 0.1 * side;
            let cy = if corner & 1 == 0 { margin } else { hf - margin };
            let cx = if corner & 2 == 0 { margin } else { wf - margin };
            let r = 0.07 * side;
            let blob = Ellipse { cy, cx, ry: r, rx: r, angle: 0.0 }.raster(h, w);
            if blob.data().iter().zip(object_mask.data()).any(|(&a, &b)| a != 0 && b != 0) {
                continue;
            }
            Some(blob)
        } else {
            None
        };
        return Ok(Layout {
            object: object_mask,
            lesion: lesion_mask,
            distractor,
        });
    }
    Err(Error::Config(format!(
        "could not place a lesion inside the object after {MAX_ATTEMPTS} attempts"
    )))
}

fn synthesize(cfg: &GeneratorConfig, id: u32, label: u8) -> Result<LabeledSample> {
    let mut rng = rng::stream(cfg.seed, Purpose::Sample, id as u64);
    let Layout { object, lesion, distractor } = layout(cfg, label, &mut rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let freq = [rng.random_range(0.5..1.5f32), rng.random_range(0.5..1.5f32)];
    let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];

    let mut image = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            if !object.get(y, x) {
                continue;
            }
            let ripple = BACKGROUND_RIPPLE
                * (2.0 * PI * freq[0] * y as f32 / h as f32 + phase[0]).sin()
                * (2.0 * PI * freq[1] * x as f32 / w as f32 + phase[1]).cos();
            let speckle = if lesion.get(y, x) && label == 1 {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            } else {
                1.0
            };
            for c in 0..3 {
                let mut v = CHANNEL_BASE[c] + ripple * CHANNEL_GAIN[c];
                if lesion.get(y, x) {
                    v += cfg.contrast * CHANNEL_GAIN[c] * speckle;
                }
                image[(c * h + y) * w + x] = v;
            }
        }
    }
    if let Some(blob) = &distractor {
        for (i, _) in blob.data().iter().enumerate().filter(|(_, &b)| b != 0) {
            for c in 0..3 {
                image[c * h * w + i] = DISTRACTOR_INTENSITY;
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(LabeledSample {
        id,
        label,
        image: Tensor::new(&[3, h, w], image)?,
        object_mask: object,
        lesion_mask: lesion,
    })
}

/// Balanced dataset of `2 · samples_per_class` samples; ids start at 0 and
/// labels alternate 0, 1, 0, …
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<LabeledSample>> {
    generate_with_offset(cfg, 0)
}

/// Like [`generate`] with ids starting at `first_id`. Each sample draws from
/// its own stream keyed by its id.
pub fn generate_with_offset(cfg: &GeneratorConfig, first_id: u32) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    (0..2 * cfg.samples_per_class as u32)
        .map(|i| synthesize(cfg, first_id + i, (i % 2) as u8))
        .collect()
}
