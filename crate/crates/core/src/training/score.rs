use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default lower clamp of the score.
pub const DEFAULT_SCORE_FLOOR: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// `R_mask / (R_mask + R_brain)`.
    #[default]
    Unnormalized,
    /// Each sum divided by its region's pixel count first.
    AreaNormalized,
}

struct Regions {
    lesion: Tensor,
    rest: Tensor,
    lesion_area: f32,
    rest_area: f32,
}

fn regions(shape: &[usize], lesion: &Mask, object: &Mask) -> Result<Regions> {
    if shape.len() != 3 || shape[1] != lesion.height() || shape[2] != lesion.width() {
        return Err(Error::dim(format!(
            "relevance {shape:?} does not match mask {}x{}",
            lesion.height(),
            lesion.width()
        )));
    }
    if object.height() != lesion.height() || object.width() != lesion.width() {
        return Err(Error::dim("lesion and object masks differ in size"));
    }
    let lesion_area = lesion.count();
    if lesion_area == 0 {
        return Err(Error::Score("lesion mask is empty".into()));
    }
    if !lesion.is_subset_of(object) {
        return Err(Error::Score("lesion mask extends outside the object mask".into()));
    }
    let rest = object.minus(lesion);
    Ok(Regions {
        lesion: lesion.to_tensor(),
        rest_area: rest.count() as f32,
        rest: rest.to_tensor(),
        lesion_area: lesion_area as f32,
    })
}

/// Share of positive channel-summed relevance inside the lesion, relative to
/// the lesion plus the rest of the object, clamped below at `floor`.
pub fn tumor_lrp_score(relevance: &Tensor, lesion: &Mask, object: &Mask, variant: ScoreVariant, floor: f32) -> Result<f32> {
    let r = regions(relevance.shape(), lesion, object)?;
    let summed = relevance.channel_sum()?;
    let (mut inside, mut brain) = (0.0f32, 0.0f32);
    for ((&v, &l), &b) in summed.data().iter().zip(r.lesion.data()).zip(r.rest.data()) {
        let v = v.max(0.0);
        inside += v * l;
        brain += v * b;
    }
    if variant == ScoreVariant::AreaNormalized {
        inside /= r.lesion_area;
        brain = if r.rest_area > 0.0 { brain / r.rest_area } else { 0.0 };
    }
    let den = inside + brain;
    let score = inside / if den == 0.0 { f32::MIN_POSITIVE } else { den };
    Ok(score.max(floor))
}

/// The score as a graph expression of `relevance`, so it can be differentiated.
pub fn score_on(g: &mut Graph, relevance: Var, lesion: &Mask, object: &Mask, variant: ScoreVariant, floor: f32) -> Result<Var> {
    let r = regions(g.value(relevance).shape(), lesion, object)?;
    let summed = g.channel_sum(relevance)?;
    let positive = g.relu(summed);
    let in_lesion = g.mul_const(positive, r.lesion)?;
    let mut inside = g.sum(in_lesion);
    let in_rest = g.mul_const(positive, r.rest)?;
    let mut brain = g.sum(in_rest);
    if variant == ScoreVariant::AreaNormalized {
        inside = g.scale(inside, 1.0 / r.lesion_area);
        brain = g.scale(brain, if r.rest_area > 0.0 { 1.0 / r.rest_area } else { 0.0 });
    }
    let total = g.add(inside, brain)?;
    let den = g.stabilize(total, f32::MIN_POSITIVE);
    let ratio = g.div(inside, den)?;
    Ok(g.clamp_min(ratio, floor))
}
