use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::score::{tumor_lrp_score, ScoreVariant};
use crate::autodiff::Graph;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::io_util::write_file;
use crate::lrp::{lrp_on, LrpRules};
use crate::network::{Mode, Model};

/// Validation metrics after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub score_class0: f64,
    pub score_class1: f64,
}

/// Dataset-level evaluation of a model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub f1_weighted: f64,
    /// Mean score of the true-class explanation, per true class.
    pub mean_score: [f64; 2],
    /// Mean share of positive relevance falling outside the object mask.
    pub outside_fraction: f64,
    pub predictions: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Settings for the explanation part of evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreSettings {
    pub rules: LrpRules,
    pub variant: ScoreVariant,
    pub floor: f32,
}

/// `Σ_c (n_c / N) · F1_c`, with `F1_c = 0` when its denominator is zero.
pub fn weighted_f1(labels: &[usize], predictions: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        let tp = labels.iter().zip(predictions).filter(|(&l, &p)| l == c && p == c).count();
        let fp = labels.iter().zip(predictions).filter(|(&l, &p)| l != c && p == c).count();
        let fn_ = support - tp;
        let den = 2 * tp + fp + fn_;
        let f1 = if den == 0 { 0.0 } else { 2.0 * tp as f64 / den as f64 };
        total += support as f64 / labels.len() as f64 * f1;
    }
    total
}

pub(crate) struct SampleEval {
    prediction: usize,
    score: f32,
    outside: f64,
}

pub(crate) fn evaluate_sample(model: &Model, sample: &LabeledSample, settings: &ScoreSettings) -> Result<SampleEval> {
    let mut g = Graph::new();
    let traced = model.trace_on(&mut g, &sample.image, false, false, Mode::Inference)?;
    let prediction = g.value(traced.logits()).argmax();
    let (rels, _) = lrp_on(&mut g, model, &traced, sample.label as usize, &settings.rules)?;
    let rel = g.value(rels[0]);
    let score = tumor_lrp_score(rel, &sample.lesion_mask, &sample.object_mask, settings.variant, settings.floor)?;
    let summed = rel.channel_sum()?;
    let (mut pos, mut out) = (0.0f64, 0.0f64);
    for (&v, &m) in summed.data().iter().zip(sample.object_mask.data()) {
        if v > 0.0 {
            pos += v as f64;
            if m == 0 {
                out += v as f64;
            }
        }
    }
    Ok(SampleEval {
        prediction,
        score,
        outside: if pos > 0.0 { out / pos } else { 0.0 },
    })
}

pub(crate) fn summarize(samples: &[LabeledSample], evals: Vec<SampleEval>, classes: usize) -> Evaluation {
    let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
    let predictions: Vec<usize> = evals.iter().map(|e| e.prediction).collect();
    let correct = labels.iter().zip(&predictions).filter(|(a, b)| a == b).count();
    let mut mean_score = [0.0f64; 2];
    for (c, slot) in mean_score.iter_mut().enumerate() {
        let of_class: Vec<f64> = evals
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e.score as f64)
            .collect();
        if !of_class.is_empty() {
            *slot = of_class.iter().sum::<f64>() / of_class.len() as f64;
        }
    }
    Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        f1_weighted: weighted_f1(&labels, &predictions, classes),
        mean_score,
        outside_fraction: evals.iter().map(|e| e.outside).sum::<f64>() / evals.len() as f64,
        predictions,
        scores: evals.iter().map(|e| e.score).collect(),
    }
}

/// Accuracy, weighted F1 and mean score per true class on `dataset`.
pub fn evaluate(model: &Model, dataset: &[LabeledSample], settings: &ScoreSettings) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let evals = dataset
        .iter()
        .map(|s| evaluate_sample(model, s, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(dataset, evals, model.classes()))
}

pub const METRICS_HEADER: &str = "epoch,loss,accuracy,f1_weighted,score_class0,score_class1";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.loss, r.accuracy, r.f1_weighted, r.score_class0, r.score_class1
        )
        .unwrap();
    }
    out
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_file(path, metrics_csv(records).as_bytes())
}
