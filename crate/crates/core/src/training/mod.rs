//! Explanation-guided training: cross-entropy divided by a power of the
//! share of input relevance that falls inside the lesion mask.

mod adam;
mod metrics;
mod score;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use metrics::{
    evaluate, metrics_csv, weighted_f1, write_metrics_csv, Evaluation, MetricsRecord, ScoreSettings, METRICS_HEADER,
};
pub use score::{score_on, tumor_lrp_score, ScoreVariant, DEFAULT_SCORE_FLOOR};

use crate::autodiff::{Graph, Var};
use crate::data::{augment, LabeledSample, Transform};
use crate::error::{Error, Result};
use crate::lrp::{lrp_on, LrpRules};
use crate::network::{Mode, Model};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Original,
    Penalization,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossMode> {
        match s {
            "original" => Ok(LossMode::Original),
            "penalization" => Ok(LossMode::Penalization),
            other => Err(Error::Usage(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Penalization power `p`; 0 behaves like the original loss.
    pub power: f32,
    /// Rules of the in-training explanation.
    pub rules: LrpRules,
    pub score_floor: f32,
    pub variant: ScoreVariant,
    /// Treat the score as a constant when differentiating.
    pub detached: bool,
    /// Replaces the computed score by a fixed value in the loss.
    #[serde(skip)]
    pub score_override: Option<f32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Original,
            power: 1.0,
            rules: LrpRules::default(),
            score_floor: DEFAULT_SCORE_FLOOR,
            variant: ScoreVariant::Unnormalized,
            detached: false,
            score_override: None,
        }
    }
}

impl LossConfig {
    pub fn original() -> Self {
        LossConfig::default()
    }

    pub fn penalization(power: f32) -> Self {
        LossConfig {
            mode: LossMode::Penalization,
            power,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score_floor > 0.0 && self.score_floor <= 1.0) {
            return Err(Error::Config(format!("score_floor must be in (0, 1], got {}", self.score_floor)));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::Config(format!("power must be >= 0, got {}", self.power)));
        }
        self.rules.validate()
    }

    /// Whether the loss depends on the explanation at all.
    pub fn uses_score(&self) -> bool {
        self.mode == LossMode::Penalization && self.power > 0.0
    }

    pub fn score_settings(&self) -> ScoreSettings {
        ScoreSettings {
            rules: self.rules,
            variant: self.variant,
            floor: self.score_floor,
        }
    }

    pub fn describe(&self) -> String {
        match self.mode {
            LossMode::Original => "original".into(),
            LossMode::Penalization => format!("penalization p={}", self.power),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_epsilon: f32,
    pub augment: bool,
    #[serde(skip)]
    pub seed: u64,
    /// Worker threads for per-sample work inside a batch; 1 runs inline.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            augment: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_epsilon > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0,1) and epsilon > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// `CE / max(score, floor)^p`.
pub fn lrp_loss(cross_entropy: f32, score: f32, power: f32, floor: f32) -> f32 {
    cross_entropy / score.max(floor).powf(power)
}

/// Progress notifications from [`train_with_observer`].
pub enum TrainEvent<'a> {
    Step { epoch: usize, step: usize, loss: f64, model: &'a Model },
    Epoch { record: &'a MetricsRecord, model: &'a Model },
}

/// Loss and parameter gradients for one training sample.
pub struct SampleGradient {
    pub loss: f32,
    /// Score of the true-class explanation, when the loss used it.
    pub score: Option<f32>,
    pub grads: Vec<Vec<f32>>,
}

/// Builds the full two-path graph for one sample and differentiates it.
pub fn sample_gradient(model: &Model, sample: &LabeledSample, loss: &LossConfig, mode: Mode<'_>) -> Result<SampleGradient> {
    let mut g = Graph::new();
    let traced = model.trace_on(&mut g, &sample.image, true, false, mode)?;
    let label = sample.label as usize;
    let ce = g.softmax_cross_entropy(traced.logits(), label)?;
    let (out, score) = if loss.uses_score() {
        let (rels, _) = lrp_on(&mut g, model, &traced, label, &loss.rules)?;
        let mut s = score_on(
            &mut g,
            rels[0],
            &sample.lesion_mask,
            &sample.object_mask,
            loss.variant,
            loss.score_floor,
        )?;
        let value = g.value(s).item()?;
        if let Some(fixed) = loss.score_override {
            s = g.constant(Tensor::scalar(fixed));
        } else if loss.detached {
            s = g.detach(s);
        }
        let scaled = g.pow(s, loss.power);
        (g.div(ce, scaled)?, Some(value))
    } else {
        (ce, None)
    };
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss for sample {} (score {:?})",
            sample.id, score
        )));
    }
    let grads = g.backward(out)?;
    Ok(SampleGradient {
        loss: value,
        score,
        grads: traced.params.iter().map(|&p: &Var| grads.wrt(p).into_data()).collect(),
    })
}

fn pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Maps `f` over `items` in order, on `pool` when given.
fn ordered_map<T: Sync, U: Send>(pool: Option<&rayon::ThreadPool>, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// [`evaluate`] with optional worker threads.
pub fn evaluate_with_threads(model: &Model, dataset: &[LabeledSample], settings: &ScoreSettings, threads: usize) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let pool = pool(threads)?;
    let evals = ordered_map(pool.as_ref(), dataset, |s| metrics::evaluate_sample(model, s, settings))?;
    Ok(metrics::summarize(dataset, evals, model.classes()))
}

fn stream_index(epoch: usize, id: u32) -> u64 {
    ((epoch as u64) << 32) | id as u64
}

/// Trains `model` and records validation metrics after every epoch.
pub fn train(
    model: Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<(Model, Vec<MetricsRecord>)> {
    train_with_observer(model, train_set, val_set, loss, config, &mut |_| {})
}

pub fn train_with_observer(
    mut model: Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    loss: &LossConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(Model, Vec<MetricsRecord>)> {
    loss.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    if loss.uses_score() {
        for s in train_set {
            s.validate()?;
        }
    }
    let [_, h, w] = model.input_shape();
    let pool = pool(config.threads)?;
    let mut adam = Adam::new(config.adam(), model.params().iter().map(|p| p.value.len()));
    let settings = loss.score_settings();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, Purpose::Order, epoch as u64));
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if config.augment {
                        let mut r = rng::stream(config.seed, Purpose::Augment, stream_index(epoch, s.id));
                        augment(s, Transform::random(&mut r, h == w))
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let current = &model;
            let outcomes = ordered_map(pool.as_ref(), &samples, |s| {
                let mut r = rng::stream(config.seed, Purpose::Dropout, stream_index(epoch, s.id));
                sample_gradient(current, s, loss, Mode::Training(&mut r)).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })
            })?;
            let mut total: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            let mut batch_loss = 0.0f64;
            for o in &outcomes {
                batch_loss += o.loss as f64;
                for (acc, g) in total.iter_mut().zip(&o.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / outcomes.len() as f32;
            total.iter_mut().flatten().for_each(|v| *v *= inv);
            adam.update(model.params_mut(), &total);
            epoch_loss += batch_loss;
            step += 1;
            observer(TrainEvent::Step {
                epoch,
                step,
                loss: batch_loss / outcomes.len() as f64,
                model: &model,
            });
        }
        let eval = evaluate_with_threads(&model, val_set, &settings, config.threads)?;
        let record = MetricsRecord {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            accuracy: eval.accuracy,
            f1_weighted: eval.f1_weighted,
            score_class0: eval.mean_score[0],
            score_class1: eval.mean_score[1],
        };
        log::info!(
            "epoch {epoch} [{}]: loss {:.4} acc {:.3} f1 {:.3} score {:.3}/{:.3}",
            loss.describe(),
            record.loss,
            record.accuracy,
            record.f1_weighted,
            record.score_class0,
            record.score_class1
        );
        observer(TrainEvent::Epoch { record: &record, model: &model });
        records.push(record);
    }
    Ok((model, records))
}
