use std::fmt::Write as _;

use serde::Serialize;

use super::config::RunConfig;
use crate::data::LabeledSample;
use crate::error::Result;
use crate::network::Model;
use crate::training::{train, LossConfig, LossMode, MetricsRecord, TrainConfig};

/// Trains `model` with `loss` for `epochs` epochs, seeded from the config root.
pub fn train_run(
    config: &RunConfig,
    loss: &LossConfig,
    model: Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    epochs: usize,
    threads: usize,
) -> Result<(Model, Vec<MetricsRecord>)> {
    let tc = TrainConfig {
        epochs,
        seed: config.seed,
        threads,
        ..config.train.clone()
    };
    train(model, train_set, val_set, loss, &tc)
}

fn loss_with(config: &RunConfig, mode: LossMode, power: f32) -> LossConfig {
    LossConfig {
        mode,
        power,
        ..config.loss.clone()
    }
}

fn run_from_scratch(config: &RunConfig, loss: &LossConfig, train_set: &[LabeledSample], val_set: &[LabeledSample], epochs: usize, threads: usize) -> Result<Vec<MetricsRecord>> {
    let model = Model::from_config(&config.model, config.seed)?;
    Ok(train_run(config, loss, model, train_set, val_set, epochs, threads)?.1)
}

/// One row of the loss comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Experiment1Row {
    pub name: String,
    pub loss: LossConfig,
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub score_class0: f64,
    pub score_class1: f64,
    pub records: Vec<MetricsRecord>,
}

impl Experiment1Row {
    fn from_records(name: String, loss: LossConfig, records: Vec<MetricsRecord>) -> Experiment1Row {
        let last = *records.last().expect("at least one epoch");
        Experiment1Row {
            name,
            loss,
            accuracy: last.accuracy,
            f1_weighted: last.f1_weighted,
            score_class0: last.score_class0,
            score_class1: last.score_class1,
            records,
        }
    }

    /// File-name friendly form of the row name.
    pub fn slug(&self) -> String {
        self.name.to_lowercase().replace(' ', "_")
    }
}

/// Original loss plus one penalized run per configured power, all from the
/// same initialization and data streams.
pub fn run_experiment1(config: &RunConfig, train_set: &[LabeledSample], val_set: &[LabeledSample], threads: usize) -> Result<Vec<Experiment1Row>> {
    let epochs = config.train.epochs;
    let mut runs = vec![("Original".to_string(), loss_with(config, LossMode::Original, 0.0))];
    for &p in &config.experiment.powers {
        runs.push((format!("Penalization {p}"), loss_with(config, LossMode::Penalization, p)));
    }
    runs.into_iter()
        .map(|(name, loss)| {
            log::info!("experiment 1: {name}");
            let records = run_from_scratch(config, &loss, train_set, val_set, epochs, threads)?;
            Ok(Experiment1Row::from_records(name, loss, records))
        })
        .collect()
}

pub fn experiment1_table(rows: &[Experiment1Row]) -> String {
    let mut out = format!(
        "{:<18}{:>10}{:>10}{:>16}{:>16}\n",
        "Loss", "Accuracy", "F1", "Score class 0", "Score class 1"
    );
    for r in rows {
        writeln!(
            out,
            "{:<18}{:>10.4}{:>10.4}{:>16.4}{:>16.4}",
            r.name, r.accuracy, r.f1_weighted, r.score_class0, r.score_class1
        )
        .unwrap();
    }
    out
}

pub fn experiment1_csv(rows: &[Experiment1Row]) -> String {
    let mut out = String::from("loss,accuracy,f1_weighted,score_class0,score_class1\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.name, r.accuracy, r.f1_weighted, r.score_class0, r.score_class1
        )
        .unwrap();
    }
    out
}

/// Per-iteration curves of a conventional and a guided run sharing seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Experiment2 {
    pub conventional: Vec<MetricsRecord>,
    pub guided: Vec<MetricsRecord>,
}

pub fn run_experiment2(config: &RunConfig, train_set: &[LabeledSample], val_set: &[LabeledSample], threads: usize) -> Result<Experiment2> {
    let epochs = config.experiment.iterations;
    let conventional = loss_with(config, LossMode::Original, 0.0);
    let guided = loss_with(config, LossMode::Penalization, config.experiment.guided_power);
    log::info!("experiment 2: conventional");
    let conventional = run_from_scratch(config, &conventional, train_set, val_set, epochs, threads)?;
    log::info!("experiment 2: guided");
    let guided = run_from_scratch(config, &guided, train_set, val_set, epochs, threads)?;
    Ok(Experiment2 { conventional, guided })
}

/// Mean of the two per-class scores.
pub fn mask_score(r: &MetricsRecord) -> f64 {
    (r.score_class0 + r.score_class1) / 2.0
}

pub const EXPERIMENT2_HEADER: &str = "iteration,loss,accuracy,f1_weighted,score_class0,score_class1,mask_score";

pub fn experiment2_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{EXPERIMENT2_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.loss,
            r.accuracy,
            r.f1_weighted,
            r.score_class0,
            r.score_class1,
            mask_score(r)
        )
        .unwrap();
    }
    out
}
