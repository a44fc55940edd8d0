//! Command implementations and the two experiment runners behind the CLI.
//!
//! Every command writes its artifacts plus a `manifest.json` into the output
//! directory. All randomness derives from the config's root seed.

mod config;
mod experiments;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

pub use config::{ExperimentConfig, RetrievalConfig, RunConfig};
pub use experiments::{
    experiment1_csv, experiment1_table, experiment2_csv, run_experiment1, run_experiment2, train_run, Experiment1Row,
    Experiment2, EXPERIMENT2_HEADER,
};

use crate::atlas::{build_index, credibility, explain_pair, query_knn, save_index, Neighbor};
use crate::bilrp::to_json;
use crate::data::{generate_with_offset, load_dataset, save_dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::io_util::write_file;
use crate::lrp::{lrp, render_heatmap};
use crate::network::{load_weights, save_weights, Model};
use crate::rng::{derive_seed, Purpose};
use crate::training::{evaluate_with_threads, tumor_lrp_score, write_metrics_csv, Evaluation, MetricsRecord};

pub const TRAIN_FILE: &str = "train.rgtd";
pub const VAL_FILE: &str = "val.rgtd";
pub const WEIGHTS_FILE: &str = "weights.rgtw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Inputs shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Context {
        Context {
            config,
            out: out.into(),
            threads: 1,
        }
    }

    fn prepare_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn model_for(&self, train: &[LabeledSample]) -> Result<Model> {
        check_input_shape(&self.config, train)?;
        Model::from_config(&self.config.model, self.config.seed)
    }

    fn load_model(&self, weights: &Path) -> Result<Model> {
        load_weights(weights, self.config.model.input_shape, self.config.model.layers())
    }
}

/// Reproducibility record written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub parameters: Value,
    pub artifacts: Vec<String>,
    pub duration_seconds: f64,
}

fn write_manifest(ctx: &Context, command: &str, parameters: Value, artifacts: &[&str], started: Instant) -> Result<()> {
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: ctx.config.seed,
        threads: ctx.threads,
        config: ctx.config.to_json(),
        parameters,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&ctx.path(MANIFEST_FILE), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn check_input_shape(config: &RunConfig, samples: &[LabeledSample]) -> Result<()> {
    let expected = config.model.input_shape;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != expected) {
        return Err(Error::dim(format!(
            "sample {} has shape {:?} but the model expects {:?}",
            s.id,
            s.image.shape(),
            expected
        )));
    }
    Ok(())
}

/// Training and validation splits drawn from the config's generator and seed.
pub fn generate_splits(config: &RunConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let mut train_cfg = config.generator.clone();
    train_cfg.seed = derive_seed(config.seed, Purpose::TrainSplit, 0);
    let train = generate_with_offset(&train_cfg, 0)?;
    let mut val_cfg = config.generator.clone();
    val_cfg.samples_per_class = config.generator.validation_per_class;
    val_cfg.seed = derive_seed(config.seed, Purpose::ValSplit, 0);
    let val = generate_with_offset(&val_cfg, train.len() as u32)?;
    Ok((train, val))
}

/// Reads `train.rgtd` and `val.rgtd` from `dir`.
pub fn load_splits(dir: &Path) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    Ok((load_dataset(&dir.join(TRAIN_FILE))?, load_dataset(&dir.join(VAL_FILE))?))
}

/// Splits from `data` when given, otherwise generated from the config.
pub fn resolve_splits(config: &RunConfig, data: Option<&Path>) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    match data {
        Some(dir) => load_splits(dir),
        None => generate_splits(config),
    }
}

fn find_sample(splits: &(Vec<LabeledSample>, Vec<LabeledSample>), id: u32) -> Result<&LabeledSample> {
    splits
        .0
        .iter()
        .chain(&splits.1)
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Usage(format!("no sample with id {id}")))
}

pub fn cmd_generate(ctx: &Context) -> Result<()> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let (train, val) = generate_splits(&ctx.config)?;
    save_dataset(&train, &ctx.path(TRAIN_FILE))?;
    save_dataset(&val, &ctx.path(VAL_FILE))?;
    println!("wrote {} training and {} validation samples to {}", train.len(), val.len(), ctx.out.display());
    write_manifest(
        ctx,
        "generate",
        json!({"train_samples": train.len(), "val_samples": val.len()}),
        &[TRAIN_FILE, VAL_FILE],
        started,
    )
}

pub fn cmd_train(ctx: &Context, data: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let (train, val) = resolve_splits(&ctx.config, data)?;
    let model = ctx.model_for(&train)?;
    let (model, records) = train_run(&ctx.config, &ctx.config.loss, model, &train, &val, ctx.config.train.epochs, ctx.threads)?;
    save_weights(&model, &ctx.path(WEIGHTS_FILE))?;
    write_metrics_csv(&records, &ctx.path(METRICS_FILE))?;
    if let Some(last) = records.last() {
        println!(
            "{}: accuracy {:.4} f1 {:.4} score class0 {:.4} class1 {:.4}",
            ctx.config.loss.describe(),
            last.accuracy,
            last.f1_weighted,
            last.score_class0,
            last.score_class1
        );
    }
    write_manifest(
        ctx,
        "train",
        json!({
            "data": data.map(|p| p.display().to_string()),
            "mode": ctx.config.loss.mode,
            "power": ctx.config.loss.power,
            "rules": ctx.config.loss.rules,
        }),
        &[WEIGHTS_FILE, METRICS_FILE],
        started,
    )?;
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Usage(format!("unknown split {other:?} (expected train or val)"))),
        }
    }
}

pub fn cmd_evaluate(ctx: &Context, weights: &Path, data: Option<&Path>, split: Split) -> Result<Evaluation> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let model = ctx.load_model(weights)?;
    let (train, val) = resolve_splits(&ctx.config, data)?;
    let set = match split {
        Split::Train => &train,
        Split::Val => &val,
    };
    check_input_shape(&ctx.config, set)?;
    let settings = ctx.config.loss.score_settings();
    let eval = evaluate_with_threads(&model, set, &settings, ctx.threads)?;
    println!(
        "{:?} split ({} samples, rules {}): accuracy {:.4} f1 {:.4} score class0 {:.4} class1 {:.4}",
        split,
        set.len(),
        settings.rules.describe(),
        eval.accuracy,
        eval.f1_weighted,
        eval.mean_score[0],
        eval.mean_score[1]
    );
    let summary = json!({
        "split": split,
        "samples": set.len(),
        "rules": settings.rules,
        "accuracy": eval.accuracy,
        "f1_weighted": eval.f1_weighted,
        "score_class0": eval.mean_score[0],
        "score_class1": eval.mean_score[1],
        "outside_object_fraction": eval.outside_fraction,
    });
    write_json(&ctx.path("evaluation.json"), &summary)?;
    write_manifest(
        ctx,
        "evaluate",
        json!({"weights": weights.display().to_string(), "split": split}),
        &["evaluation.json"],
        started,
    )?;
    Ok(eval)
}

/// Result of [`cmd_explain`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainReport {
    pub id: u32,
    pub label: u8,
    pub prediction: usize,
    pub score_predicted: f32,
    pub score_true: f32,
    pub artifacts: Vec<String>,
}

pub fn cmd_explain(ctx: &Context, weights: &Path, data: Option<&Path>, sample_id: u32) -> Result<ExplainReport> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let model = ctx.load_model(weights)?;
    let splits = resolve_splits(&ctx.config, data)?;
    let sample = find_sample(&splits, sample_id)?;
    check_input_shape(&ctx.config, std::slice::from_ref(sample))?;
    let loss = &ctx.config.loss;
    let prediction = model.predict(&sample.image)?;
    let mut scores = [0.0f32; 2];
    let mut artifacts = Vec::new();
    for (slot, (tag, target)) in [("pred", prediction), ("true", sample.label as usize)].into_iter().enumerate() {
        let rel = lrp(&model, &sample.image, target, &loss.rules)?;
        let (pgm, csv) = (format!("heatmap_{tag}.pgm"), format!("relevance_{tag}.csv"));
        render_heatmap(rel.input(), &ctx.path(&pgm), &ctx.path(&csv))?;
        scores[slot] = tumor_lrp_score(rel.input(), &sample.lesion_mask, &sample.object_mask, loss.variant, loss.score_floor)?;
        println!("class {target} ({tag}): score {}", scores[slot]);
        artifacts.extend([pgm, csv]);
    }
    let report = ExplainReport {
        id: sample.id,
        label: sample.label,
        prediction,
        score_predicted: scores[0],
        score_true: scores[1],
        artifacts,
    };
    write_json(&ctx.path("explain.json"), &report)?;
    let mut names: Vec<&str> = report.artifacts.iter().map(String::as_str).collect();
    names.push("explain.json");
    write_manifest(
        ctx,
        "explain",
        json!({"weights": weights.display().to_string(), "sample": sample_id, "rules": loss.rules}),
        &names,
        started,
    )?;
    Ok(report)
}

/// One retrieved atlas entry with the file holding its pair explanation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievedCase {
    #[serde(flatten)]
    pub neighbor: Neighbor,
    pub bilrp: String,
}

/// Result of [`cmd_retrieve`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrieveReport {
    pub query: u32,
    pub prediction: usize,
    pub layer: usize,
    pub metric: crate::atlas::Metric,
    pub k: usize,
    pub grid: usize,
    pub credibility: f64,
    pub neighbors: Vec<RetrievedCase>,
}

/// Default retrieval layer: the last hidden activation before the logits.
pub fn default_layer(model: &Model) -> usize {
    model.layers().len() - 1
}

pub fn cmd_retrieve(ctx: &Context, weights: &Path, data: Option<&Path>, sample_id: u32) -> Result<RetrieveReport> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let model = ctx.load_model(weights)?;
    let splits = resolve_splits(&ctx.config, data)?;
    let query = find_sample(&splits, sample_id)?;
    let atlas = &splits.0;
    check_input_shape(&ctx.config, atlas)?;
    let r = &ctx.config.retrieval;
    let layer = r.layer.unwrap_or_else(|| default_layer(&model));
    let index = build_index(&model, atlas, &[layer], r.metric)?.remove(0);
    save_index(&index, &ctx.path("atlas.rgta"))?;
    let prediction = model.predict(&query.image)?;
    let neighbors = query_knn(&index, &query.image, &model, r.k)?;
    let cred = credibility(&neighbors, prediction as u8);
    let mut cases = Vec::with_capacity(neighbors.len());
    for (rank, n) in neighbors.iter().enumerate() {
        let other = atlas.iter().find(|s| s.id == n.id).expect("neighbor comes from the atlas");
        let joint = explain_pair(&model, &query.image, &other.image, layer, &ctx.config.loss.rules, r.grid)?;
        let name = format!("bilrp_{}_{}.json", rank + 1, n.id);
        write_file(&ctx.path(&name), to_json(&joint, r.connections)?.as_bytes())?;
        cases.push(RetrievedCase {
            neighbor: *n,
            bilrp: name,
        });
    }
    let report = RetrieveReport {
        query: sample_id,
        prediction,
        layer,
        metric: r.metric,
        k: r.k,
        grid: r.grid,
        credibility: cred,
        neighbors: cases,
    };
    let mut text = String::new();
    for c in &report.neighbors {
        writeln!(text, "  id {} label {} distance {:.6}", c.neighbor.id, c.neighbor.label, c.neighbor.distance).unwrap();
    }
    println!("query {sample_id} predicted {prediction}, credibility {cred:.3}\n{text}");
    write_json(&ctx.path("neighbors.json"), &report)?;
    let mut names = vec!["atlas.rgta", "neighbors.json"];
    names.extend(report.neighbors.iter().map(|c| c.bilrp.as_str()));
    write_manifest(
        ctx,
        "retrieve",
        json!({
            "weights": weights.display().to_string(),
            "sample": sample_id,
            "layer": layer,
            "k": r.k,
            "grid": r.grid,
            "metric": r.metric,
        }),
        &names,
        started,
    )?;
    Ok(report)
}

pub fn cmd_experiment1(ctx: &Context, data: Option<&Path>) -> Result<Vec<Experiment1Row>> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let (train, val) = resolve_splits(&ctx.config, data)?;
    check_input_shape(&ctx.config, &train)?;
    let rows = run_experiment1(&ctx.config, &train, &val, ctx.threads)?;
    let table = experiment1_table(&rows);
    print!("{table}");
    write_file(&ctx.path("experiment1.txt"), table.as_bytes())?;
    write_file(&ctx.path("experiment1.csv"), experiment1_csv(&rows).as_bytes())?;
    let mut names = vec!["experiment1.txt".to_string(), "experiment1.csv".to_string()];
    for row in &rows {
        let name = format!("metrics_{}.csv", row.slug());
        write_metrics_csv(&row.records, &ctx.path(&name))?;
        names.push(name);
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(
        ctx,
        "experiment1",
        json!({"data": data.map(|p| p.display().to_string()), "powers": ctx.config.experiment.powers}),
        &names,
        started,
    )?;
    Ok(rows)
}

pub fn cmd_experiment2(ctx: &Context, data: Option<&Path>) -> Result<Experiment2> {
    let started = Instant::now();
    ctx.prepare_out()?;
    let (train, val) = resolve_splits(&ctx.config, data)?;
    check_input_shape(&ctx.config, &train)?;
    let result = run_experiment2(&ctx.config, &train, &val, ctx.threads)?;
    write_file(&ctx.path("experiment2_conventional.csv"), experiment2_csv(&result.conventional).as_bytes())?;
    write_file(&ctx.path("experiment2_guided.csv"), experiment2_csv(&result.guided).as_bytes())?;
    println!("iteration  accuracy(conv/guided)  mask score(conv/guided)");
    for (c, g) in result.conventional.iter().zip(&result.guided) {
        println!(
            "{:>9}  {:.4} / {:.4}        {:.4} / {:.4}",
            c.epoch,
            c.accuracy,
            g.accuracy,
            experiments::mask_score(c),
            experiments::mask_score(g)
        );
    }
    write_manifest(
        ctx,
        "experiment2",
        json!({
            "data": data.map(|p| p.display().to_string()),
            "iterations": ctx.config.experiment.iterations,
            "guided_power": ctx.config.experiment.guided_power,
        }),
        &["experiment2_conventional.csv", "experiment2_guided.csv"],
        started,
    )?;
    Ok(result)
}
