use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relguide::harness::{self, Context, RunConfig, Split};
use relguide::lrp::LrpRules;
use relguide::training::LossMode;
use relguide::{Error, Result};

#[derive(Parser)]
#[command(name = "relguide", version, about = "Explanation-guided CNN training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic training and validation datasets.
    Generate(Flags),
    /// Train a classifier and write weights plus per-epoch metrics.
    Train(Flags),
    /// Accuracy, weighted F1 and mask scores of trained weights.
    Evaluate(Flags),
    /// LRP heatmaps for the predicted and the true class of one sample.
    Explain(Flags),
    /// Nearest atlas cases of one sample with a BiLRP explanation per pair.
    Retrieve(Flags),
    /// Original loss against penalization powers (table).
    Experiment1(Flags),
    /// Per-iteration curves of conventional and guided training.
    Experiment2(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration (a manifest.json is accepted too).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// original | penalization
    #[arg(long)]
    loss: Option<String>,
    /// Penalization power p.
    #[arg(long)]
    power: Option<f32>,
    /// epsilon | alphabeta | composite
    #[arg(long)]
    rule: Option<String>,
    /// Trace entry used for retrieval.
    #[arg(long)]
    layer: Option<usize>,
    /// Number of neighbors to retrieve.
    #[arg(long)]
    k: Option<usize>,
    /// Patch grid of pair explanations.
    #[arg(long)]
    grid: Option<usize>,
    /// Worker threads; 1 is the bit-reproducible baseline.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Directory with train.rgtd and val.rgtd; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weight file of a trained model.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Sample id.
    #[arg(long)]
    sample: Option<u32>,
    /// train | val
    #[arg(long, default_value = "val")]
    split: String,
}

impl Flags {
    fn context(&self) -> Result<Context> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::with_seed(0),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = &self.loss {
            config.loss.mode = mode.parse::<LossMode>()?;
        }
        if let Some(p) = self.power {
            config.loss.power = p;
        }
        if let Some(rule) = &self.rule {
            config.loss.rules = LrpRules::preset(rule)?;
        }
        if let Some(layer) = self.layer {
            config.retrieval.layer = Some(layer);
        }
        if let Some(k) = self.k {
            config.retrieval.k = k;
        }
        if let Some(grid) = self.grid {
            config.retrieval.grid = grid;
        }
        if self.threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        config.validate()?;
        Ok(Context {
            config,
            out: self.out.clone(),
            threads: self.threads,
        })
    }

    fn weights(&self) -> Result<&PathBuf> {
        self.weights.as_ref().ok_or_else(|| Error::Usage("--weights is required".into()))
    }

    fn sample(&self) -> Result<u32> {
        self.sample.ok_or_else(|| Error::Usage("--sample is required".into()))
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(f) => harness::cmd_generate(&f.context()?),
        Command::Train(f) => harness::cmd_train(&f.context()?, f.data.as_deref()).map(drop),
        Command::Evaluate(f) => {
            let split: Split = f.split.parse()?;
            harness::cmd_evaluate(&f.context()?, f.weights()?, f.data.as_deref(), split).map(drop)
        }
        Command::Explain(f) => harness::cmd_explain(&f.context()?, f.weights()?, f.data.as_deref(), f.sample()?).map(drop),
        Command::Retrieve(f) => harness::cmd_retrieve(&f.context()?, f.weights()?, f.data.as_deref(), f.sample()?).map(drop),
        Command::Experiment1(f) => harness::cmd_experiment1(&f.context()?, f.data.as_deref()).map(drop),
        Command::Experiment2(f) => harness::cmd_experiment2(&f.context()?, f.data.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
