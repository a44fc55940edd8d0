use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atlas::Metric;
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::io_util::read_file;
use crate::network::ModelConfig;
use crate::training::{LossConfig, TrainConfig};

/// Settings of the two experiment runners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Penalization powers compared against the original loss.
    pub powers: Vec<f32>,
    /// Epochs per run of the iteration-curve experiment.
    pub iterations: usize,
    /// Power of the guided run in the iteration-curve experiment.
    pub guided_power: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            powers: vec![1.0, 2.0, 3.0],
            iterations: 20,
            guided_power: 1.0,
        }
    }
}

/// Deep-kNN and pair-explanation defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Trace entry used for retrieval; `None` picks the last hidden activation.
    pub layer: Option<usize>,
    pub k: usize,
    pub grid: usize,
    pub metric: Metric,
    pub max_units: usize,
    /// Patch links written per explained pair.
    pub connections: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            layer: None,
            k: 5,
            grid: 8,
            metric: Metric::Euclidean,
            max_units: crate::bilrp::DEFAULT_MAX_UNITS,
            connections: 10,
        }
    }
}

/// Complete configuration of a run; `seed` is the only required key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            experiment: ExperimentConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }

    /// Parses a JSON document, listing every unknown key in one usage error.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Usage(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = &value else {
            return Err(Error::Usage("config must be a JSON object".into()));
        };
        // A manifest carries the config it was run with.
        let value = match map.get("config") {
            Some(inner) if map.contains_key("manifest_version") => inner.clone(),
            _ => value,
        };
        let reference = serde_json::to_value(RunConfig::with_seed(0)).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
        if value.get("seed").is_none() {
            return Err(Error::Usage("config is missing the required key \"seed\"".into()));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Usage(format!("{} is not UTF-8", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.experiment.iterations == 0 {
            return Err(Error::Config("experiment.iterations must be at least 1".into()));
        }
        let r = &self.retrieval;
        if r.k == 0 || r.grid == 0 || r.connections == 0 || r.max_units == 0 {
            return Err(Error::Config(
                "retrieval.k, grid, connections and max_units must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Keys present in `value` but not in `reference`. Rule objects are left to
/// the deserializer because their keys depend on the chosen variant.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return;
    };
    for (key, child) in v {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match r.get(key) {
            None => out.push(path),
            Some(_) if key == "rules" => {}
            Some(reference_child) => unknown_keys(child, reference_child, &path, out),
        }
    }
}
