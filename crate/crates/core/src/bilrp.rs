//! Second-order explanation of embedding dot-product similarity.
//!
//! The joint relevance of a pair `(a, b)` at layer `ℓ` factorizes over
//! embedding units: `J = Σ_m LRP_m(a) ⊗ LRP_m(b)`, where `LRP_m(x)` explains
//! the activation of unit `m` of `x`. Input relevances are summed over
//! channels and over `g×g` patches before the outer product.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::lrp::{LrpPlan, LrpRules};
use crate::network::{Mode, Model};
use crate::tensor::Tensor;

/// Default cap on the number of embedding units explained per pair.
pub const DEFAULT_MAX_UNITS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct BilrpConfig {
    pub rules: LrpRules,
    pub grid: usize,
    pub max_units: usize,
    /// When more than `max_units` units contribute, keep the largest ones
    /// instead of failing.
    pub truncate: bool,
}

impl Default for BilrpConfig {
    fn default() -> Self {
        BilrpConfig {
            rules: LrpRules::default(),
            grid: 8,
            max_units: DEFAULT_MAX_UNITS,
            truncate: true,
        }
    }
}

/// Patch-to-patch relevance for a pair of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRelevance {
    pub ids: Option<(u32, u32)>,
    pub layer: usize,
    pub grid: usize,
    /// `(g·g) × (g·g)` row-major; entry `(p, q)` links patch `p` of the first
    /// input to patch `q` of the second.
    pub matrix: Vec<f32>,
    pub similarity: f32,
    /// Units with a non-zero contribution `a_m·b_m`.
    pub units_contributing: usize,
    pub units_used: usize,
    /// Share of `Σ|a_m·b_m|` carried by units dropped by the cap.
    pub truncated_fraction: f64,
}

impl JointRelevance {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn get(&self, p: usize, q: usize) -> f32 {
        self.matrix[p * self.patches() + q]
    }

    pub fn total(&self) -> f64 {
        self.matrix.iter().map(|&v| v as f64).sum()
    }

    pub fn transpose(&self) -> JointRelevance {
        let n = self.patches();
        let mut matrix = vec![0.0; n * n];
        for p in 0..n {
            for q in 0..n {
                matrix[q * n + p] = self.matrix[p * n + q];
            }
        }
        JointRelevance {
            ids: self.ids.map(|(a, b)| (b, a)),
            matrix,
            ..self.clone()
        }
    }
}

/// One patch-to-patch link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Connection {
    pub a: [usize; 2],
    pub b: [usize; 2],
    pub w: f32,
}

/// Flattened activation at trace entry `layer` (0 is the input itself).
pub fn embed(model: &Model, input: &Tensor, layer: usize) -> Result<Tensor> {
    let entries = model.layers().len() + 1;
    if layer >= entries {
        return Err(Error::Usage(format!(
            "layer {layer} out of range: the trace has {entries} entries"
        )));
    }
    let (_, trace) = model.forward_with_trace(input, Mode::Inference)?;
    let act = trace.activations.into_iter().nth(layer).expect("checked above");
    Ok(Tensor::vector(act.into_data()))
}

/// Dot product of the two embeddings at `layer`.
pub fn similarity(model: &Model, a: &Tensor, b: &Tensor, layer: usize) -> Result<f32> {
    let (ea, eb) = (embed(model, a, layer)?, embed(model, b, layer)?);
    Ok(ea.data().iter().zip(eb.data()).map(|(x, y)| x * y).sum())
}

fn pool_to_grid(rel: &Tensor, grid: usize) -> Result<Vec<f32>> {
    let summed = rel.channel_sum()?;
    let (h, w) = (summed.shape()[0], summed.shape()[1]);
    let (ph, pw) = (h / grid, w / grid);
    let mut out = vec![0.0f32; grid * grid];
    for y in 0..h {
        for x in 0..w {
            out[(y / ph) * grid + x / pw] += summed.data()[y * w + x];
        }
    }
    Ok(out)
}

/// Pooled input relevance of each selected unit, for one input.
fn unit_maps(model: &Model, input: &Tensor, layer: usize, units: &[usize], config: &BilrpConfig) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new();
    let traced = model.trace_on(&mut g, input, false, false, Mode::Inference)?;
    let plan = LrpPlan::prepare(&mut g, model, &traced, &config.rules, layer)?;
    let act_var = traced.trace[layer];
    let shape = g.value(act_var).shape().to_vec();
    let act = g.value(act_var).data().to_vec();
    let mut maps = Vec::with_capacity(units.len());
    for &m in units {
        let mark = g.len();
        let mut start = vec![0.0f32; act.len()];
        start[m] = act[m];
        let start = g.constant(Tensor::new(&shape, start)?);
        let (rels, _) = plan.propagate(&mut g, layer, start)?;
        maps.push(pool_to_grid(g.value(rels[0]), config.grid)?);
        g.truncate(mark);
    }
    Ok(maps)
}

/// Joint relevance of the similarity between `a` and `b` at trace entry `layer`.
pub fn bilrp(model: &Model, a: &Tensor, b: &Tensor, layer: usize, config: &BilrpConfig) -> Result<JointRelevance> {
    let [_, h, w] = model.input_shape();
    let grid = config.grid;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Usage(format!("grid {grid} must divide the input size {h}x{w}")));
    }
    let (ea, eb) = (embed(model, a, layer)?, embed(model, b, layer)?);
    let similarity: f32 = ea.data().iter().zip(eb.data()).map(|(x, y)| x * y).sum();

    // Units with a_m·b_m = 0 have an all-zero outer product.
    let mut units: Vec<(usize, f64)> = ea
        .data()
        .iter()
        .zip(eb.data())
        .enumerate()
        .filter(|(_, (x, y))| **x != 0.0 && **y != 0.0)
        .map(|(m, (x, y))| (m, (*x as f64 * *y as f64).abs()))
        .collect();
    let contributing = units.len();
    let mass: f64 = units.iter().map(|u| u.1).sum();
    let mut truncated_fraction = 0.0;
    if units.len() > config.max_units {
        if !config.truncate {
            return Err(Error::Usage(format!(
                "{} embedding units exceed the cap of {}; enable truncation or raise the cap",
                units.len(),
                config.max_units
            )));
        }
        units.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let dropped: f64 = units[config.max_units..].iter().map(|u| u.1).sum();
        truncated_fraction = if mass > 0.0 { dropped / mass } else { 0.0 };
        units.truncate(config.max_units);
        units.sort_by_key(|u| u.0);
    }
    let selected: Vec<usize> = units.iter().map(|u| u.0).collect();

    let maps_a = unit_maps(model, a, layer, &selected, config)?;
    let maps_b = unit_maps(model, b, layer, &selected, config)?;
    let n = grid * grid;
    let mut matrix = vec![0.0f32; n * n];
    for (ra, rb) in maps_a.iter().zip(&maps_b) {
        for p in 0..n {
            if ra[p] == 0.0 {
                continue;
            }
            let row = &mut matrix[p * n..(p + 1) * n];
            for (cell, &v) in row.iter_mut().zip(rb) {
                *cell += ra[p] * v;
            }
        }
    }
    Ok(JointRelevance {
        ids: None,
        layer,
        grid,
        matrix,
        similarity,
        units_contributing: contributing,
        units_used: selected.len(),
        truncated_fraction,
    })
}

/// The `k` largest-magnitude entries, descending by `|w|`, ties by `(p, q)`.
pub fn top_connections(joint: &JointRelevance, k: usize) -> Result<Vec<Connection>> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let n = joint.patches();
    let mut idx: Vec<usize> = (0..n * n).collect();
    idx.sort_by(|&x, &y| joint.matrix[y].abs().total_cmp(&joint.matrix[x].abs()).then(x.cmp(&y)));
    let g = joint.grid;
    Ok(idx
        .into_iter()
        .take(k)
        .map(|i| {
            let (p, q) = (i / n, i % n);
            Connection {
                a: [p / g, p % g],
                b: [q / g, q % g],
                w: joint.matrix[i],
            }
        })
        .collect())
}

#[derive(Serialize)]
struct JointJson {
    layer: usize,
    grid: usize,
    similarity: f32,
    connections: Vec<Connection>,
}

/// `{"layer", "grid", "similarity", "connections": [{"a", "b", "w"}]}`.
pub fn to_json(joint: &JointRelevance, k: usize) -> Result<String> {
    let doc = JointJson {
        layer: joint.layer,
        grid: joint.grid,
        similarity: joint.similarity,
        connections: top_connections(joint, k)?,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Usage(e.to_string()))
}
