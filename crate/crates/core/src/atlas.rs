//! Deep-kNN retrieval over hidden activations of an atlas dataset.
//!
//! Atlas file: little-endian, magic `RGTA`, version 1, `u32` layer, `u8`
//! metric, `u32` count, `u32` dimension, then ids, labels and vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilrp::{bilrp, BilrpConfig, JointRelevance};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_file, Reader, Writer};
use crate::lrp::LrpRules;
use crate::network::{Mode, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RGTA";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_code(code: u8) -> Option<Metric> {
        match code {
            0 => Some(Metric::Euclidean),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }

    /// Distance in `f64`. Cosine distance is `1 − cos`; it is 1 when exactly
    /// one vector is zero and 0 when both are.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x as f64, y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                match (na == 0.0, nb == 0.0) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => 1.0,
                    _ => 1.0 - dot / (na * nb).sqrt(),
                }
            }
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Usage(format!("unknown metric {other:?}"))),
        }
    }
}

/// Flattened activations of every atlas sample at one trace entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasIndex {
    layer: usize,
    metric: Metric,
    dim: usize,
    ids: Vec<u32>,
    labels: Vec<u8>,
    vectors: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: u32,
    pub distance: f64,
    pub label: u8,
}

impl AtlasIndex {
    pub fn new(layer: usize, metric: Metric, ids: Vec<u32>, labels: Vec<u8>, vectors: Vec<Vec<f32>>) -> Result<AtlasIndex> {
        if ids.len() != labels.len() || ids.len() != vectors.len() {
            return Err(Error::dim(format!(
                "{} ids, {} labels and {} vectors",
                ids.len(),
                labels.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::dim("atlas vectors differ in length"));
        }
        Ok(AtlasIndex {
            layer,
            metric,
            dim,
            ids,
            labels,
            vectors: vectors.concat(),
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact `k` nearest neighbors of `query`, ascending by distance, ties by id.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 || k > self.len() {
            return Err(Error::Usage(format!("k = {k} outside 1..={}", self.len())));
        }
        if query.len() != self.dim {
            return Err(Error::dim(format!(
                "query has {} features, atlas has {}",
                query.len(),
                self.dim
            )));
        }
        let mut all: Vec<Neighbor> = (0..self.len())
            .map(|i| Neighbor {
                id: self.ids[i],
                distance: self.metric.distance(query, self.vector(i)),
                label: self.labels[i],
            })
            .collect();
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
        all.truncate(k);
        Ok(all)
    }
}

/// One index per requested trace entry, built from inference-mode activations.
pub fn build_index(model: &Model, samples: &[LabeledSample], layers: &[usize], metric: Metric) -> Result<Vec<AtlasIndex>> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot build an atlas from zero samples".into()));
    }
    let entries = model.layers().len() + 1;
    if let Some(&bad) = layers.iter().find(|&&l| l >= entries) {
        return Err(Error::Usage(format!("layer {bad} out of range: the trace has {entries} entries")));
    }
    let mut vectors: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(samples.len()); layers.len()];
    for s in samples {
        let (_, trace) = model.forward_with_trace(&s.image, Mode::Inference)?;
        for (slot, &l) in vectors.iter_mut().zip(layers) {
            slot.push(trace.activations[l].data().to_vec());
        }
    }
    let ids: Vec<u32> = samples.iter().map(|s| s.id).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    layers
        .iter()
        .zip(vectors)
        .map(|(&l, v)| AtlasIndex::new(l, metric, ids.clone(), labels.clone(), v))
        .collect()
}

/// Embeds `input` at the index layer and returns its `k` nearest atlas entries.
pub fn query_knn(index: &AtlasIndex, input: &Tensor, model: &Model, k: usize) -> Result<Vec<Neighbor>> {
    let e = crate::bilrp::embed(model, input, index.layer)?;
    index.nearest(e.data(), k)
}

/// Share of neighbors carrying `predicted`.
pub fn credibility(neighbors: &[Neighbor], predicted: u8) -> f64 {
    if neighbors.is_empty() {
        return 0.0;
    }
    neighbors.iter().filter(|n| n.label == predicted).count() as f64 / neighbors.len() as f64
}

/// BiLRP of the similarity between a query and a retrieved atlas sample.
pub fn explain_pair(
    model: &Model,
    input: &Tensor,
    atlas_sample: &Tensor,
    layer: usize,
    rules: &LrpRules,
    grid: usize,
) -> Result<JointRelevance> {
    let config = BilrpConfig {
        rules: rules.clone(),
        grid,
        ..BilrpConfig::default()
    };
    bilrp(model, input, atlas_sample, layer, &config)
}

pub fn save_index(index: &AtlasIndex, path: &Path) -> Result<()> {
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(VERSION);
    out.u32(index.layer as u32);
    out.u8(index.metric.code());
    out.u32(index.len() as u32);
    out.u32(index.dim as u32);
    for &id in &index.ids {
        out.u32(id);
    }
    out.bytes(&index.labels);
    out.f32s(&index.vectors);
    write_file(path, &out.into_inner())
}

pub fn load_index(path: &Path) -> Result<AtlasIndex> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let layer = r.u32()? as usize;
    let code = r.u8()?;
    let metric = Metric::from_code(code).ok_or_else(|| r.err(format!("unknown metric code {code}")))?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let labels = r.bytes(n)?.to_vec();
    let vectors = r.f32s(n.checked_mul(dim).ok_or_else(|| r.err("atlas size overflows"))?)?;
    r.finish()?;
    Ok(AtlasIndex {
        layer,
        metric,
        dim,
        ids,
        labels,
        vectors,
    })
}
