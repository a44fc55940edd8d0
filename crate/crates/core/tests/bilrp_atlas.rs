mod common;

use common::*;
use rand::Rng;
use relguide::atlas::{build_index, credibility, explain_pair, query_knn, Metric};
use relguide::bilrp::{bilrp, embed, similarity, to_json, top_connections, BilrpConfig, JointRelevance};
use relguide::data::{generate, GeneratorConfig};
use relguide::lrp::{LrpRules, Rule};
use relguide::network::{LayerSpec, Mode, Model, ModelConfig};
use relguide::Tensor;

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_shape: [3, 16, 16],
        conv_channels: vec![4, 6],
        dense_units: 12,
        ..ModelConfig::default()
    };
    Model::from_config(&cfg, seed).unwrap()
}

fn samples() -> Vec<relguide::data::LabeledSample> {
    generate(&GeneratorConfig {
        height: 16,
        width: 16,
        samples_per_class: 5,
        seed: 9,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn embedding_is_the_trace_entry_and_similarity_its_dot() {
    let m = small_model(1);
    let s = samples();
    let (_, trace) = m.forward_with_trace(&s[0].image, Mode::Inference).unwrap();
    for layer in 0..trace.len() {
        let e = embed(&m, &s[0].image, layer).unwrap();
        assert_eq!(e.data(), trace.activations[layer].data());
    }
    let top = m.layers().len() - 1;
    let (a, b) = (embed(&m, &s[0].image, top).unwrap(), embed(&m, &s[1].image, top).unwrap());
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum();
    let got = similarity(&m, &s[0].image, &s[1].image, top).unwrap() as f64;
    assert!((got - dot).abs() <= 1e-6 * dot.abs().max(1.0));
    assert!(similarity(&m, &s[2].image, &s[2].image, top).unwrap() >= 0.0);
}

#[test]
fn hand_set_linear_layer_matches_factorization() {
    let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Relu];
    let mut m = Model::init([1, 2, 2], layers, 0).unwrap();
    let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
    m.set_param(&names[0], Tensor::new(&[2, 4], vec![1.0, 0.5, 0.0, -0.5, 0.25, 1.0, 1.5, 0.0]).unwrap()).unwrap();
    m.set_param(&names[1], Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    let a = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 0.5, 0.1]).unwrap();
    let b = Tensor::new(&[1, 2, 2], vec![0.3, 1.0, 2.0, 0.4]).unwrap();
    let rules = LrpRules::uniform(Rule::epsilon_absolute(1e-9));
    let cfg = BilrpConfig { rules, grid: 2, ..BilrpConfig::default() };
    let j = bilrp(&m, &a, &b, 3, &cfg).unwrap();

    // with zero bias and tiny ε each unit's relevance is its contributions a_i·w_mi
    let w = m.params()[0].value.data().to_vec();
    let mut want = [0.0f64; 16];
    for unit in 0..2 {
        let za: f64 = (0..4).map(|i| a.data()[i] as f64 * w[unit * 4 + i] as f64).sum();
        let zb: f64 = (0..4).map(|i| b.data()[i] as f64 * w[unit * 4 + i] as f64).sum();
        if za <= 0.0 || zb <= 0.0 {
            continue;
        }
        for p in 0..4 {
            for q in 0..4 {
                want[p * 4 + q] += a.data()[p] as f64 * w[unit * 4 + p] as f64 * b.data()[q] as f64 * w[unit * 4 + q] as f64;
            }
        }
    }
    for (got, want) in j.matrix.iter().zip(want) {
        assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn top_connections_follow_sort_order() {
    let mut r = rng(3);
    for _ in 0..50 {
        let matrix: Vec<f32> = (0..16).map(|_| (r.random_range(-4i32..=4) as f32) * 0.5).collect();
        let joint = JointRelevance {
            ids: None,
            layer: 0,
            grid: 2,
            matrix: matrix.clone(),
            similarity: 0.0,
            units_contributing: 0,
            units_used: 0,
            truncated_fraction: 0.0,
        };
        let k = r.random_range(1..=16);
        let got = top_connections(&joint, k).unwrap();
        let mut idx: Vec<usize> = (0..16).collect();
        idx.sort_by(|&x, &y| matrix[y].abs().partial_cmp(&matrix[x].abs()).unwrap().then(x.cmp(&y)));
        for (c, &i) in got.iter().zip(&idx) {
            let (p, q) = (i / 4, i % 4);
            assert_eq!((c.a, c.b, c.w), ([p / 2, p % 2], [q / 2, q % 2], matrix[i]));
        }
        assert_eq!(got.len(), k);
    }
}

#[test]
fn shared_bright_patch_is_the_top_connection() {
    let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3 }, LayerSpec::Relu];
    let m = Model::init([1, 4, 4], layers, 0).unwrap();
    let mut a = vec![0.05f32; 16];
    let mut b = vec![0.05f32; 16];
    for (y, x) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
        a[y * 4 + x] = 1.0;
        b[y * 4 + x] = 1.0;
    }
    b[15] = 0.3;
    let (a, b) = (Tensor::new(&[1, 4, 4], a).unwrap(), Tensor::new(&[1, 4, 4], b).unwrap());
    let cfg = BilrpConfig {
        rules: LrpRules::uniform(Rule::epsilon()),
        grid: 2,
        ..BilrpConfig::default()
    };
    let j = bilrp(&m, &a, &b, 0, &cfg).unwrap();
    let top = top_connections(&j, 1).unwrap();
    assert_eq!((top[0].a, top[0].b), ([0, 1], [0, 1]));
}

#[test]
fn bilrp_json_similarity_is_recomputable() {
    let m = small_model(2);
    let s = samples();
    let layer = m.layers().len() - 1;
    let j = explain_pair(&m, &s[0].image, &s[3].image, layer, &LrpRules::default(), 4).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&to_json(&j, 5).unwrap()).unwrap();
    let sim = doc["similarity"].as_f64().unwrap();
    assert_eq!(sim as f32, similarity(&m, &s[0].image, &s[3].image, layer).unwrap());
    assert_eq!(doc["connections"].as_array().unwrap().len(), 5);
}

#[test]
fn atlas_vectors_are_embeddings_and_knn_is_exhaustive() {
    let m = small_model(4);
    let s = samples();
    let layers = [m.layers().len() - 1, 6];
    let indices = build_index(&m, &s, &layers, Metric::Euclidean).unwrap();
    for (index, &layer) in indices.iter().zip(&layers) {
        for (i, sample) in s.iter().enumerate() {
            assert_eq!(index.vector(i), embed(&m, &sample.image, layer).unwrap().data());
        }
        let query = &s[1].image;
        let got = query_knn(index, query, &m, 3).unwrap();
        let q = embed(&m, query, layer).unwrap();
        let mut all: Vec<(f64, u32, u8)> = s
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d: f64 = q.data().iter().zip(index.vector(i)).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
                (d.sqrt(), t.id, t.label)
            })
            .collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let want: Vec<(u32, u8)> = all[..3].iter().map(|t| (t.1, t.2)).collect();
        assert_eq!(got.iter().map(|n| (n.id, n.label)).collect::<Vec<_>>(), want);
        assert_eq!(got[0].id, s[1].id);
        let same = want.iter().filter(|t| t.1 == 1).count() as f64 / 3.0;
        assert_eq!(credibility(&got, 1), same);
    }
    assert!(build_index(&m, &s, &[99], Metric::Cosine).is_err());
}
