mod common;

use common::*;
use rand::Rng;
use relguide::lrp::{lrp, sensitivity_map, LrpRules, Rule};
use relguide::network::{LayerSpec, Model};
use relguide::Tensor;

fn set(model: &mut Model, values: &[Vec<f32>]) {
    let specs: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for ((name, shape), v) in specs.into_iter().zip(values) {
        model.set_param(&name, Tensor::new(&shape, v.clone()).unwrap()).unwrap();
    }
}

#[test]
fn toy_network_matches_hand_unrolled_epsilon_rule() {
    let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Relu, LayerSpec::Dense { units: 1 }];
    let mut m = Model::init([1, 1, 2], layers, 0).unwrap();
    set(&mut m, &[vec![1.0, -1.0, 2.0, 1.0], vec![0.0, 0.5], vec![0.5, 0.25], vec![0.0]]);
    let eps = 0.01f32;
    let x = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    let rel = lrp(&m, &x, 0, &LrpRules::uniform(Rule::epsilon_absolute(eps))).unwrap();

    // hidden pre-activations: [1 - 2, 2 + 2 + 0.5] = [-1, 4.5]; relu -> [0, 4.5]
    let (eps, h1) = (eps as f64, 4.5f64);
    let out = 0.25 * h1;
    let r_h1 = h1 * 0.25 / (out + eps) * out;
    let r_x = [1.0 * 2.0 / (h1 + eps) * r_h1, 2.0 * 1.0 / (h1 + eps) * r_h1];
    for (got, want) in rel.input().data().iter().zip(r_x) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
    // the bias of the first unit soaks up 0.5/4.51 of its relevance
    let absorbed = 0.5 / (h1 + eps) * r_h1 + eps / (h1 + eps) * r_h1 + eps / (out + eps) * out;
    assert!((rel.total_absorbed() - absorbed).abs() < 1e-6);
}

fn agree(rules: LrpRules, bias_free: bool, seed: u64) {
    let mut r = rng(seed);
    let mut checked = 0;
    while checked < 15 {
        let (input, layers) = random_architecture(&mut r);
        let model = random_model(&mut r, input, layers, bias_free);
        let x = random_input(&mut r, input);
        let net = Net64::from_model(&model);
        let trace = forward64(&net, &to_f64(&x));
        let target = r.random_range(0..model.classes());
        let oracle = lrp64(&net, &trace, &rules, target, None);
        if trace.margin < 1e-4 || oracle.min_den < 1e-3 {
            continue;
        }
        let got = lrp(&model, &x, target, &rules).unwrap();
        for (entry, (a, b)) in got.relevances.iter().zip(&oracle.relevances).enumerate() {
            let scale = b.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
            for (u, v) in a.data().iter().zip(b) {
                assert!((*u as f64 - v).abs() <= 1e-4 * scale, "entry {entry}: {u} vs {v}");
            }
        }
        for (a, b) in got.absorbed.iter().zip(&oracle.absorbed) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "absorbed {a} vs {b}");
        }
        checked += 1;
    }
}

#[test]
fn epsilon_rule_matches_oracle() {
    agree(LrpRules::uniform(Rule::epsilon()), false, 1);
}

#[test]
fn alpha_beta_rule_matches_oracle() {
    agree(LrpRules::uniform(Rule::alpha1_beta0()), false, 2);
    agree(LrpRules::uniform(Rule::alpha1_beta0()), true, 3);
}

#[test]
fn composite_rules_match_oracle() {
    agree(LrpRules::default(), false, 4);
}

#[test]
fn alpha1_beta0_is_nonnegative_on_nonnegative_inputs() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (input, layers) = random_architecture(&mut r);
        let model = random_model(&mut r, input, layers, false);
        let n = input.iter().product();
        let x = Tensor::new(&input, (0..n).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
        let logits = model.forward(&x).unwrap();
        let Some(target) = (0..logits.len()).find(|&i| logits.data()[i] > 0.0) else {
            continue;
        };
        let rel = lrp(&model, &x, target, &LrpRules::uniform(Rule::alpha1_beta0())).unwrap();
        assert!(rel.input().data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn sensitivity_is_squared_finite_difference_gradient() {
    let mut r = rng(6);
    let mut checked = 0;
    while checked < 5 {
        let (input, layers) = random_architecture(&mut r);
        let model = random_model(&mut r, input, layers, false);
        let x = random_input(&mut r, input);
        let net = Net64::from_model(&model);
        let x64 = to_f64(&x);
        if forward64(&net, &x64).margin < 1e-3 {
            continue;
        }
        let target = r.random_range(0..model.classes());
        let map = sensitivity_map(&model, &x, target).unwrap();
        let h = 1e-6;
        for (i, &got) in map.data().iter().enumerate() {
            let mut p = x64.clone();
            p[i] += h;
            let up = forward64(&net, &p).logits()[target];
            p[i] -= 2.0 * h;
            let down = forward64(&net, &p).logits()[target];
            let fd = ((up - down) / (2.0 * h)).powi(2);
            let got = got as f64;
            assert!((got - fd).abs() <= 1e-3 * got.abs().max(fd).max(1e-4), "{got} vs {fd}");
        }
        checked += 1;
    }
}
