//! Naive `f64` reference implementations used as test oracles. Nothing here
//! shares code with the crate under test beyond reading model parameters.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relguide::lrp::{Epsilon, LrpRules, Rule};
use relguide::network::{LayerSpec, Model};
use relguide::Tensor;

pub const F32_MIN_POSITIVE: f64 = f32::MIN_POSITIVE as f64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A network with `f64` parameters in model order.
#[derive(Clone, Debug)]
pub struct Net64 {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Vec<f64>>,
}

impl Net64 {
    pub fn from_model(m: &Model) -> Net64 {
        Net64 {
            input: m.input_shape(),
            layers: m.layers().to_vec(),
            params: m
                .params()
                .iter()
                .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    /// Index of the weight tensor of each parametric layer.
    fn slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                    next += 2;
                    Some(next - 2)
                }
                _ => None,
            })
            .collect()
    }
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Every connection `(out index, in index, weight index)` of a linear layer.
fn connections(layer: &LayerSpec, input: &[usize], output: &[usize], mut visit: impl FnMut(usize, usize, usize)) {
    match *layer {
        LayerSpec::Dense { .. } => {
            let n = input[0];
            for j in 0..output[0] {
                for i in 0..n {
                    visit(j, i, j * n + i);
                }
            }
        }
        LayerSpec::Conv { kernel, stride, padding, .. } => {
            let (c_in, h, w) = (input[0], input[1] as isize, input[2] as isize);
            let (c_out, ho, wo) = (output[0], output[1], output[2]);
            for o in 0..c_out {
                for y in 0..ho {
                    for x in 0..wo {
                        let j = (o * ho + y) * wo + x;
                        for c in 0..c_in {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (y * stride + ky) as isize - padding as isize;
                                    let ix = (x * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                        continue;
                                    }
                                    let i = (c * h as usize + iy as usize) * w as usize + ix as usize;
                                    let widx = ((o * c_in + c) * kernel + ky) * kernel + kx;
                                    visit(j, i, widx);
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("not a linear layer"),
    }
}

fn bias_index(layer: &LayerSpec, output: &[usize], j: usize) -> usize {
    match layer {
        LayerSpec::Conv { .. } => j / (output[1] * output[2]),
        _ => j,
    }
}

fn output_shape(layer: &LayerSpec, input: &[usize]) -> Vec<usize> {
    match *layer {
        LayerSpec::Conv { channels, kernel, stride, padding } => vec![
            channels,
            (input[1] + 2 * padding - kernel) / stride + 1,
            (input[2] + 2 * padding - kernel) / stride + 1,
        ],
        LayerSpec::Dense { units } => vec![units],
        LayerSpec::MaxPool { window, stride } => {
            vec![input[0], (input[1] - window) / stride + 1, (input[2] - window) / stride + 1]
        }
        LayerSpec::Flatten => vec![input.iter().product()],
        LayerSpec::Relu | LayerSpec::Dropout { .. } => input.to_vec(),
    }
}

/// Activations of every layer plus what LRP needs to go back.
#[derive(Clone, Debug)]
pub struct Trace64 {
    pub acts: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub argmax: Vec<Option<Vec<usize>>>,
    /// Smallest distance of any ReLU input from 0 or gap between the two
    /// largest entries of a pooling window.
    pub margin: f64,
}

impl Trace64 {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

pub fn forward64(net: &Net64, x: &[f64]) -> Trace64 {
    let slots = net.slots();
    let mut acts = vec![x.to_vec()];
    let mut shapes = vec![net.input.to_vec()];
    let mut argmax = Vec::new();
    let mut margin = f64::INFINITY;
    for (l, layer) in net.layers.iter().enumerate() {
        let input = shapes[l].clone();
        let a = &acts[l];
        let out_shape = output_shape(layer, &input);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        let mut am = None;
        match *layer {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let s = slots[l].unwrap();
                let (w, b) = (&net.params[s], &net.params[s + 1]);
                for (j, v) in out.iter_mut().enumerate() {
                    *v = b[bias_index(layer, &out_shape, j)];
                }
                connections(layer, &input, &out_shape, |j, i, wi| out[j] += w[wi] * a[i]);
            }
            LayerSpec::Relu => {
                for (o, &v) in out.iter_mut().zip(a) {
                    margin = margin.min(v.abs());
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Dropout { .. } | LayerSpec::Flatten => out.copy_from_slice(a),
            LayerSpec::MaxPool { window, stride } => {
                let (h, w) = (input[1], input[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let mut idx = vec![0; n_out];
                for c in 0..input[0] {
                    for y in 0..ho {
                        for x in 0..wo {
                            let mut vals = Vec::new();
                            for dy in 0..window {
                                for dx in 0..window {
                                    let i = (c * h + y * stride + dy) * w + x * stride + dx;
                                    vals.push((a[i], i));
                                }
                            }
                            let mut best = vals[0];
                            for &v in &vals[1..] {
                                if v.0 > best.0 {
                                    best = v;
                                }
                            }
                            let mut sorted: Vec<f64> = vals.iter().map(|v| v.0).collect();
                            sorted.sort_by(|p, q| q.total_cmp(p));
                            // ties among dead ReLU outputs carry no gradient
                            if sorted.len() > 1 && !(sorted[0] == 0.0 && sorted[1] == 0.0) {
                                margin = margin.min(sorted[0] - sorted[1]);
                            }
                            let j = (c * ho + y) * wo + x;
                            out[j] = best.0;
                            idx[j] = best.1;
                        }
                    }
                }
                am = Some(idx);
            }
        }
        acts.push(out);
        shapes.push(out_shape);
        argmax.push(am);
    }
    Trace64 {
        acts,
        shapes,
        argmax,
        margin,
    }
}

pub fn cross_entropy64(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn stab(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Relevance per trace entry, absorbed relevance per layer, ε per layer.
#[derive(Clone, Debug)]
pub struct Lrp64 {
    pub relevances: Vec<Vec<f64>>,
    pub absorbed: Vec<f64>,
    pub eps: Vec<f64>,
    /// Smallest |denominator| met; small values mean a nearly singular rule.
    pub min_den: f64,
    /// Smallest |w| or |b| fed through a sign split.
    pub weight_margin: f64,
}

/// LRP from trace entry `from` with starting relevance `start`.
/// `frozen_eps` fixes the ε of each layer (so it stays constant under perturbation).
pub fn lrp64_from(net: &Net64, trace: &Trace64, rules: &LrpRules, from: usize, start: Vec<f64>, frozen_eps: Option<&[f64]>) -> Lrp64 {
    let slots = net.slots();
    let mut rel = vec![Vec::new(); from + 1];
    rel[from] = start;
    let mut absorbed = vec![0.0; from];
    let mut eps_used = vec![0.0; net.layers.len()];
    let mut min_den = f64::INFINITY;
    let mut weight_margin = f64::INFINITY;
    for l in (0..from).rev() {
        let layer = &net.layers[l];
        let (input, output) = (&trace.shapes[l], &trace.shapes[l + 1]);
        let a = &trace.acts[l];
        let r = rel[l + 1].clone();
        let n_in: usize = input.iter().product();
        let mut out = vec![0.0; n_in];
        match *layer {
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Flatten => out.copy_from_slice(&r),
            LayerSpec::MaxPool { .. } => {
                for (j, &i) in trace.argmax[l].as_ref().unwrap().iter().enumerate() {
                    out[i] += r[j];
                }
            }
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let s = slots[l].unwrap();
                let (w, b) = (&net.params[s], &net.params[s + 1]);
                let rule = match layer {
                    LayerSpec::Conv { .. } => rules.conv,
                    _ => rules.dense,
                };
                let n_out: usize = output.iter().product();
                let bias_of = |j: usize| b[bias_index(layer, output, j)];
                match rule {
                    Rule::Epsilon { epsilon } => {
                        let mut z = vec![0.0; n_out];
                        for (j, v) in z.iter_mut().enumerate() {
                            *v = bias_of(j);
                        }
                        connections(layer, input, output, |j, i, wi| z[j] += a[i] * w[wi]);
                        let eps = match frozen_eps {
                            Some(e) => e[l],
                            None => {
                                let e = match epsilon {
                                    Epsilon::Absolute(e) => e as f64,
                                    Epsilon::Relative(r) => {
                                        r as f64 * z.iter().map(|v| v.abs()).sum::<f64>() / n_out as f64
                                    }
                                };
                                e.max(F32_MIN_POSITIVE)
                            }
                        };
                        eps_used[l] = eps;
                        let den: Vec<f64> = z.iter().map(|&v| stab(v, eps)).collect();
                        for j in 0..n_out {
                            min_den = min_den.min(den[j].abs());
                            absorbed[l] += (bias_of(j) + den[j] - z[j]) / den[j] * r[j];
                        }
                        connections(layer, input, output, |j, i, wi| out[i] += a[i] * w[wi] / den[j] * r[j]);
                    }
                    Rule::AlphaBeta { alpha, beta } => {
                        let (alpha, beta) = (alpha as f64, beta as f64);
                        let has_neg = a.iter().any(|&v| v < 0.0);
                        for &v in w.iter().chain(b.iter()) {
                            weight_margin = weight_margin.min(v.abs());
                        }
                        // sign = +1: positive contributions, −1: negative ones
                        for (coef, sign) in [(alpha, 1.0), (-beta, -1.0)] {
                            if coef == 0.0 {
                                continue;
                            }
                            let part = |ai: f64, wi: f64| -> f64 {
                                let ok = if sign > 0.0 {
                                    (ai > 0.0 && wi > 0.0) || (ai < 0.0 && wi < 0.0)
                                } else {
                                    (ai > 0.0 && wi < 0.0) || (ai < 0.0 && wi > 0.0)
                                };
                                if ok && (ai > 0.0 || has_neg) {
                                    ai * wi
                                } else {
                                    0.0
                                }
                            };
                            let bpart = |bj: f64| if sign * bj > 0.0 { bj } else { 0.0 };
                            let mut z = vec![0.0; n_out];
                            for (j, v) in z.iter_mut().enumerate() {
                                *v = bpart(bias_of(j));
                            }
                            connections(layer, input, output, |j, i, wi| z[j] += part(a[i], w[wi]));
                            let den: Vec<f64> = z.iter().map(|&v| stab(v, F32_MIN_POSITIVE)).collect();
                            for j in 0..n_out {
                                min_den = min_den.min(den[j].abs());
                                absorbed[l] += coef * (bpart(bias_of(j)) + den[j] - z[j]) / den[j] * r[j];
                            }
                            connections(layer, input, output, |j, i, wi| {
                                out[i] += coef * part(a[i], w[wi]) / den[j] * r[j]
                            });
                        }
                    }
                }
            }
        }
        rel[l] = out;
    }
    Lrp64 {
        relevances: rel,
        absorbed,
        eps: eps_used,
        min_den,
        weight_margin,
    }
}

/// LRP of the `target` logit.
pub fn lrp64(net: &Net64, trace: &Trace64, rules: &LrpRules, target: usize, frozen_eps: Option<&[f64]>) -> Lrp64 {
    let top = net.layers.len();
    let logits = trace.logits();
    let mut start = vec![0.0; logits.len()];
    start[target] = logits[target];
    lrp64_from(net, trace, rules, top, start, frozen_eps)
}

/// Positive channel-summed relevance in the lesion against lesion plus the
/// rest of the object.
pub fn score64(rel: &[f64], shape: &[usize], lesion: &[u8], object: &[u8], area_normalized: bool, floor: f64) -> f64 {
    let hw = shape[1] * shape[2];
    let mut summed = vec![0.0; hw];
    for c in 0..shape[0] {
        for p in 0..hw {
            summed[p] += rel[c * hw + p];
        }
    }
    let (mut inside, mut brain, mut n_in, mut n_rest) = (0.0, 0.0, 0usize, 0usize);
    for p in 0..hw {
        let v = summed[p].max(0.0);
        if lesion[p] == 1 {
            inside += v;
            n_in += 1;
        } else if object[p] == 1 {
            brain += v;
            n_rest += 1;
        }
    }
    if area_normalized {
        inside /= n_in as f64;
        brain = if n_rest > 0 { brain / n_rest as f64 } else { 0.0 };
    }
    let den = inside + brain;
    let s = if den > 0.0 { inside / den } else { 0.0 };
    s.max(floor)
}

/// A random small architecture with 2 to 4 parametric layers.
pub fn random_architecture(r: &mut impl Rng) -> ([usize; 3], Vec<LayerSpec>) {
    let c = r.random_range(1..=3);
    let hw = [4usize, 6, 8][r.random_range(0..3)];
    let mut layers = Vec::new();
    let mut shape = vec![c, hw, hw];
    let convs = r.random_range(0..=2);
    for _ in 0..convs {
        let channels = r.random_range(2..=4);
        let kernel = if shape[1] >= 3 { 3 } else { 1 };
        let padding = r.random_range(0..=1).min(kernel / 2);
        let stride = if shape[1] >= 6 { r.random_range(1..=2) } else { 1 };
        let l = LayerSpec::Conv {
            channels,
            kernel,
            stride,
            padding,
        };
        shape = output_shape(&l, &shape);
        layers.push(l);
        layers.push(LayerSpec::Relu);
        if shape[1] >= 4 && r.random_bool(0.5) {
            let p = LayerSpec::MaxPool { window: 2, stride: 2 };
            shape = output_shape(&p, &shape);
            layers.push(p);
        }
    }
    layers.push(LayerSpec::Flatten);
    let denses = r.random_range(if convs == 0 { 2 } else { 1 }..=4 - convs);
    for d in 0..denses {
        let units = if d + 1 == denses { r.random_range(2..=3) } else { r.random_range(3..=8) };
        layers.push(LayerSpec::Dense { units });
        if d + 1 != denses {
            layers.push(LayerSpec::Relu);
        }
    }
    ([c, hw, hw], layers)
}

/// Model with parameters drawn uniformly; biases are zero when `bias_free`.
pub fn random_model(r: &mut impl Rng, input: [usize; 3], layers: Vec<LayerSpec>, bias_free: bool) -> Model {
    let template = Model::init(input, layers.clone(), r.random()).unwrap();
    let params = template
        .params()
        .iter()
        .map(|p| {
            let is_bias = p.name.ends_with(".bias");
            let fan_in: usize = if is_bias { 1 } else { p.value.shape()[1..].iter().product() };
            let scale = if is_bias { 0.3 } else { (3.0 / fan_in as f64).sqrt() } as f32;
            let data = (0..p.value.len())
                .map(|_| if is_bias && bias_free { 0.0 } else { r.random_range(-scale..scale) })
                .collect();
            (p.name.clone(), Tensor::new(p.value.shape(), data).unwrap())
        })
        .collect();
    Model::from_params(input, layers, params).unwrap()
}

pub fn random_input(r: &mut impl Rng, shape: [usize; 3]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

