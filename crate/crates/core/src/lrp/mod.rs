//! Layer-wise relevance propagation.
//!
//! Relevance is pushed backwards through a recorded forward pass using only
//! graph primitives: for a linear layer with pre-activations `z` the
//! redistributed relevance is `a ⊙ Wᵀ(R ⊘ stab(z))`, the gradient×input form
//! of the rule. Because every step is a graph node, a scalar built from the
//! input relevance can be differentiated with respect to the model
//! parameters.

mod heatmap;

use serde::{Deserialize, Serialize};

pub use heatmap::{heatmap_pixels, render_heatmap, write_relevance_csv};

use crate::autodiff::{stabilized, Graph, Var};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Mode, Model, Traced};
use crate::tensor::Tensor;

/// Default relative stabilizer: `ε = 1e-6 · mean|z|` per layer.
pub const DEFAULT_RELATIVE_EPSILON: f32 = 1e-6;

/// How the ε of the epsilon rule is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    /// Fixed value.
    Absolute(f32),
    /// Multiple of the layer's mean absolute pre-activation.
    Relative(f32),
}

/// Propagation rule for one linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    Epsilon { epsilon: Epsilon },
    AlphaBeta { alpha: f32, beta: f32 },
}

impl Rule {
    pub fn epsilon() -> Rule {
        Rule::Epsilon {
            epsilon: Epsilon::Relative(DEFAULT_RELATIVE_EPSILON),
        }
    }

    pub fn epsilon_absolute(eps: f32) -> Rule {
        Rule::Epsilon {
            epsilon: Epsilon::Absolute(eps),
        }
    }

    pub fn alpha1_beta0() -> Rule {
        Rule::AlphaBeta { alpha: 1.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Rule::Epsilon {
                epsilon: Epsilon::Absolute(e) | Epsilon::Relative(e),
            } if !(e >= 0.0 && e.is_finite()) => Err(Error::Config(format!("epsilon must be >= 0, got {e}"))),
            Rule::AlphaBeta { alpha, beta } if !(alpha >= 1.0 && beta >= 0.0 && (alpha - beta - 1.0).abs() < 1e-6) => Err(
                Error::Config(format!("alpha-beta rule needs alpha - beta = 1 and alpha >= 1, got {alpha}/{beta}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Rule::Epsilon { epsilon: Epsilon::Absolute(e) } => format!("epsilon(abs {e})"),
            Rule::Epsilon { epsilon: Epsilon::Relative(e) } => format!("epsilon(rel {e})"),
            Rule::AlphaBeta { alpha, beta } => format!("alpha{alpha}beta{beta}"),
        }
    }
}

/// Rule per layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrpRules {
    pub dense: Rule,
    pub conv: Rule,
}

impl Default for LrpRules {
    /// Epsilon for dense layers, α1β0 for convolutions.
    fn default() -> Self {
        LrpRules {
            dense: Rule::epsilon(),
            conv: Rule::alpha1_beta0(),
        }
    }
}

impl LrpRules {
    pub fn uniform(rule: Rule) -> Self {
        LrpRules { dense: rule, conv: rule }
    }

    /// Named presets used on the command line.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "epsilon" => Ok(LrpRules::uniform(Rule::epsilon())),
            "alphabeta" => Ok(LrpRules::uniform(Rule::alpha1_beta0())),
            "composite" => Ok(LrpRules::default()),
            other => Err(Error::Usage(format!(
                "unknown rule {other:?} (expected epsilon, alphabeta or composite)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dense.validate()?;
        self.conv.validate()
    }

    pub fn describe(&self) -> String {
        format!("dense={} conv={}", self.dense.describe(), self.conv.describe())
    }
}

/// Relevance per trace entry, from the input (index 0) to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub target: usize,
    pub relevances: Vec<Tensor>,
    /// Relevance kept by biases and stabilizers at each layer (0 for
    /// non-linear layers).
    pub absorbed: Vec<f64>,
}

impl RelevanceMap {
    pub fn input(&self) -> &Tensor {
        &self.relevances[0]
    }

    pub fn total_absorbed(&self) -> f64 {
        self.absorbed.iter().sum()
    }
}

#[derive(Clone, Copy)]
enum Linear {
    Dense,
    Conv { stride: usize, pad: usize },
}

/// `coef · Σ act ⊙ Kᵀ(R ⊘ den)` over the listed (act, kernel) pairs.
struct Term {
    coef: f32,
    den: Var,
    /// Pre-stabilization denominator and the bias share inside it.
    raw: Var,
    bias: Option<Var>,
    pairs: Vec<(Var, Var)>,
}

enum Step {
    PassThrough,
    Reshape(Vec<usize>),
    Unpool(Var),
    Linear {
        kind: Linear,
        input_shape: Vec<usize>,
        terms: Vec<Term>,
    },
}

/// Per-layer propagation recipe prepared once for a forward pass; relevance
/// can then be pushed from any trace entry down to the input.
pub struct LrpPlan {
    steps: Vec<Step>,
}

fn mean_abs(t: &Tensor) -> f32 {
    (t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / t.len() as f64) as f32
}

fn linear_output(g: &mut Graph, kind: Linear, act: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    match kind {
        Linear::Dense => g.dense(act, kernel, bias),
        Linear::Conv { stride, pad } => g.conv2d(act, kernel, bias, stride, pad),
    }
}

fn negative_part(g: &mut Graph, v: Var) -> Var {
    // min(v, 0) = −relu(−v)
    let neg = g.scale(v, -1.0);
    let r = g.relu(neg);
    g.scale(r, -1.0)
}

impl LrpPlan {
    /// Prepares layers `0..upto` (an exclusive trace index) of `traced`.
    pub fn prepare(g: &mut Graph, model: &Model, traced: &Traced, rules: &LrpRules, upto: usize) -> Result<LrpPlan> {
        rules.validate()?;
        let mut steps = Vec::with_capacity(upto);
        for (i, layer) in model.layers().iter().enumerate().take(upto) {
            let act = traced.trace[i];
            let out = traced.trace[i + 1];
            let step = match *layer {
                LayerSpec::Relu | LayerSpec::Dropout { .. } => Step::PassThrough,
                LayerSpec::Flatten => Step::Reshape(g.value(act).shape().to_vec()),
                LayerSpec::MaxPool { .. } => Step::Unpool(out),
                LayerSpec::Conv { stride, padding, .. } => {
                    let kind = Linear::Conv { stride, pad: padding };
                    Self::linear_step(g, model, traced, i, kind, rules.conv)?
                }
                LayerSpec::Dense { .. } => Self::linear_step(g, model, traced, i, Linear::Dense, rules.dense)?,
            };
            steps.push(step);
        }
        Ok(LrpPlan { steps })
    }

    fn linear_step(g: &mut Graph, model: &Model, traced: &Traced, layer: usize, kind: Linear, rule: Rule) -> Result<Step> {
        let slot = model.weight_slot(layer).expect("linear layers own parameters");
        let (w, b) = (traced.params[slot], traced.params[slot + 1]);
        let act = traced.trace[layer];
        let out = traced.trace[layer + 1];
        let input_shape = g.value(act).shape().to_vec();
        let terms = match rule {
            Rule::Epsilon { epsilon } => {
                let eps = match epsilon {
                    Epsilon::Absolute(e) => e,
                    Epsilon::Relative(r) => r * mean_abs(g.value(out)),
                }
                .max(f32::MIN_POSITIVE);
                let den = g.stabilize(out, eps);
                vec![Term {
                    coef: 1.0,
                    den,
                    raw: out,
                    bias: Some(b),
                    pairs: vec![(act, w)],
                }]
            }
            Rule::AlphaBeta { alpha, beta } => {
                let w_pos = g.relu(w);
                let w_neg = negative_part(g, w);
                let a_pos = g.relu(act);
                let has_negative_input = g.value(act).data().iter().any(|&v| v < 0.0);
                let a_neg = has_negative_input.then(|| negative_part(g, act));
                let mut terms = Vec::new();
                // positive contributions: a⁺w⁺ + a⁻w⁻ ; negative: a⁺w⁻ + a⁻w⁺
                let parts = [(alpha, w_pos, w_neg), (-beta, w_neg, w_pos)];
                for (coef, with_pos, with_neg) in parts {
                    if coef == 0.0 {
                        continue;
                    }
                    let bias = if coef > 0.0 { g.relu(b) } else { negative_part(g, b) };
                    let mut pairs = vec![(a_pos, with_pos)];
                    let mut z = linear_output(g, kind, a_pos, with_pos, Some(bias))?;
                    if let Some(a_neg) = a_neg {
                        let extra = linear_output(g, kind, a_neg, with_neg, None)?;
                        z = g.add(z, extra)?;
                        pairs.push((a_neg, with_neg));
                    }
                    let den = g.stabilize(z, f32::MIN_POSITIVE);
                    terms.push(Term {
                        coef,
                        den,
                        raw: z,
                        bias: Some(bias),
                        pairs,
                    });
                }
                terms
            }
        };
        Ok(Step::Linear {
            kind,
            input_shape,
            terms,
        })
    }

    /// Propagates `relevance` (shaped like trace entry `from`) down to the
    /// input. Returns one var per trace entry `0..=from` and the absorbed
    /// relevance per layer `0..from`.
    pub fn propagate(&self, g: &mut Graph, from: usize, relevance: Var) -> Result<(Vec<Var>, Vec<f64>)> {
        if from > self.steps.len() {
            return Err(Error::Usage(format!(
                "plan prepared for {} layers, asked to start at entry {from}",
                self.steps.len()
            )));
        }
        let mut out = vec![relevance; from + 1];
        let mut absorbed = vec![0.0f64; from];
        let mut r = relevance;
        for i in (0..from).rev() {
            r = match &self.steps[i] {
                Step::PassThrough => r,
                Step::Reshape(shape) => g.reshape(r, shape)?,
                Step::Unpool(pool) => g.unpool(r, *pool)?,
                Step::Linear { kind, input_shape, terms } => {
                    let mut acc: Option<Var> = None;
                    for term in terms {
                        absorbed[i] += term_absorbed(g, term, r);
                        let s = g.div(r, term.den)?;
                        for &(act, kernel) in &term.pairs {
                            let back = match *kind {
                                Linear::Dense => g.dense_transpose(s, kernel)?,
                                Linear::Conv { stride, pad } => g.conv2d_transpose(s, kernel, input_shape, stride, pad)?,
                            };
                            let mut contrib = g.mul(act, back)?;
                            if term.coef != 1.0 {
                                contrib = g.scale(contrib, term.coef);
                            }
                            acc = Some(match acc {
                                Some(a) => g.add(a, contrib)?,
                                None => contrib,
                            });
                        }
                    }
                    acc.expect("linear step has at least one term")
                }
            };
            if !g.value(r).is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite relevance at trace entry {i} (stabilizer too small?)"
                )));
            }
            out[i] = r;
        }
        Ok((out, absorbed))
    }
}

/// `coef · Σ_k (den_k − Σ_j z_jk) / den_k · R_k`: bias share plus stabilizer.
fn term_absorbed(g: &Graph, term: &Term, r: Var) -> f64 {
    let den = g.value(term.den).data();
    let raw = g.value(term.raw).data();
    let r = g.value(r).data();
    let bias = term.bias.map(|b| g.value(b).data());
    let per_channel = raw.len() / bias.map_or(1, |b| b.len().max(1));
    let mut total = 0.0f64;
    for k in 0..den.len() {
        let b = bias.map_or(0.0, |b| b[k / per_channel]) as f64;
        let stab = den[k] as f64 - raw[k] as f64;
        total += (b + stab) / den[k] as f64 * r[k] as f64;
    }
    term.coef as f64 * total
}

/// Differentiable LRP on an existing forward pass, started from the
/// `target` logit.
pub fn lrp_on(g: &mut Graph, model: &Model, traced: &Traced, target: usize, rules: &LrpRules) -> Result<(Vec<Var>, Vec<f64>)> {
    let classes = model.classes();
    if target >= classes {
        return Err(Error::Usage(format!("target class {target} out of range for {classes} classes")));
    }
    let top = traced.trace.len() - 1;
    let plan = LrpPlan::prepare(g, model, traced, rules, top)?;
    let mut onehot = vec![0.0f32; classes];
    onehot[target] = 1.0;
    let start = g.mul_const(traced.logits(), Tensor::vector(onehot))?;
    plan.propagate(g, top, start)
}

/// Explains the `target` logit of an inference-mode forward pass.
pub fn lrp(model: &Model, input: &Tensor, target: usize, rules: &LrpRules) -> Result<RelevanceMap> {
    let mut g = Graph::new();
    let traced = model.trace_on(&mut g, input, false, false, Mode::Inference)?;
    let (vars, absorbed) = lrp_on(&mut g, model, &traced, target, rules)?;
    Ok(RelevanceMap {
        target,
        relevances: vars.iter().map(|&v| g.value(v).clone()).collect(),
        absorbed,
    })
}

/// Sensitivity analysis: squared input gradient of the `target` logit.
pub fn sensitivity_map(model: &Model, input: &Tensor, target: usize) -> Result<Tensor> {
    if target >= model.classes() {
        return Err(Error::Usage(format!("target class {target} out of range")));
    }
    let mut g = Graph::new();
    let traced = model.trace_on(&mut g, input, false, true, Mode::Inference)?;
    let logit = g.index(traced.logits(), target)?;
    let grads = g.backward(logit)?;
    Ok(grads.wrt(traced.trace[0]).map(|d| d * d))
}

#[doc(hidden)]
pub fn stabilized_value(z: f32, eps: f32) -> f32 {
    stabilized(z, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_model(input: usize, layers: Vec<LayerSpec>, params: Vec<(&str, Tensor)>) -> Model {
        // A flat input is expressed as [n, 1, 1] followed by a flatten.
        let mut all = vec![LayerSpec::Flatten];
        all.extend(layers);
        Model::from_params(
            [input, 1, 1],
            all,
            params.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        )
        .unwrap()
    }

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn single_dense_layer_is_weight_times_input() {
        let m = dense_model(
            3,
            vec![LayerSpec::Dense { units: 1 }],
            vec![("dense0.weight", t(&[1, 3], &[0.5, -2.0, 1.5])), ("dense0.bias", Tensor::zeros(&[1]))],
        );
        let x = t(&[3, 1, 1], &[2.0, 1.0, 3.0]);
        let rel = lrp(&m, &x, 0, &LrpRules::uniform(Rule::epsilon_absolute(0.0))).unwrap();
        assert_eq!(rel.input().data(), &[1.0, -2.0, 4.5]);
        let y = m.forward(&x).unwrap().data()[0];
        assert!((rel.input().sum() - y).abs() < 1e-6);
    }

    #[test]
    fn dead_relu_gets_no_relevance() {
        // hidden unit 1 has a negative pre-activation
        let m = dense_model(
            2,
            vec![LayerSpec::Dense { units: 2 }, LayerSpec::Relu, LayerSpec::Dense { units: 1 }],
            vec![
                ("dense0.weight", t(&[2, 2], &[1.0, 1.0, -1.0, -1.0])),
                ("dense0.bias", Tensor::zeros(&[2])),
                ("dense1.weight", t(&[1, 2], &[1.0, 1.0])),
                ("dense1.bias", Tensor::zeros(&[1])),
            ],
        );
        let x = t(&[2, 1, 1], &[1.0, 2.0]);
        for rules in [LrpRules::uniform(Rule::epsilon()), LrpRules::uniform(Rule::alpha1_beta0())] {
            let rel = lrp(&m, &x, 0, &rules).unwrap();
            // entry 3 is the relu output
            assert_eq!(rel.relevances[3].data()[1], 0.0);
            assert_eq!(rel.relevances[2].data()[1], 0.0);
        }
    }

    #[test]
    fn non_finite_relevance_is_numerical_error() {
        let m = dense_model(
            2,
            vec![LayerSpec::Dense { units: 1 }],
            vec![("dense0.weight", t(&[1, 2], &[1.0, 1.0])), ("dense0.bias", Tensor::zeros(&[1]))],
        );
        // the logit overflows, so R/z is inf/inf
        let x = t(&[2, 1, 1], &[2e38, 2e38]);
        let err = lrp(&m, &x, 0, &LrpRules::uniform(Rule::epsilon_absolute(0.0))).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn rule_validation() {
        assert!(Rule::AlphaBeta { alpha: 2.0, beta: 1.0 }.validate().is_ok());
        assert!(Rule::AlphaBeta { alpha: 2.0, beta: 0.0 }.validate().is_err());
        assert!(Rule::epsilon_absolute(-1.0).validate().is_err());
        assert!(LrpRules::preset("bogus").is_err());
    }

    #[test]
    fn sensitivity_of_linear_function() {
        let m = dense_model(
            3,
            vec![LayerSpec::Dense { units: 1 }],
            vec![("dense0.weight", t(&[1, 3], &[3.0, 0.0, 0.0])), ("dense0.bias", Tensor::zeros(&[1]))],
        );
        let s = sensitivity_map(&m, &t(&[3, 1, 1], &[0.2, -0.4, 7.0]), 0).unwrap();
        assert_eq!(s.data(), &[9.0, 0.0, 0.0]);
    }
}
