//! Sequential CNN classifier with a full activation trace.

mod io;

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use io::{load_weights, read_weight_file, save_weights, write_weight_file};

use crate::autodiff::kernels::{self, ConvGeom, PoolGeom};
use crate::autodiff::{dropout, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f32,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Width and depth knobs of the default classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dense_units: usize,
    pub dropout_rate: f32,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: [3, 64, 64],
            conv_channels: vec![16, 32, 64, 128],
            kernel_size: 3,
            dense_units: 256,
            dropout_rate: 0.25,
            classes: 2,
        }
    }
}

impl ModelConfig {
    /// conv→relu→maxpool blocks with dropout after the first and last pool,
    /// then flatten→dense→relu→dense.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let blocks = self.conv_channels.len();
        for (i, &channels) in self.conv_channels.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                channels,
                kernel: self.kernel_size,
                stride: 1,
                padding: self.kernel_size / 2,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
            if i == 0 || i + 1 == blocks {
                layers.push(LayerSpec::Dropout {
                    rate: self.dropout_rate,
                });
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            units: self.dense_units,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense {
            units: self.classes,
        });
        layers
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Sequential classifier: layer specs plus their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Param>,
    /// For each layer, the index of its weight in `params` (bias follows).
    slots: Vec<Option<usize>>,
}

/// Activations of one forward pass: entry 0 is the input, entry `i + 1` the
/// output of layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.activations.get(i)
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the input")
    }
}

/// Whether dropout is active, and the stream it draws from.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut rng::Rng),
}

/// A forward pass recorded on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Traced {
    /// One var per model parameter, in model order.
    pub params: Vec<Var>,
    /// One var per trace entry (input first).
    pub trace: Vec<Var>,
}

impl Traced {
    pub fn logits(&self) -> Var {
        *self.trace.last().expect("trace always holds the input")
    }
}

fn param_shapes(layer: &LayerSpec, input: &[usize]) -> Option<[Vec<usize>; 2]> {
    match *layer {
        LayerSpec::Conv { channels, kernel, .. } => {
            Some([vec![channels, input[0], kernel, kernel], vec![channels]])
        }
        LayerSpec::Dense { units } => Some([vec![units, input[0]], vec![units]]),
        _ => None,
    }
}

/// Output shape of every layer, starting with the input itself.
pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let cfg = |msg: String| Error::Config(msg);
    let mut shapes = vec![input_shape.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes.last().unwrap().clone();
        let next = match *layer {
            LayerSpec::Conv { channels, kernel, stride, padding } => {
                if channels == 0 {
                    return Err(cfg(format!("layer {i}: conv with zero channels")));
                }
                let geom = ConvGeom::new(&cur, &[channels, cur.first().copied().unwrap_or(0), kernel, kernel], stride, padding)
                    .map_err(|e| cfg(format!("layer {i}: {e}")))?;
                geom.output_shape().to_vec()
            }
            LayerSpec::MaxPool { window, stride } => PoolGeom::new(&cur, window, stride)
                .map_err(|e| cfg(format!("layer {i}: input too small: {e}")))?
                .output_shape()
                .to_vec(),
            LayerSpec::Relu => cur,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(cfg(format!("layer {i}: dropout rate {rate} outside [0,1)")));
                }
                cur
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Dense { units } => {
                if cur.len() != 1 {
                    return Err(cfg(format!("layer {i}: dense needs a flat input, got {cur:?}")));
                }
                if units == 0 {
                    return Err(cfg(format!("layer {i}: dense with zero units")));
                }
                vec![units]
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

impl Model {
    /// Builds the default classifier for `input_shape` (`[C, H, W]`).
    pub fn build_default(input_shape: [usize; 3], seed: u64) -> Result<Model> {
        let config = ModelConfig {
            input_shape,
            ..ModelConfig::default()
        };
        Model::from_config(&config, seed)
    }

    pub fn from_config(config: &ModelConfig, seed: u64) -> Result<Model> {
        Model::init(config.input_shape, config.layers(), seed)
    }

    /// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init(input_shape: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> Result<Model> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = Vec::new();
        let mut named = NameCounter::default();
        for (layer, input) in layers.iter().zip(&shapes) {
            let Some([w_shape, b_shape]) = param_shapes(layer, input) else {
                continue;
            };
            let fan_in: usize = w_shape[1..].iter().product();
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let n: usize = w_shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let prefix = named.next(layer);
            params.push((format!("{prefix}.weight"), Tensor::new(&w_shape, w)?));
            params.push((format!("{prefix}.bias"), Tensor::zeros(&b_shape)));
        }
        Model::from_params(input_shape, layers, params)
    }

    /// Assembles a model from explicit parameters, checking names, count and shapes.
    pub fn from_params(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<(String, Tensor)>,
    ) -> Result<Model> {
        Self::from_shared_params(
            input_shape,
            layers,
            params.into_iter().map(|(n, t)| (n, Arc::new(t))).collect(),
        )
    }

    fn from_shared_params(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<(String, Arc<Tensor>)>,
    ) -> Result<Model> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let expected: usize = layers.iter().filter(|l| l.has_params()).count() * 2;
        if params.len() != expected {
            return Err(Error::dim(format!(
                "model needs {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut slots = Vec::with_capacity(layers.len());
        let mut out = Vec::with_capacity(params.len());
        let mut it = params.into_iter();
        let mut named = NameCounter::default();
        for (layer, input) in layers.iter().zip(&shapes) {
            let Some(want) = param_shapes(layer, input) else {
                slots.push(None);
                continue;
            };
            slots.push(Some(out.len()));
            let prefix = named.next(layer);
            for (suffix, shape) in ["weight", "bias"].iter().zip(want) {
                let (name, value) = it.next().expect("count checked above");
                let want_name = format!("{prefix}.{suffix}");
                if name != want_name {
                    return Err(Error::dim(format!("expected parameter {want_name}, found {name}")));
                }
                if value.shape() != shape.as_slice() {
                    return Err(Error::dim(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        value.shape()
                    )));
                }
                out.push(Param { name, value });
            }
        }
        Ok(Model {
            input_shape,
            layers,
            shapes,
            params: out,
            slots,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Activation shapes, one per trace entry.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Index of the weight parameter of `layer` (its bias is the next one).
    pub fn weight_slot(&self, layer: usize) -> Option<usize> {
        self.slots.get(layer).copied().flatten()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &*p.value)
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: expected shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to parameter tensors in model order (copy-on-write).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| Arc::make_mut(&mut p.value))
    }

    /// Records the parameters on `g`; `trainable` decides whether they are
    /// differentiable leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let v = Arc::clone(&p.value);
                if trainable {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(Error::dim(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Runs every layer on `g` starting from `input`.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        mut mode: Mode<'_>,
    ) -> Result<Vec<Var>> {
        self.check_input(g.value(input))?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input);
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = self.slots[i];
            x = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let s = slot.expect("conv owns parameters");
                    g.conv2d(x, params[s], Some(params[s + 1]), stride, padding)?
                }
                LayerSpec::Dense { .. } => {
                    let s = slot.expect("dense owns parameters");
                    g.dense(x, params[s], Some(params[s + 1]))?
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::MaxPool { window, stride } => g.maxpool2d(x, window, stride)?,
                LayerSpec::Flatten => g.flatten(x),
                LayerSpec::Dropout { rate } => match &mut mode {
                    Mode::Training(rng) => dropout(g, x, rate, true, &mut **rng)?,
                    Mode::Inference => x,
                },
            };
            trace.push(x);
        }
        Ok(trace)
    }

    /// Binds parameters and the input on a fresh region of `g` and runs the model.
    pub fn trace_on(
        &self,
        g: &mut Graph,
        input: &Tensor,
        trainable: bool,
        input_grad: bool,
        mode: Mode<'_>,
    ) -> Result<Traced> {
        self.check_input(input)?;
        let params = self.bind(g, trainable);
        let x = if input_grad {
            g.param(input.clone())
        } else {
            g.constant(input.clone())
        };
        let trace = self.forward_on(g, &params, x, mode)?;
        Ok(Traced { params, trace })
    }

    /// Logits plus every intermediate activation.
    pub fn forward_with_trace(&self, input: &Tensor, mode: Mode<'_>) -> Result<(Tensor, ActivationTrace)> {
        let mut g = Graph::new();
        let traced = self.trace_on(&mut g, input, false, false, mode)?;
        let activations: Vec<Tensor> = traced.trace.iter().map(|&v| g.value(v).clone()).collect();
        let logits = activations.last().unwrap().clone();
        Ok((logits, ActivationTrace { activations }))
    }

    /// Inference-mode logits without recording a graph.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = self.slots[i];
            x = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let s = slot.expect("conv owns parameters");
                    let (w, b) = (&self.params[s].value, &self.params[s + 1].value);
                    let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
                    let y = kernels::conv2d(x.data(), w.data(), Some(b.data()), &geom);
                    Tensor::from_parts(geom.output_shape().to_vec(), y)
                }
                LayerSpec::Dense { .. } => {
                    let s = slot.expect("dense owns parameters");
                    let (w, b) = (&self.params[s].value, &self.params[s + 1].value);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    Tensor::vector(kernels::matvec(w.data(), x.data(), Some(b.data()), m, n))
                }
                LayerSpec::Relu => x.map(|v| v.max(0.0)),
                LayerSpec::MaxPool { window, stride } => {
                    let geom = PoolGeom::new(x.shape(), window, stride)?;
                    let (y, _) = kernels::maxpool(x.data(), &geom);
                    Tensor::from_parts(geom.output_shape().to_vec(), y)
                }
                LayerSpec::Flatten => Tensor::vector(x.into_data()),
                LayerSpec::Dropout { .. } => x,
            };
        }
        Ok(x)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.argmax())
    }
}

#[derive(Default)]
struct NameCounter {
    conv: usize,
    dense: usize,
}

impl NameCounter {
    fn next(&mut self, layer: &LayerSpec) -> String {
        match layer {
            LayerSpec::Conv { .. } => {
                self.conv += 1;
                format!("conv{}", self.conv - 1)
            }
            _ => {
                self.dense += 1;
                format!("dense{}", self.dense - 1)
            }
        }
    }
}
