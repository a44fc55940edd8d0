use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Arc<Tensor>),
    Relu(Var),
    Stabilize(Var),
    ClampMin(Var, f32),
    Pow(Var, f32),
    Log(Var),
    Reshape(Var),
    Sum(Var),
    ChannelSum(Var),
    Index(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Conv2dTranspose {
        signal: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    DenseTranspose {
        signal: Var,
        weight: Var,
    },
    MaxPool {
        input: Var,
        argmax: Arc<Vec<u32>>,
        input_len: usize,
    },
    Unpool {
        signal: Var,
        argmax: Arc<Vec<u32>>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f32>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Append-only computation tape for reverse-mode differentiation.
///
/// Nodes are recorded in execution order, which is a topological order, so
/// [`Graph::backward`] is a single reverse sweep. Every value is immutable once
/// recorded; re-running a computation records fresh nodes.
#[derive(Default, Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `z + eps·sign(z)` with `sign(0) = +1`, used for LRP denominators.
pub(crate) fn stabilized(z: f32, eps: f32) -> f32 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    /// Vars issued after the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.into(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.into(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.shared_value(v);
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    /// Elementwise product with a constant tensor (masks, dropout keep-scales).
    pub fn mul_const(&mut self, a: Var, c: impl Into<Arc<Tensor>>) -> Result<Var> {
        let c = c.into();
        same_shape("mul_const", self.value(a), &c)?;
        let out = zip_map(self.value(a), &c, |x, y| x * y);
        Ok(self.push(Op::MulConst(a, c), out, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    /// `z + eps·sign(z)`; the sign is treated as locally constant.
    pub fn stabilize(&mut self, a: Var, eps: f32) -> Var {
        let out = self.value(a).map(|z| stabilized(z, eps));
        self.push(Op::Stabilize(a), out, &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), out, &[a])
    }

    pub fn pow(&mut self, a: Var, p: f32) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(Op::Pow(a, p), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::ln);
        self.push(Op::Log(a), out, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let out = Tensor::from_parts(vec![n], self.value(a).data().to_vec());
        self.push(Op::Reshape(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).channel_sum()?;
        Ok(self.push(Op::ChannelSum(a), out, &[a]))
    }

    /// Picks one element (flat index) as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::dim(format!("index {i} out of range for {:?}", t.shape())));
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.push(Op::Index(a, i), out, &[a]))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape(), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::dim(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.c_out,
                    self.value(b).shape()
                )));
            }
        }
        let y = kernels::conv2d(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::from_parts(geom.output_shape().to_vec(), y);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom }, out, &inputs))
    }

    /// Input-adjoint of a convolution: maps an output-shaped `signal` onto the
    /// grid of `input_shape` through `kernel`.
    pub fn conv2d_transpose(
        &mut self,
        signal: Var,
        kernel: Var,
        input_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(input_shape, self.value(kernel).shape(), stride, pad)?;
        if self.value(signal).shape() != geom.output_shape() {
            return Err(Error::dim(format!(
                "conv2d_transpose signal {:?} does not match conv output {:?}",
                self.value(signal).shape(),
                geom.output_shape()
            )));
        }
        let x = kernels::conv2d_transpose(self.value(signal).data(), self.value(kernel).data(), &geom);
        let out = Tensor::from_parts(geom.input_shape().to_vec(), x);
        Ok(self.push(Op::Conv2dTranspose { signal, kernel, geom }, out, &[signal, kernel]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (m, n) = self.matrix_dims(weight)?;
        if self.value(input).shape() != [n] {
            return Err(Error::dim(format!(
                "dense expects input [{n}], got {:?}",
                self.value(input).shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(Error::dim(format!(
                    "dense bias must be [{m}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let y = kernels::matvec(
            self.value(weight).data(),
            self.value(input).data(),
            bias.map(|b| self.value(b).data()),
            m,
            n,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Dense { input, weight, bias }, Tensor::vector(y), &inputs))
    }

    /// `Wᵀ·signal`.
    pub fn dense_transpose(&mut self, signal: Var, weight: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(weight)?;
        if self.value(signal).shape() != [m] {
            return Err(Error::dim(format!(
                "dense_transpose expects signal [{m}], got {:?}",
                self.value(signal).shape()
            )));
        }
        let x = kernels::matvec_transpose(self.value(weight).data(), self.value(signal).data(), m, n);
        Ok(self.push(Op::DenseTranspose { signal, weight }, Tensor::vector(x), &[signal, weight]))
    }

    fn matrix_dims(&self, weight: Var) -> Result<(usize, usize)> {
        match *self.value(weight).shape() {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::dim(format!("dense weight must be [m,n], got {s:?}"))),
        }
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.value(input).shape(), window, stride)?;
        let (y, argmax) = kernels::maxpool(self.value(input).data(), &geom);
        let out = Tensor::from_parts(geom.output_shape().to_vec(), y);
        let op = Op::MaxPool {
            input,
            argmax: Arc::new(argmax),
            input_len: geom.input_len(),
        };
        Ok(self.push(op, out, &[input]))
    }

    /// Routes `signal` (shaped like the pool output) back to the winning
    /// positions recorded by the max-pool node `pool`.
    pub fn unpool(&mut self, signal: Var, pool: Var) -> Result<Var> {
        let Op::MaxPool { input, ref argmax, input_len } = self.nodes[pool.0].op else {
            return Err(Error::Usage("unpool requires a maxpool node".into()));
        };
        if self.value(signal).shape() != self.value(pool).shape() {
            return Err(Error::dim(format!(
                "unpool signal {:?} does not match pool output {:?}",
                self.value(signal).shape(),
                self.value(pool).shape()
            )));
        }
        let argmax = Arc::clone(argmax);
        let shape = self.value(input).shape().to_vec();
        let x = kernels::unpool(self.value(signal).data(), &argmax, input_len);
        Ok(self.push(Op::Unpool { signal, argmax }, Tensor::from_parts(shape, x), &[signal]))
    }

    /// `−log softmax(logits)[label]` with max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(Error::dim(format!("logits must be a vector, got {:?}", z.shape())));
        }
        if label >= z.len() {
            return Err(Error::Usage(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = z.data().iter().map(|&v| (v - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        let loss = total.ln() - (z.data()[label] - max);
        let probs = exps.iter().map(|e| e / total).collect();
        let op = Op::SoftmaxCrossEntropy { logits, label, probs };
        Ok(self.push(op, Tensor::scalar(loss), &[logits]))
    }

    /// Reverse sweep from a scalar `output` with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_with_seed(output, 1.0)
    }

    pub fn backward_with_seed(&self, output: Var, seed: f32) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[output.0] = Some(vec![seed]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes[..n])
            .map(|(g, nd)| {
                g.filter(|_| matches!(nd.op, Op::Leaf))
                    .map(|d| Tensor::from_parts(nd.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce() -> Vec<f32>) {
        if self.wants(v) {
            let delta = f();
            self.accumulate(grads, v, delta);
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(grads, a, || g.to_vec());
                self.accumulate_with(grads, b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, a, || g.to_vec());
                self.accumulate_with(grads, b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, a, || g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                self.accumulate_with(grads, b, || g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                self.accumulate_with(grads, a, || g.iter().zip(val(b)).map(|(g, y)| g / y).collect());
                let out = node.value.data();
                self.accumulate_with(grads, b, || {
                    g.iter()
                        .zip(out)
                        .zip(val(b))
                        .map(|((g, q), y)| -g * q / y)
                        .collect()
                });
            }
            Op::Scale(a, c) => self.accumulate_with(grads, a, || g.iter().map(|x| x * c).collect()),
            Op::MulConst(a, ref c) => {
                self.accumulate_with(grads, a, || g.iter().zip(c.data()).map(|(g, m)| g * m).collect())
            }
            Op::Relu(a) => self.accumulate_with(grads, a, || {
                g.iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            Op::Stabilize(a) | Op::Reshape(a) => self.accumulate_with(grads, a, || g.to_vec()),
            Op::ClampMin(a, floor) => self.accumulate_with(grads, a, || {
                g.iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x >= floor { g } else { 0.0 })
                    .collect()
            }),
            Op::Pow(a, p) => self.accumulate_with(grads, a, || {
                g.iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                    .collect()
            }),
            Op::Log(a) => self.accumulate_with(grads, a, || g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
            Op::Sum(a) => self.accumulate_with(grads, a, || vec![g[0]; val(a).len()]),
            Op::ChannelSum(a) => self.accumulate_with(grads, a, || {
                let channels = self.nodes[a.0].value.shape()[0];
                g.repeat(channels)
            }),
            Op::Index(a, i) => self.accumulate_with(grads, a, || {
                let mut d = vec![0.0; val(a).len()];
                d[i] = g[0];
                d
            }),
            Op::Conv2d { input, kernel, bias, geom } => {
                self.accumulate_with(grads, input, || kernels::conv2d_transpose(g, val(kernel), &geom));
                self.accumulate_with(grads, kernel, || kernels::conv2d_weight_grad(val(input), g, &geom));
                if let Some(b) = bias {
                    self.accumulate_with(grads, b, || kernels::channel_totals(g, geom.c_out));
                }
            }
            Op::Conv2dTranspose { signal, kernel, geom } => {
                self.accumulate_with(grads, signal, || kernels::conv2d(g, val(kernel), None, &geom));
                self.accumulate_with(grads, kernel, || kernels::conv2d_weight_grad(g, val(signal), &geom));
            }
            Op::Dense { input, weight, bias } => {
                let shape = self.nodes[weight.0].value.shape();
                let (m, n) = (shape[0], shape[1]);
                self.accumulate_with(grads, input, || kernels::matvec_transpose(val(weight), g, m, n));
                self.accumulate_with(grads, weight, || kernels::outer(g, val(input)));
                if let Some(b) = bias {
                    self.accumulate_with(grads, b, || g.to_vec());
                }
            }
            Op::DenseTranspose { signal, weight } => {
                let shape = self.nodes[weight.0].value.shape();
                let (m, n) = (shape[0], shape[1]);
                self.accumulate_with(grads, signal, || kernels::matvec(val(weight), g, None, m, n));
                self.accumulate_with(grads, weight, || kernels::outer(val(signal), g));
            }
            Op::MaxPool { input, ref argmax, input_len } => {
                self.accumulate_with(grads, input, || kernels::unpool(g, argmax, input_len))
            }
            Op::Unpool { signal, ref argmax } => {
                self.accumulate_with(grads, signal, || kernels::gather(g, argmax))
            }
            Op::SoftmaxCrossEntropy { logits, label, ref probs } => self.accumulate_with(grads, logits, || {
                probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g[0] * (p - if k == label { 1.0 } else { 0.0 }))
                    .collect()
            }),
        }
    }
}
