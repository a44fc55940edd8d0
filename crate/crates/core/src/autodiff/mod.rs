//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as it runs. Besides the usual network
//! primitives it has the transposed linear maps (`conv2d_transpose`,
//! `dense_transpose`, `unpool`) so that relevance propagation can be written
//! as an ordinary forward expression and differentiated like any other loss.

mod graph;
pub mod kernels;

use rand::Rng;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::stabilized;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1/(1−rate)`; otherwise
/// (or with `rate == 0`) the input is returned unchanged.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f32,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::new(&shape, mask)?)
}
