use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// `x · W + b` with `W` stored as `in × out` under `{prefix}.weight` and `b`
/// under `{prefix}.bias`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn affine_layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.weight"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    let n = g.layer_norm(x, eps)?;
    let s = g.mul(n, gain)?;
    g.add(s, bias)
}

/// Normal samples with standard deviation `std`, redrawn outside ±2·std.
pub fn trunc_normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
