//! Invariance, variance, covariance and temporal BCE losses.
//!
//! The `*_var` builders record on a graph and are what training uses; the
//! plain functions evaluate the same builders on constants.

use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Added under the square root of the per-feature variance.
pub const VARIANCE_EPS: f64 = 1e-4;
/// Added inside the logarithms of the BCE.
pub const LOG_EPS: f64 = 1e-12;

fn matrix_dims<T: Scalar>(g: &Graph<T>, z: Var, op: &str) -> Result<(usize, usize)> {
    match g.shape(z) {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::contract(format!("{op} expects an N×d matrix, got {s:?}"))),
    }
}

/// `(1/N) Σ_j ‖z_j − z′_j‖²`.
pub fn invariance_var<T: Scalar>(g: &mut Graph<T>, z: Var, z2: Var) -> Result<Var> {
    let (n, _) = matrix_dims(g, z, "invariance")?;
    if g.shape(z) != g.shape(z2) {
        return Err(Error::contract(format!(
            "invariance needs equal shapes, got {:?} and {:?}",
            g.shape(z),
            g.shape(z2)
        )));
    }
    let diff = g.sub(z, z2)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `(1/d) Σ_j max(0, γ − sqrt(Var(Z^j) + ε))` with the unbiased variance.
pub fn variance_var<T: Scalar>(g: &mut Graph<T>, z: Var, gamma: f64) -> Result<Var> {
    let (n, _) = matrix_dims(g, z, "variance")?;
    if n < 2 {
        return Err(Error::contract("variance loss needs a batch of at least 2"));
    }
    let var = g.var_axis(z, 0, 1)?;
    let shifted = g.add_scalar(var, VARIANCE_EPS);
    let std = g.sqrt(shifted)?;
    let neg = g.scale(std, -1.0);
    let gap = g.add_scalar(neg, gamma);
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

/// `(1/d) Σ_{i≠j} C_ij²` with `C` the unbiased covariance of the columns.
pub fn covariance_var<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let (n, d) = matrix_dims(g, z, "covariance")?;
    if n < 2 {
        return Err(Error::contract("covariance loss needs a batch of at least 2"));
    }
    let mean = g.mean_axis(z, 0)?;
    let centered = g.sub(z, mean)?;
    let ct = g.transpose(centered)?;
    let gram = g.matmul(ct, centered)?;
    let cov = g.scale(gram, 1.0 / (n - 1) as f64);
    let mut mask = Tensor::full(vec![d, d], T::one());
    for i in 0..d {
        mask.data_mut()[i * d + i] = T::zero();
    }
    let mask = g.constant(mask);
    let off = g.mul(cov, mask)?;
    let sq = g.mul(off, off)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / d as f64))
}

/// Mean binary cross-entropy of `N × 1` logits against 0/1 labels.
pub fn temporal_bce_var<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let n = g.value(logits).numel();
    if n != labels.len() || n == 0 {
        return Err(Error::contract(format!("{} logits for {} labels", n, labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("temporal label {l} is not 0 or 1")));
    }
    let shape = g.shape(logits).to_vec();
    let pos: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let neg: Vec<f64> = labels.iter().map(|&l| 1.0 - l as f64).collect();
    let pos = g.constant(Tensor::from_f64(shape.clone(), &pos)?);
    let neg = g.constant(Tensor::from_f64(shape, &neg)?);
    let p = g.sigmoid(logits);
    let flipped = g.scale(logits, -1.0);
    let q = g.sigmoid(flipped);
    let lp = g.ln(p, LOG_EPS)?;
    let lq = g.ln(q, LOG_EPS)?;
    let a = g.mul(lp, pos)?;
    let b = g.mul(lq, neg)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

fn eval<T: Scalar>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<T> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

pub fn invariance_loss<T: Scalar>(z: &Tensor<T>, z2: &Tensor<T>) -> Result<T> {
    eval(|g| {
        let (a, b) = (g.constant(z.clone()), g.constant(z2.clone()));
        invariance_var(g, a, b)
    })
}

pub fn variance_loss<T: Scalar>(z: &Tensor<T>, gamma: f64) -> Result<T> {
    eval(|g| {
        let a = g.constant(z.clone());
        variance_var(g, a, gamma)
    })
}

pub fn covariance_loss<T: Scalar>(z: &Tensor<T>) -> Result<T> {
    eval(|g| {
        let a = g.constant(z.clone());
        covariance_var(g, a)
    })
}

pub fn temporal_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<T> {
    eval(|g| {
        let a = g.constant(logits.clone());
        temporal_bce_var(g, a, labels)
    })
}
