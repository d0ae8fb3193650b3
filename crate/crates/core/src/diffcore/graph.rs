use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    VarAxis {
        x: Var,
        axis: usize,
        ddof: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Sigmoid(Var),
    Ln {
        x: Var,
        eps: T,
    },
    Scale(Var, T),
    AddScalar(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and appends a node; [`Graph::backward`]
/// walks the nodes in reverse. Parameters are bound once per graph by name,
/// so several forwards through the same weights share one leaf and their
/// gradients add up.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Sums `g` (shaped like the lhs) over the leading blocks down to `n` values.
fn reduce_blocks<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds the named parameter of `store`, reusing the leaf if it is already
    /// bound on this graph.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.numel();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// `a + b`; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v + c).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Matrix product over the last two axes. Either both operands carry the
    /// same leading batch axes, or `b` is a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(da, db, rows, k, n, false, false, &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for bi in 0..batch {
                gemm(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    false,
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// General axis permutation; `out.shape[i] = x.shape[perm[i]]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || seen[p]) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        for &p in perm {
            seen[p] = true;
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers entries along axis 0: `out[i] = x[idx[i]]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: shape,
                rhs: idx.to_vec(),
            });
        }
        let inner = numel(&shape[1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    fn reduce_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, outer, n, inner))
    }

    fn axis_means(&self, x: Var, outer: usize, n: usize, inner: usize) -> Vec<T> {
        let src = self.value(x).data();
        let mut mean = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (m, &v) in mean[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        let nn = T::of(n as f64);
        mean.iter_mut().for_each(|m| *m = *m / nn);
        mean
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, n, inner) = self.reduce_axis(x, axis, "mean_axis")?;
        let mean = self.axis_means(x, outer, n, inner);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, mean),
            Op::MeanAxis { x, axis },
            rg,
        ))
    }

    /// Variance over `axis` with denominator `n - ddof` (two-pass, so never
    /// negative).
    pub fn var_axis(&mut self, x: Var, axis: usize, ddof: usize) -> Result<Var> {
        let (out_shape, outer, n, inner) = self.reduce_axis(x, axis, "var_axis")?;
        if n <= ddof {
            return Err(Error::Domain {
                op: "var_axis",
                detail: format!("{n} samples with ddof {ddof}"),
            });
        }
        let mean = self.axis_means(x, outer, n, inner);
        let src = self.value(x).data();
        let mut var = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                let mrow = &mean[o * inner..(o + 1) * inner];
                for ((s, &v), &m) in var[o * inner..(o + 1) * inner].iter_mut().zip(row).zip(mrow) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let denom = T::of((n - ddof) as f64);
        var.iter_mut().for_each(|s| *s = (*s / denom).max(T::zero()));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, var),
            Op::VarAxis { x, axis, ddof },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.unary(x, |v| v.sqrt(), Op::Sqrt(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::of(0.5);
        let r2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(x, |v| half * v * (T::one() + (v * r2).erf()), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(x + eps)`; errors when `x + eps ≤ 0`.
    pub fn ln(&mut self, x: Var, eps: f64) -> Result<Var> {
        let e = T::of(eps);
        if let Some(v) = self.value(x).data().iter().find(|&&v| v + e <= T::zero()) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(x, |v| (v + e).ln(), Op::Ln { x, eps: e }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    /// Gain and bias are applied by the caller.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let c = t.cols();
        let cn = T::of(c as f64);
        let e = T::of(eps);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / c);
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var.max(T::zero()) + e).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a gradient-carrying leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        self.acc(grads, v, Tensor::from_parts(shape, data));
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    self.acc_data(grads, *b, reduce_blocks(gd, n));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let r = reduce_blocks(gd, n).into_iter().map(|v| -v).collect();
                    self.acc_data(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.numel();
                if self.rg(*a) {
                    let d = gd
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(tb.data()).map(|(&x, &y)| x * y))
                        .collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let prod: Vec<T> = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.acc_data(grads, *b, reduce_blocks(&prod, n));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.numel();
                if self.rg(*a) {
                    let d = gd
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(tb.data()).map(|(&x, &y)| x / y))
                        .collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let prod: Vec<T> = gd
                        .chunks(n)
                        .zip(ta.data().chunks(n))
                        .flat_map(|(gc, ac)| {
                            gc.iter()
                                .zip(ac)
                                .zip(tb.data())
                                .map(|((&g, &x), &y)| -g * x / (y * y))
                        })
                        .collect();
                    self.acc_data(grads, *b, reduce_blocks(&prod, n));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = numel(&sa[..sa.len() - 1]);
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); rows * k];
                        gemm(gd, tb.data(), rows, n, k, false, true, &mut da);
                        self.acc_data(grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm(ta.data(), gd, k, rows, n, true, false, &mut db);
                        self.acc_data(grads, *b, db);
                    }
                } else {
                    let batch = numel(&sa[..sa.len() - 2]);
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            gemm(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                m,
                                n,
                                k,
                                false,
                                true,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                        self.acc_data(grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); batch * k * n];
                        for bi in 0..batch {
                            gemm(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                        self.acc_data(grads, *b, db);
                    }
                }
            }
            Op::Reshape(x) => {
                self.acc_data(grads, *x, gd.to_vec());
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, d) = permute_data(gd, g.shape(), &inv);
                self.acc_data(grads, *x, d);
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, extent, inner) = axis_split(&shape, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let w = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + w * inner]);
                        }
                        self.acc_data(grads, v, d);
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let inner = numel(&shape[1..]);
                let mut d = vec![T::zero(); numel(&shape)];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&gd[r * inner..(r + 1) * inner])
                    {
                        *o += v;
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let nn = T::of(n as f64);
                let mut d = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for _ in 0..n {
                        d.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v / nn));
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::VarAxis { x, axis, ddof } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mean = self.axis_means(*x, outer, n, inner);
                let src = self.value(*x).data();
                let c = T::of(2.0 / (n - ddof) as f64);
                let mut d = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        for j in 0..inner {
                            let m = mean[o * inner + j];
                            d.push(gd[o * inner + j] * c * (src[base + j] - m));
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc_data(grads, *x, vec![gd[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.acc_data(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let half = T::of(0.5);
                let d = gd.iter().zip(y).map(|(&g, &y)| g * half / y).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(src)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Gelu(x) => {
                let src = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(src)
                    .map(|(&g, &v)| {
                        let x = v.f64();
                        let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                        g * T::of(cdf + x * std_normal_pdf(x))
                    })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                self.acc_data(grads, *x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.cols();
                let cn = T::of(c as f64);
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &is) in y.chunks(c).zip(gd.chunks(c)).zip(inv_std) {
                    let gm = gr.iter().copied().sum::<T>() / cn;
                    let gym = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                    d.extend(yr.iter().zip(gr).map(|(&y, &g)| is * (g - gm - y * gym)));
                }
                self.acc_data(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Ln { x, eps } => {
                let src = self.value(*x).data();
                let d = gd.iter().zip(src).map(|(&g, &v)| g / (v + *eps)).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|&g| g * *c).collect();
                self.acc_data(grads, *x, d);
            }
            Op::AddScalar(x) => {
                self.acc_data(grads, *x, gd.to_vec());
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradients from one [`Graph::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter bound on `graph` into the
    /// matching slot of `store`. Repeated calls accumulate.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in graph.bound_params() {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
