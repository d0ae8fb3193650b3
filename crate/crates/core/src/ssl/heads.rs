//! Expander MLP, temporal order head and triple shuffling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{linear, trunc_normal, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const EXPANDER: &str = "expander.";
pub const TEMPORAL_HEAD: &str = "temporal_head";

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Orderings of `(y_{t−1}, y_t, y_{t+1})`, indexed lexicographically. Entry
/// `k` lists which element of the ordered triple lands in each slot.
pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Expander weights: `Linear → BatchNorm → ReLU` for every hidden width, then
/// a final `Linear`. Names: `expander.{i}.{weight,bias}` for linears and
/// `expander.bn{i}.{weight,bias,running_mean,running_var}` for norms.
pub fn init_expander<T: Scalar>(input_dim: usize, dims: &[usize], seed: u64) -> Result<ParamStore<T>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::config("ssl.expander_dims", "need at least one positive width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut fan_in = input_dim;
    for (i, &w) in dims.iter().enumerate() {
        s.insert(format!("{EXPANDER}{i}.weight"), trunc_normal(vec![fan_in, w], 0.02, &mut rng));
        s.insert(format!("{EXPANDER}{i}.bias"), Tensor::zeros(vec![w]));
        if i + 1 < dims.len() {
            s.insert(format!("{EXPANDER}bn{i}.weight"), Tensor::full(vec![w], T::one()));
            s.insert(format!("{EXPANDER}bn{i}.bias"), Tensor::zeros(vec![w]));
            s.insert(format!("{EXPANDER}bn{i}.running_mean"), Tensor::zeros(vec![w]));
            s.insert(format!("{EXPANDER}bn{i}.running_var"), Tensor::full(vec![w], T::one()));
        }
        fan_in = w;
    }
    Ok(s)
}

/// Batch statistics gathered in training mode, to be folded into the running
/// averages once the step is done.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

fn layer_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    (0..)
        .take_while(|i| store.contains(&format!("{EXPANDER}{i}.weight")))
        .count()
}

/// Records the expander on `g`. In training mode batch normalization uses the
/// batch statistics (biased variance for normalizing) and returns them; in
/// evaluation mode it uses the running averages.
pub fn expander_var<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    y: Var,
    train: bool,
) -> Result<(Var, Vec<BatchStats<T>>)> {
    let layers = layer_count(store);
    if layers == 0 {
        return Err(Error::contract("no expander parameters in store"));
    }
    let n = g.shape(y)[0];
    if train && n < 2 {
        return Err(Error::contract("batch normalization in training mode needs a batch of at least 2"));
    }
    let mut x = y;
    let mut stats = Vec::new();
    for i in 0..layers {
        x = linear(g, store, &format!("{EXPANDER}{i}"), x)?;
        if i + 1 == layers {
            break;
        }
        let bn = format!("{EXPANDER}bn{i}");
        let normed = if train {
            let mean = g.mean_axis(x, 0)?;
            let var = g.var_axis(x, 0, 0)?;
            let nn = T::of(n as f64);
            let unbiased = g
                .value(var)
                .data()
                .iter()
                .map(|&v| v * nn / T::of((n - 1) as f64))
                .collect();
            stats.push(BatchStats {
                layer: i,
                mean: g.value(mean).data().to_vec(),
                var: unbiased,
            });
            let centered = g.sub(x, mean)?;
            let shifted = g.add_scalar(var, BN_EPS);
            let std = g.sqrt(shifted)?;
            g.div(centered, std)?
        } else {
            let rm = store.get(&format!("{bn}.running_mean")).expect("bn buffers").clone();
            let rv = store.get(&format!("{bn}.running_var")).expect("bn buffers");
            let inv: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
            let rm = g.constant(rm);
            let inv = g.constant(Tensor::new(vec![inv.len()], inv)?);
            let centered = g.sub(x, rm)?;
            g.mul(centered, inv)?
        };
        let gain = g.param(store, &format!("{bn}.weight"))?;
        let bias = g.param(store, &format!("{bn}.bias"))?;
        let scaled = g.mul(normed, gain)?;
        let shifted = g.add(scaled, bias)?;
        x = g.relu(shifted);
    }
    Ok((x, stats))
}

/// Folds batch statistics into the running averages (momentum 0.1).
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[BatchStats<T>]) {
    let m = T::of(BN_MOMENTUM);
    for s in stats {
        for (name, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = store.get_mut(&format!("{EXPANDER}bn{}.{name}", s.layer)) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

/// Single-logit linear layer over concatenated triples (`3·D → 1`).
pub fn init_temporal_head<T: Scalar>(embed_dim: usize, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert(format!("{TEMPORAL_HEAD}.weight"), trunc_normal(vec![3 * embed_dim, 1], 0.02, &mut rng));
    s.insert(format!("{TEMPORAL_HEAD}.bias"), Tensor::zeros(vec![1]));
    s
}

/// One uniformly drawn permutation index in `0..6` per row.
pub fn draw_shuffles(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..6)).collect()
}

/// Label of a permutation index: 0 for the chronological order, 1 otherwise.
pub fn order_label(k: usize) -> u8 {
    u8::from(k != 0)
}

/// Concatenates each row's triple in the order given by `shuffles`, returning
/// the `N × 3D` matrix and the labels.
pub fn build_temporal_batch<T: Scalar>(
    g: &mut Graph<T>,
    prev: Var,
    center: Var,
    next: Var,
    shuffles: &[usize],
) -> Result<(Var, Vec<u8>)> {
    let n = g.shape(prev)[0];
    if g.shape(center)[0] != n || g.shape(next)[0] != n || shuffles.len() != n {
        return Err(Error::contract("temporal batch parts must have equal row counts"));
    }
    if let Some(k) = shuffles.iter().find(|&&k| k >= 6) {
        return Err(Error::contract(format!("permutation index {k} out of range")));
    }
    let stacked = g.concat(&[prev, center, next], 0)?;
    let mut slots = Vec::with_capacity(3);
    for slot in 0..3 {
        let idx: Vec<usize> = shuffles
            .iter()
            .enumerate()
            .map(|(row, &k)| PERMUTATIONS[k][slot] * n + row)
            .collect();
        slots.push(g.select_rows(stacked, &idx)?);
    }
    let cat = g.concat(&slots, 1)?;
    Ok((cat, shuffles.iter().map(|&k| order_label(k)).collect()))
}

/// Temporal head logits (`N × 1`).
pub fn temporal_logits<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, concat: Var) -> Result<Var> {
    linear(g, store, TEMPORAL_HEAD, concat)
}
