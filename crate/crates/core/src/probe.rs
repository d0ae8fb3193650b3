//! Linear probing of a frozen (or fine-tuned) encoder on action labels, F1
//! scoring and the results table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::sample_rng;
use crate::data::{probe_split, ObservationStore, ProbeSet};
use crate::diffcore::{linear, trunc_normal, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::export::{sig9, write_text};
use crate::metrics::pearson;
use crate::ssl::{encode_images, Adam, ENCODER, LOG_EPS};
use crate::vit::{self, ViTConfig};

pub const PROBE: &str = "probe";
pub const PROBE_RESULTS_FILE: &str = "probe_results.csv";
const PROBE_STREAM: u64 = 1 << 62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    Macro,
    Weighted,
}

impl std::str::FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::config("probe.f1_average", format!("unknown average `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub n_actions: usize,
    pub freeze_encoder: bool,
    pub f1_average: F1Average,
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            n_actions: 18,
            freeze_encoder: true,
            f1_average: F1Average::Macro,
            train_n: 1000,
            test_n: 500,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_actions < 2 {
            return Err(Error::config("probe.n_actions", "must be ≥ 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("probe.epochs", "must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe.batch_size", "must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("probe.lr", format!("must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

/// The seeded train/test split of `cfg.train_n` and `cfg.test_n` frames.
pub fn probe_sets(store: &ObservationStore, cfg: &ProbeConfig) -> Result<(ProbeSet, ProbeSet)> {
    probe_split(store, cfg.train_n, cfg.test_n, &mut sample_rng(cfg.seed, PROBE_STREAM + 2))
}

/// A trained probe: its parameters (plus the encoder when it was not frozen)
/// and the mean training loss of every epoch.
#[derive(Clone, Debug)]
pub struct ProbeRun<T> {
    pub params: ParamStore<T>,
    pub losses: Vec<f64>,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= k) {
        Some(i) => Err(Error::contract(format!(
            "label {} at index {i} outside [0, {k})",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `logits` (`B × K`) against `labels`.
fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = g.shape(logits)[1];
    let b = labels.len();
    let mut onehot = vec![T::zero(); b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let p = g.softmax(logits)?;
    let logp = g.ln(p, LOG_EPS)?;
    let mask = g.constant(Tensor::new(vec![b, k], onehot)?);
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

fn init_probe<T: Scalar>(params: &mut ParamStore<T>, d: usize, k: usize, seed: u64) {
    let mut rng = sample_rng(seed, PROBE_STREAM + 1);
    params.insert(format!("{PROBE}.weight"), trunc_normal(vec![d, k], 0.01, &mut rng));
    params.insert(format!("{PROBE}.bias"), Tensor::zeros(vec![k]));
}

/// Adam over shuffled minibatches; `logits` maps a batch of row indices to
/// `B × K` logits. Every entry of `params` is trained.
fn fit<T: Scalar>(
    params: &mut ParamStore<T>,
    labels: &[usize],
    cfg: &ProbeConfig,
    mut logits: impl FnMut(&mut Graph<T>, &ParamStore<T>, &[usize]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(0.0);
    let mut rng = sample_rng(cfg.seed, PROBE_STREAM);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let z = logits(&mut g, params, idx)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&mut g, z, &batch_labels)?;
            let value = g.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("probe loss is {value} in epoch {}", epoch + 1)));
            }
            total += value * idx.len() as f64;
            g.backward(loss)?.accumulate_into(&g, params)?;
            opt.step(params, lr, |_| false);
            params.zero_grad();
        }
        losses.push(total / labels.len() as f64);
    }
    Ok(losses)
}

/// Trains a linear layer `D → n_actions` on fixed features (`N × D`).
pub fn train_linear_probe<T: Scalar>(features: &Tensor<T>, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeRun<T>> {
    cfg.validate()?;
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::contract(format!("probe features must be N×D, got {s:?}"))),
    };
    if n == 0 || n != labels.len() {
        return Err(Error::contract(format!("{n} feature rows for {} labels", labels.len())));
    }
    check_labels(labels, cfg.n_actions)?;
    let mut params = ParamStore::new();
    init_probe(&mut params, d, cfg.n_actions, cfg.seed);
    let losses = fit(
        &mut params,
        labels,
        cfg,
        |g, p, idx| {
            let x = g.constant(gather_rows(features, idx));
            linear(g, p, PROBE, x)
        },
    )?;
    Ok(ProbeRun { params, losses })
}

fn gather_rows<T: Scalar>(m: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = m.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("rows of a matrix")
}

/// Probes `encoder` (a full checkpoint or an `encoder.`-prefixed subset) on
/// `train`. With `freeze_encoder` the features are computed once and the
/// encoder bytes are checked to be unchanged afterwards; otherwise the encoder
/// is fine-tuned jointly and returned inside the run's params.
pub fn train_probe(
    encoder: &ParamStore<f32>,
    vit_cfg: &ViTConfig,
    store: &ObservationStore,
    train: &ProbeSet,
    cfg: &ProbeConfig,
) -> Result<ProbeRun<f32>> {
    cfg.validate()?;
    vit::check_params(encoder, vit_cfg, ENCODER)?;
    check_labels(&train.labels, cfg.n_actions)?;
    if train.is_empty() {
        return Err(Error::contract("empty probe training set"));
    }
    let images = train.images(store);
    if cfg.freeze_encoder {
        let before = encoder.fingerprint(ENCODER);
        let features = encode_images(encoder, vit_cfg, &images, 64)?;
        let run = train_linear_probe(&features, &train.labels, cfg)?;
        if encoder.fingerprint(ENCODER) != before {
            return Err(Error::contract("encoder parameters changed under freeze"));
        }
        return Ok(run);
    }
    let mut params = encoder.subset(ENCODER);
    init_probe(&mut params, vit_cfg.embed_dim, cfg.n_actions, cfg.seed);
    let losses = fit(
        &mut params,
        &train.labels,
        cfg,
        |g, p, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| images[i].clone()).collect();
            let patches = g.constant(vit::patchify_batch(&batch, vit_cfg)?);
            let y = vit::encode(g, p, vit_cfg, ENCODER, patches, false)?.representation;
            linear(g, p, PROBE, y)
        },
    )?;
    Ok(ProbeRun { params, losses })
}

/// Argmax of each row; ties go to the lowest class index.
pub fn predict<T: Scalar>(params: &ParamStore<T>, features: &Tensor<T>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let z = linear(&mut g, params, PROBE, x)?;
    let z = g.value(z);
    Ok((0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

/// Per-class scores and the aggregates. `macro_f1` averages over classes that
/// occur in the labels or the predictions; `weighted_f1` weights by support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

impl F1Report {
    pub fn aggregate(&self, avg: F1Average) -> f64 {
        match avg {
            F1Average::Macro => self.macro_f1,
            F1Average::Weighted => self.weighted_f1,
        }
    }
}

/// F1 scores of `predictions` against `labels` over `k` classes.
pub fn f1_scores(predictions: &[usize], labels: &[usize], k: usize) -> Result<F1Report> {
    if labels.is_empty() {
        return Err(Error::contract("F1 of an empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    check_labels(labels, k)?;
    check_labels(predictions, k)?;
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        support[l] += 1;
        predicted[p] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScore> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if tp[c] == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassScore {
                precision,
                recall,
                f1,
                support: support[c],
                predicted: predicted[c],
            }
        })
        .collect();
    let present: Vec<&ClassScore> = per_class.iter().filter(|c| c.support + c.predicted > 0).collect();
    let macro_f1 = present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64;
    let n = labels.len() as f64;
    let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / n;
    let accuracy = tp.iter().sum::<usize>() as f64 / n;
    Ok(F1Report {
        per_class,
        macro_f1,
        weighted_f1,
        accuracy,
    })
}

/// Scores a probe on precomputed features.
pub fn evaluate_f1<T: Scalar>(params: &ParamStore<T>, features: &Tensor<T>, labels: &[usize], k: usize) -> Result<F1Report> {
    if labels.is_empty() {
        return Err(Error::contract("F1 of an empty test set"));
    }
    f1_scores(&predict(params, features)?, labels, k)
}

/// One line of `probe_results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub store: String,
    pub checkpoint: String,
    pub epoch: usize,
    pub split: String,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub accuracy: f64,
}

impl ProbeRow {
    pub const HEADER: &'static str = "store,checkpoint,epoch,split,f1_macro,f1_weighted,accuracy";

    pub fn new(store: &str, checkpoint: &str, epoch: usize, split: &str, report: &F1Report) -> Self {
        Self {
            store: store.to_string(),
            checkpoint: checkpoint.to_string(),
            epoch,
            split: split.to_string(),
            f1_macro: report.macro_f1,
            f1_weighted: report.weighted_f1,
            accuracy: report.accuracy,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.store,
            self.checkpoint,
            self.epoch,
            self.split,
            sig9(self.f1_macro),
            sig9(self.f1_weighted),
            sig9(self.accuracy)
        )
    }
}

pub fn write_probe_results(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let mut text = format!("{}\n", ProbeRow::HEADER);
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    write_text(path, &text)
}

/// Mean test F1 (under `avg`) per checkpoint, in first-appearance order.
pub fn checkpoint_means(rows: &[ProbeRow], avg: F1Average) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "test") {
        if !acc.contains_key(r.checkpoint.as_str()) {
            order.push(r.checkpoint.clone());
        }
        let e = acc.entry(&r.checkpoint).or_insert((0.0, 0));
        e.0 += match avg {
            F1Average::Macro => r.f1_macro,
            F1Average::Weighted => r.f1_weighted,
        };
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|c| {
            let (s, n) = acc[c.as_str()];
            (c, s / n as f64)
        })
        .collect()
}

/// Reads a `checkpoint,score` CSV (with header) of external scores.
pub fn read_external_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (name, score) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::contract(format!("{}:{}: expected `checkpoint,score`", path.display(), i + 1)))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::contract(format!("{}:{}: bad score `{score}`", path.display(), i + 1)))?;
        out.push((name.trim().to_string(), score));
    }
    Ok(out)
}

/// Pearson correlation between per-checkpoint mean test F1 and an external
/// score per checkpoint, matched by position.
pub fn probe_pearson(rows: &[ProbeRow], external: &[(String, f64)], avg: F1Average) -> Result<f64> {
    let means = checkpoint_means(rows, avg);
    if means.len() != external.len() {
        return Err(Error::contract(format!(
            "{} checkpoints but {} external scores",
            means.len(),
            external.len()
        )));
    }
    if means.len() < 3 {
        return Err(Error::contract("the probe correlation needs at least 3 checkpoints"));
    }
    let a: Vec<f64> = means.iter().map(|m| m.1).collect();
    let b: Vec<f64> = external.iter().map(|e| e.1).collect();
    pearson(&a, &b)
}

/// Feature cache: `u32 N`, `u32 D`, then `N·D` little-endian `f32`.
pub fn write_feature_cache(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let (n, d) = (features.rows(), features.cols());
    let mut bytes = Vec::with_capacity(8 + 4 * n * d);
    bytes.write_all(&(n as u32).to_le_bytes()).expect("vec write");
    bytes.write_all(&(d as u32).to_le_bytes()).expect("vec write");
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "feature cache header truncated"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let want = n.checked_mul(d).and_then(|v| v.checked_mul(4)).and_then(|v| v.checked_add(8));
    if want != Some(bytes.len()) {
        return Err(Error::format(8, format!("feature cache of {n}×{d} has {} bytes", bytes.len())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![n, d], data)
}
