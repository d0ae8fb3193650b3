//! Collapse diagnostics and representation analyses.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::sample_rng;
use crate::data::ObservationStore;
use crate::diffcore::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::export::{create_dir, matrix_csv, sig9, write_json, write_text};
use crate::ssl::{Sidecar, ENCODER, SIDECAR_FILE};
use crate::vit::{self, EncoderOutput, ViTConfig};

/// Default magnitude under which an activation counts as zero.
pub const SPARSITY_TOL: f64 = 1e-6;

fn dims(r: &Tensor<f64>, op: &str) -> Result<(usize, usize)> {
    match r.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::contract(format!("{op} expects an N×D matrix, got {s:?}"))),
    }
}

fn column_means(r: &Tensor<f64>, n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (acc, &v) in m.iter_mut().zip(r.row(i)) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Unbiased covariance of the columns of `r`.
fn covariance(r: &Tensor<f64>, n: usize, d: usize) -> DMatrix<f64> {
    let mean = column_means(r, n, d);
    let centered = DMatrix::from_fn(n, d, |i, j| r.row(i)[j] - mean[j]);
    centered.transpose() * &centered / (n - 1) as f64
}

/// Mean over features of the unbiased per-feature standard deviation.
pub fn representation_std(r: &Tensor<f64>) -> Result<f64> {
    let (n, d) = dims(r, "representation_std")?;
    if n < 2 {
        return Err(Error::contract("representation_std needs N ≥ 2"));
    }
    let cov = covariance(r, n, d);
    Ok((0..d).map(|j| cov[(j, j)].max(0.0).sqrt()).sum::<f64>() / d as f64)
}

/// Mean absolute Pearson correlation over off-diagonal feature pairs, with
/// the number of zero-variance features that were left out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub excluded: usize,
}

pub fn correlation_metric(r: &Tensor<f64>) -> Result<Correlation> {
    let (n, d) = dims(r, "correlation_metric")?;
    if n < 3 {
        return Err(Error::contract("correlation_metric needs N ≥ 3"));
    }
    let cov = covariance(r, n, d);
    let usable: Vec<usize> = (0..d).filter(|&j| cov[(j, j)] > 0.0).collect();
    if usable.len() < 2 {
        return Err(Error::contract(format!(
            "correlation_metric needs 2 features with nonzero variance, found {}",
            usable.len()
        )));
    }
    let mut sum = 0.0;
    for (a, &i) in usable.iter().enumerate() {
        for &j in &usable[a + 1..] {
            sum += (cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).abs();
        }
    }
    let k = usable.len();
    Ok(Correlation {
        value: sum / (k * (k - 1) / 2) as f64,
        excluded: d - k,
    })
}

/// Singular values of the feature covariance, descending.
pub fn covariance_spectrum(r: &Tensor<f64>) -> Result<Vec<f64>> {
    let (n, d) = dims(r, "covariance_spectrum")?;
    if n < 2 {
        return Err(Error::contract("covariance_spectrum needs N ≥ 2"));
    }
    let mut s: Vec<f64> = covariance(r, n, d).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Pairwise cosine similarities of the rows.
pub fn cosine_similarity_matrix(r: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, _) = dims(r, "cosine_similarity_matrix")?;
    let norms: Vec<f64> = (0..n).map(|i| r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::contract(format!("row {i} has zero norm")));
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        s[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = r.row(i).iter().zip(r.row(j)).map(|(a, b)| a * b).sum();
            let v = dot / (norms[i] * norms[j]);
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], s)
}

/// Per block, `(near-zero count, total count)` of captured MLP activations.
fn sparsity_counts<T: Scalar>(outputs: &[EncoderOutput<T>], tol: f64) -> Result<Vec<(usize, usize)>> {
    let depth = outputs.first().map_or(0, |o| o.mlp_activations.len());
    if outputs.is_empty() || depth == 0 || outputs.iter().any(|o| o.mlp_activations.len() != depth) {
        return Err(Error::contract("sparsity_profile needs captured MLP activations"));
    }
    Ok((0..depth)
        .map(|b| {
            let (mut zeros, mut total) = (0usize, 0usize);
            for o in outputs {
                let a = o.mlp_activations[b].data();
                zeros += a.iter().filter(|v| v.f64().abs() <= tol).count();
                total += a.len();
            }
            (zeros, total)
        })
        .collect())
}

/// Per block, the fraction of captured MLP activations with `|v| ≤ tol`.
pub fn sparsity_profile<T: Scalar>(outputs: &[EncoderOutput<T>], tol: f64) -> Result<Vec<f64>> {
    Ok(sparsity_counts(outputs, tol)?
        .into_iter()
        .map(|(z, t)| z as f64 / t as f64)
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::contract(format!(
            "pearson needs equal lengths ≥ 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::contract("pearson of a zero-variance vector"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Everything `diagnose` computes for one encoder and sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsBundle {
    pub std_metric: f64,
    pub corr_metric: Correlation,
    pub singular_values: Vec<f64>,
    pub similarity: Tensor<f64>,
    pub sparsity_per_layer: Vec<f64>,
    /// Per head, `grid × grid` CLS attention of the first sample.
    pub attention: Vec<Tensor<f64>>,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct Summary {
    std: f64,
    corr: f64,
    n: usize,
    d: usize,
    seed: u64,
}

impl DiagnosticsBundle {
    pub fn summary_json(&self) -> serde_json::Value {
        let s = Summary {
            std: self.std_metric,
            corr: self.corr_metric.value,
            n: self.n,
            d: self.d,
            seed: self.seed,
        };
        serde_json::to_value(s).expect("summary serializes")
    }

    /// Writes `spectrum.csv`, `similarity.csv`, `sparsity.csv`,
    /// `summary.json` and `attention_head{h}.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut spectrum = String::from("index,value\n");
        for (i, &v) in self.singular_values.iter().enumerate() {
            spectrum.push_str(&format!("{i},{}\n", if v > 0.0 { sig9(v) } else { String::new() }));
        }
        write_text(&dir.join("spectrum.csv"), &spectrum)?;
        let m = self.similarity.rows();
        write_text(&dir.join("similarity.csv"), &matrix_csv(m, m, self.similarity.data()))?;
        let mut sparsity = String::from("layer,ratio\n");
        for (i, &v) in self.sparsity_per_layer.iter().enumerate() {
            sparsity.push_str(&format!("{i},{}\n", sig9(v)));
        }
        write_text(&dir.join("sparsity.csv"), &sparsity)?;
        write_json(&dir.join("summary.json"), &self.summary_json())?;
        for (h, map) in self.attention.iter().enumerate() {
            let (r, c) = (map.rows(), map.cols());
            write_text(&dir.join(format!("attention_head{h}.csv")), &matrix_csv(r, c, map.data()))?;
        }
        Ok(())
    }
}

const DIAGNOSE_STREAM: u64 = (1 << 62) + 16;

/// Computes every diagnostic on `sample_n` frames of `store` drawn without
/// replacement by `seed`, encoded without augmentation. Attention maps are
/// those of the first sampled frame.
pub fn diagnose_params(
    params: &ParamStore<f32>,
    vit_cfg: &ViTConfig,
    store: &ObservationStore,
    sample_n: usize,
    seed: u64,
    tol: f64,
) -> Result<DiagnosticsBundle> {
    vit::check_params(params, vit_cfg, ENCODER)?;
    let mut frames: Vec<(usize, usize)> = store
        .episode_lengths()
        .into_iter()
        .enumerate()
        .flat_map(|(e, n)| (0..n).map(move |t| (e, t)))
        .collect();
    if sample_n < 3 || sample_n > frames.len() {
        return Err(Error::contract(format!(
            "diagnose needs 3 ≤ sample_n ≤ {} frames, got {sample_n}",
            frames.len()
        )));
    }
    frames.shuffle(&mut sample_rng(seed, DIAGNOSE_STREAM));
    frames.truncate(sample_n);
    let d = vit_cfg.embed_dim;
    let mut rep = Vec::with_capacity(sample_n * d);
    let mut counts: Vec<(usize, usize)> = vec![(0, 0); vit_cfg.depth];
    let mut attention = Vec::new();
    for (c, part) in frames.chunks(64).enumerate() {
        let images: Vec<_> = part.iter().map(|&(e, t)| store.frame(e, t)).collect();
        let out = vit::forward(params, vit_cfg, ENCODER, &images, true)?;
        rep.extend(out.representation.data().iter().map(|v| v.f64()));
        for (acc, (z, t)) in counts.iter_mut().zip(sparsity_counts(std::slice::from_ref(&out), tol)?) {
            acc.0 += z;
            acc.1 += t;
        }
        if c == 0 {
            attention = vit::attention_maps(&out, vit_cfg, 0)?.iter().map(|m| m.cast()).collect();
        }
    }
    let r = Tensor::new(vec![sample_n, d], rep)?;
    Ok(DiagnosticsBundle {
        std_metric: representation_std(&r)?,
        corr_metric: correlation_metric(&r)?,
        singular_values: covariance_spectrum(&r)?,
        similarity: cosine_similarity_matrix(&r)?,
        sparsity_per_layer: counts.iter().map(|&(z, t)| z as f64 / t as f64).collect(),
        attention,
        n: sample_n,
        d,
        seed,
    })
}

/// Loads `checkpoint` against the `ssl_config.json` beside it, runs
/// [`diagnose_params`] and, with `out` set, writes the exports there.
pub fn diagnose(
    checkpoint: &Path,
    store: &ObservationStore,
    sample_n: usize,
    seed: u64,
    tol: f64,
    out: Option<&Path>,
) -> Result<DiagnosticsBundle> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let sidecar = Sidecar::read(&dir.join(SIDECAR_FILE))?;
    let params = ParamStore::<f32>::load(checkpoint)?;
    let bundle = diagnose_params(&params, &sidecar.model, store, sample_n, seed, tol)?;
    if let Some(out) = out {
        bundle.write(out)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn std_fixtures() {
        assert_eq!(representation_std(&m(&[vec![1.0, 2.0], vec![1.0, 2.0]])).unwrap(), 0.0);
        let r = m(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, -1.0]]);
        assert!((representation_std(&r).unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(representation_std(&m(&[vec![1.0]])).is_err());
    }

    #[test]
    fn correlation_fixtures() {
        let r = m(&[vec![1.0, -1.0, 5.0], vec![2.0, -2.0, 5.0], vec![4.0, -4.0, 5.0]]);
        let c = correlation_metric(&r).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12);
        assert_eq!(c.excluded, 1);
        assert!(correlation_metric(&m(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]])).is_err());
    }

    #[test]
    fn cosine_fixtures() {
        let s = cosine_similarity_matrix(&m(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert!((s.data()[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(s.data()[5], 0.0);
        assert_eq!(s.data()[4], 1.0);
        let err = cosine_similarity_matrix(&m(&[vec![1.0, 1.0], vec![0.0, 0.0]])).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn pearson_fixtures() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn isotropic_spectrum() {
        // Columns ±1 in a balanced 4-row design have covariance (4/3)·I.
        let r = m(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]);
        for s in covariance_spectrum(&r).unwrap() {
            assert!((s - 4.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsity_counts_exact_zeros() {
        let out = EncoderOutput {
            representation: Tensor::<f64>::zeros(vec![1, 1]),
            mlp_activations: vec![Tensor::from_f64(vec![1, 1, 4], &[0.0, 0.0, 1.0, 2.0]).unwrap()],
            attention: None,
        };
        assert_eq!(sparsity_profile(&[out.clone()], SPARSITY_TOL).unwrap(), vec![0.5]);
        assert_eq!(sparsity_profile(&[out], f64::INFINITY).unwrap(), vec![1.0]);
    }
}
