//! Python bindings: losses, metrics, stores, encoders, pretraining and
//! diagnostics from `tov-core`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tov_core::augment::sample_rng;
use tov_core::data::{gen_synthetic as core_gen, SyntheticKind, SyntheticSpec};
use tov_core::diffcore::{ParamStore, Tensor};
use tov_core::ssl::{Sidecar, ENCODER, SIDECAR_FILE};
use tov_core::vit::ViTConfig;
use tov_core::{data, metrics, probe, ssl, vit};

fn err(e: tov_core::Error) -> PyErr {
    match e {
        tov_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::matrix(&rows).map_err(err)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[pyfunction]
#[pyo3(signature = (image_size=84, patch_size=8, in_channels=3, embed_dim=192, depth=12, heads=3, mlp_ratio=4, pos_table_tokens=None))]
#[allow(clippy::too_many_arguments)]
fn param_count(
    image_size: usize,
    patch_size: usize,
    in_channels: usize,
    embed_dim: usize,
    depth: usize,
    heads: usize,
    mlp_ratio: usize,
    pos_table_tokens: Option<usize>,
) -> PyResult<usize> {
    let cfg = ViTConfig {
        image_size,
        patch_size,
        in_channels,
        embed_dim,
        depth,
        heads,
        mlp_ratio,
        pos_table_tokens,
    };
    cfg.validate().map_err(err)?;
    Ok(vit::param_count(&cfg))
}

#[pyfunction]
fn invariance_loss(z: Vec<Vec<f64>>, z2: Vec<Vec<f64>>) -> PyResult<f64> {
    ssl::invariance_loss(&matrix(z)?, &matrix(z2)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (z, gamma=1.0))]
fn variance_loss(z: Vec<Vec<f64>>, gamma: f64) -> PyResult<f64> {
    ssl::variance_loss(&matrix(z)?, gamma).map_err(err)
}

#[pyfunction]
fn covariance_loss(z: Vec<Vec<f64>>) -> PyResult<f64> {
    ssl::covariance_loss(&matrix(z)?).map_err(err)
}

#[pyfunction]
fn temporal_loss(logits: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let t = Tensor::new(vec![logits.len(), 1], logits).map_err(err)?;
    ssl::temporal_loss(&t, &labels).map_err(err)
}

#[pyfunction]
fn representation_std(r: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::representation_std(&matrix(r)?).map_err(err)
}

/// Returns `(mean |r|, excluded feature count)`.
#[pyfunction]
fn correlation_metric(r: Vec<Vec<f64>>) -> PyResult<(f64, usize)> {
    let c = metrics::correlation_metric(&matrix(r)?).map_err(err)?;
    Ok((c.value, c.excluded))
}

#[pyfunction]
fn covariance_spectrum(r: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    metrics::covariance_spectrum(&matrix(r)?).map_err(err)
}

#[pyfunction]
fn cosine_similarity_matrix(r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&metrics::cosine_similarity_matrix(&matrix(r)?).map_err(err)?))
}

#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&a, &b).map_err(err)
}

#[pyfunction]
fn f1_scores<'py>(py: Python<'py>, predictions: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = probe::f1_scores(&predictions, &labels, k).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("macro", r.macro_f1)?;
    d.set_item("weighted", r.weighted_f1)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("per_class", r.per_class.iter().map(|c| c.f1).collect::<Vec<_>>())?;
    Ok(d)
}

/// Writes a synthetic OBSV store to `path`; returns its frame count.
#[pyfunction]
#[pyo3(signature = (path, kind="dots", episodes=20, episode_len=102, size=84, seed=0))]
fn gen_synthetic(path: PathBuf, kind: &str, episodes: usize, episode_len: usize, size: usize, seed: u64) -> PyResult<usize> {
    let spec = SyntheticSpec {
        kind: kind.parse::<SyntheticKind>().map_err(err)?,
        episodes,
        episode_len,
        size,
        ..SyntheticSpec::default()
    };
    let store = core_gen(&spec, &mut sample_rng(seed, 0)).map_err(err)?;
    store.write(&path).map_err(err)?;
    Ok(store.total_frames())
}

/// An episodic frame store read from an OBSV file.
#[pyclass(frozen)]
struct ObservationStore(data::ObservationStore);

#[pymethods]
impl ObservationStore {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self(data::ObservationStore::read(&path).map_err(err)?))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(&path).map_err(err)
    }

    fn episode_lengths(&self) -> Vec<usize> {
        self.0.episode_lengths()
    }

    /// `(height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height, self.0.width, self.0.channels)
    }

    /// Channel-first frame scaled to `[0, 1]`, flattened.
    fn frame(&self, episode: usize, t: usize) -> PyResult<Vec<f32>> {
        self.check(episode, t)?;
        Ok(self.0.frame(episode, t).into_data())
    }

    fn action(&self, episode: usize, t: usize) -> PyResult<Option<u8>> {
        self.check(episode, t)?;
        Ok(self.0.action(episode, t))
    }
}

impl ObservationStore {
    fn check(&self, episode: usize, t: usize) -> PyResult<()> {
        let lengths = self.0.episode_lengths();
        match lengths.get(episode) {
            Some(&n) if t < n => Ok(()),
            _ => Err(PyValueError::new_err(format!("frame ({episode}, {t}) out of range"))),
        }
    }
}

/// A pretrained encoder loaded from a checkpoint and its config sidecar.
#[pyclass(frozen)]
struct Encoder {
    params: ParamStore<f32>,
    sidecar: Sidecar,
}

#[pymethods]
impl Encoder {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let sidecar = Sidecar::read(&dir.join(SIDECAR_FILE)).map_err(err)?;
        let params = ParamStore::load(&checkpoint).map_err(err)?;
        vit::check_params(&params, &sidecar.model, ENCODER).map_err(err)?;
        Ok(Self { params, sidecar })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.sidecar.model.embed_dim
    }

    /// Model and objective configuration as JSON.
    fn config_json(&self) -> String {
        serde_json::to_string(&self.sidecar).expect("sidecar serializes")
    }

    /// Representations of the given `(episode, t)` frames.
    fn encode(&self, store: &ObservationStore, frames: Vec<(usize, usize)>) -> PyResult<Vec<Vec<f64>>> {
        let mut images = Vec::with_capacity(frames.len());
        for (e, t) in frames {
            store.check(e, t)?;
            images.push(store.0.frame(e, t));
        }
        let y = ssl::encode_images(&self.params, &self.sidecar.model, &images, 64).map_err(err)?;
        Ok(rows(&y.cast()))
    }
}

/// Pretrains on the store at `data`, writing checkpoints under `out`.
/// `config` is JSON of the form `{"model": {...}, "ssl": {...}}`; missing
/// fields take their defaults. Returns the per-step loss rows.
#[pyfunction]
#[pyo3(signature = (data, out, config="{}"))]
fn pretrain<'py>(py: Python<'py>, data: PathBuf, out: PathBuf, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: serde_json::Value = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let model: ViTConfig = match cfg.get("model") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| PyValueError::new_err(format!("model: {e}")))?,
        None => ViTConfig::default(),
    };
    let ssl_cfg: ssl::SslConfig = match cfg.get("ssl") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| PyValueError::new_err(format!("ssl: {e}")))?,
        None => ssl::SslConfig::default(),
    };
    model.validate().map_err(err)?;
    ssl_cfg.validate().map_err(err)?;
    let store = data::ObservationStore::read(&data).map_err(err)?;
    let run = py
        .detach(|| ssl::pretrain(&store, &model, &ssl_cfg, Some(&out)))
        .map_err(err)?;
    run.log
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("epoch", row.epoch)?;
            d.set_item("step", row.step)?;
            d.set_item("invariance", row.report.invariance)?;
            d.set_item("variance", row.report.variance)?;
            d.set_item("covariance", row.report.covariance)?;
            d.set_item("temporal", row.report.temporal)?;
            d.set_item("total", row.report.total)?;
            d.set_item("lr", row.lr)?;
            Ok(d)
        })
        .collect()
}

/// Diagnostics of a checkpoint on `data`; writes the exports when `out` is
/// given and returns `{std, corr, n, d, seed}`.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, sample_n=256, seed=0, tol=metrics::SPARSITY_TOL, out=None))]
fn diagnose(checkpoint: PathBuf, data: PathBuf, sample_n: usize, seed: u64, tol: f64, out: Option<PathBuf>) -> PyResult<String> {
    let store = data::ObservationStore::read(&data).map_err(err)?;
    let bundle = metrics::diagnose(&checkpoint, &store, sample_n, seed, tol, out.as_deref()).map_err(err)?;
    Ok(bundle.summary_json().to_string())
}

#[pymodule]
fn tov(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(invariance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(variance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(representation_std, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_metric, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_class::<ObservationStore>()?;
    m.add_class::<Encoder>()?;
    Ok(())
}
