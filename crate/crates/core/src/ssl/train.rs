//! One optimization step of the joint objective and the epoch loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, sample_rng, AugConfig, Image, Pipeline};
use crate::data::{valid_triples, ObservationStore, Triple, TripleSampler};
use crate::diffcore::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::export::{create_dir, sig9, write_json, write_text};
use crate::vit::{self, ViTConfig};

use super::heads::{
    build_temporal_batch, expander_var, init_expander, init_temporal_head, temporal_logits, update_running_stats,
    BatchStats, PERMUTATIONS,
};
use super::losses::{covariance_var, invariance_var, temporal_bce_var, variance_var};
use super::optim::{learning_rate, Optimizer};
use super::{LossReport, SslConfig};

/// Name prefix of the encoder inside a full model store.
pub const ENCODER: &str = "encoder.";

/// Fresh encoder, expander and temporal head in one store.
pub fn init_model<T: Scalar>(vit_cfg: &ViTConfig, ssl: &SslConfig) -> Result<ParamStore<T>> {
    vit_cfg.validate()?;
    ssl.validate()?;
    let mut store = vit::init_params(vit_cfg, ENCODER, ssl.seed)?;
    store.merge(init_expander(vit_cfg.embed_dim, &ssl.expander_dims, ssl.seed.wrapping_add(1))?);
    store.merge(init_temporal_head(vit_cfg.embed_dim, ssl.seed.wrapping_add(2)));
    Ok(store)
}

/// Augmented inputs of one step: two views of each `x_t`, the neighbors,
/// and the permutation index drawn for every triple.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub view_a: Vec<Image>,
    pub view_b: Vec<Image>,
    pub prev: Vec<Image>,
    pub next: Vec<Image>,
    pub shuffles: Vec<usize>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.shuffles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shuffles.is_empty()
    }

    /// Augments `triples`. Sample `i` draws from the stream of
    /// `first_index + i`, in the order: τ view of `x_t`, τ′ view of `x_t`,
    /// τ″ of `x_{t−1}`, τ″ of `x_{t+1}`, permutation index.
    pub fn build(
        store: &ObservationStore,
        triples: &[Triple],
        vit_cfg: &ViTConfig,
        ssl: &SslConfig,
        first_index: u64,
    ) -> Result<Self> {
        check_store(store, vit_cfg)?;
        let size = vit_cfg.image_size;
        let cfgs = if ssl.augment {
            [
                AugConfig::new(Pipeline::Tau, size),
                AugConfig::new(Pipeline::TauPrime, size),
                AugConfig::new(Pipeline::TauSecond, size),
            ]
        } else {
            [
                AugConfig::identity(Pipeline::Tau, size),
                AugConfig::identity(Pipeline::TauPrime, size),
                AugConfig::identity(Pipeline::TauSecond, size),
            ]
        };
        let samples: Vec<Result<([Image; 4], usize)>> = triples
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let mut rng = sample_rng(ssl.seed, first_index + i as u64);
                let [p, c, n] = tr.frames(store);
                let views = [
                    apply_pipeline(&cfgs[0], &c, &mut rng)?,
                    apply_pipeline(&cfgs[1], &c, &mut rng)?,
                    apply_pipeline(&cfgs[2], &p, &mut rng)?,
                    apply_pipeline(&cfgs[2], &n, &mut rng)?,
                ];
                Ok((views, rng.random_range(0..PERMUTATIONS.len())))
            })
            .collect();
        let mut batch = StepBatch {
            view_a: Vec::with_capacity(triples.len()),
            view_b: Vec::with_capacity(triples.len()),
            prev: Vec::with_capacity(triples.len()),
            next: Vec::with_capacity(triples.len()),
            shuffles: Vec::with_capacity(triples.len()),
        };
        for s in samples {
            let ([a, b, p, n], k) = s?;
            batch.view_a.push(a);
            batch.view_b.push(b);
            batch.prev.push(p);
            batch.next.push(n);
            batch.shuffles.push(k);
        }
        Ok(batch)
    }
}

fn check_store(store: &ObservationStore, cfg: &ViTConfig) -> Result<()> {
    if store.height != cfg.image_size || store.width != cfg.image_size {
        return Err(Error::config(
            "model.image_size",
            format!(
                "store frames are {}×{}, model expects {}×{}",
                store.height, store.width, cfg.image_size, cfg.image_size
            ),
        ));
    }
    if store.channels != cfg.in_channels {
        return Err(Error::config(
            "model.in_channels",
            format!("store frames have {} channels, model expects {}", store.channels, cfg.in_channels),
        ));
    }
    Ok(())
}

fn cast_images<T: Scalar>(images: &[Image]) -> Vec<Tensor<T>> {
    images.iter().map(|i| i.cast()).collect()
}

/// Graph handles of one step's loss.
pub struct StepVars<T> {
    pub total: Var,
    pub invariance: Var,
    pub variance: Var,
    pub covariance: Var,
    pub temporal: Var,
    pub stats: Vec<BatchStats<T>>,
}

/// Records the full objective for `batch` on `g`. All four views go through
/// the shared encoder in one pass.
pub fn step_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    vit_cfg: &ViTConfig,
    ssl: &SslConfig,
    batch: &StepBatch,
) -> Result<StepVars<T>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::contract("a training step needs at least 2 triples"));
    }
    let mut images = cast_images::<T>(&batch.view_a);
    images.extend(cast_images(&batch.view_b));
    images.extend(cast_images(&batch.prev));
    images.extend(cast_images(&batch.next));
    let patches = g.constant(vit::patchify_batch(&images, vit_cfg)?);
    let y = vit::encode(g, store, vit_cfg, ENCODER, patches, false)?.representation;
    let y_a = g.slice(y, 0, 0, n)?;
    let y_b = g.slice(y, 0, n, n)?;
    let y_prev = g.slice(y, 0, 2 * n, n)?;
    let y_next = g.slice(y, 0, 3 * n, n)?;

    let (z_a, mut stats) = expander_var(g, store, y_a, true)?;
    let (z_b, stats_b) = expander_var(g, store, y_b, true)?;
    stats.extend(stats_b);

    let invariance = invariance_var(g, z_a, z_b)?;
    let va = variance_var(g, z_a, ssl.gamma)?;
    let vb = variance_var(g, z_b, ssl.gamma)?;
    let variance = g.add(va, vb)?;
    let ca = covariance_var(g, z_a)?;
    let cb = covariance_var(g, z_b)?;
    let covariance = g.add(ca, cb)?;
    let (concat, labels) = build_temporal_batch(g, y_prev, y_a, y_next, &batch.shuffles)?;
    let logits = temporal_logits(g, store, concat)?;
    let temporal = temporal_bce_var(g, logits, &labels)?;

    let terms = [
        g.scale(invariance, ssl.inv_coef),
        g.scale(variance, ssl.var_coef),
        g.scale(covariance, ssl.cov_coef),
        g.scale(temporal, ssl.temp_coef),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(StepVars {
        total,
        invariance,
        variance,
        covariance,
        temporal,
        stats,
    })
}

/// Computes the loss, backpropagates, updates the parameters with `lr` and
/// folds the batch-norm statistics into the running averages.
pub fn tov_vicreg_step<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    vit_cfg: &ViTConfig,
    ssl: &SslConfig,
    batch: &StepBatch,
    lr: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let vars = step_loss(&mut g, store, vit_cfg, ssl, batch)?;
    let item = |v: Var| g.value(v).item().f64();
    let report = LossReport::new(
        ssl,
        item(vars.invariance),
        item(vars.variance),
        item(vars.covariance),
        item(vars.temporal),
    );
    if !report.is_finite() || !g.value(vars.total).item().is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {report:?}")));
    }
    let grads = g.backward(vars.total)?;
    store.zero_grad();
    grads.accumulate_into(&g, store)?;
    opt.step(store, lr, |_| false);
    store.zero_grad();
    update_running_stats(store, &vars.stats);
    Ok(report)
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,step,inv,var,cov,temp,total,lr";

    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            sig9(r.invariance),
            sig9(r.variance),
            sig9(r.covariance),
            sig9(r.temporal),
            sig9(r.total),
            sig9(self.lr)
        )
    }
}

/// Configuration written next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ViTConfig,
    pub ssl: SslConfig,
}

pub const SIDECAR_FILE: &str = "ssl_config.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch}.tovp")
}

/// Result of [`pretrain`].
pub struct PretrainOutput {
    pub params: ParamStore<f32>,
    pub log: Vec<LogRow>,
}

/// Trains from a fresh initialization. Each epoch visits every valid triple
/// once in a shuffled order, in batches of `ssl.batch_size`; a final partial
/// batch is kept when it has at least 2 triples. With `out` set, writes
/// `checkpoint_epoch{e}.tovp` after every epoch (1-based), the loss log and
/// the config sidecar.
pub fn pretrain(store: &ObservationStore, vit_cfg: &ViTConfig, ssl: &SslConfig, out: Option<&Path>) -> Result<PretrainOutput> {
    let mut params = init_model::<f32>(vit_cfg, ssl)?;
    check_store(store, vit_cfg)?;
    let sampler = TripleSampler::new(store)?;
    let full = sampler.len() / ssl.batch_size;
    let rest = sampler.len() % ssl.batch_size;
    let steps_per_epoch = full + usize::from(rest >= 2);
    if steps_per_epoch == 0 {
        return Err(Error::contract("store has fewer than 2 triples"));
    }
    let total = steps_per_epoch * ssl.epochs;
    let warmup = steps_per_epoch * ssl.warmup_epochs;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(
            &dir.join(SIDECAR_FILE),
            &Sidecar {
                model: vit_cfg.clone(),
                ssl: ssl.clone(),
            },
        )?;
    }
    let mut opt = Optimizer::new(ssl);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    let mut seen = 0u64;
    for epoch in 1..=ssl.epochs {
        // Epoch orders come from streams counted down from u64::MAX, well away
        // from the per-sample streams.
        let mut rng = sample_rng(ssl.seed, !(epoch as u64));
        let order = sampler.epoch(&mut rng);
        for chunk in order.chunks(ssl.batch_size).filter(|c| c.len() >= 2) {
            let batch = StepBatch::build(store, chunk, vit_cfg, ssl, seen)?;
            seen += chunk.len() as u64;
            let lr = learning_rate(ssl, step, warmup, total);
            let report = tov_vicreg_step(&mut params, &mut opt, vit_cfg, ssl, &batch, lr)?;
            log.push(LogRow {
                epoch,
                step,
                report,
                lr,
            });
            step += 1;
        }
        if let Some(dir) = out {
            params.save(dir.join(checkpoint_name(epoch)))?;
            let mut text = String::from(LogRow::HEADER);
            text.push('\n');
            for row in &log {
                text.push_str(&row.csv());
                text.push('\n');
            }
            write_text(&dir.join(LOSS_LOG_FILE), &text)?;
        }
    }
    Ok(PretrainOutput { params, log })
}

/// Encoder representations (`N × D`) of `images`, computed without
/// augmentation in chunks of `chunk` images.
pub fn encode_images<T: Scalar>(
    store: &ParamStore<T>,
    vit_cfg: &ViTConfig,
    images: &[Image],
    chunk: usize,
) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::contract("no images to encode"));
    }
    let mut data = Vec::with_capacity(images.len() * vit_cfg.embed_dim);
    for part in images.chunks(chunk.max(1)) {
        let out = vit::forward(store, vit_cfg, ENCODER, &cast_images::<T>(part), false)?;
        data.extend_from_slice(out.representation.data());
    }
    Tensor::new(vec![images.len(), vit_cfg.embed_dim], data)
}

/// Balanced accuracy of the temporal head on `n` clean triples of `store`:
/// half are presented in order, half under a uniformly drawn non-identity
/// permutation. A positive logit predicts "shuffled".
pub fn temporal_order_accuracy(
    params: &ParamStore<f32>,
    vit_cfg: &ViTConfig,
    store: &ObservationStore,
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_store(store, vit_cfg)?;
    let mut triples = valid_triples(store);
    if triples.len() < 2 || n < 2 {
        return Err(Error::contract("order accuracy needs at least 2 triples"));
    }
    let mut rng = sample_rng(seed, u64::MAX);
    triples.shuffle(&mut rng);
    triples.truncate(n);
    let n = triples.len();
    let shuffles: Vec<usize> = (0..n)
        .map(|i| if i % 2 == 0 { 0 } else { rng.random_range(1..PERMUTATIONS.len()) })
        .collect();
    let mut images = Vec::with_capacity(3 * n);
    for slot in 0..3 {
        images.extend(triples.iter().map(|t| t.frames(store)[slot].clone()));
    }
    let y = encode_images(params, vit_cfg, &images, 64)?;
    let mut g = Graph::new();
    let y = g.constant(y);
    let parts: Vec<Var> = (0..3).map(|k| g.slice(y, 0, k * n, n)).collect::<Result<_>>()?;
    let (concat, labels) = build_temporal_batch(&mut g, parts[0], parts[1], parts[2], &shuffles)?;
    let logits = temporal_logits(&mut g, params, concat)?;
    let (mut hit, mut count) = ([0usize; 2], [0usize; 2]);
    for (&s, &l) in g.value(logits).data().iter().zip(&labels) {
        let l = l as usize;
        count[l] += 1;
        if usize::from(s > 0.0) == l {
            hit[l] += 1;
        }
    }
    Ok(0.5 * (hit[0] as f64 / count[0] as f64 + hit[1] as f64 / count[1] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ViTConfig, SslConfig, ObservationStore) {
        let vit_cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            ..ViTConfig::default()
        };
        let ssl = SslConfig {
            expander_dims: vec![16, 16],
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            ..SslConfig::default()
        };
        let spec = SyntheticSpec {
            episodes: 2,
            episode_len: 7,
            size: 16,
            dot_radius: 2,
            ..SyntheticSpec::default()
        };
        let store = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (vit_cfg, ssl, store)
    }

    #[test]
    fn loss_log_has_one_row_per_step() {
        let (vit_cfg, ssl, store) = toy();
        let out = pretrain(&store, &vit_cfg, &ssl, None).unwrap();
        // 10 triples, batch 4: two full batches plus a pair.
        assert_eq!(out.log.len(), 2 * 3);
        for row in &out.log {
            let r = row.report;
            let again = LossReport::new(&ssl, r.invariance, r.variance, r.covariance, r.temporal);
            assert_eq!(again.total.to_bits(), r.total.to_bits());
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (vit_cfg, ssl, store) = toy();
        let a = pretrain(&store, &vit_cfg, &ssl, None).unwrap();
        let b = pretrain(&store, &vit_cfg, &ssl, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn identical_views_with_only_invariance_have_zero_gradient() {
        let (vit_cfg, ssl, store) = toy();
        let ssl = SslConfig {
            var_coef: 0.0,
            cov_coef: 0.0,
            temp_coef: 0.0,
            augment: false,
            ..ssl
        };
        let params = init_model::<f64>(&vit_cfg, &ssl).unwrap();
        let triples = valid_triples(&store);
        let batch = StepBatch::build(&store, &triples[..4], &vit_cfg, &ssl, 0).unwrap();
        let mut g = Graph::new();
        let vars = step_loss(&mut g, &params, &vit_cfg, &ssl, &batch).unwrap();
        assert_eq!(g.value(vars.invariance).item(), 0.0);
        let grads = g.backward(vars.total).unwrap();
        for (_, v) in g.bound_params() {
            assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn rejects_mismatched_store() {
        let (mut vit_cfg, ssl, store) = toy();
        vit_cfg.image_size = 24;
        assert!(matches!(pretrain(&store, &vit_cfg, &ssl, None), Err(Error::Config { .. })));
    }
}
