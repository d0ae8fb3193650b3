//! Finite-difference verification of the complete objective on a toy model.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::sample_rng;
use crate::data::{gen_synthetic, valid_triples, SyntheticSpec};
use crate::diffcore::{grad_check, GradCheckOptions, GradCheckReport, ParamStore};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

use super::{init_model, step_loss, SslConfig, StepBatch};

/// Shape of the model and batch whose loss is checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub expander_dims: Vec<usize>,
    /// Standard deviation of the noise added to every trainable entry.
    pub spread: f64,
    /// Per parameter, at most this many random entries; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for ObjectiveCheck {
    fn default() -> Self {
        Self {
            depth: 2,
            embed_dim: 32,
            heads: 2,
            batch: 4,
            expander_dims: vec![24, 24, 16],
            spread: 0.1,
            max_coords: None,
            seed: 9,
        }
    }
}

impl ObjectiveCheck {
    pub fn configs(&self) -> (ViTConfig, SslConfig) {
        let vit = ViTConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            ..ViTConfig::default()
        };
        let ssl = SslConfig {
            expander_dims: self.expander_dims.clone(),
            batch_size: self.batch,
            seed: self.seed,
            ..SslConfig::default()
        };
        (vit, ssl)
    }

    /// Builds a 64-bit model and a batch of real triples, perturbs the fresh
    /// initialization (whose zero CLS and positional entries sit where layer
    /// norm is nearly singular) and compares the total loss gradient against
    /// central differences.
    pub fn run(&self) -> Result<GradCheckReport> {
        let (vit, ssl) = self.configs();
        vit.validate()?;
        ssl.validate()?;
        let spec = SyntheticSpec {
            episodes: 1,
            episode_len: self.batch + 2,
            size: 16,
            dot_radius: 3,
            ..SyntheticSpec::default()
        };
        let store = gen_synthetic(&spec, &mut sample_rng(self.seed, 1))?;
        let triples = valid_triples(&store);
        if triples.len() < self.batch {
            return Err(Error::contract("not enough triples for the check batch"));
        }
        let batch = StepBatch::build(&store, &triples[..self.batch], &vit, &ssl, 0)?;
        let mut params = init_model::<f64>(&vit, &ssl)?;
        let mut rng = sample_rng(self.seed, 2);
        let names: Vec<String> = params
            .names()
            .filter(|n| !ParamStore::<f64>::is_buffer(n))
            .map(str::to_string)
            .collect();
        for n in names {
            for v in params.get_mut(&n).expect("listed name").data_mut() {
                *v += self.spread * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let opts = GradCheckOptions {
            max_coords: self.max_coords,
            seed: self.seed,
            ..GradCheckOptions::default()
        };
        grad_check(&params, |g, s| Ok(step_loss(g, s, &vit, &ssl, &batch)?.total), &opts)
    }
}
