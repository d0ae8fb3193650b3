//! Pre-norm Vision Transformer encoder with a CLS-token representation.
//!
//! Parameters live in a [`ParamStore`] under a caller-chosen prefix:
//!
//! ```text
//! {p}patch_embed.{weight,bias}   (C·patch², D), (D)
//! {p}cls_token                   (D)
//! {p}pos_embed                   (table_tokens, D)
//! {p}blocks.{i}.norm1.{weight,bias}
//! {p}blocks.{i}.attn.qkv.{weight,bias}   (D, 3D), (3D)
//! {p}blocks.{i}.attn.proj.{weight,bias}  (D, D), (D)
//! {p}blocks.{i}.norm2.{weight,bias}
//! {p}blocks.{i}.mlp.fc1.{weight,bias}    (D, r·D), (r·D)
//! {p}blocks.{i}.mlp.fc2.{weight,bias}    (r·D, D), (D)
//! {p}norm.{weight,bias}
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{affine_layer_norm, linear, trunc_normal, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::resample;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Rows in the learned positional table. `None` sizes it to the active
    /// grid plus the CLS slot. Other values must be `g² + 1` for some `g`;
    /// the patch part is then bilinearly resampled to the active grid.
    pub pos_table_tokens: Option<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            pos_table_tokens: None,
        }
    }
}

impl ViTConfig {
    /// Positional-table size of the 224-pixel, patch-8 layout (28×28 + CLS).
    pub const WIDE_POS_TABLE: usize = 785;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.in_channels", self.in_channels),
            ("model.embed_dim", self.embed_dim),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.grid() == 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("patch {} exceeds image size {}", self.patch_size, self.image_size),
            ));
        }
        if let Some(t) = self.pos_table_tokens {
            if t != self.tokens() && table_grid(t).is_none() {
                return Err(Error::config(
                    "model.pos_table_tokens",
                    format!("{t} is neither the grid token count nor a square grid plus one"),
                ));
            }
        }
        Ok(())
    }

    /// Patches per side; trailing pixels that do not fill a patch are dropped.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn table_tokens(&self) -> usize {
        self.pos_table_tokens.unwrap_or_else(|| self.tokens())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

fn table_grid(tokens: usize) -> Option<usize> {
    let n = tokens.checked_sub(1)?;
    let g = (n as f64).sqrt().round() as usize;
    (g > 0 && g * g == n).then_some(g)
}

/// Exact learnable-parameter count of an encoder built from `cfg`.
pub fn param_count(cfg: &ViTConfig) -> usize {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    let patch_embed = cfg.patch_dim() * d + d;
    let pos = cfg.table_tokens() * d;
    let cls = d;
    let block = 2 * d // norm1
        + d * 3 * d + 3 * d // qkv
        + d * d + d // proj
        + 2 * d // norm2
        + d * h + h // fc1
        + h * d + d; // fc2
    let final_norm = 2 * d;
    patch_embed + pos + cls + cfg.depth * block + final_norm
}

/// Fresh encoder weights: truncated-normal (std 0.02) matrices, zero biases,
/// unit norm gains, zero CLS token and positional table.
pub fn init_params<T: Scalar>(cfg: &ViTConfig, prefix: &str, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    let mut s = ParamStore::new();
    let lin = |s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        s.insert(format!("{prefix}{name}.weight"), trunc_normal(vec![fan_in, fan_out], 0.02, rng));
        s.insert(format!("{prefix}{name}.bias"), Tensor::zeros(vec![fan_out]));
    };
    let norm = |s: &mut ParamStore<T>, name: &str| {
        s.insert(format!("{prefix}{name}.weight"), Tensor::full(vec![d], T::one()));
        s.insert(format!("{prefix}{name}.bias"), Tensor::zeros(vec![d]));
    };
    lin(&mut s, "patch_embed", cfg.patch_dim(), d, &mut rng);
    s.insert(format!("{prefix}cls_token"), Tensor::zeros(vec![d]));
    s.insert(format!("{prefix}pos_embed"), Tensor::zeros(vec![cfg.table_tokens(), d]));
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        norm(&mut s, &format!("{b}.norm1"));
        lin(&mut s, &format!("{b}.attn.qkv"), d, 3 * d, &mut rng);
        lin(&mut s, &format!("{b}.attn.proj"), d, d, &mut rng);
        norm(&mut s, &format!("{b}.norm2"));
        lin(&mut s, &format!("{b}.mlp.fc1"), d, h, &mut rng);
        lin(&mut s, &format!("{b}.mlp.fc2"), h, d, &mut rng);
    }
    norm(&mut s, "norm");
    Ok(s)
}

/// Checks that every parameter `cfg` needs is present with the right shape.
pub fn check_params<T: Scalar>(store: &ParamStore<T>, cfg: &ViTConfig, prefix: &str) -> Result<()> {
    let expected = init_params::<T>(cfg, prefix, 0)?;
    for (name, t) in expected.iter() {
        match store.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::contract(format!("parameter `{name}` missing for config"))),
        }
    }
    Ok(())
}

/// Splits a `C×H×W` image (row-major) into `grid² × (C·p²)` patch rows.
/// Patches are ordered row-major; each row is laid out channel, then patch
/// row, then patch column. Pixels beyond `grid·p` on either axis are dropped.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![patch],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h / patch == 0 || w / patch == 0 {
        return Err(Error::config(
            "model.patch_size",
            format!("patch {patch} does not fit a {h}×{w} image"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * c * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

/// Patch rows for a batch of images: `N × grid² × (C·p²)`.
pub fn patchify_batch<T: Scalar>(images: &[Tensor<T>], cfg: &ViTConfig) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for img in images {
        let s = img.shape();
        if s != [cfg.in_channels, cfg.image_size, cfg.image_size] {
            return Err(Error::Shape {
                op: "patchify_batch",
                lhs: s.to_vec(),
                rhs: vec![cfg.in_channels, cfg.image_size, cfg.image_size],
            });
        }
        data.extend(patchify(img, cfg.patch_size)?.into_data());
    }
    Tensor::new(vec![images.len(), cfg.num_patches(), cfg.patch_dim()], data)
}

/// Graph handles produced by [`encode`].
pub struct EncodedVars {
    /// `N × D` CLS representations.
    pub representation: Var,
    /// Per block, `N × tokens × hidden` post-GELU activations (when captured).
    pub mlp_activations: Vec<Var>,
    /// Last-block `N × heads × tokens × tokens` attention (when captured).
    pub attention: Option<Var>,
}

fn positional_rows<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ViTConfig, prefix: &str) -> Result<Var> {
    let pos = g.param(store, &format!("{prefix}pos_embed"))?;
    let table = cfg.table_tokens();
    if table == cfg.tokens() {
        return Ok(pos);
    }
    let src_grid = table_grid(table)
        .ok_or_else(|| Error::config("model.pos_table_tokens", format!("{table} is not a square grid plus one")))?;
    let dst_grid = cfg.grid();
    let a = resample::matrix_1d(src_grid, dst_grid);
    let (sn, dn) = (src_grid * src_grid, dst_grid * dst_grid);
    let mut m = vec![0.0; dn * sn];
    for oy in 0..dst_grid {
        for ox in 0..dst_grid {
            for iy in 0..src_grid {
                let wy = a[oy * src_grid + iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..src_grid {
                    m[(oy * dst_grid + ox) * sn + iy * src_grid + ix] = wy * a[ox * src_grid + ix];
                }
            }
        }
    }
    let interp = g.constant(Tensor::from_f64(vec![dn, sn], &m)?);
    let cls_pos = g.slice(pos, 0, 0, 1)?;
    let patch_pos = g.slice(pos, 0, 1, sn)?;
    let resized = g.matmul(interp, patch_pos)?;
    g.concat(&[cls_pos, resized], 0)
}

/// Records the encoder on `g` for a batch of patch rows (`N × patches ×
/// patch_dim`, see [`patchify_batch`]).
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ViTConfig,
    prefix: &str,
    patches: Var,
    capture: bool,
) -> Result<EncodedVars> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_dim() {
        return Err(Error::Shape {
            op: "encode",
            lhs: shape,
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        });
    }
    let n = shape[0];
    let (d, t, heads, hd) = (cfg.embed_dim, cfg.tokens(), cfg.heads, cfg.head_dim());

    let x = linear(g, store, &format!("{prefix}patch_embed"), patches)?;
    let cls = g.param(store, &format!("{prefix}cls_token"))?;
    let cls = g.reshape(cls, vec![1, d])?;
    let pad = g.constant(Tensor::zeros(vec![t - 1, d]));
    let cls_rows = g.concat(&[cls, pad], 0)?;
    let pos = positional_rows(g, store, cfg, prefix)?;
    let token_bias = g.add(pos, cls_rows)?;
    let slot = g.constant(Tensor::zeros(vec![n, 1, d]));
    let x = g.concat(&[slot, x], 1)?;
    let mut x = g.add(x, token_bias)?;

    let mut mlp_activations = Vec::new();
    let mut attention = None;
    let scale = (hd as f64).powf(-0.5);
    for i in 0..cfg.depth {
        let b = format!("{prefix}blocks.{i}");
        let h = affine_layer_norm(g, store, &format!("{b}.norm1"), x, LN_EPS)?;
        let qkv = linear(g, store, &format!("{b}.attn.qkv"), h)?;
        let qkv = g.reshape(qkv, vec![n, t, 3, heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |g: &mut Graph<T>, k: usize| -> Result<Var> {
            let p = g.slice(qkv, 0, k, 1)?;
            g.reshape(p, vec![n, heads, t, hd])
        };
        let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        if capture && i + 1 == cfg.depth {
            attention = Some(attn);
        }
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![n, t, d])?;
        let out = linear(g, store, &format!("{b}.attn.proj"), ctx)?;
        x = g.add(x, out)?;

        let h = affine_layer_norm(g, store, &format!("{b}.norm2"), x, LN_EPS)?;
        let h = linear(g, store, &format!("{b}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        if capture {
            mlp_activations.push(h);
        }
        let h = linear(g, store, &format!("{b}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    let x = affine_layer_norm(g, store, &format!("{prefix}norm"), x, LN_EPS)?;
    let cls_out = g.slice(x, 1, 0, 1)?;
    let representation = g.reshape(cls_out, vec![n, d])?;
    Ok(EncodedVars {
        representation,
        mlp_activations,
        attention,
    })
}

/// Materialized encoder results for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `N × D`.
    pub representation: Tensor<T>,
    /// Per block, `N × tokens × hidden`; empty unless captured.
    pub mlp_activations: Vec<Tensor<T>>,
    /// `N × heads × tokens × tokens`; `None` unless captured.
    pub attention: Option<Tensor<T>>,
}

/// Runs the encoder without recording gradients.
pub fn forward<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ViTConfig,
    prefix: &str,
    images: &[Tensor<T>],
    capture: bool,
) -> Result<EncoderOutput<T>> {
    check_params(store, cfg, prefix)?;
    let mut g = Graph::new();
    let patches = g.constant(patchify_batch(images, cfg)?);
    let vars = encode(&mut g, store, cfg, prefix, patches, capture)?;
    Ok(EncoderOutput {
        representation: g.value(vars.representation).clone(),
        mlp_activations: vars.mlp_activations.iter().map(|&v| g.value(v).clone()).collect(),
        attention: vars.attention.map(|v| g.value(v).clone()),
    })
}

/// CLS→patch attention of sample `sample` in the last block, one
/// `grid × grid` map per head, renormalized to sum to 1 over patches.
pub fn attention_maps<T: Scalar>(out: &EncoderOutput<T>, cfg: &ViTConfig, sample: usize) -> Result<Vec<Tensor<T>>> {
    let attn = out
        .attention
        .as_ref()
        .ok_or_else(|| Error::contract("attention maps need a forward with capture enabled"))?;
    let s = attn.shape();
    let (heads, t) = (s[1], s[2]);
    if sample >= s[0] {
        return Err(Error::contract(format!("sample {sample} out of range for batch {}", s[0])));
    }
    let g = cfg.grid();
    (0..heads)
        .map(|h| {
            let base = ((sample * heads + h) * t) * t;
            let row = &attn.data()[base + 1..base + t];
            let z: T = row.iter().copied().sum();
            Tensor::new(vec![g, g], row.iter().map(|&v| v / z).collect())
        })
        .collect()
}
