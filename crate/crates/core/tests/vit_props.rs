use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tov_core::diffcore::{Graph, Tensor};
use tov_core::vit::{encode, forward, init_params, param_count, patchify_batch, ViTConfig};

fn image(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = cfg.in_channels * cfg.image_size * cfg.image_size;
    Tensor::new(
        vec![cfg.in_channels, cfg.image_size, cfg.image_size],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn param_count_matches_initialized_store(
        grid in 1usize..5,
        patch in 1usize..5,
        channels in 1usize..4,
        heads in 1usize..4,
        head_dim in 1usize..5,
        depth in 0usize..3,
        ratio in 1usize..4,
        wide in any::<bool>(),
    ) {
        let cfg = ViTConfig {
            image_size: grid * patch,
            patch_size: patch,
            in_channels: channels,
            embed_dim: heads * head_dim,
            depth,
            heads,
            mlp_ratio: ratio,
            pos_table_tokens: wide.then_some(26),
        };
        let store = init_params::<f32>(&cfg, "encoder.", 0).unwrap();
        let total: usize = store.iter().map(|(_, t)| t.data().len()).sum();
        prop_assert_eq!(total, param_count(&cfg));
    }
}

#[test]
fn permuting_patches_with_their_positions_keeps_the_representation() {
    let cfg = ViTConfig {
        image_size: 12,
        patch_size: 3,
        embed_dim: 12,
        depth: 2,
        heads: 3,
        mlp_ratio: 2,
        ..ViTConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = init_params::<f64>(&cfg, "", 3).unwrap();
    let d = cfg.embed_dim;
    for v in store.get_mut("pos_embed").unwrap().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in store.get_mut("cls_token").unwrap().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let images: Vec<_> = (0..3).map(|_| image(&cfg, &mut rng)).collect();
    let patches = patchify_batch(&images, &cfg).unwrap();
    let (p, pd) = (cfg.num_patches(), cfg.patch_dim());
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(&mut rng);

    let mut shuffled = patches.clone();
    for n in 0..images.len() {
        for (dst, &src) in perm.iter().enumerate() {
            let from = (n * p + src) * pd;
            let to = (n * p + dst) * pd;
            let row = patches.data()[from..from + pd].to_vec();
            shuffled.data_mut()[to..to + pd].copy_from_slice(&row);
        }
    }
    let mut permuted_store = store.clone();
    let pos = store.get("pos_embed").unwrap().data().to_vec();
    let table = permuted_store.get_mut("pos_embed").unwrap().data_mut();
    for (dst, &src) in perm.iter().enumerate() {
        table[(1 + dst) * d..(2 + dst) * d].copy_from_slice(&pos[(1 + src) * d..(2 + src) * d]);
    }

    let run = |s, x: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(x);
        let y = encode(&mut g, s, &cfg, "", x, false).unwrap().representation;
        g.value(y).clone()
    };
    let a = run(&store, patches);
    let b = run(&permuted_store, shuffled);
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "max difference {diff}");
    assert!(a.data().iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        ..ViTConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = init_params::<f64>(&cfg, "", 1).unwrap();
    let images: Vec<_> = (0..4).map(|_| image(&cfg, &mut rng)).collect();
    let out = forward(&store, &cfg, "", &images, true).unwrap();
    let attn = out.attention.unwrap();
    assert_eq!(attn.shape(), &[4, 2, cfg.tokens(), cfg.tokens()]);
    for row in attn.data().chunks(cfg.tokens()) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
