mod common;

use token_boost::tensor::{Graph, Rng, Tensor};
use token_boost::vt::{patchify, sample_mask, EncoderConfig, TbmNoise, Vit};

fn encode(vit: &Vit, patches: &Tensor, visible: &[Vec<usize>], noise_seed: Option<u64>) -> Tensor {
    let mut g = Graph::new();
    let b = g.bind(&vit.store, false).unwrap();
    let mut rng = Rng::new(noise_seed.unwrap_or(0), 5);
    let noise = match noise_seed {
        Some(_) => TbmNoise::Sample(&mut rng),
        None => TbmNoise::Mean,
    };
    let (x, _) = vit.encode(&mut g, &b, patches, visible, noise).unwrap();
    g.value(x).clone()
}

fn with_alpha(mut vit: Vit, a: f64) -> Vit {
    for p in vit.store.iter_mut().filter(|p| p.name.ends_with("alpha_raw")) {
        p.value.data_mut().fill(a);
    }
    vit
}

#[test]
fn masked_patches_never_reach_the_encoder() {
    let cfg = common::tiny_encoder();
    let vit = with_alpha(Vit::new(cfg.clone(), 1.0, 3).unwrap(), 0.3);
    let mut rng = Rng::new(1, 1);
    let images = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut rng);
    let plans: Vec<_> = (0..2).map(|_| sample_mask(cfg.tokens(), 0.75, &mut rng).unwrap()).collect();
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let base = patchify(&images, cfg.patch).unwrap();
    let mut poked = base.clone();
    let (t, pd) = (cfg.tokens(), cfg.patch_dim());
    for (b, plan) in plans.iter().enumerate() {
        for &m in &plan.masked {
            for v in &mut poked.data_mut()[(b * t + m) * pd..(b * t + m + 1) * pd] {
                *v = 1e3 * rng.normal();
            }
        }
    }
    // Even with sampled TBM noise the output must not move.
    assert!(encode(&vit, &base, &visible, Some(7)).bit_eq(&encode(&vit, &poked, &visible, Some(7))));
}

#[test]
fn visible_token_order_is_equivariant() {
    let cfg = common::tiny_encoder();
    let vit = with_alpha(Vit::new(cfg.clone(), 1.0, 4).unwrap(), 0.3);
    let mut rng = Rng::new(2, 1);
    let images = Tensor::uniform(&[1, 1, 8, 8], 1.0, &mut rng);
    let patches = patchify(&images, cfg.patch).unwrap();
    let plan = sample_mask(cfg.tokens(), 0.5, &mut rng).unwrap();
    let mut perm: Vec<usize> = (0..plan.visible.len()).collect();
    rng.shuffle(&mut perm);
    let shuffled: Vec<usize> = perm.iter().map(|&i| plan.visible[i]).collect();
    let a = encode(&vit, &patches, &[plan.visible.clone()], None);
    let b = encode(&vit, &patches, &[shuffled], None);
    let k = cfg.dim;
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..k {
            let (x, y) = (a.data()[src * k + j], b.data()[row * k + j]);
            assert!((x - y).abs() < 1e-12, "row {row}: {x} vs {y}");
        }
    }
}

#[test]
fn tbm_overhead_matches_the_layer_formula() {
    let cfg = EncoderConfig::default();
    let k = cfg.dim;
    let h = k / 2;
    let per = k + (k * h + h) + (h * h + h) + (h * k + k);
    let with = Vit::new(cfg.clone(), 1.0, 0).unwrap();
    let without = Vit::new(EncoderConfig { tbm_layers: vec![], ..cfg.clone() }, 1.0, 0).unwrap();
    let (base, tbm) = with.param_counts();
    assert_eq!(tbm, cfg.tbm_layers.len() * per);
    assert_eq!(base, without.store.numel());
    assert_eq!(without.param_counts().1, 0);
    // λ changes the loss only, never the architecture.
    let zero = Vit::new(cfg, 0.0, 0).unwrap();
    assert_eq!(zero.store.numel(), with.store.numel());
    let ratio = tbm as f64 / with.encoder_param_count() as f64;
    eprintln!("TBM overhead: {tbm} params, {:.1}% of the encoder", 100.0 * ratio);
}

#[test]
fn tbm_placements_both_run_and_differ() {
    use token_boost::vt::TbmPlacement;
    let cfg = common::tiny_encoder();
    let after_attn = EncoderConfig { tbm_placement: TbmPlacement::AfterAttention, ..cfg.clone() };
    let a = with_alpha(Vit::new(cfg.clone(), 1.0, 5).unwrap(), 0.2);
    let b = with_alpha(Vit::new(after_attn, 1.0, 5).unwrap(), 0.2);
    let images = Tensor::uniform(&[1, 1, 8, 8], 1.0, &mut Rng::new(0, 0));
    let patches = patchify(&images, cfg.patch).unwrap();
    let all = vec![(0..cfg.tokens()).collect::<Vec<_>>()];
    assert!(!encode(&a, &patches, &all, Some(1)).bit_eq(&encode(&b, &patches, &all, Some(1))));
}
