use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use token_boost::data::{apply, corrupt, CorruptionKind, CorruptionSpec, Severity};
use token_boost::tbm::{alpha_effective, boost_identity_residual, tbm_forward, tbm_recon_loss, Denoiser, Noise, TbmState};
use token_boost::tensor::{read_container, write_container, AdamW, Container, CosineSchedule, Graph, OptimState, ParamStore, Rng, Tensor};
use token_boost::theory::{GaussianFeatureModel, LinearTheoryModel};
use token_boost::train::{stats, ExperimentConfig};
use token_boost::vt::{masked_count, patchify, sample_mask, unpatchify};

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(&shape, 1.0, &mut Rng::new(seed, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn length_matches_shape(shape in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert_eq!(Tensor::zeros(&shape).len(), n);
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n + extra]).is_err());
        prop_assert!(Tensor::new(shape, vec![0.0; n]).is_ok());
    }

    #[test]
    fn matmul_matches_naive_loops(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = tensor(vec![m, k], seed);
        let b = tensor(vec![k, n], seed ^ 1);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(rows in 1usize..4, cols in 1usize..6, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = tensor(vec![rows, cols], seed);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x).unwrap(), g.constant(shifted).unwrap());
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for r in 0..rows {
            let row = &g.value(sa).data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..4, cols in 2usize..8, seed in any::<u64>()) {
        let x = tensor(vec![rows, cols], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let gamma = g.constant(Tensor::full(&[cols], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[cols])).unwrap();
        let y = g.layer_norm(xv, gamma, beta).unwrap();
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64)
        };
        for r in 0..rows {
            let (_, var_in) = moments(&x.data()[r * cols..(r + 1) * cols]);
            let (mean, var) = moments(&g.value(y).data()[r * cols..(r + 1) * cols]);
            prop_assert!(mean.abs() < 1e-10);
            // Output variance is var / (var + ε) with ε = 1e-5.
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-10);
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = |s: u64, id: u64| { let mut r = Rng::new(s, id); (0..8).map(|_| r.next_u64()).collect::<Vec<_>>() };
        prop_assert_eq!(draw(seed, stream), draw(seed, stream));
        prop_assert_ne!(draw(seed, stream), draw(seed, stream.wrapping_add(1)));
    }

    #[test]
    fn adamw_keeps_moment_shapes_and_counts_steps(steps in 1u64..6, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        store.add("w", tensor(vec![3, 2], seed), true);
        store.add("b", tensor(vec![2], seed ^ 7), false);
        let mut st = OptimState::new(&store, CosineSchedule { base_lr: 1e-2, total_steps: 10 });
        let opt = AdamW::default();
        for s in 0..steps {
            let grads: Vec<Vec<f64>> = store.iter().map(|p| p.value.data().to_vec()).collect();
            opt.step(&mut store, &grads, &mut st).unwrap();
            prop_assert_eq!(st.step, s + 1);
        }
        for (p, (m, v)) in store.iter().zip(st.m.iter().zip(&st.v)) {
            prop_assert_eq!(m.len(), p.value.len());
            prop_assert_eq!(v.len(), p.value.len());
        }
    }

    #[test]
    fn container_round_trips_bit_exactly(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..4), seed in any::<u64>()) {
        let mut c = Container::new(serde_json::json!({ "seed": seed }));
        for (i, s) in shapes.iter().enumerate() {
            c.push(format!("t{i}"), tensor(s.clone(), seed.wrapping_add(i as u64)));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tbk");
        write_container(&p, &c).unwrap();
        let back = read_container(&p).unwrap();
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
        for i in 0..shapes.len() {
            let name = format!("t{i}");
            prop_assert!(back.get(&name).unwrap().bit_eq(c.get(&name).unwrap()));
        }
    }

    #[test]
    fn patchify_round_trips(b in 1usize..3, c in prop::sample::select(vec![1usize, 3]), grid in 1usize..4, patch in 1usize..4, seed in any::<u64>()) {
        let size = grid * patch;
        let img = tensor(vec![b, c, size, size], seed);
        let tok = patchify(&img, patch).unwrap();
        prop_assert_eq!(tok.shape(), &[b, grid * grid, patch * patch * c][..]);
        let back = unpatchify(&tok, patch, c, size, size).unwrap();
        prop_assert!(back.bit_eq(&img));
    }

    #[test]
    fn mask_plans_partition_tokens(t in 1usize..80, ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let plan = sample_mask(t, ratio, &mut Rng::new(seed, 2)).unwrap();
        let want = (ratio * t as f64).round() as usize;
        prop_assert_eq!(plan.masked.len(), masked_count(t, ratio));
        prop_assert_eq!(plan.masked.len(), want);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..t).collect::<Vec<_>>());
    }

    #[test]
    fn corruption_preserves_shape_and_range(kind in 0usize..6, sev in 1u8..=5, seed in any::<u64>()) {
        let mut r = Rng::new(seed, 3);
        let mut img: Vec<f64> = (0..3 * 8 * 8).map(|_| r.uniform()).collect();
        let before = img.len();
        apply(&mut img, 3, 8, CorruptionKind::ALL[kind], sev, &mut r);
        prop_assert_eq!(img.len(), before);
        prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_and_zero_probability_leave_pixels_alone(sev in 1u8..=5, seed in any::<u64>()) {
        let mut r = Rng::new(seed, 3);
        let img: Vec<f64> = (0..64).map(|_| r.uniform()).collect();
        let mut a = img.clone();
        apply(&mut a, 1, 8, CorruptionKind::Identity, sev, &mut r);
        prop_assert_eq!(&a, &img);
        let spec = CorruptionSpec::new(CorruptionKind::ALL.to_vec(), Severity::Fixed(sev), 0.0).unwrap();
        let mut b = img.clone();
        prop_assert!(corrupt(&mut b, 1, 8, &spec, &mut r).is_none());
        prop_assert_eq!(&b, &img);
    }

    #[test]
    fn alpha_effective_is_nonnegative_relu(raw in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let mut store = ParamStore::new();
        let k = raw.len();
        let st = TbmState::new(&mut store, "0", k, (k / 2).max(1), 1.0, &mut Rng::new(0, 0)).unwrap();
        store.get_mut(st.alpha_raw).value.data_mut().copy_from_slice(&raw);
        let eff = alpha_effective(&store, &st);
        for (e, r) in eff.iter().zip(&raw) {
            prop_assert!(*e >= 0.0);
            prop_assert_eq!(*e, r.max(0.0));
        }
    }

    #[test]
    fn boosted_output_is_two_fhat_minus_i(b in 1usize..3, t in 1usize..4, k in 2usize..7, mc in 1usize..3, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed, 0);
        let st = TbmState::new(&mut store, "0", k, k / 2, 1.0, &mut rng).unwrap();
        for x in store.get_mut(st.alpha_raw).value.data_mut() {
            *x = rng.uniform();
        }
        let mut g = Graph::new();
        let bound = g.bind(&store, true).unwrap();
        let f = g.constant(tensor(vec![b, t, k], seed ^ 5)).unwrap();
        let (_, tr) = tbm_forward(&mut g, &bound, &st, f, Noise::Sample(&mut rng), mc).unwrap();
        prop_assert!(boost_identity_residual(&g, &tr) < 1e-14);
        let shape = g.shape(tr.f).to_vec();
        for v in [tr.q, tr.i, tr.f_hat, tr.r_hat] {
            prop_assert_eq!(g.shape(v), &shape[..]);
        }
    }

    #[test]
    fn identity_denoiser_passes_noisy_input_through(k in 1usize..6, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed, 0);
        let mut st = TbmState::new(&mut store, "0", k, 1, 1.0, &mut rng).unwrap();
        st.g = Denoiser::Identity;
        store.get_mut(st.alpha_raw).value.data_mut().fill(0.4);
        let mut g = Graph::new();
        let bound = g.bind(&store, false).unwrap();
        let f = g.constant(tensor(vec![2, k], seed)).unwrap();
        let (r, tr) = tbm_forward(&mut g, &bound, &st, f, Noise::Sample(&mut rng), 1).unwrap();
        for (a, b) in g.value(r).data().iter().zip(g.value(tr.i).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_loss_rejects_negative_lambda(lambda in -5.0f64..-1e-9) {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        prop_assert!(tbm_recon_loss(&mut g, f, f, lambda).is_err());
    }

    #[test]
    fn mse_formulas_are_ordered(nu in 1usize..5, nv in 1usize..5, gamma in 0.0f64..1.0, sigma in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = Rng::new(seed, 0);
        let mut beta = DMatrix::from_fn(nv, nu, |_, _| r.normal());
        beta[(0, 0)] = 0.5;
        let m = LinearTheoryModel::new(beta, DVector::zeros(nv), gamma, sigma).unwrap();
        prop_assert!(m.mse_corrupted_formula() >= m.mse_boosted_formula());
        prop_assert!(m.mse_boosted_formula() >= m.mse_clean_formula());
        if sigma > 1e-3 {
            prop_assert!(m.mse_corrupted_formula() > m.mse_boosted_formula());
        }
    }

    #[test]
    fn boosting_with_matched_noise_equals_posterior_mean(mu in -2.0f64..2.0, sr in 0.1f64..3.0, w in 0.1f64..3.0, i in -10.0f64..10.0) {
        // Independent conjugate-Gaussian algebra: with α = ω,
        // 2·E[F|I] − I = μ + σ_R²/(σ_R² + 2ω²)·(I − μ) = E[R|I].
        let m = GaussianFeatureModel::new(mu, sr, w, w).unwrap();
        let v = sr * sr + 2.0 * w * w;
        let e_f = mu + (sr * sr + w * w) / v * (i - mu);
        let e_r = mu + sr * sr / v * (i - mu);
        prop_assert!((2.0 * e_f - i - e_r).abs() < 1e-9 * (1.0 + i.abs()));
        prop_assert!((m.boosted(i) - e_r).abs() < 1e-9 * (1.0 + i.abs()));
        prop_assert!((m.e_r_given_i(i) - e_r).abs() < 1e-9 * (1.0 + i.abs()));
    }

    #[test]
    fn paired_t_is_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 3..8), seed in any::<u64>()) {
        let mut r = Rng::new(seed, 0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1 * r.normal()).collect();
        if let (Some(x), Some(y)) = (stats::paired_t_test(&a, &b), stats::paired_t_test(&b, &a)) {
            prop_assert!((x.t + y.t).abs() < 1e-9);
            prop_assert!((x.p_two_sided - y.p_two_sided).abs() < 1e-9);
            prop_assert!((x.p_greater + y.p_greater - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_text_round_trips(lambda in 0.0f64..5.0, epochs in 1usize..500, ratio in 0.05f64..0.95, shard in 1usize..64) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("tbm.lambda", &lambda.to_string()).unwrap();
        cfg.set("pretrain.epochs", &epochs.to_string()).unwrap();
        cfg.set("mask.ratio", &ratio.to_string()).unwrap();
        cfg.set("exec.shard", &shard.to_string()).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
