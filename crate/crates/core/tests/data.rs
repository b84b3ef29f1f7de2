use token_boost::data::{
    apply, corrupt, generate_dataset, CorruptionKind, CorruptionSpec, DataSpec, Severity, Split, SyntheticDataset,
};
use token_boost::exec::ExecMode;
use token_boost::tensor::Rng;
use token_boost::vt::sample_mask;

fn small(split: Split, n: usize) -> SyntheticDataset {
    generate_dataset(&DataSpec::new(n, 10, split), 3, ExecMode::Parallel).unwrap()
}

#[test]
fn splits_use_disjoint_streams() {
    let (tr, te) = (small(Split::Train, 50), small(Split::Test, 50));
    for i in 0..50 {
        assert_eq!(tr.labels[i], te.labels[i]);
        assert_ne!(tr.image(i), te.image(i), "image {i} repeated across splits");
    }
    assert!(tr.labels.iter().all(|&l| l < 10));
    assert!(tr.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn execution_mode_does_not_change_data() {
    let spec = DataSpec::new(64, 10, Split::Train);
    let a = generate_dataset(&spec, 9, ExecMode::Parallel).unwrap();
    let b = generate_dataset(&spec, 9, ExecMode::Sequential).unwrap();
    assert!(a.images.bit_eq(&b.images));
    let c = CorruptionSpec::all(0.5);
    let ca = a.corrupted(&c, 1, 4, ExecMode::Parallel).unwrap();
    let cb = b.corrupted(&c, 1, 4, ExecMode::Sequential).unwrap();
    assert!(ca.images.bit_eq(&cb.images));
}

#[test]
fn zero_probability_copy_is_bit_identical() {
    let d = small(Split::Test, 40);
    let c = d.corrupted(&CorruptionSpec::all(0.0), 5, 0, ExecMode::Parallel).unwrap();
    assert!(c.images.bit_eq(&d.images));
    assert_eq!(c.labels, d.labels);
}

#[test]
fn distortion_is_monotone_in_severity() {
    // Mean per-pixel L2 distortion over 200 images (same clean images and
    // the same stream for each level); must not decrease with severity.
    let d = small(Split::Train, 200);
    for kind in CorruptionKind::ALL {
        let mut prev = 0.0;
        for sev in 1..=5u8 {
            let mut total = 0.0;
            for i in 0..d.len() {
                let mut img = d.image(i).to_vec();
                apply(&mut img, 1, 32, kind, sev, &mut Rng::new(i as u64, 11));
                total += img.iter().zip(d.image(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.len() as f64;
            }
            let mean = total / d.len() as f64;
            assert!(mean >= prev, "{kind}: severity {sev} distortion {mean:.5} < {prev:.5}");
            prev = mean;
        }
        assert!(prev > 0.0, "{kind} never changes pixels");
    }
}

#[test]
fn gate_kind_and_severity_frequencies() {
    // 20000 draws: apply rate ≈ p, kinds and severities uniform (each
    // binomial proportion within 4.5 standard errors).
    let n = 20_000;
    let p = 0.3;
    let spec = CorruptionSpec::new(CorruptionKind::ALL.to_vec(), Severity::Uniform, p).unwrap();
    let mut applied = 0usize;
    let mut kinds = [0usize; 6];
    let mut sevs = [0usize; 5];
    for i in 0..n {
        let mut img = vec![0.5; 16];
        if let Some(a) = corrupt(&mut img, 1, 4, &spec, &mut Rng::new(i as u64, 1)) {
            applied += 1;
            kinds[CorruptionKind::ALL.iter().position(|&k| k == a.kind).unwrap()] += 1;
            sevs[(a.severity - 1) as usize] += 1;
        }
    }
    let within = |count: usize, total: usize, q: f64| {
        let se = (q * (1.0 - q) / total as f64).sqrt();
        ((count as f64 / total as f64) - q).abs() < 4.5 * se
    };
    assert!(within(applied, n, p), "apply rate {}", applied as f64 / n as f64);
    for (i, &k) in kinds.iter().enumerate() {
        assert!(within(k, applied, 1.0 / 6.0), "kind {i}: {k} of {applied}");
    }
    for (i, &s) in sevs.iter().enumerate() {
        assert!(within(s, applied, 0.2), "severity {}: {s} of {applied}", i + 1);
    }
}

#[test]
fn every_token_is_masked_at_the_target_rate() {
    // T = 16, ratio 0.75 → 12 masked per plan; each position should be
    // masked in 75% of 8000 plans (binomial, 4.5 SE).
    let (t, n) = (16, 8000);
    let mut counts = vec![0usize; t];
    let mut rng = Rng::new(0, 2);
    for _ in 0..n {
        let plan = sample_mask(t, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 12);
        for &i in &plan.masked {
            counts[i] += 1;
        }
    }
    let se = (0.75f64 * 0.25 / n as f64).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / n as f64;
        assert!((f - 0.75).abs() < 4.5 * se, "token {i} masked at rate {f}");
    }
}

#[test]
fn datasets_round_trip_through_containers() {
    let d = small(Split::Train, 12);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tbk");
    d.save(&p).unwrap();
    let back = SyntheticDataset::load(&p).unwrap();
    assert!(back.images.bit_eq(&d.images));
    assert_eq!(back.labels, d.labels);
    assert_eq!(back.spec, d.spec);
}
