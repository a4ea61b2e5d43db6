use dptail_core::datagen::{build_noise_model, build_signals, sample_dataset, BaseDist, Dataset, NoiseModel, SignalSet};
use dptail_core::dp_optimizer::{train, DPConfig, Mode};
use dptail_core::evaluation::{
    accuracy, alignment_metrics, diagnostics, longtail_error, longtail_partition, longtail_scores, predictions,
    select_by_score, test_error, threshold_for_fraction,
};
use dptail_core::model::{init_weights, predict, ModelWeights};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn problem(k: usize, d: usize, per_class: usize, seed: u64) -> (SignalSet, NoiseModel, Dataset) {
    let sig = build_signals(k, d, &vec![0.5; k], seed).unwrap();
    let noise = build_noise_model(&sig, 20.0, BaseDist::GaussianUnit, &vec![per_class; k]).unwrap();
    let data = sample_dataset(&sig, &noise, &vec![per_class; k], seed + 1).unwrap();
    (sig, noise, data)
}

fn dp_cfg(mode: Mode) -> DPConfig {
    DPConfig {
        mode,
        clip_c: 1.0,
        sigma_n: None,
        epsilon: 8.0,
        delta_dp: 1e-5,
        eta: 0.05,
        batch: 16,
        epochs: 5,
        seed: 1,
        trace_every: 0,
    }
}

#[test]
fn alignment_examples() {
    let (sig, _, data) = problem(5, 40, 4, 1);
    let zero = ModelWeights::zeros(5, 3, 40);
    let a = alignment_metrics(&zero, &data, &sig).unwrap();
    assert_eq!((a.signal_align, a.noise_align), (0.0, 0.0));

    let mut aligned = ModelWeights::zeros(5, 3, 40);
    for k in 0..5 {
        aligned.neuron_mut(k, 0).copy_from_slice(sig.direction(k));
    }
    let a = alignment_metrics(&aligned, &data, &sig).unwrap();
    assert!((a.signal_align - 0.5).abs() <= 1e-12, "{}", a.signal_align);
}

#[test]
fn alignment_matches_double_loop() {
    let (sig, _, data) = problem(3, 16, 6, 2);
    let w = init_weights(3, 5, 16, 0.3, 9).unwrap();
    let n = data.len() as f64;
    let (mut best_s, mut best_n) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in 0..w.width {
        let (mut s, mut z) = (0.0, 0.0);
        for x in &data.samples {
            s += dot(w.neuron(x.label, r), &sig.signals[x.label]);
            z += dot(w.neuron(x.label, r), x.noise_patch().unwrap());
        }
        best_s = best_s.max(s);
        best_n = best_n.max(z);
    }
    let a = alignment_metrics(&w, &data, &sig).unwrap();
    assert!((a.signal_align - best_s / n).abs() <= 1e-10);
    assert!((a.noise_align - best_n / n).abs() <= 1e-10);
}

#[test]
fn test_error_matches_confusion_oracle() {
    let (_, _, data) = problem(4, 20, 10, 3);
    for seed in 0..5 {
        let w = init_weights(4, 3, 20, 1.0, seed).unwrap();
        let mut confusion = [[0usize; 4]; 4];
        for x in &data.samples {
            confusion[x.label][predict(&w, x).unwrap()] += 1;
        }
        let mut errs = Vec::new();
        for (k, row) in confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            errs.push(1.0 - row[k] as f64 / total as f64);
        }
        let report = test_error(&w, &data).unwrap();
        for (got, want) in report.per_class_error.iter().zip(&errs) {
            assert!((got.unwrap() - want).abs() <= 1e-15);
        }
        let macro_err = errs.iter().sum::<f64>() / 4.0;
        assert!((report.overall_error - macro_err).abs() <= 1e-15);
        assert!((accuracy(&w, &data).unwrap() - (1.0 - macro_err)).abs() <= 1e-15);
        assert_eq!(predictions(&w, &data).unwrap(), data.samples.iter().map(|x| predict(&w, x).unwrap()).collect::<Vec<_>>());
    }
}

#[test]
fn test_error_trivial_cases() {
    let (_, _, data) = problem(5, 30, 10, 4);
    let zero = ModelWeights::zeros(5, 2, 30);
    assert!((test_error(&zero, &data).unwrap().overall_error - 0.8).abs() <= 1e-12);

    // Absent classes report no error and drop out of the macro average.
    let only_first = data.subset(&(0..data.len()).filter(|&i| data.samples[i].label == 0).collect::<Vec<_>>());
    let report = test_error(&zero, &only_first).unwrap();
    assert_eq!(report.per_class_error[0], Some(0.0));
    assert!(report.per_class_error[1..].iter().all(Option::is_none));
    assert_eq!(report.overall_error, 0.0);
}

#[test]
fn longtail_partition_extremes_and_nesting() {
    let (sig, noise, train_set) = problem(3, 30, 20, 5);
    let test_set = sample_dataset(&sig, &noise, &[70, 70, 60], 77).unwrap();
    assert_eq!(test_set.len(), 200);
    let w0 = init_weights(3, 6, 30, 0.05, 3).unwrap();
    let (w, _) = train(&w0, &train_set, &dp_cfg(Mode::Clean)).unwrap();

    let scores = longtail_scores(&w, &test_set, &noise).unwrap();
    let activated: Vec<usize> = scores.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i).collect();
    assert_eq!(longtail_partition(&w, &test_set, &noise, 0.0).unwrap(), activated);
    assert!(longtail_partition(&w, &test_set, &noise, f64::MAX).unwrap().is_empty());
    assert!(longtail_partition(&w, &test_set, &noise, -1.0).is_err());

    let grid: Vec<f64> = (0..40).map(|i| i as f64 * 0.05).collect();
    let sets: Vec<Vec<usize>> = grid.iter().map(|&l| longtail_partition(&w, &test_set, &noise, l).unwrap()).collect();
    for pair in sets.windows(2) {
        assert!(pair[1].iter().all(|i| pair[0].contains(i)), "selection not antitone");
    }

    // Brute-force score: aggregate activated class neurons, apply the dense A_y.
    for (i, x) in test_set.samples.iter().enumerate().take(50) {
        let xi = x.noise_patch().unwrap();
        let mut agg = vec![0.0; 30];
        let mut any = false;
        for r in 0..w.width {
            if dot(w.neuron(x.label, r), xi) > 0.0 {
                any = true;
                agg.iter_mut().zip(w.neuron(x.label, r)).for_each(|(a, b)| *a += b);
            }
        }
        match scores[i] {
            None => assert!(!any),
            Some(s) => {
                let a = noise.materialize(x.label);
                let proj = a.transpose() * nalgebra::DVector::from_column_slice(&agg);
                let want = dot(&agg, xi) / proj.norm();
                assert!((s - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    let l = threshold_for_fraction(&scores, 0.2).unwrap();
    let chosen = select_by_score(&scores, l);
    assert!(chosen.len() >= 40 || chosen.len() == activated.len());
    let err = longtail_error(&w, &test_set, &chosen).unwrap();
    let oracle = chosen.iter().filter(|&&i| predict(&w, &test_set.samples[i]).unwrap() != test_set.samples[i].label).count()
        as f64
        / chosen.len() as f64;
    assert_eq!(err, oracle);
    assert!(longtail_error(&w, &test_set, &[]).is_err());
    let all: Vec<usize> = (0..test_set.len()).collect();
    assert!((longtail_error(&w, &test_set, &all).unwrap() - (1.0 - accuracy(&w, &test_set).unwrap())).abs() < 0.02);
}

#[test]
fn clipping_factor_example() {
    let sig = build_signals(5, 1000, &[0.5; 5], 1).unwrap();
    let noise = build_noise_model(&sig, 1400.0, BaseDist::GaussianUnit, &[100; 5]).unwrap();
    let cfg = DPConfig {
        batch: 256,
        epochs: 20,
        eta: 0.002,
        ..dp_cfg(Mode::Dp)
    };
    let b = diagnostics(&sig, &noise, &[100; 5], &cfg, 100, 1.0, 0.1).unwrap();
    let lam = noise.spike_vals[0];
    // Λ_k uses ‖A_k‖_F = √(λ² + 0.25·r_s).
    let frob_a = (lam * lam + 0.25 * 990.0).sqrt();
    assert!((b.clipping_factor[0] - 1.0 / (0.5 + frob_a)).abs() <= 1e-15);
    // The quoted 9.08e-5 comes from plugging ‖A_kᵀA_k‖_F ≈ 11013.9 into the same formula.
    let quoted = 1.0 / (0.5 + noise.frob_ata(0, 0));
    assert!((noise.frob_ata(0, 0) - 11013.9).abs() < 2.0);
    assert!((quoted - 9.08e-5).abs() < 5e-8);
    for row in [&b.thm46_stmt1_exponent_arg, &b.thm46_stmt2_exponent_arg, &b.thm45_floor] {
        assert!(row.iter().all(|v| v.is_finite()));
    }
    assert!((b.snr[0][1] - 0.3178).abs() < 5e-4);
}

#[test]
fn diagnostics_zero_noise_reduces_to_clean_form() {
    let (sig, noise, _) = problem(3, 30, 10, 6);
    let cfg = DPConfig {
        sigma_n: Some(0.0),
        clip_c: 1e12,
        ..dp_cfg(Mode::Dp)
    };
    let b = diagnostics(&sig, &noise, &[10; 3], &cfg, 4, 1.0, 0.1).unwrap();
    for k in 0..3 {
        let lam = 1e12 / (0.5 + noise.frob_a(k));
        assert!((b.clipping_factor[k] - lam).abs() <= 1e-12 * lam);
        let cross = (10f64).sqrt() * noise.frob_ata(k, (k + 1) % 3);
        assert!((b.thm46_stmt1_exponent_arg[k] - 10.0 * lam * 0.25 / cross).abs() <= 1e-9 * b.thm46_stmt1_exponent_arg[k]);
    }
}

#[test]
fn diagnostics_monotone_over_grids() {
    let sig = build_signals(5, 1000, &[0.5; 5], 1).unwrap();
    let noise = build_noise_model(&sig, 1400.0, BaseDist::GaussianUnit, &[100; 5]).unwrap();
    let base = DPConfig {
        batch: 256,
        epochs: 20,
        eta: 0.002,
        ..dp_cfg(Mode::Dp)
    };
    let eval = |sigma: f64, c: f64| {
        diagnostics(&sig, &noise, &[100; 5], &DPConfig { sigma_n: Some(sigma), clip_c: c, ..base.clone() }, 100, 1.0, 0.1).unwrap()
    };
    let sigmas: Vec<f64> = (0..10).map(|i| 1e-4 * 2f64.powi(i)).collect();
    let by_sigma: Vec<_> = sigmas.iter().map(|&s| eval(s, 1.0)).collect();
    for pair in by_sigma.windows(2) {
        for k in 0..5 {
            assert!(pair[1].thm46_stmt1_exponent_arg[k] <= pair[0].thm46_stmt1_exponent_arg[k]);
            assert!(pair[1].thm46_stmt2_exponent_arg[k] <= pair[0].thm46_stmt2_exponent_arg[k]);
            assert!(pair[1].thm45_floor[k] >= pair[0].thm45_floor[k]);
        }
    }
    let clips: Vec<f64> = (0..10).map(|i| 0.1 * 2f64.powi(i)).collect();
    let by_c: Vec<_> = clips.iter().map(|&c| eval(1e-3, c)).collect();
    for pair in by_c.windows(2) {
        for k in 0..5 {
            assert!(pair[1].clipping_factor[k] >= pair[0].clipping_factor[k]);
            assert!(pair[1].thm46_stmt1_exponent_arg[k] >= pair[0].thm46_stmt1_exponent_arg[k]);
            assert!(pair[1].thm46_stmt2_exponent_arg[k] >= pair[0].thm46_stmt2_exponent_arg[k]);
        }
    }
}

#[test]
fn zero_signal_floor_is_infinite() {
    let sig = build_signals(2, 10, &[0.0, 1.0], 1).unwrap();
    let noise = build_noise_model(&sig, 3.0, BaseDist::GaussianUnit, &[5; 2]).unwrap();
    let b = diagnostics(&sig, &noise, &[5; 2], &dp_cfg(Mode::Dp), 3, 1.0, 0.1).unwrap();
    assert_eq!(b.thm45_floor[0], f64::INFINITY);
    assert!(b.thm45_floor[1].is_finite());
    assert!(diagnostics(&sig, &noise, &[5; 2], &dp_cfg(Mode::Dp), 3, 1.0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_is_antitone(scores in prop::collection::vec(prop::option::of(0.0f64..10.0), 0..80), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let big = select_by_score(&scores, lo);
        let small = select_by_score(&scores, hi);
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn fraction_threshold_selects_at_least_fraction(scores in prop::collection::vec(prop::option::of(0.0f64..10.0), 1..80), f in 0.01f64..1.0) {
        if let Some(l) = threshold_for_fraction(&scores, f) {
            let defined = scores.iter().flatten().count();
            let want = ((f * scores.len() as f64).ceil() as usize).min(defined);
            prop_assert!(select_by_score(&scores, l).len() >= want);
        } else {
            prop_assert!(scores.iter().all(Option::is_none));
        }
    }
}
