mod common;

use common::*;
use odlm::calib::WhiteningFactor;
use odlm::compress::*;
use odlm::linalg::Mat;
use odlm::recmodel::{split_leave_last_two, Linear};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn single_truncated_value_is_the_loss() {
    for seed in 0..50 {
        let (w, x) = loss_instance(seed);
        let wf = exact_whitening(&x);
        let r = w.rows().min(w.cols()) - 1;
        if r == 0 {
            continue;
        }
        let layer = compress_layer(&w, &wf, r).unwrap();
        let sigma = layer.sigma_truncated[0];
        let loss = actual_loss(&w, &layer, &x).unwrap();
        assert!(
            (loss - sigma).abs() <= 1e-7 * sigma.max(1e-300),
            "seed {seed}: {loss} vs {sigma}"
        );
    }
}

#[test]
fn truncated_energy_is_the_squared_loss() {
    for seed in 100..150 {
        let (w, x) = loss_instance(seed);
        let wf = exact_whitening(&x);
        let full = w.rows().min(w.cols());
        let r = rng(seed).gen_range(1..=full);
        let layer = compress_layer(&w, &wf, r).unwrap();
        let loss2 = actual_loss(&w, &layer, &x).unwrap().powi(2);
        let energy: f64 = layer.sigma_truncated.iter().map(|s| s * s).sum();
        let scale = energy.max(1e-14 * frob(&w.matmul(&x)).powi(2));
        assert!((loss2 - energy).abs() <= 1e-7 * scale, "seed {seed}");
        assert!((predicted_loss(&layer.sigma_truncated).powi(2) - energy).abs() <= 1e-12 * scale);
    }
}

#[test]
fn full_rank_has_no_loss() {
    let (w, x) = loss_instance(7);
    let wf = exact_whitening(&x);
    let layer = compress_layer(&w, &wf, w.rows().min(w.cols())).unwrap();
    assert!(actual_loss(&w, &layer, &x).unwrap() <= 1e-8 * frob(&w.matmul(&x)));
}

#[test]
fn loss_is_monotone_in_rank() {
    for seed in 0..10 {
        let (w, x) = loss_instance(200 + seed);
        let wf = exact_whitening(&x);
        let mut prev = f64::INFINITY;
        for r in 1..=w.rows().min(w.cols()) {
            let l = actual_loss(&w, &compress_layer(&w, &wf, r).unwrap(), &x).unwrap();
            assert!(l <= prev * (1.0 + 1e-9) + 1e-12);
            prev = l;
        }
    }
}

#[test]
fn retained_values_dominate_truncated() {
    let (w, x) = loss_instance(42);
    let layer = compress_layer(&w, &exact_whitening(&x), 2).unwrap();
    let min_ret = layer
        .sigma_retained
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!(layer.sigma_truncated.iter().all(|&s| s <= min_ret));
    assert_eq!(
        layer.sigma_retained.len() + layer.sigma_truncated.len(),
        w.rows().min(w.cols())
    );
}

#[test]
fn matches_independent_pipeline() {
    let mut g = rng(12);
    let w = random_mat(12, 10, &mut g);
    let x = random_mat(10, 40, &mut g);
    let layer = compress_layer(&w, &exact_whitening(&x), 4).unwrap();
    let (oracle, sigma) = reference_compress(&w, &x, 0.0, 4);
    assert!(frob(&layer.a.matmul(&layer.b).sub(&oracle)) <= 1e-9);
    for (a, b) in layer.sigma_retained.iter().zip(&sigma) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn budget_holds_over_grid() {
    for cr in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
        for m in 1..=96 {
            for n in 1..=96 {
                let r = target_rank(m, n, cr);
                let budget = cr * (m * n) as f64;
                assert!((r * (m + n)) as f64 <= budget);
                assert!(budget < ((r + 1) * (m + n)) as f64 + (m * n) as f64 / (m + n) as f64);
            }
        }
    }
    assert_eq!(target_rank(64, 64, 0.5), 16);
    assert_eq!(target_rank(256, 64, 0.5), 25);
}

#[test]
fn update_is_stationary_by_finite_differences() {
    for seed in 0..5 {
        let (w, layer, xp) = perturbed_instance(seed);
        let up = progressive_update(&w, &layer, &xp, 0.0).unwrap();
        assert!(up.residual_after <= up.residual_before + 1e-9);
        let inv: Vec<f64> = layer.sigma_retained.iter().map(|s| 1.0 / s).collect();
        let u = up.layer.a.scale_cols(&inv);
        let t = w.matmul(&xp);
        let d = design(&layer, &xp);
        let g = fd_gradient_max(&t, &d, &u);
        assert!(g <= 1e-6, "seed {seed}: {g}");
    }
}

#[test]
fn update_matches_gradient_descent_oracle() {
    let (w, layer, xp) = perturbed_instance(99);
    let up = progressive_update(&w, &layer, &xp, 0.0).unwrap();
    let t = w.matmul(&xp);
    let d = design(&layer, &xp);
    let u_gd = gd_least_squares(&t, &d, 1e-12, 500_000);
    let res_gd = frob(&t.sub(&u_gd.matmul(&d)));
    assert!(
        (up.residual_after - res_gd).abs() <= 1e-6,
        "{} vs {res_gd}",
        up.residual_after
    );
    // same thing through the Gram route
    let ug = progressive_update_gram(&w, &layer, &xp.matmul_t(&xp), Some(0.0)).unwrap();
    assert!((ug.residual_after - res_gd).abs() <= 1e-6);
}

#[test]
fn update_on_same_data_keeps_factors() {
    let mut g = rng(5);
    let w = random_mat(8, 8, &mut g);
    let x = random_mat(8, 30, &mut g);
    let layer = compress_layer(&w, &exact_whitening(&x), 3).unwrap();
    let up = progressive_update(&w, &layer, &x, 0.0).unwrap();
    assert!(up.layer.a.max_abs_diff(&layer.a) <= 1e-6 * (1.0 + layer.a.max_abs()));
    assert!((up.residual_after - up.residual_before).abs() <= 1e-9 * (1.0 + up.residual_before));
}

#[test]
fn full_rank_model_reproduces_logits() {
    let (ds, model) = small_trained(40, 16, 8, 1, 3);
    let split = split_leave_last_two(&ds);
    let cfg = CompressionConfig {
        progressive: false,
        rank_override: Some(usize::MAX),
        calib_samples: 40,
        ..CompressionConfig::default()
    };
    let (compressed, _) = compress_model(&model, &split.train, &cfg).unwrap();
    assert!(model
        .layer_ids()
        .iter()
        .all(|&id| matches!(compressed.linear(id), Linear::Factored(_))));
    for case in split.test.iter().take(10) {
        let a = model.score_next(&case.context).unwrap();
        let b = compressed.score_next(&case.context).unwrap();
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{diff}");
    }
}

#[test]
fn progressive_beats_one_shot_on_compressed_inputs() {
    let (ds, model) = small_trained(60, 16, 16, 2, 4);
    let split = split_leave_last_two(&ds);
    let base = CompressionConfig {
        cr: 0.3,
        calib_samples: 60,
        ..CompressionConfig::default()
    };
    let (_, prog) = compress_model(
        &model,
        &split.train,
        &CompressionConfig {
            progressive: true,
            ..base.clone()
        },
    )
    .unwrap();
    let (_, once) = compress_model(
        &model,
        &split.train,
        &CompressionConfig {
            progressive: false,
            ..base
        },
    )
    .unwrap();
    let (p, o) = (
        prog.total_compressed_input_loss(),
        once.total_compressed_input_loss(),
    );
    assert!(p <= o, "progressive {p} vs one-shot {o}");
}

#[test]
fn report_is_reproducible() {
    let (ds, model) = small_trained(30, 16, 8, 1, 5);
    let split = split_leave_last_two(&ds);
    let cfg = CompressionConfig {
        calib_samples: 20,
        seed: 9,
        ..CompressionConfig::default()
    };
    let strip = |mut r: CompressionReport| {
        r.timings = StageTimings {
            calibration_ms: 0.0,
            compression_ms: 0.0,
            update_ms: 0.0,
            total_ms: 0.0,
        };
        serde_json::to_vec(&r).unwrap()
    };
    let (m1, r1) = compress_model(&model, &split.train, &cfg).unwrap();
    let (m2, r2) = compress_model(&model, &split.train, &cfg).unwrap();
    assert_eq!(strip(r1.clone()), strip(r2));
    assert_eq!(m1, m2);
    for l in &r1.layers {
        assert!(l.predicted_loss.unwrap() >= 0.0 && l.actual_loss.unwrap() >= 0.0);
        let r = l.rank.unwrap();
        assert_eq!(r, target_rank(l.m, l.n, cfg.cr));
        assert!((r * (l.m + l.n)) as f64 <= cfg.cr * (l.m * l.n) as f64);
    }
}

#[test]
fn identity_whitening_is_plain_svd() {
    let w = Mat::from_diag(&[5.0, 3.0, 1.0]);
    let wf = WhiteningFactor::identity(layer0(), 3);
    let l = compress_layer(&w, &wf, 2).unwrap();
    assert!(
        l.a.matmul(&l.b)
            .max_abs_diff(&Mat::from_diag(&[5.0, 3.0, 0.0]))
            <= 1e-12
    );
    assert!((actual_loss(&w, &l, &Mat::identity(3)).unwrap() - 1.0).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_factored_forward_is_associative(seed in any::<u64>()) {
        let (w, x) = loss_instance(seed);
        let r = (w.rows().min(w.cols()) / 2).max(1);
        let layer = compress_layer(&w, &exact_whitening(&x), r).unwrap();
        let v: Vec<f64> = x.col(0);
        let two_step = layer.a.matvec(&layer.b.matvec(&v));
        let fused = layer.a.matmul(&layer.b).matvec(&v);
        let scale: f64 = fused.iter().map(|z| z * z).sum::<f64>().sqrt().max(1e-300);
        let diff: f64 = two_step.iter().zip(&fused).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-9 * scale);
    }

    #[test]
    fn prop_target_rank_is_budget_floor(m in 1usize..600, n in 1usize..600, cr in 0.01f64..0.99) {
        let r = target_rank(m, n, cr);
        let budget = cr * (m * n) as f64;
        prop_assert!((r * (m + n)) as f64 <= budget);
        prop_assert!((((r + 1) * (m + n)) as f64) > budget);
    }

    #[test]
    fn prop_update_never_hurts(seed in any::<u64>()) {
        let (w, layer, xp) = perturbed_instance(seed);
        let up = progressive_update(&w, &layer, &xp, 0.0).unwrap();
        prop_assert!(up.residual_after <= up.residual_before + 1e-9);
    }
}
