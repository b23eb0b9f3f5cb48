//! Acceptance gate: one test per shipped guarantee, each printing a
//! `ACCEPT nn <name>: PASS|FAIL` line (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance -- --test-threads=1 --nocapture`
//! to see the per-criterion report in order.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use pgdudst::config::ExperimentConfig;
use pgdudst::harness;
use pgdudst_core::baseline::pgd_tv_reconstruct;
use pgdudst_core::dst::{DSTConfig, DstModel};
use pgdudst_core::gradcheck::{run_suite, standard_suite};
use pgdudst_core::metrics::{charbonnier_value, psnr_slices, ssim_2d, ssim_cube};
use pgdudst_core::optim::{lr_schedule, Adam};
use pgdudst_core::physics::{
    CodedMask, DispersionSpec, Measurement, SensingOperator, SpectralCube,
};
use pgdudst_core::rng::CounterRng;
use pgdudst_core::tensor::{Ctx, ParamSet, Tensor};
use pgdudst_core::unfold::{shifted_mask_tensor, InitScheme, UnfoldingModel};

fn report(number: usize, name: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    println!("ACCEPT {number:02} {name}: {verdict}");
    if let Err(e) = outcome {
        std::panic::resume_unwind(e);
    }
}

fn random_cube(h: usize, w: usize, b: usize, rng: &mut CounterRng) -> SpectralCube {
    let mut cube = SpectralCube::zeros(h, w, b);
    for v in cube.data_mut() {
        *v = rng.uniform();
    }
    cube
}

#[test]
fn criterion_01_operator_matches_dense_oracle() {
    report(1, "forward/adjoint vs dense oracle", || {
        let t0 = Instant::now();
        let mut rng = CounterRng::new(11, 0);
        for _ in 0..20 {
            let h = 1 + rng.below(4) as usize;
            let w = 1 + rng.below(5) as usize;
            let b = 1 + rng.below(4) as usize;
            let d = rng.below(3) as usize;
            let mask = CodedMask::random_binary(h, w, &mut rng);
            let op = SensingOperator::new(mask, DispersionSpec { step: d });
            let dense = op.dense_oracle(b).unwrap();
            let cube = random_cube(h, w, b, &mut rng);
            let x = SensingOperator::vectorize(&cube);

            let y_op = op.forward(&cube).unwrap();
            let y_dense = dense.matvec(&x);
            for (a, c) in y_op.data().iter().zip(&y_dense) {
                assert!((a - c).abs() <= 1e-12, "forward mismatch {a} vs {c}");
            }

            let mut y_rand = Measurement::zeros(y_op.height, y_op.width);
            for v in y_rand.data_mut() {
                *v = rng.uniform_in(-1.0, 1.0);
            }
            let at_op = op.adjoint(&y_rand, b).unwrap();
            let at_dense = dense.matvec_t(y_rand.data());
            for (a, c) in SensingOperator::vectorize(&at_op).iter().zip(&at_dense) {
                assert!((a - c).abs() <= 1e-12, "adjoint mismatch {a} vs {c}");
            }

            // <A x, y> == <x, A^T y>
            let lhs: f64 = y_op.data().iter().zip(y_rand.data()).map(|(a, c)| a * c).sum();
            let rhs: f64 = x
                .iter()
                .zip(SensingOperator::vectorize(&at_op))
                .map(|(a, c)| a * c)
                .sum();
            assert!((lhs - rhs).abs() <= 1e-10, "adjoint identity {lhs} vs {rhs}");
        }
        assert!(t0.elapsed().as_secs_f64() < 5.0, "oracle comparison too slow");
    });
}

#[test]
fn criterion_02_two_band_worked_example() {
    report(2, "1x2x2 d=1 measurement fixture", || {
        // Band 0 = [[1, 2]], band 1 = [[3, 4]], mask [[1, 0.5]].
        let cube =
            SpectralCube::new(1, 2, 2, vec![450.0, 650.0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = CodedMask::new(1, 2, vec![1.0, 0.5]).unwrap();
        let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
        let y = op.forward(&cube).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0, 2.0]);
    });
}

#[test]
fn criterion_03_gradient_suite_five_seeds() {
    report(3, "finite-difference gradient suite", || {
        let t0 = Instant::now();
        let reports = run_suite(standard_suite(5, true), 0).unwrap();
        for r in &reports {
            assert!(
                r.passed(),
                "{}: max rel err {:.3e} exceeds {:.0e}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
        // Primitives + composed blocks per seed, plus the two full-model
        // checks per seed.
        assert!(reports.len() >= 125, "suite shrank: {}", reports.len());
        assert!(t0.elapsed().as_secs_f64() < 600.0, "gradient suite too slow");
    });
}

#[test]
fn criterion_04_zero_init_identities() {
    report(4, "zero-init denoiser and unfolding identities", || {
        // Zero-weight denoiser with global residual: exact identity.
        let cfg = DSTConfig::toy(8);
        let model = DstModel::new(&cfg, None).unwrap();
        let mut rng = CounterRng::new(5, 0);
        let x = Tensor::constant((0..8 * 16 * 23).map(|_| rng.uniform()).collect(), &[1, 8, 16, 23]);
        let ctx = Ctx::new(&model.params);
        let (out, _) = model.net.forward(&ctx, &x, pgdudst_core::dst::no_modulation).unwrap();
        assert_eq!(out.data(), x.data());

        // Additionally beta = 0: the unfolded model returns g^0 exactly.
        let mut unfold = UnfoldingModel::new(2, &cfg, InitScheme::Zeros).unwrap();
        for p in unfold.params.iter_mut() {
            if p.name == "stage0.beta" || p.name == "stage1.beta" {
                p.value = vec![0.0];
            }
        }
        let mask = CodedMask::random_binary(16, 16, &mut rng);
        let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
        let scene = random_cube(16, 16, 8, &mut rng);
        let y = op.forward(&scene).unwrap();
        let g0 = op.initial_estimate(&y, 8).unwrap();
        let rec = unfold.reconstruct(&y, &op).unwrap();
        assert_eq!(rec.data(), g0.data());
    });
}

#[test]
fn criterion_05_plain_pgd_equivalence() {
    report(5, "zero model equals dense-oracle PGD", || {
        let cfg = DSTConfig::toy(4);
        let mut rng = CounterRng::new(21, 0);
        for k in 1..=3 {
            let model = UnfoldingModel::new(k, &cfg, InitScheme::Zeros).unwrap();
            let mask = CodedMask::random_binary(12, 12, &mut rng);
            let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
            let scene = random_cube(12, 12, 4, &mut rng);
            let y = op.forward(&scene).unwrap();

            // Dense reference: g <- g - A^T (A g - y), beta = 1, K times.
            let dense = op.dense_oracle(4).unwrap();
            let mut g = SensingOperator::vectorize(&op.initial_estimate(&y, 4).unwrap());
            for _ in 0..k {
                let resid: Vec<f64> =
                    dense.matvec(&g).iter().zip(y.data()).map(|(a, b)| a - b).collect();
                let back = dense.matvec_t(&resid);
                for (gi, bi) in g.iter_mut().zip(&back) {
                    *gi -= bi;
                }
            }
            let rec = model.reconstruct(&y, &op).unwrap();
            for (a, b) in SensingOperator::vectorize(&rec).iter().zip(&g) {
                assert!((a - b).abs() <= 1e-9, "K={k}: {a} vs {b}");
            }
        }
    });
}

/// Direct-summation SSIM oracle: same constants and window as the library,
/// but computed with naive full-window loops (no incremental tricks).
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let n = 11usize;
    let sigma = 1.5f64;
    let c = (n / 2) as f64;
    let mut win = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[i * n + j] = (-d2 / (2.0 * sigma * sigma)).exp();
            sum += win[i * n + j];
        }
    }
    for v in &mut win {
        *v /= sum;
    }
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - n) {
        for left in 0..=(w - n) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let g = win[i * n + j];
                    ma += g * a[(top + i) * w + left + j];
                    mb += g * b[(top + i) * w + left + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let g = win[i * n + j];
                    let da = a[(top + i) * w + left + j] - ma;
                    let db = b[(top + i) * w + left + j] - mb;
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_06_metric_fixtures() {
    report(6, "PSNR/SSIM/Charbonnier fixtures", || {
        let zeros = vec![0.0; 100];
        let tenth = vec![0.1; 100];
        let ones = vec![1.0; 100];
        assert!((psnr_slices(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() <= 1e-9);
        assert!((psnr_slices(&zeros, &ones, 1.0).unwrap() - 0.0).abs() <= 1e-9);

        let mut rng = CounterRng::new(33, 0);
        let cube = random_cube(16, 16, 3, &mut rng);
        assert_eq!(ssim_cube(&cube, &cube, 1.0).unwrap(), 1.0);
        // Single element: sqrt(0 + eps^2) == eps with no summation rounding.
        assert_eq!(charbonnier_value(&[0.7], &[0.7], 1e-3), 1e-3);
        let many = charbonnier_value(cube.data(), cube.data(), 1e-3);
        assert!((many - 1e-3).abs() <= 1e-15, "charbonnier mean drifted: {many}");

        let a: Vec<f64> = (0..16 * 16).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + 0.1 * rng.normal()).clamp(0.0, 1.0)).collect();
        let lib = ssim_2d(&a, &b, 16, 16, 1.0).unwrap();
        let oracle = ssim_oracle(&a, &b, 16, 16, 1.0);
        assert!((lib - oracle).abs() <= 1e-9, "ssim {lib} vs oracle {oracle}");
    });
}

#[test]
fn criterion_07_learning_smoke_test() {
    report(7, "300-step training beats both baselines", || {
        let t0 = Instant::now();
        let cfg = ExperimentConfig::toy();
        assert_eq!(cfg.stages, 2);
        assert_eq!(cfg.base_channels, 8);
        assert_eq!((cfg.scene_height, cfg.scene_width, cfg.bands), (32, 32, 8));
        assert_eq!(cfg.dispersion_step, 1);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.total_steps() <= 300);

        let ds = pgdudst_core::data::generate_toy_dataset(
            cfg.seed,
            cfg.train_scenes,
            cfg.holdout_scenes,
            cfg.scene_height,
            cfg.scene_width,
            cfg.bands,
        )
        .unwrap();
        let mask = harness::experiment_mask(&cfg);
        let d = cfg.dispersion_step;

        let (psnr_g0, _) = harness::holdout_metrics(&ds.holdout, &mask, d, |y, op| {
            op.initial_estimate(y, cfg.bands).map_err(Into::into)
        })
        .unwrap();
        let (psnr_tv, _) = harness::holdout_metrics(&ds.holdout, &mask, d, |y, op| {
            let tv = harness::tv_config(op, cfg.bands)?;
            pgd_tv_reconstruct(y, op, cfg.bands, &tv).map_err(Into::into)
        })
        .unwrap();

        let first = harness::train(&cfg, true).unwrap();
        let second = harness::train(&cfg, true).unwrap();
        assert_eq!(first.step_losses, second.step_losses, "loss curve not reproducible");

        let trained = first.rows.last().unwrap().holdout_psnr;
        assert!(
            trained >= psnr_g0 + 3.0,
            "trained {trained:.2} dB vs initial estimate {psnr_g0:.2} dB"
        );
        assert!(trained >= psnr_tv + 2.0, "trained {trained:.2} dB vs pgd-tv {psnr_tv:.2} dB");
        // Pinned regression values from the recorded seed-0 run.
        assert!(trained > 21.0, "regression: trained holdout psnr fell to {trained:.3}");
        assert!(t0.elapsed().as_secs_f64() < 1800.0, "smoke test too slow");
    });
}

#[test]
fn criterion_08_scheduler_and_optimizer() {
    report(8, "lr schedule landmarks and Adam convergence", || {
        let lr = 2e-4;
        assert!((lr_schedule(10, 110, 10, lr) - lr).abs() <= 1e-12);
        // Step 60 sits halfway through the 100-step decay phase.
        assert!((lr_schedule(60, 110, 10, lr) - lr / 2.0).abs() <= 1e-12);

        let mut params = ParamSet::new();
        params.add("x", &[1], vec![1.0]);
        let mut adam = Adam::with_defaults(&params);
        for _ in 0..100 {
            let g = vec![vec![2.0 * params.by_name("x").unwrap().value[0]]];
            adam.step(&mut params, &g, 0.1);
        }
        let x = params.by_name("x").unwrap().value[0];
        assert!(x.abs() < 0.05, "Adam left x at {x}");
    });
}

#[test]
fn criterion_09_format_round_trips() {
    report(9, "bitwise file round trips and magic rejection", || {
        use pgdudst::formats;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = CounterRng::new(77, 0);

        let cube = random_cube(6, 5, 3, &mut rng);
        let pc = dir.path().join("c.hsc");
        formats::write_cube(&pc, &cube).unwrap();
        let bytes = std::fs::read(&pc).unwrap();
        formats::write_cube(&pc, &formats::read_cube(&pc).unwrap()).unwrap();
        assert_eq!(bytes, std::fs::read(&pc).unwrap());

        let mask = CodedMask::random_binary(6, 5, &mut rng);
        let pm = dir.path().join("m.hsm");
        formats::write_mask(&pm, &mask).unwrap();
        let bytes = std::fs::read(&pm).unwrap();
        formats::write_mask(&pm, &formats::read_mask(&pm).unwrap()).unwrap();
        assert_eq!(bytes, std::fs::read(&pm).unwrap());

        let mut y = Measurement::zeros(4, 7);
        for v in y.data_mut() {
            *v = rng.uniform();
        }
        let py = dir.path().join("y.hme");
        formats::write_measurement(&py, &y).unwrap();
        let bytes = std::fs::read(&py).unwrap();
        formats::write_measurement(&py, &formats::read_measurement(&py).unwrap()).unwrap();
        assert_eq!(bytes, std::fs::read(&py).unwrap());

        let model = UnfoldingModel::new(2, &DSTConfig::toy(4), InitScheme::FullyRandom(3)).unwrap();
        let pw = dir.path().join("w.pgdw");
        harness::save_model(&pw, &model).unwrap();
        let bytes = std::fs::read(&pw).unwrap();
        harness::save_model(&pw, &harness::load_model(&pw).unwrap()).unwrap();
        assert_eq!(bytes, std::fs::read(&pw).unwrap());

        // Malformed magic through the binary: exit code 2, no output file.
        let bad = dir.path().join("bad.hme");
        std::fs::write(&bad, b"HSJUNK1\0aaaaaaaaaaaaaaaa").unwrap();
        let out = dir.path().join("should_not_exist.hsc");
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_pgdudst"))
            .args(["reconstruct", "--measurement"])
            .arg(&bad)
            .arg("--mask")
            .arg(&pm)
            .args(["--method", "pgd-tv", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(2), "{status:?}");
        assert!(!out.exists(), "output written despite bad input");
    });
}

#[test]
fn criterion_10_stage_interaction_contract() {
    report(10, "zeroed interaction halves features; first stage skips it", || {
        let cfg = DSTConfig::toy(8);
        let mut model = UnfoldingModel::new(2, &cfg, InitScheme::FullyRandom(9)).unwrap();

        // Only stages after the first carry interaction parameters.
        assert!(model.stages[0].span.is_empty());
        assert_eq!(model.stages[1].span.len(), 3);
        assert!(model.params.iter().all(|p| !p.name.starts_with("stage0.span")));

        // Zero every interaction conv: scale = sigmoid(0) = 1/2, shift = 0.
        for p in model.params.iter_mut() {
            if p.name.contains(".span") {
                p.value = vec![0.0; p.value.len()];
            }
        }
        let mut rng = CounterRng::new(4, 0);
        let ctx = Ctx::new(&model.params);
        for (scale, span) in model.stages[1].span.iter().enumerate() {
            let c = cfg.level_channels(scale);
            let rand = |rng: &mut CounterRng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
            };
            let feat = Tensor::constant(rand(&mut rng, c * 64), &[1, c, 8, 8]);
            let enc = Tensor::constant(rand(&mut rng, c * 64), &[1, c, 8, 8]);
            let dec = Tensor::constant(rand(&mut rng, c * 64), &[1, c, 8, 8]);
            let out = span.apply(&ctx, &feat, &enc, &dec).unwrap();
            let expected: Vec<f64> = feat.data().iter().map(|v| 0.5 * v).collect();
            assert_eq!(out.data(), &expected[..], "scale {scale}");
        }
        drop(ctx);

        // A single-stage pass is bit-identical to composing the stage by
        // hand with no interaction step at all.
        let single = UnfoldingModel::new(1, &cfg, InitScheme::FullyRandom(9)).unwrap();
        let mask = CodedMask::random_binary(16, 16, &mut rng);
        let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
        let scene = random_cube(16, 16, 8, &mut rng);
        let y = op.forward(&scene).unwrap();

        let via_model = single.reconstruct(&y, &op).unwrap();
        let ctx = Ctx::new(&single.params);
        let y_t = Tensor::constant(y.data().to_vec(), &[1, 1, y.height, y.width]);
        let phi = shifted_mask_tensor(&op, 8).unwrap();
        let g0 = op.initial_estimate(&y, 8).unwrap();
        let g = Tensor::constant(g0.data().to_vec(), &[1, 8, 16, 16]);
        let stage = &single.stages[0];
        let delta = single.learn_degradation(&ctx, stage, &y_t, &phi).unwrap();
        let phi_eff = phi.add(&delta).unwrap();
        let v = single.gd_step(&ctx, stage, &g, &y_t, &phi_eff, 1).unwrap();
        let (denoised, _) = stage
            .dst
            .forward(&ctx, &v.disperse(1).unwrap(), pgdudst_core::dst::no_modulation)
            .unwrap();
        let by_hand = denoised.undisperse(1).unwrap();
        assert_eq!(via_model.data(), by_hand.data());
    });
}
