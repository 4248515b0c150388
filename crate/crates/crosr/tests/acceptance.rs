//! Acceptance gate: eight end-to-end criteria, one test each. Every test
//! prints `ACCEPTANCE <n> <name>: PASS` or `: FAIL` (visible under
//! `--nocapture`); tolerances are pinned next to each assertion.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crosr::cli::{assemble_data, cmd_eval, cmd_fit, cmd_sweep, cmd_train, outlier_set};
use crosr::config::{OutlierSource, RunConfig};
use crosr::data::{load_idx, Label};
use crosr::dhrnet::{DhrNet, DhrNetConfig, FeatureMode, StageConfig, Variant};
use crosr::error::Error;
use crosr::evt::fit_weibull_tail;
use crosr::metrics::{macro_f1, theta_grid};
use crosr::openset::{
    decide, fit_open_set, mass_conservation_gap, recalibrate, softmax_baseline_probs, sweep_probs,
};
use crosr::tape::{softmax, Phase, Tape};
use crosr::tensor::Tensor;
use crosr::trainer::{closed_set_accuracy, train};

fn criterion(n: usize, name: &str, body: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("ACCEPTANCE {n} {name}: PASS"),
        Err(e) => {
            println!("ACCEPTANCE {n} {name}: FAIL");
            resume_unwind(e);
        }
    }
}

/// The desk benchmark: six glyph classes, 8x8 inputs, a two-stage network
/// with laterals on both stages. Shared by the trend criteria.
fn desk_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.net = DhrNetConfig {
        variant: Variant::Dhrnet,
        input: [1, 8, 8],
        classes: 6,
        bottleneck: 16,
        hidden: 32,
        kernel: 3,
        stages: vec![
            StageConfig { convs: 1, channels: 8, pool: true, lateral: true },
            StageConfig { convs: 1, channels: 8, pool: true, lateral: true },
        ],
    };
    c.train.epochs = 30;
    c.train.batch_size = 16;
    c.train.learning_rate = 0.05;
    c.train.dropout = 0.1;
    c.data.classes = 6;
    c.data.train_per_class = 60;
    c.data.test_per_class = 25;
    c.validate().unwrap();
    c
}

/// Smaller four-class setup for the mechanical criteria.
fn quick_config(seed: u64) -> RunConfig {
    let mut c = desk_config(seed);
    c.net.classes = 4;
    c.data.classes = 4;
    c.data.train_per_class = 40;
    c.train.epochs = 10;
    c.tail.tail_size = 15;
    c.validate().unwrap();
    c
}

#[test]
fn acceptance_1_gradient_correctness() {
    criterion(1, "gradient correctness", || {
        let start = Instant::now();
        let config = DhrNetConfig {
            variant: Variant::Dhrnet,
            input: [1, 8, 8],
            classes: 3,
            bottleneck: 3,
            hidden: 10,
            kernel: 3,
            stages: vec![
                StageConfig { convs: 1, channels: 6, pool: true, lateral: true },
                StageConfig { convs: 1, channels: 4, pool: true, lateral: true },
            ],
        };
        let net = DhrNet::build(config, 77).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let x = Tensor::new(
            vec![4, 1, 8, 8],
            (0..4 * 64).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let labels = [0usize, 1, 2, 0];

        // joint loss: cross-entropy plus reconstruction error, both weight 1
        let loss_of = |net: &DhrNet| -> f64 {
            let mut tape = Tape::new();
            let mut inert = ChaCha12Rng::seed_from_u64(0);
            let t = net
                .forward_traced(&mut tape, &x, Phase::Train, 0.0, &mut inert)
                .unwrap();
            let ce = tape.softmax_cross_entropy(t.y, &labels).unwrap();
            let mse = tape.mean_squared_error(t.recon.unwrap(), t.input).unwrap();
            let loss = tape.add(ce, mse).unwrap();
            tape.value(loss).item()
        };

        // analytic gradients for every parameter via one reverse sweep
        let analytic: Vec<Tensor> = {
            let mut tape = Tape::new();
            let mut inert = ChaCha12Rng::seed_from_u64(0);
            let t = net
                .forward_traced(&mut tape, &x, Phase::Train, 0.0, &mut inert)
                .unwrap();
            let ce = tape.softmax_cross_entropy(t.y, &labels).unwrap();
            let mse = tape.mean_squared_error(t.recon.unwrap(), t.input).unwrap();
            let loss = tape.add(ce, mse).unwrap();
            let grads = tape.backward(loss).unwrap();
            t.params
                .iter()
                .map(|&id| grads.get(id).cloned().expect("every parameter is reached"))
                .collect()
        };

        // central differences on a deterministic sample of coordinates
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut coord_rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..60 {
            let p = coord_rng.random_range(0..net.param_count());
            let len = net.param_at(p).len();
            let e = coord_rng.random_range(0..len);

            let bump = |delta: f64| -> f64 {
                let mut n = net.clone();
                let mut t = n.param_at(p).clone();
                t.data_mut()[e] += delta;
                n.set_param_at(p, t).unwrap();
                loss_of(&n)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic[p].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst:.3e}");
        assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    });
}

#[test]
fn acceptance_2_weibull_recovery_and_grid_oracle() {
    criterion(2, "weibull recovery vs grid oracle", || {
        let start = Instant::now();

        // parameter recovery on a large known sample
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let dist = rand_distr::Weibull::new(1.0, 2.0).unwrap(); // scale, shape
        let draws: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = fit_weibull_tail(&draws, draws.len()).unwrap();
        assert!(
            (fit.shape - 2.0).abs() / 2.0 < 0.05,
            "shape {} off by more than 5%",
            fit.shape
        );
        assert!(
            (fit.scale - 1.0).abs() < 0.03,
            "scale {} off by more than 3%",
            fit.scale
        );

        // profile log-likelihood: for fixed m the optimal scale is closed
        // form, eta(m) = (mean d^m)^(1/m), giving
        //   ll(m) = n ln m - n m ln eta + (m - 1) sum ln d - n
        let profile_ll = |d: &[f64], m: f64| -> f64 {
            let n = d.len() as f64;
            let sum_pow: f64 = d.iter().map(|&v| v.powf(m)).sum();
            let eta = (sum_pow / n).powf(1.0 / m);
            let sum_ln: f64 = d.iter().map(|&v| v.ln()).sum();
            n * m.ln() - n * m * eta.ln() + (m - 1.0) * sum_ln - n
        };
        let full_ll = |d: &[f64], m: f64, eta: f64| -> f64 {
            let n = d.len() as f64;
            let sum_ln: f64 = d.iter().map(|&v| v.ln()).sum();
            let sum_pow: f64 = d.iter().map(|&v| (v / eta).powf(m)).sum();
            n * m.ln() - n * m * eta.ln() + (m - 1.0) * sum_ln - sum_pow
        };

        for case in 0..100 {
            let n = rng.random_range(5..40usize);
            let shape = rng.random_range(0.5..6.0);
            let scale = rng.random_range(0.2..5.0);
            let d = rand_distr::Weibull::new(scale, shape).unwrap();
            let tail: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let fit = fit_weibull_tail(&tail, n).unwrap();
            let newton_ll = full_ll(&tail, fit.shape, fit.scale);

            let mut grid_best = f64::NEG_INFINITY;
            let mut m = 0.1;
            while m <= 20.0 {
                grid_best = grid_best.max(profile_ll(&tail, m));
                m += 0.001;
            }
            assert!(
                newton_ll >= grid_best - 1e-6,
                "case {case}: newton ll {newton_ll} below grid optimum {grid_best}"
            );
        }
        assert!(start.elapsed().as_secs() < 30, "took {:?}", start.elapsed());
    });
}

#[test]
fn acceptance_3_recalibration_algebra() {
    criterion(3, "recalibration algebra", || {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let n = rng.random_range(2..12usize);
            // nonnegative activation mass; monotonicity is stated for it
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

            // mass conservation
            assert!(mass_conservation_gap(&y, &w).unwrap() <= 1e-9);

            // softmax normalization over the N+1 recalibrated logits
            let probs = softmax(&recalibrate(&y, &w).unwrap());
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            // a dominant logit may round a probability to exactly 0 or 1
            assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));

            // pointwise decrease of w never lowers the unknown probability
            let shrunk: Vec<f64> = w.iter().map(|&v| v * rng.random::<f64>()).collect();
            let probs_shrunk = softmax(&recalibrate(&y, &shrunk).unwrap());
            assert!(probs_shrunk[n] >= probs[n] - 1e-12);
        }
    });
}

#[test]
fn acceptance_4_closed_set_non_degradation() {
    criterion(4, "closed-set non-degradation", || {
        let start = Instant::now();
        let seeds = [0u64, 1, 2];
        let mut acc_joint = 0.0;
        let mut acc_plain = 0.0;
        for &seed in &seeds {
            let cfg = desk_config(seed);
            let data = assemble_data(&cfg).unwrap();
            let tc = cfg.train.resolve(cfg.seed);

            let mut net = DhrNet::build(cfg.net.clone(), cfg.init_seed()).unwrap();
            train(&mut net, &data.train, None, &tc).unwrap();
            acc_joint += closed_set_accuracy(&net, &data.test_known).unwrap();

            let mut plain_cfg = cfg.net.clone();
            plain_cfg.variant = Variant::Plain;
            let mut plain = DhrNet::build(plain_cfg, cfg.init_seed()).unwrap();
            train(&mut plain, &data.train, None, &tc).unwrap();
            acc_plain += closed_set_accuracy(&plain, &data.test_known).unwrap();
        }
        acc_joint /= seeds.len() as f64;
        acc_plain /= seeds.len() as f64;
        println!("  closed-set accuracy: joint {acc_joint:.4}, plain {acc_plain:.4}");
        assert!(
            acc_plain - acc_joint <= 0.02,
            "reconstruction training degrades closed-set accuracy: joint {acc_joint:.4} vs plain {acc_plain:.4}"
        );
        assert!(start.elapsed().as_secs() < 600, "took {:?}", start.elapsed());
    });
}

#[test]
fn acceptance_5_detector_ordering() {
    criterion(5, "detector ordering", || {
        let start = Instant::now();
        let seeds = [0u64, 1, 2, 3, 4];
        let sources = [OutlierSource::Noise, OutlierSource::Superimposed];
        let theta = 0.5;
        let (mut f1_softmax, mut f1_av, mut f1_joint) = (0.0, 0.0, 0.0);
        let mut cells = 0usize;

        for &seed in &seeds {
            let cfg = desk_config(seed);
            let data = assemble_data(&cfg).unwrap();
            let tc = cfg.train.resolve(cfg.seed);
            let mut net = DhrNet::build(cfg.net.clone(), cfg.init_seed()).unwrap();
            train(&mut net, &data.train, None, &tc).unwrap();

            let av = fit_open_set(net.clone(), &data.train, FeatureMode::Av, cfg.tail, theta).unwrap();
            let joint =
                fit_open_set(net.clone(), &data.train, FeatureMode::Joint, cfg.tail, theta).unwrap();

            for &source in &sources {
                // outliers 1:1 against the known test set
                let outliers = outlier_set(&cfg, source, &data.test_known, None).unwrap();
                assert_eq!(outliers.len(), data.test_known.len());
                let combined = data.test_known.concat(&outliers, "acceptance").unwrap();
                let classes = cfg.net.classes;

                let score = |probs: Vec<Vec<f64>>| -> f64 {
                    let preds: Vec<Label> = probs
                        .iter()
                        .map(|p| decide(p, classes, theta).unwrap())
                        .collect();
                    macro_f1(&preds, &combined.labels, classes).unwrap().macro_f1
                };
                f1_softmax += score(softmax_baseline_probs(&net, &combined.images).unwrap());
                f1_av += score(av.score_batch(&combined.images).unwrap());
                f1_joint += score(joint.score_batch(&combined.images).unwrap());
                cells += 1;
            }
        }
        let (s, a, j) = (
            f1_softmax / cells as f64,
            f1_av / cells as f64,
            f1_joint / cells as f64,
        );
        println!("  mean macro-F1: softmax {s:.4}, av {a:.4}, joint {j:.4}");
        assert!(j >= a, "joint features {j:.4} behind av features {a:.4}");
        assert!(a >= s, "av calibration {a:.4} behind raw softmax {s:.4}");
        assert!(
            j - s >= 0.03,
            "joint advantage over softmax only {:.4}",
            j - s
        );
        assert!(start.elapsed().as_secs() < 1800, "took {:?}", start.elapsed());
    });
}

#[test]
fn acceptance_6_threshold_sweep_limits() {
    criterion(6, "threshold sweep limits", || {
        let cfg = quick_config(11);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        cmd_train(&cfg, out).unwrap();
        cmd_fit(&cfg, &out.join("model.crsr"), out).unwrap();
        cmd_sweep(&cfg, &out.join("openset.crsr"), out).unwrap();

        // the sweep file covers the full default grid
        let csv = std::fs::read_to_string(out.join("sweep_noise.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "theta,macro_f1");
        assert_eq!(rows.len(), 21, "20 thresholds after the header");
        assert!(rows[1].starts_with("0,"));

        // recompute in process: theta = 0 must equal pure argmax exactly
        let model = crosr::model_io::load_open_set(&out.join("openset.crsr")).unwrap();
        let data = assemble_data(&cfg).unwrap();
        let outliers = outlier_set(&cfg, OutlierSource::Noise, &data.test_known, None).unwrap();
        let combined = data.test_known.concat(&outliers, "sweep-check").unwrap();
        let probs = model.score_batch(&combined.images).unwrap();
        let classes = model.classes();

        let sweep = sweep_probs(&probs, &combined.labels, classes, &theta_grid(20)).unwrap();
        let argmax_preds: Vec<Label> = probs
            .iter()
            .map(|p| {
                let mut arg = 0;
                for i in 1..p.len() {
                    if p[i] > p[arg] {
                        arg = i;
                    }
                }
                if arg == classes { Label::Unknown } else { Label::Known(arg) }
            })
            .collect();
        let argmax_f1 = macro_f1(&argmax_preds, &combined.labels, classes)
            .unwrap()
            .macro_f1;
        assert_eq!(sweep[0].0, 0.0);
        assert_eq!(
            sweep[0].1.to_bits(),
            argmax_f1.to_bits(),
            "theta 0 differs from the argmax decision"
        );

        // full rejection at theta = 1: every decision is unknown, and the
        // macro-F1 reduces to the unknown class F1 over N+1 classes
        let full = sweep_probs(&probs, &combined.labels, classes, &[1.0]).unwrap();
        for p in &probs {
            assert_eq!(decide(p, classes, 1.0).unwrap(), Label::Unknown);
        }
        let unknowns = combined
            .labels
            .iter()
            .filter(|l| **l == Label::Unknown)
            .count() as f64;
        let precision = unknowns / combined.len() as f64;
        let hand = (2.0 * precision / (precision + 1.0)) / (classes + 1) as f64;
        assert!(
            (full[0].1 - hand).abs() < 1e-12,
            "full rejection {} vs hand value {hand}",
            full[0].1
        );
    });
}

#[test]
fn acceptance_7_command_determinism() {
    criterion(7, "command determinism", || {
        let cfg = quick_config(3);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&a, &b] {
            cmd_train(&cfg, out).unwrap();
            cmd_fit(&cfg, &out.join("model.crsr"), out).unwrap();
            cmd_eval(&cfg, &out.join("openset.crsr"), out).unwrap();
            cmd_sweep(&cfg, &out.join("openset.crsr"), out).unwrap();
        }
        for file in [
            "model.crsr",
            "train_log.csv",
            "openset.crsr",
            "fit_log.txt",
            "summary.csv",
            "report_noise.txt",
            "report_superimposed.txt",
            "sweep_noise.csv",
            "sweep_superimposed.csv",
        ] {
            let x = std::fs::read(a.join(file)).unwrap();
            let y = std::fs::read(b.join(file)).unwrap();
            assert_eq!(x, y, "{file} differs between identical runs");
        }
    });
}

#[test]
fn acceptance_8_idx_ingestion() {
    criterion(8, "idx ingestion", || {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("fixture-images");
        let labels = dir.path().join("fixture-labels");

        // two 2x3 images, pixel values chosen to check exact scaling
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        std::fs::write(&images, &img).unwrap();

        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 0]);
        std::fs::write(&labels, &lab).unwrap();

        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels, vec![Label::Known(7), Label::Known(0)]);
        let expect: Vec<f64> = [0u8, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]
            .iter()
            .map(|&v| v as f64 / 255.0)
            .collect();
        assert_eq!(ds.images.data(), &expect[..], "pixels decode bit-exactly");

        // malformed inputs: categorized errors with offsets, never panics
        let bad_magic = dir.path().join("bad-magic");
        let mut bytes = img.clone();
        bytes[0] = 0xFF;
        std::fs::write(&bad_magic, &bytes).unwrap();
        match load_idx(&bad_magic, &labels).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other:?}"),
        }

        let truncated = dir.path().join("truncated");
        std::fs::write(&truncated, &img[..img.len() - 4]).unwrap();
        let err = load_idx(&truncated, &labels).unwrap_err();
        assert_eq!(err.exit_code(), 4, "truncation: {err}");

        let short_labels = dir.path().join("short-labels");
        let mut lb = Vec::new();
        lb.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lb.extend_from_slice(&1u32.to_be_bytes());
        lb.push(3);
        std::fs::write(&short_labels, &lb).unwrap();
        match load_idx(&images, &short_labels).unwrap_err() {
            Error::Format { message, .. } => {
                assert!(message.contains("1 labels for 2 images"), "{message}")
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    });
}
