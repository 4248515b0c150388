//! The four pipeline commands behind the binary: train, fit, eval, sweep.
//!
//! Every command takes a run configuration and an output directory and
//! writes only into that directory. Outputs are deterministic: rerunning a
//! command with the same config, seed, and inputs reproduces every file
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::{
    derive_seed, DataSource, OutlierSource, RunConfig, STREAM_DATA_TEST, STREAM_DATA_TRAIN,
    STREAM_HELDOUT, STREAM_NOISE, STREAM_SPLIT, STREAM_SUPERIMPOSE,
};
use crate::data::{
    gen_synthetic, gen_uniform_noise, load_idx, split_classes, superimpose_noise, LabeledDataset,
};
use crate::dhrnet::{DhrNet, FeatureMode};
use crate::error::{Error, Result};
use crate::metrics::{macro_f1, theta_grid};
use crate::model_io::{load_network, load_open_set, save_network, save_open_set};
use crate::openset::{decide, fit_open_set, softmax_baseline_probs, sweep_probs};
use crate::trainer::{closed_set_accuracy, train};

/// Train/test splits a run works with. `heldout` is present only under the
/// class-separation protocol.
#[derive(Debug)]
pub struct ResolvedData {
    pub train: LabeledDataset,
    pub test_known: LabeledDataset,
    pub heldout: Option<LabeledDataset>,
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist", path.display()),
        )))
    }
}

/// Materializes the datasets a config describes. Deterministic in the
/// config: the same file and top-level seed rebuild identical samples, which
/// is how `fit` recovers the exact training set `train` saw.
pub fn assemble_data(config: &RunConfig) -> Result<ResolvedData> {
    let base = config.data.base_seed(config.seed);
    match config.data.source {
        DataSource::Synthetic => {
            if let Some(known) = config.data.known {
                let per_class = config.data.train_per_class + config.data.test_per_class;
                let pool = gen_synthetic(
                    config.data.classes,
                    per_class,
                    derive_seed(base, STREAM_DATA_TRAIN),
                )?;
                let split = split_classes(
                    &pool,
                    known,
                    config.data.train_fraction,
                    derive_seed(base, STREAM_SPLIT),
                )?;
                Ok(ResolvedData {
                    train: split.train,
                    test_known: split.test_known,
                    heldout: Some(split.test_unknown),
                })
            } else {
                Ok(ResolvedData {
                    train: gen_synthetic(
                        config.data.classes,
                        config.data.train_per_class,
                        derive_seed(base, STREAM_DATA_TRAIN),
                    )?,
                    test_known: gen_synthetic(
                        config.data.classes,
                        config.data.test_per_class,
                        derive_seed(base, STREAM_DATA_TEST),
                    )?,
                    heldout: None,
                })
            }
        }
        DataSource::Idx => {
            let images = config.data.train_images.as_deref().expect("validated");
            let labels = config.data.train_labels.as_deref().expect("validated");
            require_exists(images, "image file")?;
            require_exists(labels, "label file")?;
            let pool = load_idx(images, labels)?;
            if let Some(known) = config.data.known {
                let split = split_classes(
                    &pool,
                    known,
                    config.data.train_fraction,
                    derive_seed(base, STREAM_SPLIT),
                )?;
                if split.train.labels.iter().any(|l| l.index(known) >= config.net.classes) {
                    return Err(Error::Config(format!(
                        "net.classes {} but the split keeps {known} known classes",
                        config.net.classes
                    )));
                }
                Ok(ResolvedData {
                    train: split.train,
                    test_known: split.test_known,
                    heldout: Some(split.test_unknown),
                })
            } else {
                let ti = config.data.test_images.as_deref().expect("validated");
                let tl = config.data.test_labels.as_deref().expect("validated");
                require_exists(ti, "image file")?;
                require_exists(tl, "label file")?;
                Ok(ResolvedData {
                    train: pool,
                    test_known: load_idx(ti, tl)?,
                    heldout: None,
                })
            }
        }
    }
}

/// One outlier test set, sized 1:1 against the known test set where the
/// source allows it.
pub fn outlier_set(
    config: &RunConfig,
    source: OutlierSource,
    test_known: &LabeledDataset,
    heldout: Option<&LabeledDataset>,
) -> Result<LabeledDataset> {
    let base = config.eval.base_seed(config.seed);
    match source {
        OutlierSource::Noise => gen_uniform_noise(
            test_known.len(),
            test_known.sample_shape(),
            derive_seed(base, STREAM_NOISE),
        ),
        OutlierSource::Superimposed => {
            superimpose_noise(test_known, derive_seed(base, STREAM_SUPERIMPOSE))
        }
        OutlierSource::Heldout => {
            let h = heldout.ok_or_else(|| {
                Error::Config("heldout outliers need data.known to hold classes out".into())
            })?;
            if h.len() <= test_known.len() {
                return Ok(h.clone());
            }
            let mut idx: Vec<usize> = (0..h.len()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(base, STREAM_HELDOUT));
            idx.shuffle(&mut rng);
            idx.truncate(test_known.len());
            idx.sort_unstable();
            h.subset(&idx, format!("{}(subsampled)", h.provenance))
        }
    }
}

fn detector_name(mode: FeatureMode) -> &'static str {
    match mode {
        FeatureMode::Av => "openmax",
        FeatureMode::Joint => "crosr",
    }
}

/// Trains a network from scratch; writes `model.crsr` and `train_log.csv`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = assemble_data(config)?;
    let mut net = DhrNet::build(config.net.clone(), config.init_seed())?;
    let tc = config.train.resolve(config.seed);
    println!(
        "training {} samples for {} epochs ({} known classes)",
        data.train.len(),
        tc.epochs,
        config.net.classes
    );
    let log = train(&mut net, &data.train, Some(&data.test_known), &tc)?;
    let model_path = out.join("model.crsr");
    save_network(&model_path, &net)?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    if let Some(last) = log.rows.last() {
        println!("final validation accuracy {:.4}", last.val_acc);
    }
    println!("wrote {}", model_path.display());
    Ok(())
}

/// Fits per-class profiles on the training set; writes `openset.crsr` and
/// `fit_log.txt`.
pub fn cmd_fit(config: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    require_exists(model, "model file")?;
    let net = load_network(model)?;
    let data = assemble_data(config)?;
    let acc = closed_set_accuracy(&net, &data.train)?;
    let fitted = fit_open_set(
        net,
        &data.train,
        config.openset.mode,
        config.tail,
        config.openset.threshold,
    )?;

    let mut log = String::new();
    writeln!(log, "mode {}", detector_name(fitted.mode)).unwrap();
    writeln!(log, "threshold {}", fitted.threshold).unwrap();
    writeln!(log, "tail_size {}", fitted.tail.tail_size).unwrap();
    writeln!(log, "alpha {}", fitted.tail.alpha).unwrap();
    writeln!(
        log,
        "rank_calibration {}",
        if fitted.tail.calibration_enabled(fitted.classes()) { "on" } else { "off" }
    )
    .unwrap();
    writeln!(log, "train_accuracy {acc:.6}").unwrap();
    for p in &fitted.profiles {
        writeln!(
            log,
            "class {} weibull shape {:.6} scale {:.6}",
            p.class, p.weibull.shape, p.weibull.scale
        )
        .unwrap();
    }
    print!("{log}");
    fs::write(out.join("fit_log.txt"), log)?;

    let path = out.join("openset.crsr");
    save_open_set(&path, &fitted)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Known test set merged with one outlier set per configured source,
/// scored by the raw-softmax baseline and the fitted model; writes
/// `summary.csv` and one report per outlier source.
pub fn cmd_eval(config: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    require_exists(model, "model file")?;
    let fitted = load_open_set(model)?;
    let data = assemble_data(config)?;
    let classes = fitted.classes();
    let theta = fitted.threshold;

    let mut summary = String::from("detector,outlier_set,macro_f1\n");
    for &source in &config.eval.outliers {
        let outliers = outlier_set(config, source, &data.test_known, data.heldout.as_ref())?;
        let combined = data.test_known.concat(&outliers, format!("eval({})", source.name()))?;

        let mut report = String::new();
        for (name, probs) in [
            ("softmax", softmax_baseline_probs(&fitted.net, &combined.images)?),
            (detector_name(fitted.mode), fitted.score_batch(&combined.images)?),
        ] {
            let preds = probs
                .iter()
                .map(|p| decide(p, classes, theta))
                .collect::<Result<Vec<_>>>()?;
            let r = macro_f1(&preds, &combined.labels, classes)?;
            writeln!(summary, "{},{},{:.6}", name, source.name(), r.macro_f1).unwrap();
            writeln!(report, "detector {name}, outliers {}, theta {theta}", source.name()).unwrap();
            report.push_str(&r.to_text());
            report.push('\n');
        }
        fs::write(out.join(format!("report_{}.txt", source.name())), report)?;
    }
    print!("{summary}");
    fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

/// Macro-F1 of the fitted model across the threshold grid, one CSV per
/// outlier source.
pub fn cmd_sweep(config: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    require_exists(model, "model file")?;
    let fitted = load_open_set(model)?;
    let data = assemble_data(config)?;
    let grid = theta_grid(config.eval.theta_steps);

    for &source in &config.eval.outliers {
        let outliers = outlier_set(config, source, &data.test_known, data.heldout.as_ref())?;
        let combined = data.test_known.concat(&outliers, format!("sweep({})", source.name()))?;
        let probs = fitted.score_batch(&combined.images)?;
        let sweep = sweep_probs(&probs, &combined.labels, fitted.classes(), &grid)?;
        let mut csv = String::from("theta,macro_f1\n");
        for (theta, f1) in &sweep {
            writeln!(csv, "{theta},{f1:.6}").unwrap();
        }
        let path = out.join(format!("sweep_{}.csv", source.name()));
        fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Shared entry: load the config, apply a seed override, validate.
pub fn load_run_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    Ok(config)
}
