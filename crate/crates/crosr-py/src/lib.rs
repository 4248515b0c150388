//! Python face of the toolkit: dataset construction, network training, and
//! open-set scoring behind one extension module.
//!
//! Conversion conventions, fixed across the whole surface: labels cross the
//! boundary as integers with -1 marking unknown, images cross as flat
//! row-major pixel lists paired with an explicit [count, channels, height,
//! width] shape, and feature modes are the strings "av" and "joint". Errors
//! surface as IOError for filesystem failures and ValueError (prefixed with
//! the toolkit's error category) for everything else.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use crosr::config::RunConfig;
use crosr::data::{self, Label, LabeledDataset};
use crosr::dhrnet::{DhrNet, FeatureMode};
use crosr::evt::{self, RankCalibration, TailFitConfig, WeibullParams};
use crosr::metrics;
use crosr::model_io;
use crosr::openset::{self, OpenSetModel as CoreOpenSetModel};
use crosr::tape;
use crosr::tensor::Tensor;
use crosr::trainer::{self, TrainConfig};

fn pyerr(e: crosr::Error) -> PyErr {
    match &e {
        crosr::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("{}: {e}", e.category())),
    }
}

fn label_out(l: Label) -> i64 {
    match l {
        Label::Known(k) => k as i64,
        Label::Unknown => -1,
    }
}

fn label_in(v: i64, classes: usize) -> PyResult<Label> {
    if v == -1 {
        Ok(Label::Unknown)
    } else if v >= 0 && (v as usize) < classes {
        Ok(Label::Known(v as usize))
    } else {
        Err(PyValueError::new_err(format!(
            "label {v} is neither -1 nor a class index below {classes}"
        )))
    }
}

fn mode_in(mode: &str) -> PyResult<FeatureMode> {
    match mode {
        "av" => Ok(FeatureMode::Av),
        "joint" => Ok(FeatureMode::Joint),
        _ => Err(PyValueError::new_err(format!(
            "feature mode {mode:?}, expected \"av\" or \"joint\""
        ))),
    }
}

fn calibration_in(s: &str) -> PyResult<RankCalibration> {
    match s {
        "auto" => Ok(RankCalibration::Auto),
        "on" => Ok(RankCalibration::On),
        "off" => Ok(RankCalibration::Off),
        _ => Err(PyValueError::new_err(format!(
            "rank calibration {s:?}, expected \"auto\", \"on\" or \"off\""
        ))),
    }
}

/// Labeled image set with pixels in [0, 1].
#[pyclass]
struct Dataset {
    inner: LabeledDataset,
}

#[pymethods]
impl Dataset {
    /// Wraps caller-supplied pixels. `shape` is [count, channels, height,
    /// width]; `labels` holds one entry per sample, -1 for unknown.
    #[new]
    fn new(pixels: Vec<f64>, shape: Vec<usize>, labels: Vec<i64>) -> PyResult<Dataset> {
        if shape.len() != 4 {
            return Err(PyValueError::new_err(format!(
                "shape has {} entries, expected [count, channels, height, width]",
                shape.len()
            )));
        }
        let labels = labels
            .iter()
            .map(|&v| {
                if v == -1 {
                    Ok(Label::Unknown)
                } else if v >= 0 {
                    Ok(Label::Known(v as usize))
                } else {
                    Err(PyValueError::new_err(format!("label {v} is negative and not -1")))
                }
            })
            .collect::<PyResult<Vec<_>>>()?;
        let images = Tensor::new(shape, pixels).map_err(pyerr)?;
        let inner = LabeledDataset::new(images, labels, "python").map_err(pyerr)?;
        inner.validate_pixels().map_err(pyerr)?;
        Ok(Dataset { inner })
    }

    /// Built-in glyph benchmark: one stroke shape per class on an 8x8
    /// canvas, jittered in position, brightness and pixel noise.
    #[staticmethod]
    fn synthetic(classes: usize, per_class: usize, seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::gen_synthetic(classes, per_class, seed).map_err(pyerr)?,
        })
    }

    /// Unknown-labeled samples of independent uniform pixels.
    #[staticmethod]
    fn uniform_noise(count: usize, shape: (usize, usize, usize), seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::gen_uniform_noise(count, [shape.0, shape.1, shape.2], seed)
                .map_err(pyerr)?,
        })
    }

    /// Per-pixel max of each sample with fresh uniform noise; the results
    /// are labeled unknown.
    fn superimpose(&self, seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::superimpose_noise(&self.inner, seed).map_err(pyerr)?,
        })
    }

    /// Reads an IDX image/label file pair.
    #[staticmethod]
    fn from_idx(images: PathBuf, labels: PathBuf) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::load_idx(&images, &labels).map_err(pyerr)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<i64> {
        self.inner.labels.iter().map(|&l| label_out(l)).collect()
    }

    /// Flat row-major pixels plus the shape to reshape them with.
    fn images(&self) -> (Vec<f64>, Vec<usize>) {
        (
            self.inner.images.data().to_vec(),
            self.inner.images.shape().to_vec(),
        )
    }

    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} samples, shape {:?}, {})",
            self.inner.len(),
            self.inner.sample_shape(),
            self.inner.provenance
        )
    }
}

/// Classification-reconstruction network handle.
#[pyclass]
struct Network {
    inner: DhrNet,
}

#[pymethods]
impl Network {
    /// Builds fresh weights from the same TOML document the command line
    /// takes; only the [net] section matters here, the rest may be omitted.
    /// `seed` overrides the document's derived init seed.
    #[staticmethod]
    #[pyo3(signature = (config_toml, seed=None))]
    fn build(config_toml: &str, seed: Option<u64>) -> PyResult<Network> {
        let run: RunConfig = toml::from_str(config_toml)
            .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
        run.validate().map_err(pyerr)?;
        let seed = seed.unwrap_or_else(|| run.init_seed());
        Ok(Network {
            inner: DhrNet::build(run.net.clone(), seed).map_err(pyerr)?,
        })
    }

    fn classes(&self) -> usize {
        self.inner.config().classes
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// One SGD run over `data`; defaults mirror the config file defaults.
    /// Returns the per-epoch log as CSV text.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (data, *, epochs=30, batch_size=32, learning_rate=0.05, momentum=0.9, lambda_cls=1.0, lambda_rec=1.0, dropout=0.2, grad_clip=5.0, seed=0, val=None))]
    fn train(
        &mut self,
        data: &Dataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        momentum: f64,
        lambda_cls: f64,
        lambda_rec: f64,
        dropout: f64,
        grad_clip: f64,
        seed: u64,
        val: Option<&Dataset>,
    ) -> PyResult<String> {
        let tc = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            momentum,
            lambda_cls,
            lambda_rec,
            dropout,
            grad_clip,
            seed,
        };
        let log = trainer::train(&mut self.inner, &data.inner, val.map(|d| &d.inner), &tc)
            .map_err(pyerr)?;
        Ok(log.to_csv())
    }

    /// Fraction of `data` argmax-classified to its true label.
    fn accuracy(&self, data: &Dataset) -> PyResult<f64> {
        trainer::closed_set_accuracy(&self.inner, &data.inner).map_err(pyerr)
    }

    /// Per-sample feature rows: the logits alone under "av", logits plus
    /// max-pooled latents under "joint".
    fn features(&self, data: &Dataset, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        openset::extract_features_batch(&self.inner, &data.inner.images, mode_in(mode)?)
            .map_err(pyerr)
    }

    /// Plain closed-set softmax rows, the N-way baseline.
    fn softmax_probs(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        openset::softmax_baseline_probs(&self.inner, &data.inner.images).map_err(pyerr)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_io::save_network(&path, &self.inner).map_err(pyerr)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Network> {
        Ok(Network {
            inner: model_io::load_network(&path).map_err(pyerr)?,
        })
    }
}

/// Fitted open-set scorer: a trained network plus per-class feature means
/// and Weibull tails.
#[pyclass]
struct OpenSetModel {
    inner: CoreOpenSetModel,
}

#[pymethods]
impl OpenSetModel {
    /// Profiles each class from the correctly classified samples of `data`
    /// and pairs the result with a copy of `net`.
    #[staticmethod]
    #[pyo3(signature = (net, data, mode="joint", tail_size=20, alpha=10, rank_calibration="auto", threshold=0.5))]
    fn fit(
        net: &Network,
        data: &Dataset,
        mode: &str,
        tail_size: usize,
        alpha: u32,
        rank_calibration: &str,
        threshold: f64,
    ) -> PyResult<OpenSetModel> {
        let tail = TailFitConfig {
            tail_size,
            alpha,
            rank_calibration: calibration_in(rank_calibration)?,
        };
        tail.validate().map_err(pyerr)?;
        Ok(OpenSetModel {
            inner: openset::fit_open_set(
                net.inner.clone(),
                &data.inner,
                mode_in(mode)?,
                tail,
                threshold,
            )
            .map_err(pyerr)?,
        })
    }

    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    /// Recalibrated probability rows over N+1 slots; index N is unknown.
    fn score(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        self.inner.score_batch(&data.inner.images).map_err(pyerr)
    }

    /// One (label, confidence) pair per sample; label -1 means rejected.
    fn predict(&self, data: &Dataset) -> PyResult<Vec<(i64, f64)>> {
        Ok(self
            .inner
            .predict_batch(&data.inner.images)
            .map_err(pyerr)?
            .into_iter()
            .map(|p| (label_out(p.label), p.confidence))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_io::save_open_set(&path, &self.inner).map_err(pyerr)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<OpenSetModel> {
        Ok(OpenSetModel {
            inner: model_io::load_open_set(&path).map_err(pyerr)?,
        })
    }
}

/// Maximum-likelihood Weibull fit to the largest `tail_size` values of
/// `distances`. Returns (shape, scale).
#[pyfunction]
fn weibull_fit(distances: Vec<f64>, tail_size: usize) -> PyResult<(f64, f64)> {
    let p = evt::fit_weibull_tail(&distances, tail_size).map_err(pyerr)?;
    Ok((p.shape, p.scale))
}

#[pyfunction]
fn weibull_cdf(d: f64, shape: f64, scale: f64) -> PyResult<f64> {
    evt::weibull_cdf(d, WeibullParams { shape, scale }).map_err(pyerr)
}

/// Linear rank damping max(0, (alpha - rank) / alpha) with 1-based rank.
#[pyfunction]
fn rank_calibrator(rank: usize, alpha: u32) -> PyResult<f64> {
    evt::rank_calibrator(rank, alpha).map_err(pyerr)
}

/// Folds per-class belongingness `w` into activations `y`, appending the
/// absorbed mass as an extra unknown logit.
#[pyfunction]
fn recalibrate(y: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
    openset::recalibrate(&y, &w).map_err(pyerr)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    tape::softmax(&logits)
}

/// Macro-averaged F1 over the N+1 outcomes; -1 entries count as unknown.
#[pyfunction]
fn macro_f1(predictions: Vec<i64>, truth: Vec<i64>, classes: usize) -> PyResult<f64> {
    let p = predictions
        .iter()
        .map(|&v| label_in(v, classes))
        .collect::<PyResult<Vec<_>>>()?;
    let t = truth
        .iter()
        .map(|&v| label_in(v, classes))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::macro_f1(&p, &t, classes).map_err(pyerr)?.macro_f1)
}

#[pymodule]
fn crosr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_class::<OpenSetModel>()?;
    m.add_function(wrap_pyfunction!(weibull_fit, m)?)?;
    m.add_function(wrap_pyfunction!(weibull_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(rank_calibrator, m)?)?;
    m.add_function(wrap_pyfunction!(recalibrate, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    Ok(())
}
