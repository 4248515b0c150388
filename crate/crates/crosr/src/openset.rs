//! Open-set scoring on top of a trained network.
//!
//! Fitting builds one profile per known class from correctly classified
//! training samples: the mean feature vector and a Weibull model of the
//! largest distances to that mean. Scoring recalibrates the logits by each
//! class's belongingness, diverts the removed mass to an (N+1)th unknown
//! logit, and softmaxes the result. A sample is rejected as unknown when the
//! unknown slot wins outright or the winning probability falls below the
//! threshold.

use std::cmp::Ordering;
use std::thread;

use crate::data::{Label, LabeledDataset};
use crate::dhrnet::{DhrNet, FeatureMode, Variant};
use crate::error::{Error, Result};
use crate::evt::{class_belongingness, fit_weibull_tail, rank_calibrator, TailFitConfig, WeibullParams};
use crate::metrics::macro_f1;
use crate::tape::softmax;
use crate::tensor::Tensor;

/// Caps the number of scoring threads when set.
pub const THREADS_ENV: &str = "CROSR_THREADS";

/// Forward passes run over slices of at most this many samples.
const FORWARD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub class: usize,
    /// Mean feature vector of correctly classified training samples.
    pub mean: Vec<f64>,
    /// Tail model of distances to the mean.
    pub weibull: WeibullParams,
}

#[derive(Debug, Clone)]
pub struct OpenSetModel {
    pub net: DhrNet,
    pub mode: FeatureMode,
    /// Exactly one profile per class, indexed by class.
    pub profiles: Vec<ClassProfile>,
    pub tail: TailFitConfig,
    /// Rejection threshold theta on the winning probability.
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct OpenSetPrediction {
    /// Softmax over N+1 recalibrated logits; index N is the unknown slot.
    pub probs: Vec<f64>,
    pub label: Label,
    /// Probability of the winning slot.
    pub confidence: f64,
}

/// Number of worker threads for batched scoring: hardware parallelism
/// (clamped to 8), further capped by CROSR_THREADS when set. Thread count
/// never changes results, only wall time; work is split by sample.
pub fn scoring_threads() -> usize {
    let base = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(usize::MAX);
    base.min(cap)
}

fn split_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, n.max(1));
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Per-sample feature rows for a whole image batch, split across threads.
/// Row order matches input order regardless of the thread count.
pub fn extract_features_batch(net: &DhrNet, images: &Tensor, mode: FeatureMode) -> Result<Vec<Vec<f64>>> {
    extract_features_threaded(net, images, mode, scoring_threads())
}

pub(crate) fn extract_features_threaded(
    net: &DhrNet,
    images: &Tensor,
    mode: FeatureMode,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    if images.shape().len() != 4 {
        return Err(Error::Input(format!(
            "images must be [B,C,H,W], got {:?}",
            images.shape()
        )));
    }
    let batch = images.shape()[0];
    if batch == 0 {
        return Ok(Vec::new());
    }
    let stride: usize = images.shape()[1..].iter().product();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); batch];
    let ranges = split_ranges(batch, threads);

    // Partition the output into one disjoint slice per range.
    let mut slices: Vec<&mut [Vec<f64>]> = Vec::with_capacity(ranges.len());
    let mut rest = out.as_mut_slice();
    for &(start, end) in &ranges {
        let (head, tail) = rest.split_at_mut(end - start);
        slices.push(head);
        rest = tail;
    }

    let run = |range: (usize, usize), sink: &mut [Vec<f64>]| -> Result<()> {
        let (start, end) = range;
        for cs in (start..end).step_by(FORWARD_CHUNK) {
            let ce = (cs + FORWARD_CHUNK).min(end);
            let mut shape = images.shape().to_vec();
            shape[0] = ce - cs;
            let chunk = Tensor::new(shape, images.data()[cs * stride..ce * stride].to_vec())?;
            let feats = net.extract_features(&chunk, mode)?;
            for i in 0..(ce - cs) {
                sink[cs - start + i] = feats.row(i).to_vec();
            }
        }
        Ok(())
    };

    if ranges.len() == 1 {
        run(ranges[0], slices.pop().unwrap())?;
    } else {
        let results = thread::scope(|scope| {
            let mut handles = Vec::new();
            for (&range, sink) in ranges.iter().zip(slices) {
                handles.push(scope.spawn(move || run(range, sink)));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring worker panicked"))
                .collect::<Vec<_>>()
        });
        for r in results {
            r?;
        }
    }
    Ok(out)
}

/// Euclidean distance from a feature row to a profile's mean.
pub fn distance(feature: &[f64], profile: &ClassProfile) -> Result<f64> {
    if feature.len() != profile.mean.len() {
        return Err(Error::Input(format!(
            "feature has {} dimensions, profile for class {} has {}",
            feature.len(),
            profile.class,
            profile.mean.len()
        )));
    }
    Ok(feature
        .iter()
        .zip(&profile.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Redistributes logit mass: kept mass y_i * w_i per class, the remainder
/// summed into a new (N+1)th unknown logit. Total mass is preserved.
pub fn recalibrate(y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if y.len() != w.len() {
        return Err(Error::Input(format!(
            "{} logits but {} belongingness weights",
            y.len(),
            w.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Input("cannot recalibrate an empty logit vector".into()));
    }
    let mut out = Vec::with_capacity(y.len() + 1);
    let mut unknown = 0.0;
    for (&yi, &wi) in y.iter().zip(w) {
        out.push(yi * wi);
        unknown += yi * (1.0 - wi);
    }
    out.push(unknown);
    Ok(out)
}

/// |sum(recalibrated) - sum(y)|.
pub fn mass_conservation_gap(y: &[f64], w: &[f64]) -> Result<f64> {
    let hat = recalibrate(y, w)?;
    let sy: f64 = y.iter().sum();
    let sh: f64 = hat.iter().sum();
    Ok((sh - sy).abs())
}

/// Mass conservation holds when the gap stays within `tol`, scaled up for
/// logits above unit magnitude. The scale is the total absolute mass, which
/// stays meaningful when the signed sum cancels toward zero.
pub fn mass_conserved(y: &[f64], w: &[f64], tol: f64) -> Result<bool> {
    let scale: f64 = y.iter().map(|v| v.abs()).sum();
    Ok(mass_conservation_gap(y, w)? <= tol * scale.max(1.0))
}

/// First-max argmax, then the rejection rule: unknown wins outright, or the
/// winner's probability is below theta.
pub fn decide(probs: &[f64], classes: usize, theta: f64) -> Result<Label> {
    if probs.len() != classes + 1 {
        return Err(Error::Input(format!(
            "{} probabilities for {classes} classes plus unknown",
            probs.len()
        )));
    }
    let mut arg = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[arg] {
            arg = i;
        }
    }
    if arg == classes || probs[arg] < theta {
        Ok(Label::Unknown)
    } else {
        Ok(Label::Known(arg))
    }
}

/// Profiles from pre-extracted feature rows, one `(class, feature)` pair per
/// correctly classified sample. Each class needs strictly more samples than
/// the tail size so the tail never swallows the whole class.
pub fn class_profiles_from_features(
    samples: &[(usize, Vec<f64>)],
    classes: usize,
    tail: &TailFitConfig,
) -> Result<Vec<ClassProfile>> {
    tail.validate()?;
    let mut by_class: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); classes];
    for (c, f) in samples {
        if *c >= classes {
            return Err(Error::Input(format!("class {c} outside [0, {classes})")));
        }
        by_class[*c].push(f);
    }
    let mut profiles = Vec::with_capacity(classes);
    for (c, feats) in by_class.iter().enumerate() {
        if feats.len() <= tail.tail_size {
            return Err(Error::Fit(format!(
                "class {c}: {} correctly classified samples, need more than tail_size {}",
                feats.len(),
                tail.tail_size
            )));
        }
        let dim = feats[0].len();
        let mut mean = vec![0.0; dim];
        for f in feats {
            if f.len() != dim {
                return Err(Error::Input(format!(
                    "class {c}: inconsistent feature dimensions {} vs {dim}",
                    f.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= feats.len() as f64;
        }
        let dists: Vec<f64> = feats
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let weibull = fit_weibull_tail(&dists, tail.tail_size)
            .map_err(|e| match e {
                Error::Fit(m) => Error::Fit(format!("class {c}: {m}")),
                other => other,
            })?;
        profiles.push(ClassProfile { class: c, mean, weibull });
    }
    Ok(profiles)
}

/// Fits per-class profiles on training data and packages them with the
/// network into a scoring model.
pub fn fit_open_set(
    net: DhrNet,
    data: &LabeledDataset,
    mode: FeatureMode,
    tail: TailFitConfig,
    threshold: f64,
) -> Result<OpenSetModel> {
    let classes = net.config().classes;
    data.validate_known_labels(classes)?;
    if data.sample_shape() != net.config().input {
        return Err(Error::Input(format!(
            "data samples are {:?}, network expects {:?}",
            data.sample_shape(),
            net.config().input
        )));
    }
    let feats = extract_features_batch(&net, &data.images, mode)?;
    // The first N feature entries are the logits in both modes, so the
    // closed-set prediction falls out of the extraction pass.
    let mut correct = Vec::new();
    for (f, l) in feats.into_iter().zip(&data.labels) {
        let mut arg = 0;
        for i in 1..classes {
            if f[i] > f[arg] {
                arg = i;
            }
        }
        if Label::Known(arg) == *l {
            correct.push((arg, f));
        }
    }
    let profiles = class_profiles_from_features(&correct, classes, &tail)?;
    OpenSetModel::new(net, mode, profiles, tail, threshold)
}

impl OpenSetModel {
    pub fn new(
        net: DhrNet,
        mode: FeatureMode,
        profiles: Vec<ClassProfile>,
        tail: TailFitConfig,
        threshold: f64,
    ) -> Result<OpenSetModel> {
        tail.validate()?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let classes = net.config().classes;
        let dim = net.config().feature_dim(mode);
        // A plain-variant net cannot produce joint features; surface that at
        // construction rather than at first scoring.
        if mode == FeatureMode::Joint && net.config().variant == Variant::Plain {
            return Err(Error::Config(
                "joint features need lateral codes; the plain variant has none".into(),
            ));
        }
        if profiles.len() != classes {
            return Err(Error::Config(format!(
                "{} profiles for {classes} classes",
                profiles.len()
            )));
        }
        for (i, p) in profiles.iter().enumerate() {
            if p.class != i {
                return Err(Error::Config(format!(
                    "profile {i} claims class {}, profiles must be in class order",
                    p.class
                )));
            }
            if p.mean.len() != dim {
                return Err(Error::Config(format!(
                    "class {i} mean has {} dimensions, features have {dim}",
                    p.mean.len()
                )));
            }
            if !(p.weibull.shape.is_finite() && p.weibull.shape > 0.0)
                || !(p.weibull.scale.is_finite() && p.weibull.scale > 0.0)
            {
                return Err(Error::Config(format!(
                    "class {i} Weibull parameters ({}, {}) are not positive finite",
                    p.weibull.shape, p.weibull.scale
                )));
            }
        }
        Ok(OpenSetModel { net, mode, profiles, tail, threshold })
    }

    pub fn classes(&self) -> usize {
        self.net.config().classes
    }

    pub fn feature_dim(&self) -> usize {
        self.net.config().feature_dim(self.mode)
    }

    /// N+1 probabilities for one feature row.
    pub fn score_features(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let n = self.classes();
        if feature.len() != self.feature_dim() {
            return Err(Error::Input(format!(
                "feature has {} dimensions, model expects {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature".into()));
        }
        let y = &feature[..n];
        // Rank of each logit, 1 = largest; ties break toward the lower index.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            y[b].partial_cmp(&y[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let mut rank = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            rank[i] = pos + 1;
        }
        let calibrated = self.tail.calibration_enabled(n);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            let d = distance(feature, &self.profiles[i])?;
            let r = if calibrated {
                rank_calibrator(rank[i], self.tail.alpha)?
            } else {
                1.0
            };
            w.push(class_belongingness(d, self.profiles[i].weibull, r)?);
        }
        let hat = recalibrate(y, &w)?;
        Ok(softmax(&hat))
    }

    /// Cached probability rows for a batch, for sweeps and evaluation.
    pub fn score_batch(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let feats = extract_features_batch(&self.net, images, self.mode)?;
        feats.iter().map(|f| self.score_features(f)).collect()
    }

    pub fn predict_batch(&self, images: &Tensor) -> Result<Vec<OpenSetPrediction>> {
        let n = self.classes();
        self.score_batch(images)?
            .into_iter()
            .map(|probs| {
                let label = decide(&probs, n, self.threshold)?;
                let confidence = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Ok(OpenSetPrediction { probs, label, confidence })
            })
            .collect()
    }

    /// Single image, [C,H,W] or [1,C,H,W].
    pub fn predict(&self, image: &Tensor) -> Result<OpenSetPrediction> {
        let s = image.shape();
        let batched = match s.len() {
            3 => image.reshape(vec![1, s[0], s[1], s[2]])?,
            4 if s[0] == 1 => image.clone(),
            _ => {
                return Err(Error::Input(format!(
                    "expected one [C,H,W] or [1,C,H,W] image, got {s:?}"
                )))
            }
        };
        Ok(self.predict_batch(&batched)?.remove(0))
    }
}

/// Closed-set softmax padded with a zero unknown slot. Thresholding these
/// rows with `decide` is the plain softmax rejection baseline; the unknown
/// slot can never win outright since the known mass sums to one.
pub fn softmax_baseline_probs(net: &DhrNet, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let feats = extract_features_batch(net, images, FeatureMode::Av)?;
    Ok(feats
        .into_iter()
        .map(|y| {
            let mut p = softmax(&y);
            p.push(0.0);
            p
        })
        .collect())
}

/// Macro-F1 at each threshold over pre-scored probability rows.
pub fn sweep_probs(
    probs: &[Vec<f64>],
    truth: &[Label],
    classes: usize,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(grid.len());
    for &theta in grid {
        let preds = probs
            .iter()
            .map(|p| decide(p, classes, theta))
            .collect::<Result<Vec<_>>>()?;
        let report = macro_f1(&preds, truth, classes)?;
        out.push((theta, report.macro_f1));
    }
    Ok(out)
}

/// Scores the test set once, then evaluates every threshold in the grid.
pub fn threshold_sweep(
    model: &OpenSetModel,
    test: &LabeledDataset,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let probs = model.score_batch(&test.images)?;
    sweep_probs(&probs, &test.labels, model.classes(), grid)
}
