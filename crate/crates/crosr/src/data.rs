//! Datasets and outlier sources.
//!
//! Images are [B, C, H, W] tensors with pixels in [0, 1]. Known labels are
//! class indices in [0, N); the unknown sentinel is a separate enum variant
//! and only appears in evaluation sets, never in training data. Everything
//! that draws randomness takes an explicit seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Known(usize),
    Unknown,
}

impl Label {
    /// Index into an (N+1)-way confusion table; unknown maps to N.
    pub fn index(&self, classes: usize) -> usize {
        match self {
            Label::Known(k) => *k,
            Label::Unknown => classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<Label>,
    /// Human-readable origin, carried into reports.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<Label>, provenance: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Input(format!(
                "images must be [B,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample element count.
    pub fn sample_dim(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// [C, H, W] of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate_pixels(&self) -> Result<()> {
        for (i, &p) in self.images.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!(
                    "pixel {p} at flat index {i} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    /// Every label must be a known class below `classes`; training rejects
    /// sets that smuggle the unknown sentinel in.
    pub fn validate_known_labels(&self, classes: usize) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                Label::Unknown => {
                    return Err(Error::Input(format!(
                        "sample {i} carries the unknown sentinel; training data must be known"
                    )))
                }
                Label::Known(k) if *k >= classes => {
                    return Err(Error::Input(format!(
                        "sample {i} has label {k}, outside [0, {classes})"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<LabeledDataset> {
        let dim = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("subset index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        LabeledDataset::new(Tensor::new(shape, data)?, labels, provenance)
    }

    /// This dataset followed by `other`; sample shapes must agree.
    pub fn concat(&self, other: &LabeledDataset, provenance: impl Into<String>) -> Result<LabeledDataset> {
        if self.sample_shape() != other.sample_shape() {
            return Err(Error::Input(format!(
                "cannot concatenate samples of shape {:?} and {:?}",
                self.sample_shape(),
                other.sample_shape()
            )));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut shape = self.images.shape().to_vec();
        shape[0] = self.len() + other.len();
        LabeledDataset::new(Tensor::new(shape, data)?, labels, provenance)
    }

    /// Image batch for the rows in `indices`.
    pub fn gather_images(&self, indices: &[usize]) -> Tensor {
        let dim = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * dim..(i + 1) * dim]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("gather preserves element count")
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("{}: truncated while reading {what}", path.display()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an images/labels file pair in the big-endian IDX layout: magic,
/// dimension sizes, then unsigned bytes. Pixels are scaled to [0, 1] by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = std::fs::read(images_path)?;
    let magic = read_be_u32(&img_bytes, 0, "magic", images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} for images",
                images_path.display()
            ),
        });
    }
    let count = read_be_u32(&img_bytes, 4, "image count", images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, "row count", images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, "column count", images_path)? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(Error::Format {
            offset: img_bytes.len() as u64,
            message: format!(
                "{}: {} pixel bytes missing",
                images_path.display(),
                expected - img_bytes.len()
            ),
        });
    }
    if img_bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!(
                "{}: {} trailing bytes after pixel data",
                images_path.display(),
                img_bytes.len() - expected
            ),
        });
    }

    let lbl_bytes = std::fs::read(labels_path)?;
    let lmagic = read_be_u32(&lbl_bytes, 0, "magic", labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x} for labels",
                labels_path.display()
            ),
        });
    }
    let lcount = read_be_u32(&lbl_bytes, 4, "label count", labels_path)? as usize;
    if lcount != count {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{}: {lcount} labels for {count} images",
                labels_path.display()
            ),
        });
    }
    if lbl_bytes.len() != 8 + lcount {
        return Err(Error::Format {
            offset: lbl_bytes.len().min(8 + lcount) as u64,
            message: format!(
                "{}: expected {} label bytes, file has {}",
                labels_path.display(),
                8 + lcount,
                lbl_bytes.len()
            ),
        });
    }

    let pixels: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<Label> = lbl_bytes[8..].iter().map(|&b| Label::Known(b as usize)).collect();
    LabeledDataset::new(
        Tensor::new(vec![count, 1, rows, cols], pixels)?,
        labels,
        format!("idx:{}", images_path.display()),
    )
}

/// Uniform [0, 1) pixels; every label is the unknown sentinel.
pub fn gen_uniform_noise(count: usize, shape: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim: usize = shape.iter().product();
    let data: Vec<f64> = (0..count * dim).map(|_| rng.random::<f64>()).collect();
    LabeledDataset::new(
        Tensor::new(vec![count, shape[0], shape[1], shape[2]], data)?,
        vec![Label::Unknown; count],
        "uniform-noise",
    )
}

/// Outliers made from inliers: per-pixel max with fresh uniform noise,
/// clamped to [0, 1]. Keeps the inlier structure visible while breaking its
/// statistics; labels become unknown.
pub fn superimpose_noise(inliers: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f64> = inliers
        .images
        .data()
        .iter()
        .map(|&p| p.max(rng.random::<f64>()).clamp(0.0, 1.0))
        .collect();
    LabeledDataset::new(
        Tensor::new(inliers.images.shape().to_vec(), data)?,
        vec![Label::Unknown; inliers.len()],
        format!("superimposed-noise({})", inliers.provenance),
    )
}

/// 8x8 stroke patterns, one per class, row bitmasks with bit 7 = column 0.
const GLYPHS: [[u8; 8]; 10] = [
    // horizontal bar
    [0x00, 0x00, 0x00, 0xff, 0xff, 0x00, 0x00, 0x00],
    // vertical bar
    [0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18],
    // diagonal band
    [0xc0, 0xe0, 0x70, 0x38, 0x1c, 0x0e, 0x07, 0x03],
    // anti-diagonal band
    [0x03, 0x07, 0x0e, 0x1c, 0x38, 0x70, 0xe0, 0xc0],
    // cross
    [0x18, 0x18, 0x18, 0xff, 0xff, 0x18, 0x18, 0x18],
    // ring
    [0xff, 0x81, 0x81, 0x81, 0x81, 0x81, 0x81, 0xff],
    // top-left block
    [0xf0, 0xf0, 0xf0, 0xf0, 0x00, 0x00, 0x00, 0x00],
    // bottom-right block
    [0x00, 0x00, 0x00, 0x00, 0x0f, 0x0f, 0x0f, 0x0f],
    // T
    [0xff, 0xff, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18],
    // L
    [0xc0, 0xc0, 0xc0, 0xc0, 0xc0, 0xc0, 0xff, 0xff],
];

pub const SYNTHETIC_SIDE: usize = 8;
pub const SYNTHETIC_MAX_CLASSES: usize = GLYPHS.len();

/// Desk-scale benchmark source: one stroke glyph per class on an 8x8 canvas,
/// jittered by a one-pixel shift, a brightness factor in [0.7, 1], and
/// additive Gaussian pixel noise, clamped to [0, 1]. Samples are emitted
/// class-interleaved so any prefix stays balanced.
pub fn gen_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || classes > SYNTHETIC_MAX_CLASSES {
        return Err(Error::Config(format!(
            "synthetic source supports 2..={SYNTHETIC_MAX_CLASSES} classes, asked for {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).unwrap();
    let side = SYNTHETIC_SIDE as isize;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * SYNTHETIC_SIDE * SYNTHETIC_SIDE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for c in 0..classes {
            let dy = rng.random_range(-1i32..=1) as isize;
            let dx = rng.random_range(-1i32..=1) as isize;
            let brightness = 0.7 + 0.3 * rng.random::<f64>();
            for y in 0..side {
                for x in 0..side {
                    let (sy, sx) = (y - dy, x - dx);
                    let on = sy >= 0
                        && sy < side
                        && sx >= 0
                        && sx < side
                        && (GLYPHS[c][sy as usize] >> (7 - sx)) & 1 == 1;
                    let base = if on { brightness } else { 0.0 };
                    data.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
            labels.push(Label::Known(c));
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 1, SYNTHETIC_SIDE, SYNTHETIC_SIDE], data)?,
        labels,
        format!("synthetic({classes}x{per_class})"),
    )
}

#[derive(Debug)]
pub struct ClassSplit {
    /// Known-class training samples, labels remapped to [0, known_count).
    pub train: LabeledDataset,
    /// Held-out known-class samples, same remapping.
    pub test_known: LabeledDataset,
    /// Every sample of the unchosen classes, relabeled unknown.
    pub test_unknown: LabeledDataset,
    /// Original class ids chosen as known, ascending; position = new label.
    pub known_classes: Vec<usize>,
}

/// Class-separation protocol: a seeded draw picks `known_count` of the
/// dataset's classes as known, splits their samples into train/test by
/// `train_fraction`, and relabels everything else unknown. Chosen classes
/// keep ascending order under remapping so reports stay readable.
pub fn split_classes(
    dataset: &LabeledDataset,
    known_count: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<ClassSplit> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} outside (0,1)"
        )));
    }
    let mut present: Vec<usize> = Vec::new();
    for (i, l) in dataset.labels.iter().enumerate() {
        match l {
            Label::Unknown => {
                return Err(Error::Input(format!(
                    "sample {i} is already unknown; split expects a fully labeled dataset"
                )))
            }
            Label::Known(k) => {
                if !present.contains(k) {
                    present.push(*k);
                }
            }
        }
    }
    present.sort_unstable();
    if known_count < 2 || known_count >= present.len() {
        return Err(Error::Input(format!(
            "known_count {known_count} must be in [2, {}) to leave unknown classes",
            present.len()
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pool = present.clone();
    pool.shuffle(&mut rng);
    let mut known: Vec<usize> = pool[..known_count].to_vec();
    known.sort_unstable();

    let remap = |orig: usize| known.iter().position(|&k| k == orig);
    let mut train_idx = Vec::new();
    let mut test_known_idx = Vec::new();
    let mut unknown_idx = Vec::new();
    for &k in &known {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == Label::Known(k))
            .collect();
        if members.len() < 2 {
            return Err(Error::Input(format!(
                "class {k} has {} samples; need at least 2 to split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * train_fraction).floor() as usize)
            .clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..take]);
        test_known_idx.extend_from_slice(&members[take..]);
    }
    for i in 0..dataset.len() {
        if let Label::Known(k) = dataset.labels[i] {
            if remap(k).is_none() {
                unknown_idx.push(i);
            }
        }
    }

    let relabel = |ds: &mut LabeledDataset| {
        for l in &mut ds.labels {
            if let Label::Known(k) = l {
                *l = Label::Known(remap(*k).expect("only known classes reach here"));
            }
        }
    };
    let mut train = dataset.subset(&train_idx, format!("{}/train", dataset.provenance))?;
    relabel(&mut train);
    let mut test_known = dataset.subset(&test_known_idx, format!("{}/test-known", dataset.provenance))?;
    relabel(&mut test_known);
    let mut test_unknown = dataset.subset(&unknown_idx, format!("{}/test-unknown", dataset.provenance))?;
    for l in &mut test_unknown.labels {
        *l = Label::Unknown;
    }

    Ok(ClassSplit {
        train,
        test_known,
        test_unknown,
        known_classes: known,
    })
}
