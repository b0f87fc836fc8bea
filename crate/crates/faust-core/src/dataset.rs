//! Dataset loading, batching, and sampling.
//!
//! Two on-disk formats are supported: big-endian IDX (MNIST and
//! Fashion-MNIST) and the CIFAR-10 binary layout (3073-byte records, one
//! label byte followed by 1024 R + 1024 G + 1024 B bytes). Pixels are
//! scaled by 1/255 into [0, 1] with no mean centering.
//!
//! Samplers are pure functions of (dataset, seed): the same seed always
//! yields the same batch.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;
const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Images as flat vectors in [0, 1] plus integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Row indices per class, in dataset order.
    pub class_index: Vec<Vec<usize>>,
    /// Position of each sample within its class list.
    class_rank: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.rows() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Dataset("num_classes must be positive".into()));
        }
        if let Some(p) = images.as_slice().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Dataset(format!("pixel {p} outside [0, 1]")));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        let mut class_rank = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Dataset(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            class_rank.push(class_index[y].len());
            class_index[y].push(i);
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            class_index,
            class_rank,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    /// Error unless every class has at least `min` samples. Samplers,
    /// representative selection, and centroid construction call this.
    pub fn require_class_sizes(&self, min: usize) -> Result<()> {
        for (c, class) in self.class_index.iter().enumerate() {
            if class.len() < min {
                return Err(Error::Dataset(format!(
                    "class {c} has {} samples, need at least {min}",
                    class.len()
                )));
            }
        }
        Ok(())
    }

    /// Dataset restricted to `idx` (in order). Classes are re-validated.
    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        let images = self.images.select_rows(idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(images, labels, self.num_classes)
    }

    /// Synthetic Gaussian blobs, one cluster per class, pixels in [0, 1].
    /// Used by smoke tests and the embedded selftest; no files involved.
    pub fn gaussian_blobs(
        num_classes: usize,
        per_class: usize,
        dim: usize,
        noise: f64,
        seed: u64,
    ) -> Result<LabeledDataset> {
        Ok(Self::gaussian_blobs_split(num_classes, per_class, 1, dim, noise, seed)?.0)
    }

    /// Train/test blob pair drawn around the same class centers; only the
    /// per-sample noise differs between the two splits.
    pub fn gaussian_blobs_split(
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        noise: f64,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut rng = StdRng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.random_range(0.1..0.9)).collect())
            .collect();
        let mut draw = |per_class: usize| -> Result<LabeledDataset> {
            let mut data = Vec::with_capacity(num_classes * per_class * dim);
            let mut labels = Vec::with_capacity(num_classes * per_class);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..per_class {
                    for &m in center {
                        let v: f64 =
                            m + noise * (rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0));
                        data.push(v.clamp(0.0, 1.0));
                    }
                    labels.push(c);
                }
            }
            let images = DenseMatrix::from_vec(num_classes * per_class, dim, data)?;
            LabeledDataset::new(images, labels, num_classes)
        };
        let train = draw(train_per_class)?;
        let test = draw(test_per_class)?;
        Ok((train, test))
    }
}

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if end > bytes.len() {
        return Err(Error::Consistency(format!("truncated file while reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Parse an IDX image/label pair (MNIST, Fashion-MNIST).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(image_path)?;
    let lab_bytes = fs::read(label_path)?;

    let magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image magic: expected {IDX_IMAGE_MAGIC}, found {magic} in {}",
            image_path.display()
        )));
    }
    let n = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let dim = rows * cols;
    let pixel_bytes = &img_bytes[16..];
    if pixel_bytes.len() != n * dim {
        return Err(Error::Consistency(format!(
            "image file: header promises {} pixels, found {}",
            n * dim,
            pixel_bytes.len()
        )));
    }

    let magic = read_be_u32(&lab_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label magic: expected {IDX_LABEL_MAGIC}, found {magic} in {}",
            label_path.display()
        )));
    }
    let ln = read_be_u32(&lab_bytes, 4, "label count")? as usize;
    let label_bytes = &lab_bytes[8..];
    if label_bytes.len() != ln {
        return Err(Error::Consistency(format!(
            "label file: header promises {ln} labels, found {}",
            label_bytes.len()
        )));
    }
    if ln != n {
        return Err(Error::Consistency(format!("{n} images but {ln} labels")));
    }

    let data: Vec<f64> = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    LabeledDataset::new(DenseMatrix::from_vec(n, dim, data)?, labels, num_classes)
}

/// Parse one or more CIFAR-10 binary batch files, concatenated in order.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let bytes = fs::read(p.as_ref())?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Format(format!(
                    "{}: label byte {label} out of range 0..=9",
                    p.as_ref().display()
                )));
            }
            labels.push(label as usize);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    LabeledDataset::new(DenseMatrix::from_vec(n, CIFAR_PIXELS, data)?, labels, 10)
}

/// Write an IDX image file (bit-exact round-trips with [`load_idx`]).
pub fn write_idx_images(path: &Path, images: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if images.len() != n * rows * cols {
        return Err(Error::Argument("pixel buffer does not match dims".into()));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(images);
    fs::write(path, out)?;
    Ok(())
}

/// Write an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Write CIFAR-10 binary records: (label, 3072 pixel bytes) each.
pub fn write_cifar10(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (label, pixels) in records {
        if pixels.len() != CIFAR_PIXELS {
            return Err(Error::Argument(format!(
                "record needs {CIFAR_PIXELS} pixel bytes, got {}",
                pixels.len()
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Anchor/positive/negative image triples with matching row layout.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: DenseMatrix,
    pub positives: DenseMatrix,
    pub negatives: DenseMatrix,
    pub anchor_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
}

/// Anchors with one positive each and one negative from every other class.
/// Negatives are stored anchor-major: rows `k*(C-1) .. (k+1)*(C-1)` belong
/// to anchor `k`.
#[derive(Debug, Clone)]
pub struct TupletBatch {
    pub anchors: DenseMatrix,
    pub positives: DenseMatrix,
    pub negatives: DenseMatrix,
    pub anchor_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
    pub negatives_per_anchor: usize,
}

fn draw_anchor_and_positive(ds: &LabeledDataset, rng: &mut StdRng) -> (usize, usize) {
    let anchor = rng.random_range(0..ds.len());
    let class = &ds.class_index[ds.labels[anchor]];
    let positive = if class.len() >= 2 {
        // uniform over the class excluding the anchor itself
        let mut r = rng.random_range(0..class.len() - 1);
        if r >= ds.class_rank[anchor] {
            r += 1;
        }
        class[r]
    } else {
        anchor
    };
    (anchor, positive)
}

fn draw_other_class(c: usize, num_classes: usize, rng: &mut StdRng) -> usize {
    let mut nc = rng.random_range(0..num_classes - 1);
    if nc >= c {
        nc += 1;
    }
    nc
}

/// Uniformly random triplets: anchor, same-class positive, and a negative
/// drawn uniformly from a uniformly chosen different class.
pub fn sample_triplets(ds: &LabeledDataset, batch_size: usize, rng_seed: u64) -> Result<TripletBatch> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if ds.num_classes < 2 {
        return Err(Error::Dataset("triplet sampling needs at least 2 classes".into()));
    }
    ds.require_class_sizes(1)?;
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut a_idx = Vec::with_capacity(batch_size);
    let mut p_idx = Vec::with_capacity(batch_size);
    let mut n_idx = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (anchor, positive) = draw_anchor_and_positive(ds, &mut rng);
        let nc = draw_other_class(ds.labels[anchor], ds.num_classes, &mut rng);
        let class = &ds.class_index[nc];
        let negative = class[rng.random_range(0..class.len())];
        a_idx.push(anchor);
        p_idx.push(positive);
        n_idx.push(negative);
    }
    Ok(TripletBatch {
        anchors: ds.images.select_rows(&a_idx),
        positives: ds.images.select_rows(&p_idx),
        negatives: ds.images.select_rows(&n_idx),
        anchor_labels: a_idx.iter().map(|&i| ds.labels[i]).collect(),
        negative_labels: n_idx.iter().map(|&i| ds.labels[i]).collect(),
    })
}

/// Tuplets with exactly one random negative from every non-anchor class,
/// in ascending class order.
pub fn sample_tuplets(ds: &LabeledDataset, batch_size: usize, rng_seed: u64) -> Result<TupletBatch> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if ds.num_classes < 2 {
        return Err(Error::Dataset("tuplet sampling needs at least 2 classes".into()));
    }
    ds.require_class_sizes(1)?;
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let per_anchor = ds.num_classes - 1;
    let mut a_idx = Vec::with_capacity(batch_size);
    let mut p_idx = Vec::with_capacity(batch_size);
    let mut n_idx = Vec::with_capacity(batch_size * per_anchor);
    for _ in 0..batch_size {
        let (anchor, positive) = draw_anchor_and_positive(ds, &mut rng);
        a_idx.push(anchor);
        p_idx.push(positive);
        let ac = ds.labels[anchor];
        for c in 0..ds.num_classes {
            if c == ac {
                continue;
            }
            let class = &ds.class_index[c];
            n_idx.push(class[rng.random_range(0..class.len())]);
        }
    }
    Ok(TupletBatch {
        anchors: ds.images.select_rows(&a_idx),
        positives: ds.images.select_rows(&p_idx),
        negatives: ds.images.select_rows(&n_idx),
        anchor_labels: a_idx.iter().map(|&i| ds.labels[i]).collect(),
        negative_labels: n_idx.iter().map(|&i| ds.labels[i]).collect(),
        negatives_per_anchor: per_anchor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeStrategy {
    /// Lowest dataset index per class. Deterministic, the default.
    First,
    /// Seeded uniform pick per class.
    Random,
}

/// One image per class, fixed for an entire run.
#[derive(Debug, Clone)]
pub struct RepresentativeSet {
    /// Row `c` holds the representative of class `c`.
    pub images: DenseMatrix,
    /// Dataset row index of each representative.
    pub indices: Vec<usize>,
}

impl RepresentativeSet {
    pub fn num_classes(&self) -> usize {
        self.images.rows()
    }
}

pub fn select_representatives(
    ds: &LabeledDataset,
    strategy: RepresentativeStrategy,
    rng_seed: u64,
) -> Result<RepresentativeSet> {
    ds.require_class_sizes(1)?;
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let indices: Vec<usize> = ds
        .class_index
        .iter()
        .map(|class| match strategy {
            RepresentativeStrategy::First => class[0],
            RepresentativeStrategy::Random => class[rng.random_range(0..class.len())],
        })
        .collect();
    Ok(RepresentativeSet {
        images: ds.images.select_rows(&indices),
        indices,
    })
}

/// Rebuild a representative set from stored dataset indices (checkpoint path).
pub fn representatives_from_indices(ds: &LabeledDataset, indices: &[usize]) -> Result<RepresentativeSet> {
    if indices.len() != ds.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} representatives but dataset has {} classes",
            indices.len(),
            ds.num_classes
        )));
    }
    for (c, &i) in indices.iter().enumerate() {
        if i >= ds.len() || ds.labels[i] != c {
            return Err(Error::Checkpoint(format!(
                "representative index {i} does not point at a class-{c} sample"
            )));
        }
    }
    Ok(RepresentativeSet {
        images: ds.images.select_rows(indices),
        indices: indices.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Positive,
    Negative,
}

/// Overwrite the first C entries of `x` with a one-hot label encoding.
/// `Positive` writes the true label; `Negative` a seeded random wrong one.
pub fn embed_label_ff(
    x: &[f64],
    label: usize,
    num_classes: usize,
    mode: LabelMode,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    if x.len() < num_classes {
        return Err(Error::Argument(format!(
            "input dim {} smaller than {num_classes} classes",
            x.len()
        )));
    }
    if label >= num_classes {
        return Err(Error::Argument(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut out = x.to_vec();
    let hot = match mode {
        LabelMode::Positive => label,
        LabelMode::Negative => draw_other_class(label, num_classes, &mut rng),
    };
    out[..num_classes].fill(0.0);
    out[hot] = 1.0;
    Ok(out)
}

/// Positive and negative streams for one batch of forward-forward training:
/// the same images with the true one-hot and a random wrong one-hot.
pub fn build_ff_batch(
    images: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    rng_seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if images.cols() < num_classes {
        return Err(Error::Argument(format!(
            "input dim {} smaller than {num_classes} classes",
            images.cols()
        )));
    }
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut pos = images.clone();
    let mut neg = images.clone();
    for (i, &y) in labels.iter().enumerate() {
        let wrong = draw_other_class(y, num_classes, &mut rng);
        pos.row_mut(i)[..num_classes].fill(0.0);
        pos.row_mut(i)[y] = 1.0;
        neg.row_mut(i)[..num_classes].fill(0.0);
        neg.row_mut(i)[wrong] = 1.0;
    }
    Ok((pos, neg))
}
