//! Run configuration: JSON on disk, validated at load, snapshot on every
//! run for provenance. Flat CLI flags can override the common fields.

use crate::dataset::{self, LabeledDataset, RepresentativeStrategy};
use crate::error::{Error, Result};
use crate::model::ForwardSource;
use crate::norm::NormMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FaustTriplet,
    FaustTuplet,
    FaustRepresentative,
    Ff,
    Bp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FaustTriplet,
        Variant::FaustTuplet,
        Variant::FaustRepresentative,
        Variant::Ff,
        Variant::Bp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::FaustTriplet => "faust_triplet",
            Variant::FaustTuplet => "faust_tuplet",
            Variant::FaustRepresentative => "faust_representative",
            Variant::Ff => "ff",
            Variant::Bp => "bp",
        }
    }

    /// Variants whose inference references are class centroids.
    pub fn uses_centroids(&self) -> bool {
        matches!(self, Variant::FaustTriplet | Variant::FaustTuplet)
    }
}

/// Where the images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DataSource {
    /// Big-endian IDX pairs (MNIST, Fashion-MNIST).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// CIFAR-10 binary batches.
    Cifar10 {
        train_batches: Vec<PathBuf>,
        test_batches: Vec<PathBuf>,
    },
    /// In-memory synthetic Gaussian blobs; no files involved.
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                dataset::load_idx(train_images, train_labels)?,
                dataset::load_idx(test_images, test_labels)?,
            )),
            DataSource::Cifar10 {
                train_batches,
                test_batches,
            } => Ok((
                dataset::load_cifar10(train_batches)?,
                dataset::load_cifar10(test_batches)?,
            )),
            DataSource::Blobs {
                classes,
                per_class,
                test_per_class,
                dim,
                noise,
                seed,
            } => LabeledDataset::gaussian_blobs_split(
                *classes,
                *per_class,
                *test_per_class,
                *dim,
                *noise,
                *seed,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceDistance {
    /// Unsquared Euclidean distance, as the inference rule is written.
    L2,
    /// Squared distance, exposed for ablation only.
    Squared,
}

fn default_emb_dim() -> usize {
    256
}
fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f64 {
    0.001
}
fn default_seed_init() -> u64 {
    1
}
fn default_seed_sampling() -> u64 {
    2
}
fn default_seed_representatives() -> u64 {
    3
}
fn default_norm_mode() -> NormMode {
    NormMode::Length
}
fn default_forward_source() -> ForwardSource {
    ForwardSource::Activation
}
fn default_rep_strategy() -> RepresentativeStrategy {
    RepresentativeStrategy::First
}
fn default_centroid_k() -> usize {
    100
}
fn default_inference_distance() -> InferenceDistance {
    InferenceDistance::L2
}
fn default_train_eval_samples() -> usize {
    5000
}
fn default_true() -> bool {
    true
}

/// Full description of one training/evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Hidden layer widths, e.g. [500, 500, 500].
    pub hidden: Vec<usize>,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Triplet margin; only valid for faust_triplet. Default 0.2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Goodness threshold; only valid for ff. Default 2.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default = "default_seed_init")]
    pub init_seed: u64,
    #[serde(default = "default_seed_sampling")]
    pub sampling_seed: u64,
    #[serde(default = "default_seed_representatives")]
    pub representative_seed: u64,
    pub data: DataSource,
    #[serde(default = "default_norm_mode")]
    pub norm_mode: NormMode,
    #[serde(default = "default_forward_source")]
    pub forward_source: ForwardSource,
    #[serde(default = "default_rep_strategy")]
    pub representative_strategy: RepresentativeStrategy,
    /// Samples averaged per class when building centroid references.
    #[serde(default = "default_centroid_k")]
    pub centroid_k: usize,
    #[serde(default = "default_inference_distance")]
    pub inference_distance: InferenceDistance,
    /// Seeded subset size for the per-epoch train accuracy (0 = full set).
    #[serde(default = "default_train_eval_samples")]
    pub train_eval_samples: usize,
    /// Seeded subset size for the per-epoch test accuracy (0 = full set).
    /// The final reported test accuracy always uses the full test set.
    #[serde(default)]
    pub test_eval_samples: usize,
    /// Optional seeded subset of the training set to train on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    /// Record wall-clock seconds in the epoch log. Disable to make log
    /// files byte-identical across reruns.
    #[serde(default = "default_true")]
    pub log_wallclock: bool,
    /// Output directory for checkpoint, logs, and config snapshot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(json).map_err(|e| Error::Config {
            field: "<json>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| -> Result<()> {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden", "need at least one positive layer width".into());
        }
        if self.emb_dim == 0 {
            return err("emb_dim", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return err("lr", format!("must be a finite non-negative number, got {}", self.lr));
        }
        if self.alpha.is_some() && self.variant != Variant::FaustTriplet {
            return err(
                "alpha",
                format!("only valid for faust_triplet, not {}", self.variant.as_str()),
            );
        }
        if let Some(a) = self.alpha {
            if a < 0.0 {
                return err("alpha", "margin must be non-negative".into());
            }
        }
        if self.theta.is_some() && self.variant != Variant::Ff {
            return err(
                "theta",
                format!("only valid for ff, not {}", self.variant.as_str()),
            );
        }
        if self.forward_source == ForwardSource::Embedding
            && matches!(self.variant, Variant::Ff | Variant::Bp)
        {
            return err(
                "forward_source",
                format!("{} always forwards activations", self.variant.as_str()),
            );
        }
        if self.centroid_k == 0 {
            return err("centroid_k", "must be positive".into());
        }
        if let Some(n) = self.train_subset {
            if n == 0 {
                return err("train_subset", "must be positive when present".into());
            }
        }
        Ok(())
    }

    /// Triplet margin with the documented default.
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.2)
    }

    /// Goodness threshold with the documented default.
    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(2.0)
    }

    /// [input_dim, hidden...] once the input width is known.
    pub fn arch(&self, input_dim: usize) -> Vec<usize> {
        let mut arch = Vec::with_capacity(self.hidden.len() + 1);
        arch.push(input_dim);
        arch.extend_from_slice(&self.hidden);
        arch
    }
}
