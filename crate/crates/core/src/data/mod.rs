//! Datasets, batching, metrics and checkpoint persistence.

mod checkpoint;
mod csv_io;
mod idx;
mod metrics;
mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use csv_io::load_csv;
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels,
    read_maybe_gz, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter, RecordKind};
pub use synth::{synth_blobs, synth_two_moons, Blobs};

use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::tensor::Tensor;

/// Per-feature affine normalisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Constant features keep unit scale so they map to zero.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let rows = x.shape()[0];
        if rows == 0 {
            return Err(Error::Contract(
                "cannot fit normalisation on no rows".into(),
            ));
        }
        let flat = x.clone().reshape(&[rows, x.len() / rows])?;
        let mean = flat.mean_axis(0)?.into_data();
        let mut var = vec![0.0; mean.len()];
        for i in 0..rows {
            for ((v, x), m) in var.iter_mut().zip(flat.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        let per = self.mean.len();
        if x.len() % per.max(1) != 0 {
            return Err(Error::shape("normalisation", x.shape(), &[0, per]));
        }
        for chunk in x.data_mut().chunks_mut(per) {
            for ((v, m), s) in chunk.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, …]`
    pub x: Tensor,
    pub y: Targets,
    pub classes: usize,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Targets, classes: usize) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if y.len() != n {
            return Err(Error::shape("dataset", x.shape(), &[y.len()]));
        }
        if let Targets::Classes(c) = &y {
            if let Some(bad) = c.iter().find(|&&l| l >= classes) {
                return Err(Error::Contract(format!(
                    "label {bad} outside {classes} classes"
                )));
            }
        }
        Ok(Dataset {
            x,
            y,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn features(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Reinterprets every example with a new per-example shape.
    pub fn reshape_examples(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.x = self.x.reshape(&full)?;
        Ok(self)
    }

    pub fn design_matrix(&self) -> Result<Tensor> {
        self.x.clone().reshape(&[self.len(), self.features()])
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Targets)> {
        let per = self.features();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Contract(format!("example {i} out of range")));
            }
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.example_shape());
        let y = match &self.y {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let w = v.cols();
                let mut out = Vec::with_capacity(idx.len() * w);
                for &i in idx {
                    out.extend_from_slice(v.row(i));
                }
                Targets::Values(Tensor::new(vec![idx.len(), w], out)?)
            }
        };
        Ok((Tensor::new(shape, data)?, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(idx)?;
        Ok(Dataset {
            x,
            y,
            classes: self.classes,
            norm: self.norm.clone(),
        })
    }

    /// Shuffled split into `(train, test)` with `test_fraction` held out.
    pub fn split(&self, test_fraction: f64, rng: &mut impl Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    /// Standardises `self` and `other` with statistics of `self` only.
    pub fn standardize_with(&mut self, other: &mut Dataset) -> Result<()> {
        let norm = Normalization::fit(&self.x)?;
        norm.apply(&mut self.x)?;
        norm.apply(&mut other.x)?;
        self.norm = Some(norm.clone());
        other.norm = Some(norm);
        Ok(())
    }

    /// Mini-batch index lists for one epoch; the last batch may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// Where a run's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        label: String,
    },
    Blobs {
        n: usize,
        d: usize,
        classes: usize,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_margin() -> f64 {
    4.0
}

fn default_noise() -> f64 {
    0.1
}

impl DataSource {
    /// Parses the compact command-line form: `idx:IMAGES,LABELS`,
    /// `csv:PATH,LABEL`, `blobs:N,D,CLASSES` or `moons:N,NOISE`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("batch source {s:?} lacks a kind prefix")))?;
        let parts: Vec<&str> = rest.split(',').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.trim().parse().ok())
                .ok_or_else(|| {
                    Error::Config(format!("batch source {s:?}: field {i} is not a count"))
                })
        };
        match (kind, parts.len()) {
            ("idx", 2) => Ok(DataSource::Idx {
                images: parts[0].into(),
                labels: parts[1].into(),
            }),
            ("csv", 2) => Ok(DataSource::Csv {
                path: parts[0].into(),
                label: parts[1].into(),
            }),
            ("blobs", 3) => Ok(DataSource::Blobs {
                n: num(0)?,
                d: num(1)?,
                classes: num(2)?,
                margin: default_margin(),
            }),
            ("moons", 2) => Ok(DataSource::TwoMoons {
                n: num(0)?,
                noise: parts[1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("batch source {s:?}: bad noise")))?,
            }),
            _ => Err(Error::Config(format!("unrecognised batch source {s:?}"))),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx(images, labels),
            DataSource::Csv { path, label } => load_csv(path, label),
            DataSource::Blobs {
                n,
                d,
                classes,
                margin,
            } => Ok(synth_blobs(*n, *d, *classes, *margin, seed)?.data),
            DataSource::TwoMoons { n, noise } => synth_two_moons(*n, *noise, seed),
        }
    }
}
