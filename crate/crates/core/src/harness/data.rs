//! Toy datasets: Gaussian blobs and small labelled image directories.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledBatch;
use crate::tensor::Tensor;

/// Share of every class that goes to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub input_shape: Vec<usize>,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

/// Train/test data partitioned around one forget class.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetSplits {
    pub retain_train: LabeledBatch,
    pub forget_train: LabeledBatch,
    pub retain_test: LabeledBatch,
    pub forget_test: LabeledBatch,
}

impl Dataset {
    pub fn forget_splits(&self, forget_class: usize) -> Result<ForgetSplits> {
        if forget_class >= self.classes {
            return Err(Error::Config(format!(
                "forget class {forget_class} out of range for {} classes",
                self.classes
            )));
        }
        Ok(ForgetSplits {
            retain_train: self.train.filter(|y| y != forget_class),
            forget_train: self.train.filter(|y| y == forget_class),
            retain_test: self.test.filter(|y| y != forget_class),
            forget_test: self.test.filter(|y| y == forget_class),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    /// Per-class overrides of `samples_per_class`, as `[class, count]` pairs.
    #[serde(default)]
    pub class_samples: Vec<(usize, usize)>,
    /// Distance of every class centre from the origin.
    pub separation: f64,
    #[serde(default = "unit")]
    pub noise: f64,
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl BlobSpec {
    pub fn count(&self, class: usize) -> usize {
        self.class_samples
            .iter()
            .rev()
            .find(|(c, _)| *c == class)
            .map_or(self.samples_per_class, |&(_, n)| n)
    }
}

fn split_class(mut samples: Vec<Tensor>, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
    samples.shuffle(rng);
    let n_train = (samples.len() as f64 * TRAIN_FRACTION).round() as usize;
    let test = samples.split_off(n_train);
    (samples, test)
}

fn assemble(per_class: Vec<Vec<Tensor>>, input_shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Dataset {
    let classes = per_class.len();
    let mut train = LabeledBatch::default();
    let mut test = LabeledBatch::default();
    for (label, samples) in per_class.into_iter().enumerate() {
        let (tr, te) = split_class(samples, rng);
        for x in tr {
            train.push(x, label);
        }
        for x in te {
            test.push(x, label);
        }
    }
    Dataset { classes, input_shape, train, test }
}

/// Isotropic Gaussian blobs around centres at distance `separation` from the
/// origin in random directions, split 80/20 within every class.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dims == 0 {
        return Err(Error::Config("blobs need at least 2 classes and 1 dimension".into()));
    }
    if !(spec.separation >= 0.0 && spec.noise > 0.0) {
        return Err(Error::Config("blob separation must be non-negative and noise positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let v: Vec<f64> = (0..spec.dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        centers.push(v.into_iter().map(|x| x * spec.separation / norm).collect::<Vec<f64>>());
    }
    let mut per_class = Vec::with_capacity(spec.classes);
    for (c, center) in centers.iter().enumerate() {
        let samples = (0..spec.count(c))
            .map(|_| {
                let x = center
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + spec.noise * z) as f32
                    })
                    .collect();
                Tensor::from_vec(x)
            })
            .collect::<Result<Vec<_>>>()?;
        per_class.push(samples);
    }
    Ok(assemble(per_class, vec![spec.dims], &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDirSpec {
    /// One sub-directory per class; classes are numbered in name order.
    pub path: std::path::PathBuf,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn load_image(path: &Path, spec: &ImageDirSpec) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.width() as usize != spec.width || img.height() as usize != spec.height {
        return Err(Error::Dimension(format!(
            "{} is {}x{}, expected {}x{}",
            path.display(),
            img.width(),
            img.height(),
            spec.width,
            spec.height
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let data: Vec<f32> = match spec.channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let mut planar = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    planar[ch * h * w + i] = px[ch] as f32 / 255.0;
                }
            }
            planar
        }
        other => return Err(Error::Config(format!("images need 1 or 3 channels, got {other}"))),
    };
    Tensor::new(vec![spec.channels, h, w], data)
}

/// Loads `path/<class>/<image>` files (PNG or PNM), scaled to `[0, 1]`.
pub fn load_image_dir(spec: &ImageDirSpec) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(&spec.path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Config(format!("{} needs at least two class directories", spec.path.display())));
    }
    let mut per_class = Vec::with_capacity(class_dirs.len());
    for dir in &class_dirs {
        let mut files: Vec<_> = fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyInput(format!("class directory {} has no images", dir.display())));
        }
        per_class.push(files.iter().map(|f| load_image(f, spec)).collect::<Result<Vec<_>>>()?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(assemble(per_class, vec![spec.channels, spec.height, spec.width], &mut rng))
}
