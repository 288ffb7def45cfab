//! Datasets, non-IID client partitioning and per-client splits.

mod cifar;
mod partition;

pub use cifar::{load_cifar_binary, CifarFormat};
pub use partition::{lda_partition, split_client, ClientSplit, Partition, PartitionSpec, SplitFractions};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Images scaled to `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside {classes} classes")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[channels, height, width]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Stacks the selected samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }
}

/// Parameters of the synthetic class-template generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel Gaussian noise added to each template.
    pub noise: f32,
    pub seed: u64,
}

/// Each class gets a fixed random template; samples are the template plus clipped Gaussian noise.
/// Samples are ordered class by class.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.channels == 0 || cfg.image_size == 0 {
        return Err(Error::Config("synthetic dataset sizes must be at least 1".into()));
    }
    if cfg.noise.is_nan() || cfg.noise < 0.0 {
        return Err(Error::Config("synthetic noise must be non-negative".into()));
    }
    let per = cfg.channels * cfg.image_size * cfg.image_size;
    let mut template_rng = rng::stream(cfg.seed, &[0x5EED, 0]);
    let templates: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| (0..per).map(|_| template_rng.random::<f32>()).collect())
        .collect();
    let mut noise_rng = rng::stream(cfg.seed, &[0x5EED, 1]);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for (class, t) in templates.iter().enumerate() {
        for _ in 0..cfg.per_class {
            for &v in t {
                let x = if cfg.noise > 0.0 {
                    v + cfg.noise * normal.sample(&mut noise_rng)
                } else {
                    v
                };
                data.push(x.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, cfg.channels, cfg.image_size, cfg.image_size], data)?;
    LabeledDataset::new(images, labels, cfg.classes)
}
