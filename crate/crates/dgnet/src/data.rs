//! Datasets: a deterministic synthetic substrate for ablation experiments
//! and a CIFAR-10 binary loader.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{DgError, Result};
use crate::rng;
use crate::tensor::Array;

/// CIFAR-10 channel statistics used for normalization (fixed constants).
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images normalized to zero mean / unit variance per channel, labels as
/// class indices. Samples `[0, train_count)` form the training split and
/// the remainder the disjoint evaluation split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Array<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train_count: usize,
}

impl Dataset {
    pub fn new(images: Array<f32>, labels: Vec<usize>, classes: usize, train_count: usize) -> Result<Self> {
        let m = images.shape()[0];
        if labels.len() != m {
            return Err(DgError::Data(format!(
                "{m} images but {} labels",
                labels.len()
            )));
        }
        if train_count > m {
            return Err(DgError::Data(format!(
                "train split {train_count} exceeds {m} samples"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DgError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
            train_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn eval_count(&self) -> usize {
        self.len() - self.train_count
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Array<f32>, Vec<usize>) {
        let rows: Vec<Array<f32>> = indices
            .iter()
            .map(|&i| self.images.slice_first(i))
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Array::stack(&rows).expect("uniform image shapes"), labels)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.train_count).collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        (self.train_count..self.len()).collect()
    }

    /// Normalizes each channel to zero mean / unit variance over the whole
    /// dataset, in place.
    pub fn normalize_per_channel(&mut self) {
        let shape = self.images.shape().to_vec();
        let (m, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..m {
                let start = (b * c + ci) * hw;
                for &v in &self.images.data()[start..start + hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let count = (m * hw) as f64;
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(1e-12);
            let std = var.sqrt();
            for b in 0..m {
                let start = (b * c + ci) * hw;
                for v in &mut self.images.data_mut()[start..start + hw] {
                    *v = ((*v as f64 - mean) / std) as f32;
                }
            }
        }
    }
}

/// Synthetic dataset specification. All per-sample variation (frequency and
/// phase jitter, cross-orientation interference, pixel noise) scales with
/// `noise`, so amplitude zero produces identical images within a class.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 150,
            eval_per_class: 50,
            image_size: 16,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Class-conditional oriented gratings: class k is a sinusoid at angle
/// pi*k/K. A small static CNN separates the clean patterns quickly; the
/// noise-gated jitters make per-sample adaptation worthwhile.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(DgError::Data(format!(
            "synthetic dataset needs >= 2 classes, got {}",
            spec.classes
        )));
    }
    let s = spec.image_size;
    let mut rng = rng::seeded(spec.seed, rng::STREAM_DATA);
    let total = spec.classes * (spec.per_class + spec.eval_per_class);
    let mut images = Array::zeros(vec![total, 3, s, s]);
    let mut labels = Vec::with_capacity(total);

    // Train block first, then the eval block, both drawn from one stream.
    let write_sample = |rng: &mut rand_chacha::ChaCha8Rng,
                        images: &mut Array<f32>,
                        index: usize,
                        class: usize| {
        // Per-sample variation, all gated by the noise amplitude: a bimodal
        // frequency style (each class splits into a slow and a fast band),
        // phase jitter, interference at a neighbouring orientation, and
        // white noise. Under the fast style the orientation code is
        // permuted by one class, so labels are a conjunction of band and
        // orientation rather than orientation alone.
        let fast = rng.gen::<f64>() < 0.5;
        let style = if fast { 2.25 } else { 0.25 };
        let freq = 2.0 * (1.0 + spec.noise * style);
        let oriented_as = if fast && spec.noise > 0.0 {
            (class + 1) % spec.classes
        } else {
            class
        };
        let theta = std::f64::consts::PI * oriented_as as f64 / spec.classes as f64;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let phase = std::f64::consts::PI * spec.noise * (rng.gen::<f64>() * 2.0 - 1.0);
        let confuse_class = (oriented_as + 1) % spec.classes;
        let confuse_theta = std::f64::consts::PI * confuse_class as f64 / spec.classes as f64;
        let confuse_amp = spec.noise * (0.7 + 0.8 * rng.gen::<f64>());
        let confuse_phase = std::f64::consts::TAU * rng.gen::<f64>();
        let data = images.data_mut();
        for c in 0..3usize {
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 / s as f64;
                    let v = y as f64 / s as f64;
                    let proj = u * cos_t + v * sin_t;
                    let proj_c = u * confuse_theta.cos() + v * confuse_theta.sin();
                    let carrier =
                        (std::f64::consts::TAU * freq * proj + phase + 0.4 * c as f64).sin();
                    // interference rides in the carrier's own band, so
                    // rejecting it takes style-specific filtering
                    let interference = confuse_amp
                        * (std::f64::consts::TAU * freq * proj_c + confuse_phase).sin();
                    let white = spec.noise * 0.5 * crate::rng::normal(rng);
                    data[((index * 3 + c) * s + y) * s + x] =
                        (carrier + interference + white) as f32;
                }
            }
        }
    };

    let mut index = 0;
    for block in [spec.per_class, spec.eval_per_class] {
        for class in 0..spec.classes {
            for _ in 0..block {
                write_sample(&mut rng, &mut images, index, class);
                labels.push(class);
                index += 1;
            }
        }
    }

    let mut ds = Dataset::new(
        images,
        labels,
        spec.classes,
        spec.classes * spec.per_class,
    )?;
    ds.normalize_per_channel();
    Ok(ds)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary records. `path` may be a single `.bin` file or a
/// directory containing `data_batch_{1..5}.bin` (training split) and
/// `test_batch.bin` (evaluation split). A single file becomes the training
/// split. Pixels scale to [0,1] then normalize with [`CIFAR_MEAN`] and
/// [`CIFAR_STD`].
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let mut train_raw: Vec<u8> = Vec::new();
    let mut eval_raw: Vec<u8> = Vec::new();
    if path.is_dir() {
        let mut found = false;
        for i in 1..=5 {
            let f = path.join(format!("data_batch_{i}.bin"));
            if f.is_file() {
                train_raw.extend(fs::read(&f)?);
                found = true;
            }
        }
        let test = path.join("test_batch.bin");
        if test.is_file() {
            eval_raw = fs::read(&test)?;
        }
        if !found {
            return Err(DgError::Data(format!(
                "no data_batch_*.bin files under {}",
                path.display()
            )));
        }
    } else {
        train_raw = fs::read(path)?;
    }
    parse_cifar(&train_raw, &eval_raw)
}

fn parse_cifar(train_raw: &[u8], eval_raw: &[u8]) -> Result<Dataset> {
    for (name, raw) in [("train", train_raw), ("eval", eval_raw)] {
        if raw.len() % CIFAR_RECORD != 0 {
            return Err(DgError::Data(format!(
                "{name} bytes {} not a multiple of the {CIFAR_RECORD}-byte record size",
                raw.len()
            )));
        }
    }
    let train_count = train_raw.len() / CIFAR_RECORD;
    let total = train_count + eval_raw.len() / CIFAR_RECORD;
    if total == 0 {
        return Err(DgError::Data("no records".into()));
    }
    let mut images = Array::zeros(vec![total, 3, 32, 32]);
    let mut labels = Vec::with_capacity(total);
    let plane = 32 * 32;
    for (r, rec) in train_raw
        .chunks_exact(CIFAR_RECORD)
        .chain(eval_raw.chunks_exact(CIFAR_RECORD))
        .enumerate()
    {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DgError::Data(format!(
                "record {r}: label byte {label} outside 0..=9"
            )));
        }
        labels.push(label);
        let data = images.data_mut();
        for c in 0..3 {
            for p in 0..plane {
                let v = rec[1 + c * plane + p] as f32 / 255.0;
                data[((r * 3 + c) * plane) + p] = (v - CIFAR_MEAN[c]) / CIFAR_STD[c];
            }
        }
    }
    Dataset::new(images, labels, 10, train_count)
}

/// Caps the training/evaluation splits at the given sizes (class balance is
/// whatever the file order provides); `None` keeps a split whole.
pub fn with_split_caps(ds: Dataset, train_cap: Option<usize>, eval_cap: Option<usize>) -> Dataset {
    let train_n = train_cap.unwrap_or(ds.train_count).min(ds.train_count);
    let eval_n = eval_cap.unwrap_or(ds.eval_count()).min(ds.eval_count());
    let keep: Vec<usize> = (0..train_n)
        .chain(ds.train_count..ds.train_count + eval_n)
        .collect();
    let (images, labels) = ds.batch(&keep);
    Dataset {
        images,
        labels,
        classes: ds.classes,
        train_count: train_n,
    }
}
