//! Dataset ingestion and iteration: CIFAR-10 binary files, a synthetic
//! clustered-image generator for minutes-scale experiments, stratified
//! label-fraction splits, and deterministic epoch shuffles.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{stream_rng, StreamTag};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// Images in `[0,1]`, labels, and identity sample ids (`0..len`).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        split: Split,
        num_classes: usize,
        (channels, height, width): (usize, usize, usize),
        data: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let per_image = channels * height * width;
        if labels.is_empty() || data.len() != labels.len() * per_image {
            return Err(Error::Data(format!(
                "dataset needs n*{} pixels for n={} labels, got {}",
                per_image,
                labels.len(),
                data.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            split,
            num_classes,
            channels,
            height,
            width,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.channels * self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Copy the given samples into a `[B,C,H,W]` batch tensor.
    pub fn gather(&self, indices: &[u32]) -> Tensor<f32> {
        let n = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i as usize));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("gather shape")
    }

    /// Per-channel mean and standard deviation over the whole set, for the
    /// encoder stem normalization.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let per_image = self.channels * plane;
        let count = (self.len() * plane) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        for i in 0..self.len() {
            let img = &self.data[i * per_image..(i + 1) * per_image];
            for (c, m) in mean.iter_mut().enumerate() {
                *m += img[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for i in 0..self.len() {
            let img = &self.data[i * per_image..(i + 1) * per_image];
            for (c, v) in var.iter_mut().enumerate() {
                *v += img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&x| {
                        let d = x as f64 - mean[c];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = var.iter().map(|&v| (v / count).sqrt().max(1e-6)).collect();
        (mean, std)
    }
}

/// One CIFAR-10 binary batch file: 3073-byte records, one label byte then
/// 3072 channel-major pixel bytes.
pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let valid = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::Data(format!(
            "{}: truncated record at byte offset {} (file length {} is not a multiple of {})",
            path.display(),
            valid,
            bytes.len(),
            CIFAR_RECORD_BYTES
        )));
    }

    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "{}: record {} has label byte {} >= {}",
                path.display(),
                i,
                label,
                CIFAR_CLASSES
            )));
        }
        labels.push(label as u32);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(split, CIFAR_CLASSES, (3, 32, 32), data, labels)
}

/// Standard CIFAR-10 directory: `data_batch_1..5.bin` as train,
/// `test_batch.bin` as val.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let part = load_cifar10_file(&dir.join(format!("data_batch_{i}.bin")), Split::Train)?;
        labels.extend_from_slice(part.labels());
        data.extend_from_slice(&part.data);
    }
    let train = Dataset::new(Split::Train, CIFAR_CLASSES, (3, 32, 32), data, labels)?;
    let val = load_cifar10_file(&dir.join("test_batch.bin"), Split::Val)?;
    Ok((train, val))
}

/// Procedural class-conditional image spec. Classes differ by grating
/// orientation/frequency, hue, and a blob motif; individual samples move
/// within the class by phase, position, and amplitude jitter plus pixel
/// noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: (usize, usize),
    /// Spatial frequency multiplier for the class gratings.
    pub texture_scale: f64,
    /// Strength of per-sample geometric jitter in [0,1].
    pub jitter: f64,
    /// Additive Gaussian pixel noise sigma.
    pub noise_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            samples_per_class: 500,
            image_size: (32, 32),
            texture_scale: 1.0,
            jitter: 1.0,
            noise_level: 0.12,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push("synthetic.num_classes must be >= 2".into());
        }
        if self.samples_per_class == 0 {
            problems.push("synthetic.samples_per_class must be >= 1".into());
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            problems.push("synthetic.image_size must be at least 8x8".into());
        }
        if self.noise_level < 0.0 {
            problems.push("synthetic.noise_level must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn class_palette(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
    [
        0.55 + 0.45 * hue.cos(),
        0.55 + 0.45 * (hue + 2.0944).cos(),
        0.55 + 0.45 * (hue + 4.1888).cos(),
    ]
}

/// Deterministic class-conditional dataset: `(spec, seed)` fully determine
/// every pixel, independent of generation order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = vec![0.0f32; n * 3 * h * w];
    let mut labels = vec![0u32; n];

    for class in 0..spec.num_classes {
        let palette = class_palette(class, spec.num_classes);
        let orient = std::f64::consts::PI * (class % 5) as f64 / 5.0;
        let freq = spec.texture_scale * (2.0 + 2.5 * (class / 5) as f64);
        let (dir_x, dir_y) = (orient.cos(), orient.sin());

        for si in 0..spec.samples_per_class {
            let idx = class * spec.samples_per_class + si;
            labels[idx] = class as u32;
            let mut rng = stream_rng(seed, StreamTag::Synthetic, class as u64, si as u64);

            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = 1.0 - spec.jitter * rng.gen_range(0.0..0.4);
            let cx = 0.5 + spec.jitter * rng.gen_range(-0.3..0.3);
            let cy = 0.5 + spec.jitter * rng.gen_range(-0.3..0.3);
            let blob_r = 0.18 + spec.jitter * rng.gen_range(-0.05..0.08);

            let img = &mut data[idx * 3 * h * w..(idx + 1) * 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 / w as f64;
                    let v = y as f64 / h as f64;
                    let t = freq * std::f64::consts::TAU * (u * dir_x + v * dir_y) + phase;
                    let grating = 0.5 + 0.5 * amp * t.sin();
                    let d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                    let blob = (-d2 / (2.0 * blob_r * blob_r)).exp();
                    for (c, &pal) in palette.iter().enumerate() {
                        let base = grating * pal + 0.35 * blob * (1.0 - pal);
                        let noise = spec.noise_level * sample_gaussian(&mut rng);
                        img[(c * h + y) * w + x] = (base + noise).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }

    Dataset::new(Split::Train, spec.num_classes, (3, h, w), data, labels)
}

fn sample_gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Index sets produced by [`split_labels`]. The unlabeled side keeps its
/// ground-truth labels in the parent dataset for evaluation only.
#[derive(Clone, Debug)]
pub struct LabelSplit {
    pub labeled: Vec<u32>,
    pub unlabeled: Vec<u32>,
}

/// Stratified per-class split: `floor(fraction * n_c)` labeled samples from
/// every class (at least one, or the split fails).
pub fn split_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<LabelSplit> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "label fraction must lie in (0,1], got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); dataset.num_classes()];
    for i in 0..dataset.len() {
        by_class[dataset.label(i) as usize].push(i as u32);
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (class, mut ids) in by_class.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let take = (fraction * ids.len() as f64).floor() as usize;
        if take == 0 {
            return Err(Error::Data(format!(
                "fraction {} leaves class {} without labeled samples ({} available)",
                fraction,
                class,
                ids.len()
            )));
        }
        let mut rng = stream_rng(seed, StreamTag::Split, class as u64, 0);
        ids.shuffle(&mut rng);
        labeled.extend_from_slice(&ids[..take]);
        unlabeled.extend_from_slice(&ids[take..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(LabelSplit { labeled, unlabeled })
}

/// Fresh permutation of `0..n` per `(seed, epoch)`, chunked into batches;
/// the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<u32>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = stream_rng(seed, StreamTag::Data, epoch, 0);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
