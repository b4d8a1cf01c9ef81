//! Image collections, benchmark readers and writers, one-class splits and
//! the synthetic disk-versus-stripes generator.

mod cifar;
mod idx;
mod imagedir;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use cifar::{read_cifar10, read_cifar10_file, write_cifar10};
pub use idx::{read_idx, write_idx};
pub use imagedir::{read_image_dir, resize_bilinear, write_image_dir};
pub use synth::{synth_generate, SynthSpec};

/// Value range the pixels of a [`LabeledImages`] are in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// Raw `[0, 255]`.
    Bytes,
    /// `[-1, 1]`.
    Tanh,
    /// Per-image zero mean, unit deviation.
    ZScore,
}

/// `N x C x H x W` images with per-sample labels and identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
    pub range: PixelRange,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u32>, ids: Vec<String>, range: PixelRange) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(
                "LabeledImages",
                format!("images must be N x C x H x W, got {:?}", images.shape()),
            ));
        }
        let n = images.dim(0);
        if labels.len() != n || ids.len() != n {
            return Err(Error::shape(
                "LabeledImages",
                format!("{n} images but {} labels and {} ids", labels.len(), ids.len()),
            ));
        }
        Ok(LabeledImages {
            images,
            labels,
            ids,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledImages {
            images: self.images.select0(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            range: self.range,
        })
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero datasets".into()))?;
        if parts.iter().any(|p| p.range != first.range) {
            return Err(Error::InvalidArgument("concat of datasets with different ranges".into()));
        }
        let imgs: Vec<&Tensor<T>> = parts.iter().map(|p| &p.images).collect();
        Ok(LabeledImages {
            images: Tensor::concat0(&imgs)?,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            ids: parts.iter().flat_map(|p| p.ids.iter().cloned()).collect(),
            range: first.range,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LabeledImages<U> {
        LabeledImages {
            images: self.images.cast(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            range: self.range,
        }
    }
}

/// Maps a byte `0..=255` to `[-1, 1]`.
pub fn byte_to_tanh<T: Scalar>(b: u8) -> T {
    T::from_f64_lossy(b as f64 / 127.5 - 1.0)
}

/// Inverse of [`byte_to_tanh`], rounding and clamping.
pub fn tanh_to_byte<T: Scalar>(v: T) -> u8 {
    ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Normalisation applied by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    TanhRange,
    ZScore,
}

/// Added to the per-image deviation in z-score normalisation.
pub const ZSCORE_EPS: f64 = 1e-6;

/// Rescales pixel values. `TanhRange` maps byte-range data to `[-1, 1]`
/// (data already in `[-1, 1]` is returned unchanged); `ZScore` standardises
/// every image on its own.
pub fn normalize<T: Scalar>(data: &LabeledImages<T>, mode: NormalizeMode) -> Result<LabeledImages<T>> {
    let mut out = data.clone();
    match (mode, data.range) {
        (NormalizeMode::TanhRange, PixelRange::Tanh) => {}
        (NormalizeMode::TanhRange, PixelRange::Bytes) => {
            let k = T::from_f64_lossy(127.5);
            out.images = data.images.map(|v| v / k - T::one());
            out.range = PixelRange::Tanh;
        }
        (NormalizeMode::TanhRange, PixelRange::ZScore) => {
            return Err(Error::InvalidArgument(
                "z-scored images have no byte range to map to [-1, 1]".into(),
            ))
        }
        (NormalizeMode::ZScore, _) => {
            let row = data.images.row_len();
            if row > 0 {
                let n = T::from_usize(row).expect("row length");
                let eps = T::from_f64_lossy(ZSCORE_EPS);
                for img in out.images.data_mut().chunks_mut(row) {
                    let mean = img.iter().copied().sum::<T>() / n;
                    let var = img.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var.sqrt() + eps);
                    img.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                }
            }
            out.range = PixelRange::ZScore;
        }
    }
    Ok(out)
}

/// Pads every image symmetrically to `size x size` with `value`. Odd
/// differences put the extra row and column at the bottom and right.
pub fn pad_to<T: Scalar>(data: &LabeledImages<T>, size: usize, value: T) -> Result<LabeledImages<T>> {
    let (c, h, w) = data.image_dims();
    if h > size || w > size {
        return Err(Error::InvalidArgument(format!(
            "cannot pad {h}x{w} images to {size}x{size}"
        )));
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let n = data.len();
    let mut out = vec![value; n * c * size * size];
    for plane in 0..n * c {
        let src = &data.images.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * size * size..(plane + 1) * size * size];
        for y in 0..h {
            dst[(y + top) * size + left..(y + top) * size + left + w]
                .copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Ok(LabeledImages {
        images: Tensor::new(&[n, c, size, size], out)?,
        labels: data.labels.clone(),
        ids: data.ids.clone(),
        range: data.range,
    })
}

/// Which role the held-out class plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// The held class is the anomaly; every other class is normal.
    #[default]
    ClassIsAnomaly,
    /// The held class is normal; every other class is an anomaly.
    ClassIsNormal,
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "class-is-anomaly" => Ok(Polarity::ClassIsAnomaly),
            "class-is-normal" => Ok(Polarity::ClassIsNormal),
            other => Err(Error::InvalidArgument(format!(
                "unknown polarity {other:?} (expected class-is-anomaly or class-is-normal)"
            ))),
        }
    }
}

/// Train set of normals and a mixed, flagged test set.
#[derive(Debug, Clone, PartialEq)]
pub struct OneClassSplit<T = f32> {
    pub train_normals: LabeledImages<T>,
    pub test: LabeledImages<T>,
    pub test_anomaly_flags: Vec<bool>,
}

/// Builds a one-class benchmark. The normals are shuffled with `seed` and
/// the first `round(train_fraction * normals)` of them form the training
/// set; the remaining normals and all anomalies form the test set, in
/// input order.
pub fn one_class_split<T: Scalar>(
    data: &LabeledImages<T>,
    held_class: u32,
    polarity: Polarity,
    train_fraction: f64,
    seed: u64,
) -> Result<OneClassSplit<T>> {
    if !data.labels.contains(&held_class) {
        return Err(Error::InvalidArgument(format!(
            "held class {held_class} does not occur in the data (classes {:?})",
            data.classes()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let is_anomaly = |label: u32| match polarity {
        Polarity::ClassIsAnomaly => label == held_class,
        Polarity::ClassIsNormal => label != held_class,
    };
    let mut normals: Vec<usize> = (0..data.len()).filter(|&i| !is_anomaly(data.labels[i])).collect();
    let n_anomalies = data.len() - normals.len();
    let n_train = (train_fraction * normals.len() as f64).round() as usize;
    if n_train == 0 || n_train >= normals.len() || n_anomalies == 0 {
        return Err(Error::InvalidArgument(format!(
            "split of {} normals and {n_anomalies} anomalies at fraction {train_fraction} leaves an empty train set or a test set without both kinds",
            normals.len()
        )));
    }
    normals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = normals[..n_train].to_vec();
    train_idx.sort_unstable();
    let mut in_train = vec![false; data.len()];
    train_idx.iter().for_each(|&i| in_train[i] = true);
    let test_idx: Vec<usize> = (0..data.len()).filter(|&i| !in_train[i]).collect();
    // Training order is the shuffled order; the trainer reshuffles anyway.
    let train_order = &normals[..n_train];
    Ok(OneClassSplit {
        train_normals: data.select(train_order)?,
        test_anomaly_flags: test_idx.iter().map(|&i| is_anomaly(data.labels[i])).collect(),
        test: data.select(&test_idx)?,
    })
}
