//! Synthetic one-class data: noisy filled disks (label 0) and the same
//! disks with a patch of horizontal stripes added (label 1).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledImages, PixelRange};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub normal_count: usize,
    pub anomaly_count: usize,
    pub background: f32,
    pub disk_level: f32,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Side of the square stripe patch.
    pub stripe_size: usize,
    /// Added to every other row inside the patch.
    pub stripe_amplitude: f32,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            normal_count: 2200,
            anomaly_count: 200,
            background: -0.8,
            disk_level: 0.0,
            radius_min: 5,
            radius_max: 10,
            stripe_size: 16,
            stripe_amplitude: 0.8,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        let bad = |m: String| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if s < 4 {
            return bad(format!("image size {s} is too small"));
        }
        if self.radius_min == 0 || self.radius_min > self.radius_max || 2 * self.radius_max + 1 > s {
            return bad(format!(
                "radius range {}..={} does not fit a {s}x{s} image",
                self.radius_min, self.radius_max
            ));
        }
        if self.stripe_size == 0 || self.stripe_size > s {
            return bad(format!("stripe patch {} does not fit", self.stripe_size));
        }
        if self.normal_count + self.anomaly_count == 0 {
            return bad("no samples requested".into());
        }
        for (name, v) in [
            ("background", self.background),
            ("disk level", self.disk_level),
            ("stripe amplitude", self.stripe_amplitude),
            ("noise", self.noise),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        if self.noise < 0.0 {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }

    /// Number of pixels the stripe patch adds `stripe_amplitude` to.
    pub fn stripe_pixels(&self) -> usize {
        self.stripe_size * self.stripe_size.div_ceil(2)
    }
}

fn draw(spec: &SynthSpec, anomalous: bool, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let s = spec.image_size;
    let r = rng.random_range(spec.radius_min..=spec.radius_max);
    let cy = rng.random_range(r..s - r) as i64;
    let cx = rng.random_range(r..s - r) as i64;
    let r2 = (r * r) as i64;
    for y in 0..s {
        for x in 0..s {
            let (dy, dx) = (y as i64 - cy, x as i64 - cx);
            out[y * s + x] = if dy * dy + dx * dx <= r2 {
                spec.disk_level
            } else {
                spec.background
            };
        }
    }
    if anomalous {
        let p = spec.stripe_size;
        let py = rng.random_range(0..=s - p);
        let px = rng.random_range(0..=s - p);
        for y in (0..p).step_by(2) {
            for x in 0..p {
                out[(py + y) * s + px + x] += spec.stripe_amplitude;
            }
        }
    }
    if spec.noise > 0.0 {
        for v in out.iter_mut() {
            *v += rng.random_range(-spec.noise..=spec.noise);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Generates `normal_count` normals followed by `anomaly_count` anomalies,
/// single channel, deterministically from `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledImages<f32>> {
    spec.validate()?;
    let s = spec.image_size;
    let n = spec.normal_count + spec.anomaly_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = vec![0.0f32; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_mut(s * s).enumerate() {
        let anomalous = i >= spec.normal_count;
        draw(spec, anomalous, &mut rng, img);
        labels.push(anomalous as u32);
    }
    LabeledImages::new(
        Tensor::new(&[n, 1, s, s], pixels)?,
        labels,
        (0..n).map(|i| format!("synth:{i}")).collect(),
        PixelRange::Tanh,
    )
}
