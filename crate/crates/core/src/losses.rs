//! The generator and discriminator objectives.
//!
//! Every reduction is a mean, so the weights in [`LossWeights`] do not depend
//! on the batch size. Each loss is available both as a plain function and as
//! a [`DiffOp`] for use on a [`Graph`](crate::tensor::Graph).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{svd, DiffOp, Scalar, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before `ln`.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub irec: f64,
    pub adv: f64,
    pub zrec: f64,
    pub rank: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            irec: 1.0,
            adv: 5.0,
            zrec: 1.0,
            rank: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("irec", self.irec),
            ("adv", self.adv),
            ("zrec", self.zrec),
            ("rank", self.rank),
        ]
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// Parses `wi,wa,wz,wr`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("weights {s:?}: {e}")))?;
        let [irec, adv, zrec, rank] = parts[..] else {
            return Err(Error::InvalidArgument(format!(
                "weights {s:?}: expected four comma-separated values wi,wa,wz,wr"
            )));
        };
        let w = LossWeights { irec, adv, zrec, rank };
        w.validate()?;
        Ok(w)
    }
}

/// Target rank `r` of the latent batch matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankBudget(pub usize);

impl Default for RankBudget {
    fn default() -> Self {
        RankBudget(3)
    }
}

impl RankBudget {
    /// Checks `1 <= r < min(latent_dim, batch)`.
    pub fn validate(self, latent_dim: usize, batch: usize) -> Result<()> {
        let limit = latent_dim.min(batch);
        if self.0 == 0 || self.0 >= limit {
            return Err(Error::InvalidArgument(format!(
                "rank budget {} must satisfy 1 <= r < min(latent dim {latent_dim}, batch {batch})",
                self.0
            )));
        }
        Ok(())
    }
}

/// Raw (unweighted) loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub irec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub zrec: f64,
    pub rank: f64,
}

/// Loss components plus the weighted generator total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub irec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub zrec: f64,
    pub rank: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "irec={} adv_g={} adv_d={} zrec={} rank={} total={}",
            self.irec, self.adv_g, self.adv_d, self.zrec, self.rank, self.total
        )
    }
}

/// Generator total `w_i*irec + w_a*adv_g + w_z*zrec + w_r*rank`. The
/// discriminator objective is `adv_d` on its own.
pub fn loss_total(c: LossComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("irec", c.irec),
        ("adv_g", c.adv_g),
        ("adv_d", c.adv_d),
        ("zrec", c.zrec),
        ("rank", c.rank),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        irec: c.irec,
        adv_g: c.adv_g,
        adv_d: c.adv_d,
        zrec: c.zrec,
        rank: c.rank,
        total: weights.irec * c.irec
            + weights.adv * c.adv_g
            + weights.zrec * c.zrec
            + weights.rank * c.rank,
    })
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::from_f64_lossy(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count fits")
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn loss_irec<T: Scalar>(x: &Tensor<T>, recon: &Tensor<T>) -> Result<T> {
    ImageReconstructionLoss.forward(&[x, recon])?.item()
}

/// Discriminator objective `-mean[ln D(x) + ln(1 - D(x'))] / 2`.
pub fn loss_adv_d<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<T> {
    DiscriminatorLoss.forward(&[d_real, d_fake])?.item()
}

/// Non-saturating generator objective `-mean[ln D(x')]`.
pub fn loss_adv_g<T: Scalar>(d_fake: &Tensor<T>) -> Result<T> {
    GeneratorAdversarialLoss.forward(&[d_fake])?.item()
}

/// Mean over the batch of per-sample Euclidean distances between codes.
pub fn loss_zrec<T: Scalar>(z: &Tensor<T>, z_aux: &Tensor<T>) -> Result<T> {
    LatentReconstructionLoss.forward(&[z, z_aux])?.item()
}

/// Sum of the singular values of `z_mat` beyond the first `budget.0`, and
/// its gradient `sum_{i > r} u_i v_i^T`.
pub fn loss_rank<T: Scalar>(z_mat: &Tensor<T>, budget: RankBudget) -> Result<(T, Tensor<T>)> {
    let (d, b) = z_mat.matrix_dims("loss_rank")?;
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "loss_rank needs at least two columns, got {b}"
        )));
    }
    budget.validate(d, b)?;
    let spec = svd(z_mat)?;
    let k = spec.s.len();
    let penalty = spec.s[budget.0..].iter().copied().sum();
    let mut grad = vec![T::zero(); d * b];
    for i in 0..d {
        for j in 0..b {
            let mut acc = T::zero();
            for p in budget.0..k {
                acc += spec.u.data()[i * k + p] * spec.v.data()[j * k + p];
            }
            grad[i * b + j] = acc;
        }
    }
    Ok((penalty, Tensor::new(&[d, b], grad)?))
}

/// Inputs `[x, x']`.
#[derive(Debug, Clone, Copy)]
pub struct ImageReconstructionLoss;

impl<T: Scalar> DiffOp<T> for ImageReconstructionLoss {
    fn name(&self) -> &'static str {
        "loss_irec"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, r) = (inputs[0], inputs[1]);
        x.expect_same_shape(r, "loss_irec")?;
        if x.is_empty() {
            return Err(Error::InvalidArgument("loss_irec of an empty batch".into()));
        }
        let s: T = x.data().iter().zip(r.data()).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(Tensor::scalar(s / count(x.len())))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, r) = (inputs[0], inputs[1]);
        let scale = grad_output.item()? / count(x.len());
        let sign = |d: T| {
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        };
        let gx = x.zip_map(r, |a, b| sign(a - b))?;
        Ok(vec![
            needs[0].then(|| gx.clone()),
            needs[1].then(|| gx.map(|v| -v)),
        ])
    }
}

/// Inputs `[D(x), D(x')]`.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss;

impl<T: Scalar> DiffOp<T> for DiscriminatorLoss {
    fn name(&self) -> &'static str {
        "loss_adv_d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (real, fake) = (inputs[0], inputs[1]);
        if real.is_empty() || fake.is_empty() {
            return Err(Error::InvalidArgument("loss_adv_d of an empty batch".into()));
        }
        let lr: T = real.data().iter().map(|&p| clamp_prob(p).0.ln()).sum::<T>() / count(real.len());
        let lf: T = fake
            .data()
            .iter()
            .map(|&p| (T::one() - clamp_prob(p).0).ln())
            .sum::<T>()
            / count(fake.len());
        let two = T::one() + T::one();
        Ok(Tensor::scalar(-(lr + lf) / two))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (real, fake) = (inputs[0], inputs[1]);
        let g = grad_output.item()?;
        let two = T::one() + T::one();
        let sr = g / (two * count(real.len()));
        let sf = g / (two * count(fake.len()));
        let d_real = real.map(|p| match clamp_prob(p) {
            (_, true) => T::zero(),
            (p, false) => -sr / p,
        });
        let d_fake = fake.map(|p| match clamp_prob(p) {
            (_, true) => T::zero(),
            (p, false) => sf / (T::one() - p),
        });
        Ok(vec![needs[0].then_some(d_real), needs[1].then_some(d_fake)])
    }
}

/// Input `[D(x')]`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorAdversarialLoss;

impl<T: Scalar> DiffOp<T> for GeneratorAdversarialLoss {
    fn name(&self) -> &'static str {
        "loss_adv_g"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let fake = inputs[0];
        if fake.is_empty() {
            return Err(Error::InvalidArgument("loss_adv_g of an empty batch".into()));
        }
        let s: T = fake.data().iter().map(|&p| clamp_prob(p).0.ln()).sum();
        Ok(Tensor::scalar(-s / count(fake.len())))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let fake = inputs[0];
        let s = grad_output.item()? / count(fake.len());
        Ok(vec![Some(fake.map(|p| match clamp_prob(p) {
            (_, true) => T::zero(),
            (p, false) => -s / p,
        }))])
    }
}

/// Inputs `[z, z']`, both `B x d`.
#[derive(Debug, Clone, Copy)]
pub struct LatentReconstructionLoss;

fn row_distances<T: Scalar>(z: &Tensor<T>, za: &Tensor<T>) -> Result<Vec<T>> {
    z.expect_same_shape(za, "loss_zrec")?;
    let (b, d) = z.matrix_dims("loss_zrec")?;
    Ok((0..b)
        .map(|i| {
            z.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&za.data()[i * d..(i + 1) * d])
                .map(|(&a, &c)| (a - c) * (a - c))
                .sum::<T>()
                .sqrt()
        })
        .collect())
}

impl<T: Scalar> DiffOp<T> for LatentReconstructionLoss {
    fn name(&self) -> &'static str {
        "loss_zrec"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let dist = row_distances(inputs[0], inputs[1])?;
        if dist.is_empty() {
            return Err(Error::InvalidArgument("loss_zrec of an empty batch".into()));
        }
        let n = count::<T>(dist.len());
        Ok(Tensor::scalar(dist.into_iter().sum::<T>() / n))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (z, za) = (inputs[0], inputs[1]);
        let dist = row_distances(z, za)?;
        let (b, d) = (z.dim(0), z.dim(1));
        let s = grad_output.item()? / count(b);
        let mut gz = vec![T::zero(); b * d];
        for i in 0..b {
            if dist[i] == T::zero() {
                continue;
            }
            for j in 0..d {
                let k = i * d + j;
                gz[k] = s * (z.data()[k] - za.data()[k]) / dist[i];
            }
        }
        let gz = Tensor::new(z.shape(), gz)?;
        Ok(vec![
            needs[0].then(|| gz.clone()),
            needs[1].then(|| gz.map(|v| -v)),
        ])
    }
}

/// Input `[Z]` with `Z: d x B`.
#[derive(Debug, Clone, Copy)]
pub struct RankPenalty {
    pub budget: RankBudget,
}

impl<T: Scalar> DiffOp<T> for RankPenalty {
    fn name(&self) -> &'static str {
        "loss_rank"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(loss_rank(inputs[0], self.budget)?.0))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (_, grad) = loss_rank(inputs[0], self.budget)?;
        Ok(vec![Some(grad.scale(grad_output.item()?))])
    }
}
