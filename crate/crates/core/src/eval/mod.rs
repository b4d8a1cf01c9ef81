//! Anomaly scores, AUC and ROC, latent projections and the loss ablation.

mod roc;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImages, OneClassSplit};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::NetworkState;
use crate::tensor::{svd, Scalar, Tensor};
use crate::trainer::{train_with, TrainConfig};

pub use roc::{auc, roc_points, RocCurve, RocPoint};

/// Samples per forward pass when scoring.
pub const SCORE_CHUNK: usize = 256;

/// What scoring needs from a model.
pub trait LatentModel<T: Scalar> {
    /// `B x C x H x W -> B x d`
    fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// `B x d -> B x C x H x W`
    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>>;
    /// Auxiliary encoder applied to reconstructions.
    fn encode_aux(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> LatentModel<T> for NetworkState<T> {
    fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward(x)
    }

    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.forward(z)
    }

    fn encode_aux(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.aux_encoder.forward(x)
    }
}

fn row_l2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.ndim() < 1 {
        return Err(Error::shape(
            "score",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let r = a.row_len();
    Ok(a.data()
        .chunks(r.max(1))
        .zip(b.data().chunks(r.max(1)))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| (p - q).to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

fn row_mean_abs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.ndim() < 1 {
        return Err(Error::shape(
            "score",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let r = a.row_len().max(1);
    Ok(a.data()
        .chunks(r)
        .zip(b.data().chunks(r))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| (p - q).abs().to_f64_lossy())
                .sum::<f64>()
                / r as f64
        })
        .collect())
}

/// Per-sample latent and pixel scores, in that order.
pub fn score_both<T: Scalar>(model: &impl LatentModel<T>, x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.dim(0);
    let (mut lat, mut pix) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let xb = x.slice0(start, end)?;
        let z = model.encode(&xb)?;
        let recon = model.decode(&z)?;
        let z_aux = model.encode_aux(&recon)?;
        lat.extend(row_l2(&z, &z_aux)?);
        pix.extend(row_mean_abs(&xb, &recon)?);
        start = end;
    }
    Ok((lat, pix))
}

/// `||Ge(x) - Ge'(Gd(Ge(x)))||_2` per sample.
pub fn score_latent<T: Scalar>(model: &impl LatentModel<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    score_both(model, x).map(|s| s.0)
}

/// Mean absolute reconstruction error per sample.
pub fn score_pixel<T: Scalar>(model: &impl LatentModel<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    let n = x.dim(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let xb = x.slice0(start, end)?;
        let recon = model.decode(&model.encode(&xb)?)?;
        out.extend(row_mean_abs(&xb, &recon)?);
        start = end;
    }
    Ok(out)
}

/// Min-max scaling to `[0, 1]`.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numerical("scores are empty or non-finite".into()));
    }
    if hi == lo {
        return Err(Error::Numerical(format!(
            "all {} scores equal {lo}; the detector is degenerate",
            scores.len()
        )));
    }
    Ok(scores.iter().map(|&s| (s - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub anomaly: bool,
    pub latent: f64,
    pub pixel: f64,
}

/// Scores every test sample of a split.
pub fn score_split<T: Scalar>(model: &impl LatentModel<T>, split: &OneClassSplit<f32>) -> Result<Vec<ScoreRecord>> {
    score_set(model, &split.test, &split.test_anomaly_flags)
}

pub fn score_set<T: Scalar>(
    model: &impl LatentModel<T>,
    data: &LabeledImages<f32>,
    flags: &[bool],
) -> Result<Vec<ScoreRecord>> {
    if flags.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples but {} flags",
            data.len(),
            flags.len()
        )));
    }
    let (lat, pix) = score_both(model, &data.images.cast::<T>())?;
    Ok((0..data.len())
        .map(|i| ScoreRecord {
            id: data.ids[i].clone(),
            anomaly: flags[i],
            latent: lat[i],
            pixel: pix[i],
        })
        .collect())
}

/// Which score a set of records is ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Latent,
    Pixel,
}

pub fn records_auc(records: &[ScoreRecord], kind: ScoreKind) -> Result<f64> {
    let (s, f) = columns(records, kind);
    auc(&s, &f)
}

pub fn records_roc(records: &[ScoreRecord], kind: ScoreKind) -> Result<RocCurve> {
    let (s, f) = columns(records, kind);
    roc_points(&s, &f)
}

fn columns(records: &[ScoreRecord], kind: ScoreKind) -> (Vec<f64>, Vec<bool>) {
    records
        .iter()
        .map(|r| {
            let s = match kind {
                ScoreKind::Latent => r.latent,
                ScoreKind::Pixel => r.pixel,
            };
            (s, r.anomaly)
        })
        .unzip()
}

/// Coordinates of the centred latent codes along the top `k` right
/// singular directions, `N x k`.
pub fn latent_projection<T: Scalar>(model: &impl LatentModel<T>, x: &Tensor<T>, k: usize) -> Result<Tensor<f64>> {
    let n = x.dim(0);
    let mut codes = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        codes.push(model.encode(&x.slice0(start, end)?)?.cast::<f64>());
        start = end;
    }
    let refs: Vec<&Tensor<f64>> = codes.iter().collect();
    let z = Tensor::concat0(&refs)?;
    project_rows(&z, k)
}

/// Projection of the rows of an `N x d` matrix, see [`latent_projection`].
pub fn project_rows(z: &Tensor<f64>, k: usize) -> Result<Tensor<f64>> {
    let (n, d) = z.matrix_dims("latent_projection")?;
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "projection dimension {k} must lie in 1..={d}"
        )));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "projection dimension {k} exceeds the {n} samples"
        )));
    }
    let mut centred = z.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| z.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centred.data_mut()[i * d + j] -= mean;
        }
    }
    let s = svd(&centred)?;
    let r = s.v.dim(1);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            out[i * k + c] = (0..d).map(|j| centred.data()[i * d + j] * s.v.data()[j * r + c]).sum();
        }
    }
    Tensor::new(&[n, k], out)
}

/// Loss combinations compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    IrecAdv,
    IrecAdvRank,
    IrecAdvZrec,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::IrecAdv,
        AblationVariant::IrecAdvRank,
        AblationVariant::IrecAdvZrec,
        AblationVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::IrecAdv => "irec+adv",
            AblationVariant::IrecAdvRank => "irec+adv+rank",
            AblationVariant::IrecAdvZrec => "irec+adv+zrec",
            AblationVariant::Full => "full",
        }
    }

    /// `base` with the unused terms switched off.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let (zrec, rank) = match self {
            AblationVariant::IrecAdv => (0.0, 0.0),
            AblationVariant::IrecAdvRank => (0.0, base.rank),
            AblationVariant::IrecAdvZrec => (base.zrec, 0.0),
            AblationVariant::Full => (base.zrec, base.rank),
        };
        LossWeights { zrec, rank, ..base }
    }

    /// The variant without any auxiliary-encoder signal is ranked by
    /// pixel error.
    pub fn score_kind(self) -> ScoreKind {
        match self {
            AblationVariant::IrecAdv => ScoreKind::Pixel,
            _ => ScoreKind::Latent,
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('+', "-") == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation variant {s:?} (expected irec+adv, irec+adv+rank, irec+adv+zrec or full)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub score: ScoreKind,
    pub auc: f64,
}

/// Trains every variant from the same seed and reports its test AUC.
pub fn run_ablation<T: Scalar>(
    config: &TrainConfig,
    split: &OneClassSplit<f32>,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                weights: v.weights(config.weights),
                ..config.clone()
            };
            log::info!("ablation: training {}", v.name());
            let (state, _) = train_with::<T>(&cfg, &split.train_normals, |_, _, _| Ok(()))?;
            let records = score_split(&state, split)?;
            Ok(AblationRow {
                variant: v,
                score: v.score_kind(),
                auc: records_auc(&records, v.score_kind())?,
            })
        })
        .collect()
}

/// `id,anomaly_flag,score_latent,score_pixel`
pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from("id,anomaly_flag,score_latent,score_pixel\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.id, r.anomaly as u8, r.latent, r.pixel);
    }
    s
}

/// `fpr,tpr,threshold`
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    s
}

/// `id,anomaly_flag,c1,...,ck`
pub fn latent_csv(ids: &[String], flags: &[bool], coords: &Tensor<f64>) -> String {
    let k = coords.dim(1);
    let mut s = String::from("id,anomaly_flag");
    for c in 1..=k {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (i, (id, f)) in ids.iter().zip(flags).enumerate() {
        let _ = write!(s, "{id},{}", *f as u8);
        for c in 0..k {
            let _ = write!(s, ",{}", coords.data()[i * k + c]);
        }
        s.push('\n');
    }
    s
}

/// `variant,auc`
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,auc\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.variant.name(), r.auc);
    }
    s
}
