//! Alternating adversarial training on normal samples only.
//!
//! Each batch: the generator path `Ge -> Gd -> Ge'` runs once in training
//! mode; the discriminator takes one Adam step on `adv_d` with the
//! reconstruction detached; then `Ge`, `Gd` and `Ge'` take one joint Adam
//! step on the weighted generator total, with the freshly updated
//! discriminator held constant.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImages, OneClassSplit};
use crate::error::{Error, Result};
use crate::losses::{
    loss_total, DiscriminatorLoss, GeneratorAdversarialLoss, ImageReconstructionLoss,
    LatentReconstructionLoss, LossBreakdown, LossComponents, LossWeights, RankBudget, RankPenalty,
};
use crate::networks::{build_networks, read_checkpoint, write_checkpoint, Mode, NetworkSpec, NetworkState};
use crate::tensor::ops::{Transpose2d, WeightedSum};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Precision, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub rank: RankBudget,
    pub latent_dim: usize,
    pub base_width: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            rank: RankBudget::default(),
            latent_dim: 100,
            base_width: 64,
            seed: 0,
            precision: Precision::F32,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.rank
            .validate(self.latent_dim, self.batch_size)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Network topology for images of the given channel count and size.
    pub fn network_spec(&self, channels: usize, image_size: usize) -> NetworkSpec {
        NetworkSpec::new(channels, image_size)
            .with_latent_dim(self.latent_dim)
            .with_base_width(self.base_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
    pub epoch_seconds: Vec<f64>,
    pub seed: u64,
    pub config: TrainConfig,
}

impl TrainHistory {
    /// Mean of one loss component over an epoch.
    pub fn epoch_mean(&self, epoch: usize, pick: impl Fn(&LossBreakdown) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| pick(&r.loss))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `iteration,irec,adv_g,adv_d,zrec,rank,total` with full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,irec,adv_g,adv_d,zrec,rank,total\n");
        for r in &self.records {
            let l = &r.loss;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration, l.irec, l.adv_g, l.adv_d, l.zrec, l.rank, l.total
            ));
        }
        s
    }
}

fn to_f64<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

fn collect_grads<T: Scalar>(grads: &crate::tensor::Gradients<T>, vars: &[Var], g: &Graph<T>) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect()
}

struct Optimizers<T> {
    generator: AdamState<T>,
    discriminator: AdamState<T>,
}

fn generator_params<T: Scalar>(st: &NetworkState<T>) -> Vec<&Tensor<T>> {
    let mut p = st.encoder.params();
    p.extend(st.decoder.params());
    p.extend(st.aux_encoder.params());
    p
}

fn generator_params_mut<T: Scalar>(st: &mut NetworkState<T>) -> Vec<&mut Tensor<T>> {
    let mut p = st.encoder.params_mut();
    p.extend(st.decoder.params_mut());
    p.extend(st.aux_encoder.params_mut());
    p
}

/// One optimisation step on batch `x`.
fn train_step<T: Scalar>(
    st: &mut NetworkState<T>,
    opt: &mut Optimizers<T>,
    x: Tensor<T>,
    config: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    let train = Mode::Train { update_running: true };
    let mut g = Graph::new();
    let xv = g.constant(x);

    let ge_p = st.encoder.bind(&mut g, true);
    let gd_p = st.decoder.bind(&mut g, true);
    let aux_p = st.aux_encoder.bind(&mut g, true);
    let z = st.encoder.forward_graph(&mut g, &ge_p, xv, train)?;
    let recon = st.decoder.forward_graph(&mut g, &gd_p, z, train)?;
    let z_aux = st.aux_encoder.forward_graph(&mut g, &aux_p, recon, train)?;

    // Discriminator step on a detached copy of the reconstruction.
    let d_p = st.discriminator.bind(&mut g, true);
    let recon_det = g.constant(g.value(recon).clone());
    let d_real = st.discriminator.forward_graph(&mut g, &d_p, xv, train)?;
    let d_fake_det = st.discriminator.forward_graph(&mut g, &d_p, recon_det, train)?;
    let adv_d = g.apply(DiscriminatorLoss, &[d_real, d_fake_det])?;
    let adv_d_val = to_f64(&g, adv_d);
    if adv_d_val.is_finite() {
        let grads = g.backward(adv_d)?;
        let d_grads = collect_grads(&grads, &d_p, &g);
        let refs: Vec<&Tensor<T>> = d_grads.iter().collect();
        adam_step(&mut st.discriminator.params_mut(), &refs, &mut opt.discriminator)?;
    }

    // Generator step against the updated discriminator.
    let d_c = st.discriminator.bind(&mut g, false);
    let d_fake = st
        .discriminator
        .forward_graph(&mut g, &d_c, recon, Mode::Train { update_running: false })?;
    let irec = g.apply(ImageReconstructionLoss, &[xv, recon])?;
    let adv_g = g.apply(GeneratorAdversarialLoss, &[d_fake])?;
    let zrec = g.apply(LatentReconstructionLoss, &[z, z_aux])?;
    let z_mat = g.apply(Transpose2d, &[z])?;
    let rank = g.apply(RankPenalty { budget: config.rank }, &[z_mat])?;
    let w = config.weights;
    let total = g.apply(
        WeightedSum::new(vec![w.irec, w.adv, w.zrec, w.rank]),
        &[irec, adv_g, zrec, rank],
    )?;

    let components = LossComponents {
        irec: to_f64(&g, irec),
        adv_g: to_f64(&g, adv_g),
        adv_d: adv_d_val,
        zrec: to_f64(&g, zrec),
        rank: to_f64(&g, rank),
    };
    let breakdown = loss_total(components, &w).map_err(|_| Error::NonFiniteLoss {
        iteration,
        breakdown: format!("{components:?}"),
    })?;

    let grads = g.backward(total)?;
    let mut vars = ge_p;
    vars.extend(gd_p);
    vars.extend(aux_p);
    let g_grads = collect_grads(&grads, &vars, &g);
    let refs: Vec<&Tensor<T>> = g_grads.iter().collect();
    adam_step(&mut generator_params_mut(st), &refs, &mut opt.generator)?;
    Ok(breakdown)
}

/// Trains from scratch. See [`train_with`].
pub fn train<T: Scalar>(config: &TrainConfig, split: &OneClassSplit<f32>) -> Result<(NetworkState<T>, TrainHistory)> {
    train_with(config, &split.train_normals, |_, _, _| Ok(()))
}

/// Trains on `data` (normal samples only) and calls `on_epoch` after every
/// epoch with the epoch index.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    data: &LabeledImages<f32>,
    mut on_epoch: impl FnMut(usize, &NetworkState<T>, &TrainHistory) -> Result<()>,
) -> Result<(NetworkState<T>, TrainHistory)> {
    config.validate()?;
    if config.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "configured precision {:?} does not match the requested element type {:?}",
            config.precision,
            T::PRECISION
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training set of {} samples has no full batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    let (c, h, w) = data.image_dims();
    if h != w {
        return Err(Error::InvalidArgument(format!("images must be square, got {h}x{w}")));
    }
    let spec = config.network_spec(c, h);
    let mut st = build_networks::<T>(&spec, config.seed)?;
    let mut opt = Optimizers {
        generator: AdamState::new(config.adam(), generator_params(&st)),
        discriminator: AdamState::new(config.adam(), st.discriminator.params()),
    };
    let images: Tensor<T> = data.images.cast();
    let mut history = TrainHistory {
        records: Vec::new(),
        epoch_seconds: Vec::new(),
        seed: config.seed,
        config: config.clone(),
    };
    let batches = data.len() / config.batch_size;
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for b in 0..batches {
            let idx = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let x = images.select0(idx)?;
            let loss = train_step(&mut st, &mut opt, x, config, iteration)?;
            history.records.push(IterationRecord { iteration, epoch, loss });
            iteration += 1;
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
        if log::log_enabled!(log::Level::Info) {
            let m = |f: fn(&LossBreakdown) -> f64| history.epoch_mean(epoch, f).unwrap_or(f64::NAN);
            log::info!(
                "epoch {}/{}: irec {:.5} adv_g {:.5} adv_d {:.5} zrec {:.5} rank {:.5} total {:.5} ({:.1}s)",
                epoch + 1,
                config.epochs,
                m(|l| l.irec),
                m(|l| l.adv_g),
                m(|l| l.adv_d),
                m(|l| l.zrec),
                m(|l| l.rank),
                m(|l| l.total),
                history.epoch_seconds[epoch]
            );
        }
        on_epoch(epoch, &st, &history)?;
    }
    Ok((st, history))
}

/// Writes the networks with the history and configuration as metadata.
pub fn save_checkpoint<T: Scalar>(state: &NetworkState<T>, history: &TrainHistory, path: &Path) -> Result<()> {
    let extra = serde_json::to_value(history).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_checkpoint(state, &extra, path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkState<T>, TrainHistory)> {
    let (state, extra) = read_checkpoint::<T>(path)?;
    let history = serde_json::from_value(extra).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("history metadata: {e}"),
    })?;
    Ok((state, history))
}
