//! The generator encoder `Ge`, decoder `Gd`, auxiliary encoder `Ge'` and
//! discriminator `D`, in a DCGAN-style layout.
//!
//! For an `S x S` input and `n` stages, the encoder halves the resolution
//! `n` times with 4x4 stride-2 convolutions (batch-norm on all but the first,
//! leaky ReLU everywhere) down to `S / 2^n`, then a final convolution maps to
//! a `d x 1 x 1` code. The decoder mirrors this with transposed convolutions,
//! batch-norm and ReLU, ending in `tanh`. The discriminator is an encoder
//! with a single output channel followed by a sigmoid.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{
    channel_moments, update_running, Activation, ActivationOp, BatchNorm2d, Conv2d,
    ConvTranspose2d, Reshape, RunningStats,
};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use checkpoint::{read_checkpoint, read_checkpoint_precision, write_checkpoint};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Topology shared by the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub channels: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    /// Number of stride-2 stages.
    pub stages: usize,
}

impl NetworkSpec {
    /// Defaults: latent dimension 100, base width 64, and as many stages as
    /// it takes to reach a 2x2 map (4 for 32x32, 3 for 16x16).
    pub fn new(channels: usize, image_size: usize) -> Self {
        let mut stages = 0;
        while image_size >> (stages + 1) >= 2 && (image_size >> (stages + 1)) << (stages + 1) == image_size {
            stages += 1;
        }
        NetworkSpec {
            channels,
            image_size,
            latent_dim: 100,
            base_width: 64,
            stages,
        }
    }

    pub fn with_latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = d;
        self
    }

    pub fn with_base_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(format!("network spec: {msg}")));
        if self.channels == 0 || self.base_width == 0 {
            return fail("channels and base width must be positive".into());
        }
        if self.latent_dim < 4 {
            return fail(format!("latent dimension {} must be at least 4", self.latent_dim));
        }
        if self.stages == 0 || self.stages > 16 {
            return fail(format!("stage count {} out of range", self.stages));
        }
        let div = 1usize << self.stages;
        if self.image_size == 0 || self.image_size % div != 0 {
            return fail(format!(
                "image size {} is not divisible by 2^{} = {div}",
                self.image_size, self.stages
            ));
        }
        Ok(())
    }

    /// Spatial extent after the stride-2 stages.
    pub fn bottom_size(&self) -> usize {
        self.image_size >> self.stages
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.image_size, self.image_size]
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// Batch-norm affine parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

/// Convolution, optional batch-norm, optional activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub norm: Option<NormParams<T>>,
    pub activation: Option<Activation>,
}

impl<T: Scalar> Layer<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: LayerKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        activation: Option<Activation>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = match kind {
            LayerKind::Conv => [out_ch, in_ch, kernel, kernel],
            LayerKind::ConvTranspose => [in_ch, out_ch, kernel, kernel],
        };
        let weight = Tensor::randn(&shape, 0.0, INIT_STD, rng);
        let norm = norm.then(|| NormParams {
            gamma: Tensor::randn(&[out_ch], 1.0, INIT_STD, rng),
            beta: Tensor::zeros(&[out_ch]),
            running: RunningStats::new(out_ch),
        });
        // A bias in front of batch-norm would be cancelled by the mean.
        let bias = norm.is_none().then(|| Tensor::zeros(&[out_ch]));
        Layer {
            kind,
            stride,
            pad,
            weight,
            bias,
            norm,
            activation,
        }
    }
}

/// Which of the four networks a [`Network`] is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the running statistics are updated when `update_running`.
    Train { update_running: bool },
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub role: Role,
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<T>>,
}

type StatUpdate<T> = (usize, Vec<T>, Vec<T>, usize);

impl<T: Scalar> Network<T> {
    fn encoder_like(spec: &NetworkSpec, out_dim: usize, role: Role, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = spec.channels;
        for stage in 0..spec.stages {
            let out_ch = spec.width(stage);
            layers.push(Layer::new(
                LayerKind::Conv,
                in_ch,
                out_ch,
                4,
                2,
                1,
                stage > 0,
                Some(Activation::LeakyRelu),
                rng,
            ));
            in_ch = out_ch;
        }
        let head_act = (role == Role::Discriminator).then_some(Activation::Sigmoid);
        layers.push(Layer::new(
            LayerKind::Conv,
            in_ch,
            out_dim,
            spec.bottom_size(),
            1,
            0,
            false,
            head_act,
            rng,
        ));
        Network {
            role,
            spec: *spec,
            layers,
        }
    }

    fn decoder(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let top = spec.width(spec.stages - 1);
        layers.push(Layer::new(
            LayerKind::ConvTranspose,
            spec.latent_dim,
            top,
            spec.bottom_size(),
            1,
            0,
            true,
            Some(Activation::Relu),
            rng,
        ));
        for stage in (1..spec.stages).rev() {
            layers.push(Layer::new(
                LayerKind::ConvTranspose,
                spec.width(stage),
                spec.width(stage - 1),
                4,
                2,
                1,
                true,
                Some(Activation::Relu),
                rng,
            ));
        }
        layers.push(Layer::new(
            LayerKind::ConvTranspose,
            spec.width(0),
            spec.channels,
            4,
            2,
            1,
            false,
            Some(Activation::Tanh),
            rng,
        ));
        Network {
            role: Role::Decoder,
            spec: *spec,
            layers,
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    /// Same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Every tensor including running statistics, with stable names.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
            if let Some(n) = &l.norm {
                out.push((format!("{prefix}.{i}.gamma"), &n.gamma));
                out.push((format!("{prefix}.{i}.beta"), &n.beta));
                out.push((format!("{prefix}.{i}.running_mean"), &n.running.mean));
                out.push((format!("{prefix}.{i}.running_var"), &n.running.var));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
            if let Some(n) = &mut l.norm {
                out.push((format!("{prefix}.{i}.gamma"), &mut n.gamma));
                out.push((format!("{prefix}.{i}.beta"), &mut n.beta));
                out.push((format!("{prefix}.{i}.running_mean"), &mut n.running.mean));
                out.push((format!("{prefix}.{i}.running_var"), &mut n.running.var));
            }
        }
        out
    }

    /// Records the parameters on `g`, as gradient-tracking leaves when
    /// `track` is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if track { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let ok = match self.role {
            Role::Decoder => x.ndim() == 2 && x.dim(1) == self.spec.latent_dim,
            _ => {
                x.ndim() == 4
                    && x.shape()[1..]
                        == [self.spec.channels, self.spec.image_size, self.spec.image_size]
            }
        };
        if ok {
            Ok(())
        } else {
            let expect = match self.role {
                Role::Decoder => format!("[B, {}]", self.spec.latent_dim),
                _ => format!(
                    "[B, {}, {}, {}]",
                    self.spec.channels, self.spec.image_size, self.spec.image_size
                ),
            };
            Err(Error::shape(
                "network forward",
                format!("{:?} expects input {expect}, got {:?}", self.role, x.shape()),
            ))
        }
    }

    fn forward_inner(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<StatUpdate<T>>)> {
        self.check_input(g.value(x))?;
        let batch = g.value(x).dim(0);
        let mut h = x;
        if self.role == Role::Decoder {
            h = g.apply(
                Reshape {
                    shape: vec![batch, self.spec.latent_dim, 1, 1],
                },
                &[h],
            )?;
        }
        let mut updates = Vec::new();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches layers");
        for (i, layer) in self.layers.iter().enumerate() {
            let w = next();
            let mut ins = vec![h, w];
            if layer.bias.is_some() {
                ins.push(next());
            }
            h = match layer.kind {
                LayerKind::Conv => g.apply(
                    Conv2d {
                        stride: layer.stride,
                        pad: layer.pad,
                    },
                    &ins,
                )?,
                LayerKind::ConvTranspose => g.apply(
                    ConvTranspose2d {
                        stride: layer.stride,
                        pad: layer.pad,
                    },
                    &ins,
                )?,
            };
            if let Some(norm) = &layer.norm {
                let (gamma, beta) = (next(), next());
                let op = match mode {
                    Mode::Train { update_running } => {
                        if update_running {
                            let (mean, var) = channel_moments(g.value(h));
                            let count = g.value(h).len() / g.value(h).dim(1);
                            updates.push((i, mean, var, count));
                        }
                        BatchNorm2d::train(BN_EPS)
                    }
                    Mode::Eval => BatchNorm2d::eval(BN_EPS, norm.running.clone()),
                };
                h = g.apply(op, &[h, gamma, beta])?;
            }
            if let Some(act) = layer.activation {
                h = g.apply(ActivationOp(act), &[h])?;
            }
        }
        let out_dim = match self.role {
            Role::Encoder => Some(self.spec.latent_dim),
            Role::Discriminator => Some(1),
            Role::Decoder => None,
        };
        if let Some(d) = out_dim {
            h = g.apply(Reshape { shape: vec![batch, d] }, &[h])?;
        }
        Ok((h, updates))
    }

    /// Records a forward pass on `g`. `params` must come from
    /// [`Network::bind`] on this network. In training mode with
    /// `update_running` the batch-norm running statistics are updated.
    pub fn forward_graph(&mut self, g: &mut Graph<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let (out, updates) = self.forward_inner(g, params, x, mode)?;
        for (i, mean, var, count) in updates {
            let norm = self.layers[i].norm.as_mut().expect("normalised layer");
            update_running(&mut norm.running, &mean, &var, count, BN_MOMENTUM);
        }
        Ok(out)
    }

    /// Eval-mode forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_inner(&mut g, &params, xv, Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}

/// Parameters of all four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub spec: NetworkSpec,
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub aux_encoder: Network<T>,
    pub discriminator: Network<T>,
}

pub const PREFIX_ENCODER: &str = "ge";
pub const PREFIX_DECODER: &str = "gd";
pub const PREFIX_AUX: &str = "ge_aux";
pub const PREFIX_DISCRIMINATOR: &str = "d";

/// Initialises all four networks with `Normal(0, 0.02)` weights
/// (batch-norm scales `Normal(1, 0.02)`), deterministically from `seed`.
pub fn build_networks<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<NetworkState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Network::encoder_like(spec, spec.latent_dim, Role::Encoder, &mut rng);
    let decoder = Network::decoder(spec, &mut rng);
    let aux_encoder = Network::encoder_like(spec, spec.latent_dim, Role::Encoder, &mut rng);
    let discriminator = Network::encoder_like(spec, 1, Role::Discriminator, &mut rng);
    Ok(NetworkState {
        spec: *spec,
        encoder,
        decoder,
        aux_encoder,
        discriminator,
    })
}

impl<T: Scalar> NetworkState<T> {
    /// `(z, x') = (Ge(x), Gd(Ge(x)))` in eval mode.
    pub fn forward_generator(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = self.encoder.forward(x)?;
        let recon = self.decoder.forward(&z)?;
        Ok((z, recon))
    }

    /// `z' = Ge'(x')` in eval mode.
    pub fn forward_aux(&self, recon: &Tensor<T>) -> Result<Tensor<T>> {
        self.aux_encoder.forward(recon)
    }

    /// `D(x)` in eval mode, shape `B x 1`.
    pub fn forward_discriminator(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.discriminator.forward(x)
    }

    /// All tensors with their unique names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named_tensors(PREFIX_ENCODER);
        out.extend(self.decoder.named_tensors(PREFIX_DECODER));
        out.extend(self.aux_encoder.named_tensors(PREFIX_AUX));
        out.extend(self.discriminator.named_tensors(PREFIX_DISCRIMINATOR));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.named_tensors_mut(PREFIX_ENCODER);
        out.extend(self.decoder.named_tensors_mut(PREFIX_DECODER));
        out.extend(self.aux_encoder.named_tensors_mut(PREFIX_AUX));
        out.extend(self.discriminator.named_tensors_mut(PREFIX_DISCRIMINATOR));
        out
    }
}
