//! Latent-regularized adversarial anomaly detection.
//!
//! An encoder-decoder-encoder generator is trained adversarially on normal
//! samples only. Its latent codes are pushed towards a low-rank subspace by a
//! tail-singular-value penalty, and test samples are ranked by the distance
//! between the code of the input and the code of its reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense tensor type, differentiable kernels, a small
//!   reverse-mode tape, one-sided Jacobi SVD and Adam.
//! * [`datasets`] reads IDX, CIFAR-10 binary and image directories, builds
//!   one-class splits and generates the synthetic disk/stripe benchmark.
//! * [`networks`] builds the four DCGAN-style networks and their checkpoints.
//! * [`losses`] implements the reconstruction, adversarial, latent and rank
//!   terms.
//! * [`trainer`] runs the alternating optimisation.
//! * [`eval`] scores samples, computes ROC/AUC, projects latents and runs
//!   loss ablations.
//! * [`cli`] binds everything into the `lrad` command.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
