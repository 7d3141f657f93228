//! Training and evaluation laboratory for stochastic classifiers.
//!
//! The crate trains the same encoder/decoder network under three objectives —
//! plain cross-entropy, the variational information bottleneck (cross-entropy
//! plus a per-example KL penalty), and the variational infomax (cross-entropy
//! plus an MMD penalty on the aggregate latent cloud) — and evaluates the
//! result on three axes: test accuracy, robustness to targeted L2 adversaries,
//! and representation quality (cluster/label overlap and Hoyer sparseness).
//!
//! Everything runs on a self-contained reverse-mode autodiff core over dense
//! f64 tensors ([`tensor`]); no external ML framework is involved. See the
//! `examples/` directory for one runnable program per capability, and the
//! `vimax` binary for the batch interface (`train`, `sweep`, `eval`,
//! `plotdata`).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
