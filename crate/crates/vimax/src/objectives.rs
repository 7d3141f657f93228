//! The three training losses sharing one stochastic forward path:
//!
//! * `baseline` — plain softmax cross-entropy on a sampled latent;
//! * `vib` — cross-entropy plus `beta` times the closed-form KL from each
//!   example's Gaussian posterior to the prior `N(0, sigma^2 I)`;
//! * `vim` — cross-entropy plus `beta` times a kernel MMD between the
//!   minibatch's pooled latent samples and fresh prior draws.
//!
//! The VIB penalty sees each example's `(mu, logvar)`; the VIM penalty sees
//! only the aggregate sample cloud, which is the whole point of the
//! distinction. All three variants sample `z` with the same machinery so the
//! penalty term is the only experimental variable.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{draw_standard_normal, sample_latent, LatentBatch, ModelVars, StochasticClassifier};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Vib,
    Vim,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Vib => "vib",
            Variant::Vim => "vim",
        };
        f.write_str(s)
    }
}

/// Which loss to train, and its two knobs: the Lagrange multiplier `beta`
/// and the prior standard deviation `sigma` (the capacity knob).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Prior sample count for the MMD estimate; defaults to the batch size.
    #[serde(default)]
    pub mmd_prior_samples: Option<usize>,
}

fn default_beta() -> f64 {
    1e-3
}

fn default_sigma() -> f64 {
    1.0
}

impl ObjectiveSpec {
    pub fn baseline() -> Self {
        ObjectiveSpec { variant: Variant::Baseline, beta: 0.0, sigma: 1.0, mmd_prior_samples: None }
    }

    pub fn vib(beta: f64, sigma: f64) -> Self {
        ObjectiveSpec { variant: Variant::Vib, beta, sigma, mmd_prior_samples: None }
    }

    pub fn vim(beta: f64, sigma: f64) -> Self {
        ObjectiveSpec { variant: Variant::Vim, beta, sigma, mmd_prior_samples: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if let Some(m) = self.mmd_prior_samples {
            if m < 2 {
                return Err(Error::Config(format!("mmd_prior_samples must be >= 2, got {m}")));
            }
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn nll(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Closed-form KL from `N(mu, exp(logvar))` to `N(0, sigma^2 I)`, summed over
/// latent dimensions and averaged over the batch:
/// `mean_b sum_k 0.5 * [ (exp(logvar) + mu^2)/sigma^2 - 1 - logvar + 2 ln sigma ]`.
pub fn gauss_kl(tape: &mut Tape, mu: Var, logvar: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("gauss_kl needs sigma > 0, got {sigma}")));
    }
    let rows = tape.shape(mu)[0];
    let var = tape.exp(logvar);
    let musq = tape.square(mu);
    let numer = tape.add(var, musq)?;
    let scaled = tape.scale(numer, 0.5 / (sigma * sigma));
    let half_lv = tape.scale(logvar, -0.5);
    let partial = tape.add(scaled, half_lv)?;
    let shifted = tape.add_const(partial, sigma.ln() - 0.5);
    let total = tape.sum(shifted);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// The rational kernel `k(z1, z2) = K / (K + |z1 - z2|^2)` with `K` the
/// latent dimension. Symmetric, bounded in `(0, 1]`, equal to 1 iff the
/// inputs coincide.
pub fn kernel_value(z1: &[f64], z2: &[f64]) -> f64 {
    debug_assert_eq!(z1.len(), z2.len());
    let k = z1.len() as f64;
    let d: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    k / (k + d)
}

/// Biased V-statistic estimate of squared MMD between two sample sets
/// (row-major, `dim` columns each):
/// `mean_ij k(x_i, x_j) + mean_ij k(y_i, y_j) - 2 mean_ij k(x_i, y_j)`.
/// Nonnegative by construction, exactly 0 on identical sample sets.
pub fn mmd_vstat(x: &[f64], y: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        return Err(Error::contract(format!(
            "mmd sample sets must be multiples of dim={dim}, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let b = x.len() / dim;
    let m = y.len() / dim;
    if b < 2 || m < 2 {
        return Err(Error::contract(format!(
            "mmd requires both sample sets to have >= 2 rows, got {b} and {m}"
        )));
    }
    let mean_gram = |a: &[f64], rows: usize, bmat: &[f64], cols: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                s += kernel_value(&a[i * dim..(i + 1) * dim], &bmat[j * dim..(j + 1) * dim]);
            }
        }
        s / (rows * cols) as f64
    };
    let xx = mean_gram(x, b, x, b);
    let yy = mean_gram(y, m, y, m);
    let xy = mean_gram(x, b, y, m);
    // A V-statistic is a squared RKHS norm; clamp away -0.0 from roundoff.
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

/// Everything one step's loss construction produces.
pub struct LossOutput {
    pub loss: Var,
    pub nll: Var,
    /// The weighted penalty node, absent for `beta = 0` or the baseline.
    pub penalty: Option<Var>,
    pub latent: LatentBatch,
    pub logits: Var,
}

/// Builds the configured loss on `tape` for one minibatch.
///
/// RNG order is fixed: latent noise first, then (vim only, `beta > 0`) prior
/// draws. With `beta = 0` every variant consumes the identical stream and
/// produces the identical loss value as the baseline.
pub fn objective_loss(
    tape: &mut Tape,
    model: &StochasticClassifier,
    vars: &ModelVars,
    spec: &ObjectiveSpec,
    images: &[f64],
    labels: &[usize],
    rows: usize,
    rng: &mut ChaCha12Rng,
) -> Result<LossOutput> {
    if rows == 0 {
        return Err(Error::contract("objective_loss on an empty batch"));
    }
    spec.validate().map_err(|e| Error::contract(e.to_string()))?;
    let k = model.latent_dim();
    let x = tape.leaf_from(vec![rows, model.input_dim()], images.to_vec())?;
    let (mu, logvar) = model.encode_on(tape, vars, x)?;
    let eps = draw_standard_normal(rows, k, rng);
    let z = sample_latent(tape, mu, logvar, &eps)?;
    let logits = model.decode_on(tape, vars, z)?;
    let nll_node = nll(tape, logits, labels)?;

    let penalty = if spec.beta > 0.0 {
        match spec.variant {
            Variant::Baseline => None,
            Variant::Vib => {
                let kl = gauss_kl(tape, mu, logvar, spec.sigma)?;
                Some(tape.scale(kl, spec.beta))
            }
            Variant::Vim => {
                let m = spec.mmd_prior_samples.unwrap_or(rows);
                let mut prior = draw_standard_normal(m, k, rng);
                for v in prior.data_mut() {
                    *v *= spec.sigma;
                }
                let mmd = tape.mmd(z, &prior)?;
                Some(tape.scale(mmd, spec.beta))
            }
        }
    } else {
        None
    };

    let loss = match penalty {
        Some(p) => tape.add(nll_node, p)?,
        None => nll_node,
    };

    let latent = LatentBatch {
        mu: Tensor::new(vec![rows, k], tape.value(mu).to_vec())?,
        logvar: Tensor::new(vec![rows, k], tape.value(logvar).to_vec())?,
        eps,
        z: Tensor::new(vec![rows, k], tape.value(z).to_vec())?,
    };

    Ok(LossOutput { loss, nll: nll_node, penalty, latent, logits })
}
