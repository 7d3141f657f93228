//! The stochastic classifier: a ReLU MLP encoder emitting a diagonal-Gaussian
//! latent (means and log-variances), a reparameterized sampler, and a linear
//! softmax decoder.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tape, Tensor, Var};

/// Log-variance clamp bounds; keeps `exp` tame during early training.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// One fully connected layer, weights `[fan_in, fan_out]`, bias `[fan_out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Dense {
            w: Tensor::param(vec![fan_in, fan_out], w).expect("init shape"),
            b: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("init shape"),
        }
    }

    fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Tensor::param(vec![fan_in, fan_out], vec![0.0; fan_in * fan_out]).expect("init shape"),
            b: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("init shape"),
        }
    }
}

/// Encoder (MLP ending in a 2K-wide Gaussian head) plus linear decoder.
/// The parameter set θ = (encoder φ, decoder W/b).
#[derive(Debug, Clone)]
pub struct StochasticClassifier {
    input_dim: usize,
    hidden: Vec<usize>,
    latent_dim: usize,
    class_count: usize,
    encoder: Vec<Dense>,
    dec_w: Tensor,
    dec_b: Tensor,
}

/// Tape handles for one step's parameter leaves.
pub struct ModelVars {
    enc: Vec<(Var, Var)>,
    dec_w: Var,
    dec_b: Var,
}

/// Per-minibatch latent record: `z = mu + exp(logvar/2) ⊙ eps` holds exactly.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
}

impl LatentBatch {
    /// Recomputes `z` from the stored pieces; bitwise-equal to the stored `z`.
    pub fn recompute_z(&self) -> Tensor {
        let data: Vec<f64> = self
            .mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(self.eps.data())
            .map(|((&m, &lv), &e)| m + (lv * 0.5).exp() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data).expect("shape")
    }
}

impl StochasticClassifier {
    /// Glorot-uniform weights, zero biases. Encoder widths:
    /// `input -> hidden... -> 2*latent_dim`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        class_count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut encoder = Vec::new();
        let mut fan_in = input_dim;
        for &h in hidden {
            encoder.push(Dense::glorot(fan_in, h, rng));
            fan_in = h;
        }
        encoder.push(Dense::glorot(fan_in, 2 * latent_dim, rng));
        StochasticClassifier {
            input_dim,
            hidden: hidden.to_vec(),
            latent_dim,
            class_count,
            encoder,
            dec_w: {
                let d = Dense::glorot(latent_dim, class_count, rng);
                d.w
            },
            dec_b: Tensor::param(vec![class_count], vec![0.0; class_count]).expect("init shape"),
        }
    }

    /// All-zero parameters (useful for contract tests).
    pub fn zeroed(input_dim: usize, hidden: &[usize], latent_dim: usize, class_count: usize) -> Self {
        let mut encoder = Vec::new();
        let mut fan_in = input_dim;
        for &h in hidden {
            encoder.push(Dense::zeroed(fan_in, h));
            fan_in = h;
        }
        encoder.push(Dense::zeroed(fan_in, 2 * latent_dim));
        StochasticClassifier {
            input_dim,
            hidden: hidden.to_vec(),
            latent_dim,
            class_count,
            encoder,
            dec_w: Tensor::param(vec![latent_dim, class_count], vec![0.0; latent_dim * class_count])
                .expect("init shape"),
            dec_b: Tensor::param(vec![class_count], vec![0.0; class_count]).expect("init shape"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Parameters in declaration order (encoder layers, then decoder).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.w"), &layer.w));
            out.push((format!("enc{i}.b"), &layer.b));
        }
        out.push(("dec.w".to_string(), &self.dec_w));
        out.push(("dec.b".to_string(), &self.dec_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc{i}.w"), &mut layer.w));
            out.push((format!("enc{i}.b"), &mut layer.b));
        }
        out.push(("dec.w".to_string(), &mut self.dec_w));
        out.push(("dec.b".to_string(), &mut self.dec_b));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.is_finite())
    }

    // ── Tape path (training and input-gradient evaluation) ──────────

    /// Inserts every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let enc = self
            .encoder
            .iter()
            .map(|layer| (tape.leaf(&layer.w), tape.leaf(&layer.b)))
            .collect();
        ModelVars { enc, dec_w: tape.leaf(&self.dec_w), dec_b: tape.leaf(&self.dec_b) }
    }

    /// Encoder forward on the tape: ReLU MLP, final 2K layer split into
    /// means and clamped log-variances.
    pub fn encode_on(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<(Var, Var)> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, (w, b)) in vars.enc.iter().enumerate() {
            let lin = tape.matmul(h, *w)?;
            h = tape.add_row(lin, *b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let k = self.latent_dim;
        let mu = tape.slice_cols(h, 0, k)?;
        let logvar_raw = tape.slice_cols(h, k, 2 * k)?;
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, logvar))
    }

    /// Linear decoder on the tape: `logits = z . W + b`.
    pub fn decode_on(&self, tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
        let lin = tape.matmul(z, vars.dec_w)?;
        tape.add_row(lin, vars.dec_b)
    }

    /// Pulls leaf gradients back into the parameter accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        for (layer, (wv, bv)) in self.encoder.iter_mut().zip(&vars.enc) {
            layer.w.accumulate_grad(tape.grad(*wv));
            layer.b.accumulate_grad(tape.grad(*bv));
        }
        self.dec_w.accumulate_grad(tape.grad(vars.dec_w));
        self.dec_b.accumulate_grad(tape.grad(vars.dec_b));
    }

    // ── Value-only path (prediction and metrics) ─────────────────────

    /// Encoder forward without a tape. Returns `(mu, logvar)` rows, with the
    /// same arithmetic as the tape path.
    pub fn encode_values(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != rows * self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![x.len() / self.input_dim.max(1), x.len() % self.input_dim.max(1)],
                rhs: vec![rows, self.input_dim],
            });
        }
        let mut h = x.to_vec();
        let mut width = self.input_dim;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let out_w = layer.w.shape()[1];
            let mut lin = matmul_raw(&h, layer.w.data(), rows, width, out_w);
            for r in 0..rows {
                for c in 0..out_w {
                    lin[r * out_w + c] += layer.b.data()[c];
                }
            }
            if i < last {
                for v in lin.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = lin;
            width = out_w;
        }
        let k = self.latent_dim;
        let mut mu = Vec::with_capacity(rows * k);
        let mut logvar = Vec::with_capacity(rows * k);
        for r in 0..rows {
            mu.extend_from_slice(&h[r * 2 * k..r * 2 * k + k]);
            logvar.extend(h[r * 2 * k + k..(r + 1) * 2 * k].iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)));
        }
        Ok((mu, logvar))
    }

    /// Deterministic logits through `z = mu`.
    pub fn logits_from_mu(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (mu, _) = self.encode_values(x, rows)?;
        Ok(self.decode_values(&mu, rows))
    }

    /// `logits = z . W + b` without a tape.
    pub fn decode_values(&self, z: &[f64], rows: usize) -> Vec<f64> {
        let c = self.class_count;
        let mut logits = matmul_raw(z, self.dec_w.data(), rows, self.latent_dim, c);
        for r in 0..rows {
            for j in 0..c {
                logits[r * c + j] += self.dec_b.data()[j];
            }
        }
        logits
    }

    /// Deterministic prediction: `z = mu`, softmax, argmax with ties broken
    /// toward the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits_from_mu(x, 1)?;
        let probs = softmax_row(&logits);
        Ok((argmax_lowest(&probs), probs))
    }

    /// Batch prediction, one class index per row.
    pub fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<usize>> {
        let logits = self.logits_from_mu(x, rows)?;
        let c = self.class_count;
        Ok((0..rows).map(|r| argmax_lowest(&logits[r * c..(r + 1) * c])).collect())
    }

    /// Prediction by averaging softmax outputs over `samples` latent draws.
    pub fn predict_sampled(
        &self,
        x: &[f64],
        samples: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, Vec<f64>)> {
        if samples == 0 {
            return Err(Error::contract("predict_sampled needs samples >= 1"));
        }
        let (mu, logvar) = self.encode_values(x, 1)?;
        let k = self.latent_dim;
        let mut mean_probs = vec![0.0; self.class_count];
        for _ in 0..samples {
            let z: Vec<f64> = (0..k)
                .map(|i| {
                    let e: f64 = rng.sample(StandardNormal);
                    mu[i] + (logvar[i] * 0.5).exp() * e
                })
                .collect();
            let logits = self.decode_values(&z, 1);
            for (m, p) in mean_probs.iter_mut().zip(softmax_row(&logits)) {
                *m += p / samples as f64;
            }
        }
        Ok((argmax_lowest(&mean_probs), mean_probs))
    }
}

/// Reparameterized sampling node: `z = mu + exp(logvar/2) ⊙ eps`. Gradients
/// flow to `mu` and `logvar`; `eps` enters as a constant leaf.
pub fn sample_latent(tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps_var = tape.leaf(eps);
    let noise = tape.mul(std, eps_var)?;
    tape.add(mu, noise)
}

/// Draws a standard-normal `rows × k` tensor from the stream.
pub fn draw_standard_normal(rows: usize, k: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * k).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, k], data).expect("shape")
}

pub(crate) fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};

    fn tiny_model(rng: &mut ChaCha12Rng) -> StochasticClassifier {
        StochasticClassifier::new(6, &[8, 8], 3, 4, rng)
    }

    #[test]
    fn zero_weights_give_zero_mu_logvar() {
        let model = StochasticClassifier::zeroed(5, &[4], 2, 3);
        let x = vec![0.3, 0.9, 0.1, 0.5, 0.7];
        let (mu, logvar) = model.encode_values(&x, 1).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(logvar, vec![0.0, 0.0]);
    }

    #[test]
    fn identical_rows_encode_identically() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = tiny_model(&mut rng);
        let row = vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3];
        let batch: Vec<f64> = row.iter().chain(row.iter()).cloned().collect();
        let (mu, logvar) = model.encode_values(&batch, 2).unwrap();
        assert_eq!(&mu[0..3], &mu[3..6]);
        assert_eq!(&logvar[0..3], &logvar[3..6]);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let model = StochasticClassifier::zeroed(5, &[4], 2, 3);
        assert!(model.encode_values(&[0.0; 4], 1).is_err());
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.leaf_from(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(model.encode_on(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let model = tiny_model(&mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();

        // d sum(mu) / d first-layer weights
        let run = |w0: &[f64]| -> (f64, Vec<f64>) {
            let mut m = model.clone();
            m.encoder[0].w.data_mut().copy_from_slice(w0);
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape);
            let xv = tape.leaf_from(vec![2, 6], x.clone()).unwrap();
            let (mu, _) = m.encode_on(&mut tape, &vars, xv).unwrap();
            let s = tape.sum(mu);
            tape.backward(s).unwrap();
            (tape.scalar(s).unwrap(), tape.grad(vars.enc[0].0).to_vec())
        };
        let w0 = model.encoder[0].w.data().to_vec();
        let (_, g) = run(&w0);
        let fd = central_diff(|w| run(w).0, &w0, 1e-5);
        assert!(max_rel_err(&g, &fd) <= 1e-4, "err {}", max_rel_err(&g, &fd));
    }

    #[test]
    fn sample_latent_degenerate_variance() {
        // logvar at the clamp floor: |z - mu| <= e^-5 * max|eps|
        let mut tape = Tape::new();
        let mu = tape.leaf_from(vec![1, 3], vec![0.5, -0.25, 1.0]).unwrap();
        let logvar = tape.leaf_from(vec![1, 3], vec![LOGVAR_MIN; 3]).unwrap();
        let eps = Tensor::new(vec![1, 3], vec![2.0, -1.5, 0.75]).unwrap();
        let z = sample_latent(&mut tape, mu, logvar, &eps).unwrap();
        let bound = (-5.0f64).exp() * 2.0;
        for (zv, mv) in tape.value(z).iter().zip(tape.value(mu)) {
            assert!((zv - mv).abs() <= bound);
        }
    }

    #[test]
    fn sample_latent_zero_noise_is_mu() {
        let mut tape = Tape::new();
        let mu = tape.leaf_from(vec![1, 3], vec![0.5, -0.25, 1.0]).unwrap();
        let logvar = tape.leaf_from(vec![1, 3], vec![0.3, -0.2, 0.1]).unwrap();
        let eps = Tensor::zeros(vec![1, 3]);
        let z = sample_latent(&mut tape, mu, logvar, &eps).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));
    }

    #[test]
    fn sample_latent_moments_standard_normal() {
        // mu=0, logvar=0: empirical mean/var of 1e5 draws within 3 standard
        // errors of (0, 1) per dimension. SE(mean) = 1/sqrt(n), SE(var) ~ sqrt(2/n).
        let n = 100_000;
        let k = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let eps = draw_standard_normal(n, k, &mut rng);
        let mut tape = Tape::new();
        let mu = tape.leaf_from(vec![n, k], vec![0.0; n * k]).unwrap();
        let logvar = tape.leaf_from(vec![n, k], vec![0.0; n * k]).unwrap();
        let z = sample_latent(&mut tape, mu, logvar, &eps).unwrap();
        let zs = tape.value(z);
        for d in 0..k {
            let mean: f64 = (0..n).map(|i| zs[i * k + d]).sum::<f64>() / n as f64;
            let var: f64 = (0..n).map(|i| (zs[i * k + d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = 1.0 / (n as f64).sqrt();
            let se_var = (2.0 / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se_mean, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() <= 3.0 * se_var, "dim {d} var {var}");
        }
    }

    #[test]
    fn reparameterization_consistency_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let model = tiny_model(&mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let xv = tape.leaf_from(vec![2, 6], x).unwrap();
        let (mu, logvar) = model.encode_on(&mut tape, &vars, xv).unwrap();
        let eps = draw_standard_normal(2, 3, &mut rng);
        let z = sample_latent(&mut tape, mu, logvar, &eps).unwrap();
        let latent = LatentBatch {
            mu: Tensor::new(vec![2, 3], tape.value(mu).to_vec()).unwrap(),
            logvar: Tensor::new(vec![2, 3], tape.value(logvar).to_vec()).unwrap(),
            eps,
            z: Tensor::new(vec![2, 3], tape.value(z).to_vec()).unwrap(),
        };
        assert_eq!(latent.recompute_z().data(), latent.z.data());
    }

    #[test]
    fn decode_zeroed_gives_uniform_distribution() {
        let model = StochasticClassifier::zeroed(5, &[4], 2, 10);
        let x = vec![0.1; 5];
        let (_, probs) = model.predict(&x).unwrap();
        for p in probs {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_identity_passes_argmax_through() {
        // K = C, W = I, b = 0: argmax(logits) == argmax(z)
        let mut model = StochasticClassifier::zeroed(3, &[4], 3, 3);
        for i in 0..3 {
            model.dec_w.data_mut()[i * 3 + i] = 1.0;
        }
        let z = vec![0.3, 0.9, -0.4];
        let logits = model.decode_values(&z, 1);
        assert_eq!(argmax_lowest(&logits), argmax_lowest(&z));
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let model = tiny_model(&mut rng);
        let z0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
        let run = |zv: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let z = tape.leaf_from(vec![2, 3], zv.to_vec()).unwrap();
            let logits = model.decode_on(&mut tape, &vars, z).unwrap();
            let l = tape.dot(logits, &w).unwrap();
            tape.backward(l).unwrap();
            (tape.scalar(l).unwrap(), tape.grad(z).to_vec())
        };
        let (_, g) = run(&z0);
        let fd = central_diff(|z| run(z).0, &z0, 1e-5);
        assert!(max_rel_err(&g, &fd) <= 1e-6);
    }

    #[test]
    fn untrained_zeroed_model_predicts_class_zero() {
        let model = StochasticClassifier::zeroed(5, &[4], 2, 10);
        let (class, _) = model.predict(&[0.5; 5]).unwrap();
        assert_eq!(class, 0);
    }

    #[test]
    fn prediction_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let model = tiny_model(&mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (c1, p1) = model.predict(&x).unwrap();
        let (c2, p2) = model.predict(&x).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn latent_width_contract() {
        // changing K changes only the last encoder layer and decoder input width
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let m3 = StochasticClassifier::new(6, &[8, 8], 3, 4, &mut rng);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let m5 = StochasticClassifier::new(6, &[8, 8], 5, 4, &mut rng);
        assert_eq!(m3.encoder[0].w.shape(), m5.encoder[0].w.shape());
        assert_eq!(m3.encoder[1].w.shape(), m5.encoder[1].w.shape());
        assert_eq!(m3.encoder[2].w.shape(), &[8, 6]);
        assert_eq!(m5.encoder[2].w.shape(), &[8, 10]);
        assert_eq!(m3.dec_w.shape(), &[3, 4]);
        assert_eq!(m5.dec_w.shape(), &[5, 4]);
    }
}
