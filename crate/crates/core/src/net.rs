//! The variational and generative networks.
//!
//! Both networks are two fully-connected ReLU layers followed by a linear
//! mean head and a `softplus + epsilon` standard-deviation head. Weights are
//! stored `(fan_in, fan_out)` so a batch of row vectors maps as `X·W + b`.
//!
//! Gradients are derived by hand for this fixed architecture; see
//! [`batch_backward`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::series::Standardization;
use crate::train::ElboTerms;

/// `0.5 * ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_HIDDEN: usize = 100;

const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

pub fn softplus(a: f64) -> f64 {
    if a > SOFTPLUS_LINEAR_ABOVE {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let r = (x - mu) / sigma;
    -HALF_LN_2PI - sigma.ln() - 0.5 * r * r
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        reparameterize(self, &xi)
    }
}

/// Log density of `x` under a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    if x.len() != g.mu.len() || g.sigma.len() != g.mu.len() {
        return Err(Error::DimensionMismatch {
            what: "gaussian log-prob input",
            expected: g.mu.len(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(&g.mu)
        .zip(&g.sigma)
        .map(|((&x, &mu), &sigma)| log_normal(x, mu, sigma))
        .sum())
}

/// `mu + xi * sigma`, elementwise.
pub fn reparameterize(g: &DiagGaussian, xi: &[f64]) -> Vec<f64> {
    assert_eq!(xi.len(), g.dim(), "noise dimension must match the Gaussian");
    g.mu.iter()
        .zip(&g.sigma)
        .zip(xi)
        .map(|((&m, &s), &e)| m + e * s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub window: usize,
    pub latent: usize,
    pub hidden: usize,
}

impl NetShape {
    pub fn new(window: usize, latent: usize) -> Self {
        Self {
            window,
            latent,
            hidden: DEFAULT_HIDDEN,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.latent == 0 || self.hidden == 0 {
            return Err(Error::config(format!(
                "window, latent and hidden sizes must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(fan_in, fan_out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn he_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight);
        out += &self.bias;
        out
    }

    fn forward_vec(&self, input: &ArrayView1<f64>) -> Array1<f64> {
        input.dot(&self.weight) + &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Every parameter tensor of the model; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub enc_hidden1: Dense,
    pub enc_hidden2: Dense,
    pub z_mean: Dense,
    pub z_std: Dense,
    pub dec_hidden1: Dense,
    pub dec_hidden2: Dense,
    pub x_mean: Dense,
    pub x_std: Dense,
}

pub type GradientSet = Tensors;

/// Layer names in storage order.
pub const LAYER_NAMES: [&str; 8] = [
    "encoder.hidden1",
    "encoder.hidden2",
    "encoder.z_mean",
    "encoder.z_std",
    "decoder.hidden1",
    "decoder.hidden2",
    "decoder.x_mean",
    "decoder.x_std",
];

/// Indices into [`LAYER_NAMES`] of the hidden (non-head) layers.
pub const HIDDEN_LAYERS: [usize; 4] = [0, 1, 4, 5];

impl Tensors {
    pub fn zeros(shape: NetShape) -> Self {
        let NetShape {
            window: w,
            latent: k,
            hidden: h,
        } = shape;
        Self {
            enc_hidden1: Dense::zeros(w, h),
            enc_hidden2: Dense::zeros(h, h),
            z_mean: Dense::zeros(h, k),
            z_std: Dense::zeros(h, k),
            dec_hidden1: Dense::zeros(k, h),
            dec_hidden2: Dense::zeros(h, h),
            x_mean: Dense::zeros(h, w),
            x_std: Dense::zeros(h, w),
        }
    }

    fn he_normal<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let NetShape {
            window: w,
            latent: k,
            hidden: h,
        } = shape;
        Self {
            enc_hidden1: Dense::he_normal(w, h, rng),
            enc_hidden2: Dense::he_normal(h, h, rng),
            z_mean: Dense::he_normal(h, k, rng),
            z_std: Dense::he_normal(h, k, rng),
            dec_hidden1: Dense::he_normal(k, h, rng),
            dec_hidden2: Dense::he_normal(h, h, rng),
            x_mean: Dense::he_normal(h, w, rng),
            x_std: Dense::he_normal(h, w, rng),
        }
    }

    pub fn layers(&self) -> [&Dense; 8] {
        [
            &self.enc_hidden1,
            &self.enc_hidden2,
            &self.z_mean,
            &self.z_std,
            &self.dec_hidden1,
            &self.dec_hidden2,
            &self.x_mean,
            &self.x_std,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 8] {
        [
            &mut self.enc_hidden1,
            &mut self.enc_hidden2,
            &mut self.z_mean,
            &mut self.z_std,
            &mut self.dec_hidden1,
            &mut self.dec_hidden2,
            &mut self.x_mean,
            &mut self.x_std,
        ]
    }

    /// All values as mutable slices, weights before biases per layer.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|d| d.param_count()).sum()
    }

    /// L2 norm over every tensor together.
    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.layers()
            .iter()
            .zip(other.layers())
            .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: NetShape,
    /// Floor added to both standard-deviation heads.
    pub epsilon: f64,
    /// Statistics the training data was standardized with.
    pub stats: Standardization,
    pub tensors: Tensors,
}

impl ModelParams {
    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init<R: Rng + ?Sized>(
        shape: NetShape,
        epsilon: f64,
        stats: Standardization,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        check_epsilon(epsilon)?;
        Ok(Self {
            shape,
            epsilon,
            stats,
            tensors: Tensors::he_normal(shape, rng),
        })
    }

    pub fn zeros(shape: NetShape, epsilon: f64) -> Self {
        Self {
            shape,
            epsilon,
            stats: Standardization {
                mean: 0.0,
                std: 1.0,
            },
            tensors: Tensors::zeros(shape),
        }
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn std_head(pre: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    pre.mapv(|a| softplus(a) + epsilon)
}

/// Batched posterior parameters `q(z|x)` for rows of `x`.
pub fn encode_batch(x: &ArrayView2<f64>, params: &ModelParams) -> (Array2<f64>, Array2<f64>) {
    let t = &params.tensors;
    let mut h1 = t.enc_hidden1.forward(x);
    relu_inplace(&mut h1);
    let mut h2 = t.enc_hidden2.forward(&h1.view());
    relu_inplace(&mut h2);
    let mu = t.z_mean.forward(&h2.view());
    let sigma = std_head(&t.z_std.forward(&h2.view()), params.epsilon);
    (mu, sigma)
}

/// Batched likelihood parameters `p(x|z)` for rows of `z`.
pub fn decode_batch(z: &ArrayView2<f64>, params: &ModelParams) -> (Array2<f64>, Array2<f64>) {
    let h2 = decoder_features(z, params);
    let t = &params.tensors;
    let mu = t.x_mean.forward(&h2.view());
    let sigma = std_head(&t.x_std.forward(&h2.view()), params.epsilon);
    (mu, sigma)
}

fn decoder_features(z: &ArrayView2<f64>, params: &ModelParams) -> Array2<f64> {
    let t = &params.tensors;
    let mut h1 = t.dec_hidden1.forward(z);
    relu_inplace(&mut h1);
    let mut h2 = t.dec_hidden2.forward(&h1.view());
    relu_inplace(&mut h2);
    h2
}

/// Likelihood parameters of a single output dimension for rows of `z`.
/// Skips the other `W - 1` head columns, which dominate decoder cost when
/// only the last point is scored.
pub fn decode_column(
    z: &ArrayView2<f64>,
    column: usize,
    params: &ModelParams,
) -> (Array1<f64>, Array1<f64>) {
    let h2 = decoder_features(z, params);
    let t = &params.tensors;
    let mu = h2.dot(&t.x_mean.weight.column(column)) + t.x_mean.bias[column];
    let mut sigma = h2.dot(&t.x_std.weight.column(column)) + t.x_std.bias[column];
    sigma.mapv_inplace(|a| softplus(a) + params.epsilon);
    (mu, sigma)
}

/// `q(z|x)` for one window.
pub fn encode(x: &[f64], params: &ModelParams) -> Result<DiagGaussian> {
    if x.len() != params.shape.window {
        return Err(Error::DimensionMismatch {
            what: "encoder input",
            expected: params.shape.window,
            got: x.len(),
        });
    }
    let t = &params.tensors;
    let x = ArrayView1::from(x);
    let h1 = t.enc_hidden1.forward_vec(&x).mapv(|v| v.max(0.0));
    let h2 = t.enc_hidden2.forward_vec(&h1.view()).mapv(|v| v.max(0.0));
    let mu = t.z_mean.forward_vec(&h2.view());
    let sigma = t
        .z_std
        .forward_vec(&h2.view())
        .mapv(|a| softplus(a) + params.epsilon);
    Ok(DiagGaussian {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
    })
}

/// `p(x|z)` for one latent vector.
pub fn decode(z: &[f64], params: &ModelParams) -> Result<DiagGaussian> {
    if z.len() != params.shape.latent {
        return Err(Error::DimensionMismatch {
            what: "decoder input",
            expected: params.shape.latent,
            got: z.len(),
        });
    }
    let t = &params.tensors;
    let z = ArrayView1::from(z);
    let h1 = t.dec_hidden1.forward_vec(&z).mapv(|v| v.max(0.0));
    let h2 = t.dec_hidden2.forward_vec(&h1.view()).mapv(|v| v.max(0.0));
    let mu = t.x_mean.forward_vec(&h2.view());
    let sigma = t
        .x_std
        .forward_vec(&h2.view())
        .mapv(|a| softplus(a) + params.epsilon);
    Ok(DiagGaussian {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
    })
}

/// A mini-batch of windows with their reparameterization noise.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, W)`
    pub x: Array2<f64>,
    /// `(B, W)`, 1.0 for normal points
    pub alpha: Array2<f64>,
    /// `(B,)`
    pub beta: Array1<f64>,
    /// `(B, K)`, standard normal draws
    pub xi: Array2<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    fn check(&self, shape: NetShape) -> Result<()> {
        let b = self.rows();
        let checks = [
            ("batch x columns", shape.window, self.x.ncols()),
            ("batch alpha shape", b * shape.window, self.alpha.len()),
            ("batch beta length", b, self.beta.len()),
            ("batch noise shape", b * shape.latent, self.xi.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
struct Forward {
    enc_h1: Array2<f64>,
    enc_h2: Array2<f64>,
    z_std_pre: Array2<f64>,
    z_sigma: Array2<f64>,
    z: Array2<f64>,
    dec_h1: Array2<f64>,
    dec_h2: Array2<f64>,
    x_std_pre: Array2<f64>,
    x_mu: Array2<f64>,
    x_sigma: Array2<f64>,
    terms: Vec<ElboTerms>,
}

fn forward(batch: &Batch, params: &ModelParams) -> Forward {
    let t = &params.tensors;
    let eps = params.epsilon;

    let mut enc_h1 = t.enc_hidden1.forward(&batch.x.view());
    relu_inplace(&mut enc_h1);
    let mut enc_h2 = t.enc_hidden2.forward(&enc_h1.view());
    relu_inplace(&mut enc_h2);
    let z_mu = t.z_mean.forward(&enc_h2.view());
    let z_std_pre = t.z_std.forward(&enc_h2.view());
    let z_sigma = std_head(&z_std_pre, eps);
    let z = &z_mu + &(&batch.xi * &z_sigma);

    let mut dec_h1 = t.dec_hidden1.forward(&z.view());
    relu_inplace(&mut dec_h1);
    let mut dec_h2 = t.dec_hidden2.forward(&dec_h1.view());
    relu_inplace(&mut dec_h2);
    let x_mu = t.x_mean.forward(&dec_h2.view());
    let x_std_pre = t.x_std.forward(&dec_h2.view());
    let x_sigma = std_head(&x_std_pre, eps);

    let terms = (0..batch.rows())
        .map(|i| {
            let recon: f64 = Zip::from(batch.x.row(i))
                .and(batch.alpha.row(i))
                .and(x_mu.row(i))
                .and(x_sigma.row(i))
                .fold(0.0, |acc, &x, &a, &m, &s| {
                    if a == 0.0 {
                        acc
                    } else {
                        acc + a * log_normal(x, m, s)
                    }
                });
            let log_prior: f64 = z.row(i).iter().map(|&v| log_normal(v, 0.0, 1.0)).sum();
            let log_q: f64 = Zip::from(z.row(i))
                .and(z_mu.row(i))
                .and(z_sigma.row(i))
                .fold(0.0, |acc, &v, &m, &s| acc + log_normal(v, m, s));
            ElboTerms {
                recon,
                prior: batch.beta[i] * log_prior,
                entropy: -log_q,
            }
        })
        .collect();

    Forward {
        enc_h1,
        enc_h2,
        z_std_pre,
        z_sigma,
        z,
        dec_h1,
        dec_h2,
        x_std_pre,
        x_mu,
        x_sigma,
        terms,
    }
}

/// Per-row masked ELBO terms for a batch, with no gradient work.
pub fn batch_terms(batch: &Batch, params: &ModelParams) -> Result<Vec<ElboTerms>> {
    batch.check(params.shape)?;
    Ok(forward(batch, params).terms)
}

/// Mean negative masked ELBO over the batch and its exact gradient with
/// respect to every parameter.
///
/// Per row, with `r = (x - mu_x) / sigma_x`:
///
/// * `d/d mu_x = -alpha * r / sigma_x`, `d/d sigma_x = alpha * (1 - r^2) / sigma_x`
/// * `d/d z` collects the decoder path plus `beta * z` from the prior
/// * through `z = mu_z + xi * sigma_z` the entropy term contributes nothing
///   to `mu_z` and `-1 / sigma_z` to `sigma_z`
/// * softplus heads scale by `sigmoid(pre-activation)`; ReLUs gate on the
///   sign of their output.
pub fn batch_backward(batch: &Batch, params: &ModelParams) -> Result<(f64, GradientSet)> {
    batch.check(params.shape)?;
    let rows = batch.rows();
    if rows == 0 {
        return Ok((0.0, Tensors::zeros(params.shape)));
    }
    let f = forward(batch, params);
    let t = &params.tensors;
    let scale = 1.0 / rows as f64;
    let loss = -f.terms.iter().map(ElboTerms::total).sum::<f64>() * scale;

    let mut g = Tensors::zeros(params.shape);

    // decoder heads
    let mut d_xmu = Array2::zeros(f.x_mu.raw_dim());
    let mut d_xstd_pre = Array2::zeros(f.x_mu.raw_dim());
    Zip::from(&mut d_xmu)
        .and(&batch.x)
        .and(&batch.alpha)
        .and(&f.x_mu)
        .and(&f.x_sigma)
        .for_each(|dm, &x, &a, &m, &s| {
            *dm = -a * (x - m) / (s * s) * scale;
        });
    Zip::from(&mut d_xstd_pre)
        .and(&batch.x)
        .and(&batch.alpha)
        .and(&f.x_mu)
        .and(&f.x_sigma)
        .and(&f.x_std_pre)
        .for_each(|ds, &x, &a, &m, &s, &pre| {
            let r = (x - m) / s;
            *ds = a * (1.0 - r * r) / s * scale * sigmoid(pre);
        });
    accumulate(&mut g.x_mean, &f.dec_h2, &d_xmu);
    accumulate(&mut g.x_std, &f.dec_h2, &d_xstd_pre);

    // decoder hidden layers
    let mut d_h2 = d_xmu.dot(&t.x_mean.weight.t()) + d_xstd_pre.dot(&t.x_std.weight.t());
    relu_grad(&mut d_h2, &f.dec_h2);
    accumulate(&mut g.dec_hidden2, &f.dec_h1, &d_h2);
    let mut d_h1 = d_h2.dot(&t.dec_hidden2.weight.t());
    relu_grad(&mut d_h1, &f.dec_h1);
    accumulate(&mut g.dec_hidden1, &f.z, &d_h1);
    let mut d_z = d_h1.dot(&t.dec_hidden1.weight.t());

    // prior
    for (i, mut row) in d_z.axis_iter_mut(Axis(0)).enumerate() {
        let b = batch.beta[i] * scale;
        row.zip_mut_with(&f.z.row(i), |d, &z| *d += b * z);
    }

    // reparameterization and entropy
    let d_zmu = d_z.clone();
    let mut d_zstd_pre = Array2::zeros(d_z.raw_dim());
    Zip::from(&mut d_zstd_pre)
        .and(&d_z)
        .and(&batch.xi)
        .and(&f.z_sigma)
        .and(&f.z_std_pre)
        .for_each(|out, &dz, &xi, &s, &pre| {
            *out = (dz * xi - scale / s) * sigmoid(pre);
        });
    accumulate(&mut g.z_mean, &f.enc_h2, &d_zmu);
    accumulate(&mut g.z_std, &f.enc_h2, &d_zstd_pre);

    // encoder hidden layers
    let mut d_eh2 = d_zmu.dot(&t.z_mean.weight.t()) + d_zstd_pre.dot(&t.z_std.weight.t());
    relu_grad(&mut d_eh2, &f.enc_h2);
    accumulate(&mut g.enc_hidden2, &f.enc_h1, &d_eh2);
    let mut d_eh1 = d_eh2.dot(&t.enc_hidden2.weight.t());
    relu_grad(&mut d_eh1, &f.enc_h1);
    accumulate(&mut g.enc_hidden1, &batch.x, &d_eh1);

    Ok((loss, g))
}

/// Negative masked ELBO of a single window for one noise draw, with its
/// gradient.
pub fn backward(
    x: &[f64],
    alpha: &[f64],
    beta: f64,
    xi: &[f64],
    params: &ModelParams,
) -> Result<(f64, GradientSet)> {
    batch_backward(&single_batch(x, alpha, beta, xi, params.shape)?, params)
}

pub(crate) fn single_batch(
    x: &[f64],
    alpha: &[f64],
    beta: f64,
    xi: &[f64],
    shape: NetShape,
) -> Result<Batch> {
    let row = |v: &[f64], what: &'static str, n: usize| -> Result<Array2<f64>> {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                got: v.len(),
            });
        }
        Ok(Array2::from_shape_vec((1, n), v.to_vec()).expect("length checked"))
    };
    Ok(Batch {
        x: row(x, "window values", shape.window)?,
        alpha: row(alpha, "window alpha", shape.window)?,
        beta: Array1::from_elem(1, beta),
        xi: row(xi, "latent noise", shape.latent)?,
    })
}

fn accumulate(layer: &mut Dense, input: &Array2<f64>, d_out: &Array2<f64>) {
    layer.weight += &input.t().dot(d_out);
    layer.bias += &d_out.sum_axis(Axis(0));
}

fn relu_grad(d: &mut Array2<f64>, activated: &Array2<f64>) {
    Zip::from(d).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}
