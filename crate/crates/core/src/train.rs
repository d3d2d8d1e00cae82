//! Training on the masked evidence lower bound.
//!
//! Each window's objective is
//! `sum_w alpha_w log p(x_w|z) + beta log p(z) - log q(z|x)` with
//! `z = mu_z + xi * sigma_z`, averaged over noise draws. Missing points and
//! labeled anomalies have `alpha_w = 0`, and `beta` is the fraction of normal
//! points in the window.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::{self, Batch, GradientSet, ModelParams, NetShape, Tensors, HIDDEN_LAYERS};
use crate::series::{self, PreparedSeries, Window};

/// The three parts of the masked ELBO: reconstruction, scaled prior and
/// posterior entropy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub recon: f64,
    pub prior: f64,
    pub entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.prior + self.entropy
    }

    fn mean(terms: &[ElboTerms]) -> ElboTerms {
        let n = terms.len().max(1) as f64;
        let sum = terms.iter().fold(ElboTerms::default(), |acc, t| ElboTerms {
            recon: acc.recon + t.recon,
            prior: acc.prior + t.prior,
            entropy: acc.entropy + t.entropy,
        });
        ElboTerms {
            recon: sum.recon / n,
            prior: sum.prior / n,
            entropy: sum.entropy / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Masked ELBO over every window, with optional missing-point injection.
    Donut,
    /// Plain ELBO over windows free of missing points and labeled anomalies.
    VaeBaseline,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "donut" => Ok(TrainMode::Donut),
            "vae_baseline" | "vae-baseline" | "baseline" => Ok(TrainMode::VaeBaseline),
            other => Err(Error::config(format!("unknown training mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Donut => "donut",
            TrainMode::VaeBaseline => "vae_baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub shape: NetShape,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_discount: f64,
    pub lr_every: usize,
    pub l2_coeff: f64,
    pub clip_norm: f64,
    pub injection_lambda: f64,
    /// Noise draws per window for the training objective.
    pub mc_samples: usize,
    pub seed: u64,
    /// Return the parameters of the best validation epoch instead of the last.
    pub early_stop: bool,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shape: NetShape::new(120, 5),
            epsilon: net::DEFAULT_EPSILON,
            batch_size: 256,
            epochs: 250,
            initial_lr: 1e-3,
            lr_discount: 0.75,
            lr_every: 10,
            l2_coeff: 1e-3,
            clip_norm: 10.0,
            injection_lambda: 0.01,
            mc_samples: 1,
            seed: 0,
            early_stop: true,
            mode: TrainMode::Donut,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        net::check_epsilon(self.epsilon)?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("initial_lr", self.initial_lr),
            ("lr_discount", self.lr_discount),
            ("lr_every", self.lr_every as f64),
            ("clip_norm", self.clip_norm),
            ("mc_samples", self.mc_samples as f64),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.l2_coeff.is_nan() || self.l2_coeff < 0.0 {
            return Err(Error::config("l2_coeff must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.injection_lambda) {
            return Err(Error::config("injection_lambda must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Masked ELBO of one window averaged over the rows of `xi` (`L x K`).
pub fn m_elbo_estimate(window: &Window, params: &ModelParams, xi: &Array2<f64>) -> Result<f64> {
    let terms = window_terms(window, params, xi)?;
    Ok(terms.iter().map(ElboTerms::total).sum::<f64>() / terms.len() as f64)
}

/// Monte Carlo estimates of the three ELBO terms for `samples` fresh draws.
pub fn elbo_decomposition<R: Rng + ?Sized>(
    window: &Window,
    params: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<ElboTerms> {
    let xi = standard_normal((samples, params.shape.latent), rng);
    elbo_decomposition_with_noise(window, params, &xi)
}

/// As [`elbo_decomposition`], with caller-supplied noise rows.
pub fn elbo_decomposition_with_noise(
    window: &Window,
    params: &ModelParams,
    xi: &Array2<f64>,
) -> Result<ElboTerms> {
    Ok(ElboTerms::mean(&window_terms(window, params, xi)?))
}

fn window_terms(window: &Window, params: &ModelParams, xi: &Array2<f64>) -> Result<Vec<ElboTerms>> {
    let w = params.shape.window;
    if window.x.len() != w || window.alpha.len() != w {
        return Err(Error::DimensionMismatch {
            what: "window length",
            expected: w,
            got: window.x.len(),
        });
    }
    if xi.nrows() == 0 {
        return Err(Error::config("at least one noise sample is required"));
    }
    let l = xi.nrows();
    let batch = Batch {
        x: Array2::from_shape_fn((l, w), |(_, j)| window.x[j]),
        alpha: Array2::from_shape_fn((l, w), |(_, j)| window.alpha[j]),
        beta: Array1::from_elem(l, window.beta),
        xi: xi.clone(),
    };
    net::batch_terms(&batch, params)
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `initial_lr * lr_discount ^ floor(epoch / lr_every)`
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.lr_discount.powi((epoch / cfg.lr_every) as i32)
}

/// Rescale every tensor so the global L2 norm is at most `limit`. Returns the
/// norm before clipping.
pub fn clip_gradients(g: &mut GradientSet, limit: f64) -> f64 {
    let norm = g.global_norm();
    if norm > limit {
        g.scale(limit / norm);
    }
    norm
}

/// Gradient of `0.5 * coeff * ||W||^2` over the hidden-layer weights.
/// Heads and all biases are left alone.
pub fn add_l2(g: &mut GradientSet, params: &Tensors, coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    let src = params.layers();
    let dst = g.layers_mut();
    for &i in &HIDDEN_LAYERS {
        dst[i].weight.scaled_add(coeff, &src[i].weight);
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Tensors,
    pub second: Tensors,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: NetShape) -> Self {
        Self {
            first: Tensors::zeros(shape),
            second: Tensors::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Tensors, g: &GradientSet, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let grads = g.slices();
    let firsts = state.first.slices_mut();
    let seconds = state.second.slices_mut();
    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads)
        .zip(firsts)
        .zip(seconds)
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean masked ELBO over the epoch's training batches, without L2.
    pub train_m_elbo: f64,
    pub valid_m_elbo: f64,
    /// Validation decomposition.
    pub terms: ElboTerms,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps taken, one per mini-batch.
    pub steps: u64,
    pub best_epoch: Option<usize>,
    /// Windows used per training epoch.
    pub train_windows: usize,
    pub total_windows: usize,
}

pub const TRACE_HEADER: &str = "epoch,lr,train_m_elbo,valid_m_elbo,recon,prior,entropy";

impl TrainTrace {
    /// CSV with `comments` emitted as leading `# ` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_m_elbo,
                r.valid_m_elbo,
                r.terms.recon,
                r.terms.prior,
                r.terms.entropy
            );
        }
        out
    }
}

/// Window end indices used for training or validation in `mode`.
fn usable_ends(series: &PreparedSeries, window: usize, mode: TrainMode) -> Vec<usize> {
    let ends = window - 1..series.len();
    match mode {
        TrainMode::Donut => ends.collect(),
        TrainMode::VaeBaseline => {
            // running count of non-normal points in the trailing window
            let mut dirty = 0usize;
            let mut out = Vec::new();
            for t in 0..series.len() {
                if !series.is_normal(t) {
                    dirty += 1;
                }
                if t >= window && !series.is_normal(t - window) {
                    dirty -= 1;
                }
                if t + 1 >= window && dirty == 0 {
                    out.push(t);
                }
            }
            out
        }
    }
}

fn build_batch<R: Rng + ?Sized>(
    series: &PreparedSeries,
    ends: &[usize],
    shape: NetShape,
    samples: usize,
    rng: &mut R,
) -> Batch {
    let w = shape.window;
    let rows = ends.len() * samples;
    let mut x = Array2::zeros((rows, w));
    let mut alpha = Array2::zeros((rows, w));
    let mut beta = Array1::zeros(rows);
    for (i, &end) in ends.iter().enumerate() {
        let start = end + 1 - w;
        for s in 0..samples {
            let r = i * samples + s;
            let mut normal = 0usize;
            for j in 0..w {
                x[[r, j]] = series.values[start + j];
                if series.is_normal(start + j) {
                    alpha[[r, j]] = 1.0;
                    normal += 1;
                }
            }
            beta[r] = normal as f64 / w as f64;
        }
    }
    let xi = standard_normal((rows, shape.latent), rng);
    Batch { x, alpha, beta, xi }
}

/// Mean validation objective and decomposition over `ends`, with noise from
/// `rng`.
fn evaluate(
    series: &PreparedSeries,
    ends: &[usize],
    params: &ModelParams,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ElboTerms> {
    let mut all = Vec::with_capacity(ends.len());
    for chunk in ends.chunks(batch_size) {
        let batch = build_batch(series, chunk, params.shape, 1, rng);
        all.extend(net::batch_terms(&batch, params)?);
    }
    Ok(ElboTerms::mean(&all))
}

/// Train a model. Validation uses fixed noise so epochs are comparable.
pub fn train(
    train_series: &PreparedSeries,
    valid_series: &PreparedSeries,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    let w = cfg.shape.window;
    series::check_window(train_series.len(), w)?;
    series::check_window(valid_series.len(), w)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    valid_rng.set_stream(1);

    let mut params = ModelParams::init(cfg.shape, cfg.epsilon, train_series.stats, &mut rng)?;
    let mut trace = TrainTrace {
        total_windows: train_series.len() + 1 - w,
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok((params, trace));
    }

    let baseline_ends = usable_ends(train_series, w, cfg.mode);
    if baseline_ends.is_empty() {
        return Err(Error::NoTrainingWindows(format!(
            "all {} training windows contain missing or labeled anomaly points",
            trace.total_windows
        )));
    }
    trace.train_windows = baseline_ends.len();
    let mut valid_ends = usable_ends(valid_series, w, cfg.mode);
    if valid_ends.is_empty() {
        valid_ends = (w - 1..valid_series.len()).collect();
    }

    let mut state = AdamState::new(cfg.shape);
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let injected;
        let epoch_series = if cfg.mode == TrainMode::Donut && cfg.injection_lambda > 0.0 {
            injected = series::inject_missing(train_series, cfg.injection_lambda, &mut rng)?.0;
            &injected
        } else {
            train_series
        };
        let mut ends = baseline_ends.clone();
        ends.shuffle(&mut rng);

        let mut objective_sum = 0.0;
        for chunk in ends.chunks(cfg.batch_size) {
            let batch = build_batch(epoch_series, chunk, cfg.shape, cfg.mc_samples, &mut rng);
            let (loss, mut grads) = net::batch_backward(&batch, &params)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    state.step
                )));
            }
            objective_sum -= loss * chunk.len() as f64;
            add_l2(&mut grads, &params.tensors, cfg.l2_coeff);
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_step(&mut params.tensors, &grads, &mut state, lr);
        }

        let terms = evaluate(
            valid_series,
            &valid_ends,
            &params,
            cfg.batch_size,
            &mut valid_rng.clone(),
        )?;
        let valid_m_elbo = terms.total();
        trace.epochs.push(EpochRecord {
            epoch,
            lr,
            train_m_elbo: objective_sum / ends.len() as f64,
            valid_m_elbo,
            terms,
        });
        if cfg.early_stop
            && valid_m_elbo.is_finite()
            && best.as_ref().is_none_or(|(b, _)| valid_m_elbo > *b)
        {
            best = Some((valid_m_elbo, params.clone()));
            trace.best_epoch = Some(epoch);
        }
    }
    trace.steps = state.step;
    match best {
        Some((_, p)) => Ok((p, trace)),
        None => Ok((params, trace)),
    }
}
