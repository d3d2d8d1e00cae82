//! Anomaly scoring with a trained model.
//!
//! Every window ending at `t` scores point `t` only. Known-missing points in
//! the window are first imputed by MCMC: encode, draw `z`, draw a
//! reconstruction and overwrite the missing coordinates, `M` times. The score
//! is the negative mean log-density of the last point over `L` posterior
//! samples, so larger means more anomalous.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{self, ModelParams, HALF_LN_2PI};
use crate::series::{self, PreparedSeries};
use crate::train::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub mcmc_iters: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub use_mcmc: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            mcmc_iters: 10,
            mc_samples: 1024,
            seed: 0,
            use_mcmc: true,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Which expectation a score is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Samples from the posterior `q(z|x)`.
    Reconstruction,
    /// Samples from the prior `N(0, I)`.
    Prior,
}

/// Replace the missing coordinates of `x` by `iters` rounds of
/// encode / sample / decode / sample. Observed coordinates are returned
/// unchanged.
pub fn mcmc_impute<R: Rng + ?Sized>(
    x: &[f64],
    missing: &[bool],
    params: &ModelParams,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if missing.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "missing mask",
            expected: x.len(),
            got: missing.len(),
        });
    }
    let mut current = x.to_vec();
    if iters == 0 || !missing.iter().any(|&m| m) {
        return Ok(current);
    }
    for _ in 0..iters {
        let q = net::encode(&current, params)?;
        let z = q.sample(rng);
        let px = net::decode(&z, params)?;
        for (i, &m) in missing.iter().enumerate() {
            let draw = px.mu[i] + px.sigma[i] * rng.sample::<f64, _>(StandardNormal);
            if m {
                current[i] = draw;
            }
        }
    }
    Ok(current)
}

/// Negative mean log-density of `x_last` under the last output dimension of
/// `p(x|z)`, averaged over the rows of `z`.
pub fn score_with_latents(x_last: f64, z: &ArrayView2<f64>, params: &ModelParams) -> f64 {
    let (mu, sigma) = net::decode_column(z, params.shape.window - 1, params);
    let total: f64 = mu
        .iter()
        .zip(&sigma)
        .map(|(&m, &s)| {
            let r = (x_last - m) / s;
            -HALF_LN_2PI - s.ln() - 0.5 * r * r
        })
        .sum();
    -total / z.nrows() as f64
}

fn check_input(x: &[f64], params: &ModelParams, samples: usize) -> Result<()> {
    if x.len() != params.shape.window {
        return Err(Error::DimensionMismatch {
            what: "scored window",
            expected: params.shape.window,
            got: x.len(),
        });
    }
    if samples == 0 {
        return Err(Error::config("at least one Monte Carlo sample is required"));
    }
    Ok(())
}

/// Reconstruction-probability score of the window's last point.
pub fn reconstruction_score<R: Rng + ?Sized>(
    x: &[f64],
    params: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_input(x, params, samples)?;
    let q = net::encode(x, params)?;
    let xi = standard_normal((samples, params.shape.latent), rng);
    let z = Array2::from_shape_fn(xi.raw_dim(), |(l, k)| q.mu[k] + xi[[l, k]] * q.sigma[k]);
    Ok(score_with_latents(x[x.len() - 1], &z.view(), params))
}

/// As [`reconstruction_score`] with latents drawn from the prior.
pub fn prior_score<R: Rng + ?Sized>(
    x: &[f64],
    params: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_input(x, params, samples)?;
    let z = standard_normal((samples, params.shape.latent), rng);
    Ok(score_with_latents(x[x.len() - 1], &z.view(), params))
}

/// Per-point scores; `None` for the first `W - 1` points and missing points.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<Option<f64>>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scored(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }

    /// `timestamp,score` with an empty score where unscored.
    pub fn to_csv(&self, timestamps: impl Iterator<Item = i64>) -> String {
        let mut out = String::from("timestamp,score\n");
        for (ts, s) in timestamps.zip(&self.scores) {
            match s {
                Some(v) => {
                    let _ = writeln!(out, "{ts},{v}");
                }
                None => {
                    let _ = writeln!(out, "{ts},");
                }
            }
        }
        out
    }

    /// Parse `timestamp,score` CSV, returning timestamps alongside.
    pub fn parse_csv(text: &str) -> Result<(Vec<i64>, ScoreSeries)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "timestamp,score" => {}
            Some((i, h)) => {
                return Err(Error::Csv {
                    line: i + 1,
                    message: format!("expected header `timestamp,score`, got `{h}`"),
                })
            }
            None => {
                return Err(Error::Csv {
                    line: 1,
                    message: "empty input".into(),
                })
            }
        }
        let mut ts = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in lines {
            let bad = |message: String| Error::Csv {
                line: i + 1,
                message,
            };
            let (t, s) = line
                .split_once(',')
                .ok_or_else(|| bad("expected two fields".into()))?;
            ts.push(
                t.trim()
                    .parse::<i64>()
                    .map_err(|_| bad(format!("bad timestamp `{t}`")))?,
            );
            scores.push(match s.trim() {
                "" => None,
                v => Some(
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("bad score `{v}`")))?,
                ),
            });
        }
        Ok((ts, ScoreSeries { scores }))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<i64>, ScoreSeries)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Random stream for the window ending at `t`; independent of scoring order.
pub fn window_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Score every point of a prepared series with reconstruction probability.
pub fn detect(series: &PreparedSeries, params: &ModelParams, cfg: &DetectConfig) -> Result<ScoreSeries> {
    detect_with(series, params, cfg, ScoreKind::Reconstruction)
}

pub fn detect_with(
    series: &PreparedSeries,
    params: &ModelParams,
    cfg: &DetectConfig,
    kind: ScoreKind,
) -> Result<ScoreSeries> {
    cfg.validate()?;
    let w = params.shape.window;
    series::check_window(series.len(), w)?;
    let scored: Vec<Result<Option<f64>>> = (w - 1..series.len())
        .into_par_iter()
        .map(|t| {
            if series.missing[t] {
                return Ok(None);
            }
            let mut rng = window_rng(cfg.seed, t);
            let range = t + 1 - w..t + 1;
            let mask = &series.missing[range.clone()];
            let raw = &series.values[range];
            let x = if cfg.use_mcmc && mask.iter().any(|&m| m) {
                mcmc_impute(raw, mask, params, cfg.mcmc_iters, &mut rng)?
            } else {
                raw.to_vec()
            };
            let score = match kind {
                ScoreKind::Reconstruction => {
                    reconstruction_score(&x, params, cfg.mc_samples, &mut rng)?
                }
                ScoreKind::Prior => prior_score(&x, params, cfg.mc_samples, &mut rng)?,
            };
            if !score.is_finite() {
                return Err(Error::Numeric(format!("non-finite score at index {t}")));
            }
            Ok(Some(score))
        })
        .collect();
    let mut scores = vec![None; w - 1];
    for s in scored {
        scores.push(s?);
    }
    Ok(ScoreSeries { scores })
}
