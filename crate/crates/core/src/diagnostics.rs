//! Latent-space export and the technique ablation.

use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{self, DetectConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, GroundTruth};
use crate::net::{self, ModelParams};
use crate::series::{self, PreparedSeries, RawSeries, SplitSpec};
use crate::train::{self, TrainConfig, TrainMode};

const SECONDS_PER_DAY: i64 = 86_400;
const ENCODE_CHUNK: usize = 4096;

/// Posterior of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub last_index: usize,
    /// Seconds since midnight (UTC) of the last point.
    pub time_of_day: i64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Encode every window of the series. Missing points enter as their
/// standardized placeholder, without imputation.
pub fn export_latent(series: &PreparedSeries, params: &ModelParams) -> Result<Vec<LatentRow>> {
    let w = params.shape.window;
    series::check_window(series.len(), w)?;
    let ends: Vec<usize> = (w - 1..series.len()).collect();
    let mut rows = Vec::with_capacity(ends.len());
    for chunk in ends.chunks(ENCODE_CHUNK) {
        let x = Array2::from_shape_fn((chunk.len(), w), |(r, c)| {
            series.values[chunk[r] + 1 - w + c]
        });
        let (mu, sigma) = net::encode_batch(&x.view(), params);
        for (r, &t) in chunk.iter().enumerate() {
            rows.push(LatentRow {
                last_index: t,
                time_of_day: series.timestamp(t).rem_euclid(SECONDS_PER_DAY),
                mu: mu.slice(s![r, ..]).to_vec(),
                sigma: sigma.slice(s![r, ..]).to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn latent_csv(rows: &[LatentRow]) -> String {
    let k = rows.first().map_or(0, |r| r.mu.len());
    let mut out = String::from("last_index,time_of_day");
    for i in 0..k {
        let _ = write!(out, ",mu_{i}");
    }
    for i in 0..k {
        let _ = write!(out, ",sigma_{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.last_index, r.time_of_day);
        for v in r.mu.iter().chain(&r.sigma) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGradient {
    /// Mean Euclidean distance between posterior means of consecutive windows.
    pub adjacent: f64,
    /// Mean distance over uniformly drawn pairs of distinct windows.
    pub random: f64,
}

impl TimeGradient {
    pub fn ratio(&self) -> f64 {
        self.adjacent / self.random
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn time_gradient<R: Rng + ?Sized>(
    rows: &[LatentRow],
    pairs: usize,
    rng: &mut R,
) -> Result<TimeGradient> {
    if rows.len() < 2 || pairs == 0 {
        return Err(Error::config(
            "time gradient needs at least two windows and one random pair",
        ));
    }
    let adjacent = rows
        .windows(2)
        .map(|p| distance(&p[0].mu, &p[1].mu))
        .sum::<f64>()
        / (rows.len() - 1) as f64;
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..rows.len());
        let mut j = rng.random_range(0..rows.len() - 1);
        if j >= i {
            j += 1;
        }
        total += distance(&rows[i].mu, &rows[j].mu);
    }
    Ok(TimeGradient {
        adjacent,
        random: total / pairs as f64,
    })
}

/// Train / valid / test parts with the ground truth of the test part.
///
/// Labels are thinned to `label_ratio` before splitting; the truth keeps
/// every original label.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: PreparedSeries,
    pub valid: PreparedSeries,
    pub test: PreparedSeries,
    pub truth: GroundTruth,
    pub retained_labels: usize,
    pub original_labels: usize,
}

impl Experiment {
    pub fn new(raw: &RawSeries, split: SplitSpec, label_ratio: f64, seed: u64) -> Result<Self> {
        let full = series::prepare(raw, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thinned = series::downsample_labels(&full, label_ratio, &mut rng)?;
        let (train, valid, test) = series::split(&thinned, split)?;
        let start = train.len() + valid.len();
        let truth = GroundTruth::new(
            full.anomaly[start..].to_vec(),
            full.missing[start..].to_vec(),
        );
        Ok(Self {
            retained_labels: thinned.labeled_count(),
            original_labels: full.labeled_count(),
            train,
            valid,
            test,
            truth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub mode: TrainMode,
    pub injection: bool,
    pub mcmc: bool,
}

pub const VARIANTS: [Variant; 5] = [
    Variant {
        name: "vae_baseline",
        mode: TrainMode::VaeBaseline,
        injection: false,
        mcmc: false,
    },
    Variant {
        name: "m_elbo",
        mode: TrainMode::Donut,
        injection: false,
        mcmc: false,
    },
    Variant {
        name: "m_elbo+injection",
        mode: TrainMode::Donut,
        injection: true,
        mcmc: false,
    },
    Variant {
        name: "m_elbo+mcmc",
        mode: TrainMode::Donut,
        injection: false,
        mcmc: true,
    },
    Variant {
        name: "all_three",
        mode: TrainMode::Donut,
        injection: true,
        mcmc: true,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// `mode` and `injection_lambda` are overridden per variant; the lambda
    /// here is the one used by injection variants.
    pub train: TrainConfig,
    /// `use_mcmc` is overridden per variant.
    pub detect: DetectConfig,
    pub split: SplitSpec,
    pub label_ratio: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            split: SplitSpec::default(),
            label_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub mode: TrainMode,
    pub injection_lambda: f64,
    pub mcmc: bool,
    pub seed: u64,
    pub epochs: usize,
    pub best_f_score: f64,
    pub auc: Option<f64>,
}

/// Train and evaluate the five variants on one dataset.
///
/// All variants see the same split, labels and seeds. Variants differing
/// only in MCMC share one trained model, since MCMC acts at detection time.
pub fn run_ablation(raw: &RawSeries, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    if cfg.train.injection_lambda <= 0.0 {
        return Err(Error::config(
            "ablation needs a positive injection_lambda for the injection variants",
        ));
    }
    let exp = Experiment::new(raw, cfg.split, cfg.label_ratio, cfg.train.seed)?;
    let mut models: Vec<((TrainMode, bool), ModelParams)> = Vec::new();
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        let mut tc = cfg.train.clone();
        tc.mode = v.mode;
        tc.injection_lambda = if v.injection {
            cfg.train.injection_lambda
        } else {
            0.0
        };
        let key = (v.mode, v.injection);
        let idx = match models.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let (params, _) = train::train(&exp.train, &exp.valid, &tc)?;
                models.push((key, params));
                models.len() - 1
            }
        };
        let dc = DetectConfig {
            use_mcmc: v.mcmc,
            ..cfg.detect
        };
        let scores = detect::detect(&exp.test, &models[idx].1, &dc)?;
        let best = metrics::best_fscore(&exp.truth, &scores.scores);
        rows.push(AblationRow {
            variant: v.name,
            mode: v.mode,
            injection_lambda: tc.injection_lambda,
            mcmc: v.mcmc,
            seed: tc.seed,
            epochs: tc.epochs,
            best_f_score: best.fscore,
            auc: metrics::auc(&exp.truth, &scores.scores).ok(),
        });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,mode,injection_lambda,mcmc,seed,epochs,best_f_score,auc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let auc = r.auc.map_or(String::new(), |a| a.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.mode, r.injection_lambda, r.mcmc, r.seed, r.epochs, r.best_f_score, auc
        );
    }
    out
}
