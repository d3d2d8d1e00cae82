//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use donut::metrics::GroundTruth;
use donut::net::{self, Dense, ModelParams, NetShape};
use donut::series::Standardization;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// He-initialized parameters with every bias also randomized, so no
/// parameter sits at a special value. Hidden biases lean positive to keep
/// most ReLUs active; standard-deviation heads stay near 1.
pub fn random_params(shape: NetShape, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::init(
        shape,
        1e-4,
        Standardization {
            mean: 0.0,
            std: 1.0,
        },
        &mut r,
    )
    .unwrap();
    let softplus_inv_one = (1f64.exp() - 1.0).ln();
    for (i, layer) in p.tensors.layers_mut().into_iter().enumerate() {
        let std_head = i == 3 || i == 7;
        let center = if std_head { softplus_inv_one } else { 0.3 };
        if std_head {
            layer.weight.mapv_inplace(|w| 0.2 * w);
        }
        for b in layer.bias.iter_mut() {
            *b = center + 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Plain-loop network and ELBO.

fn dense(layer: &Dense, input: &[f64], relu: bool) -> Vec<f64> {
    let (fan_in, fan_out) = layer.weight.dim();
    assert_eq!(input.len(), fan_in);
    (0..fan_out)
        .map(|j| {
            let mut acc = layer.bias[j];
            for (i, &v) in input.iter().enumerate() {
                acc += v * layer.weight[[i, j]];
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

fn softplus(a: f64) -> f64 {
    (1.0 + a.exp()).ln()
}

fn gaussian_head(h: &[f64], mean: &Dense, std: &Dense, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mu = dense(mean, h, false);
    let sigma = dense(std, h, false)
        .into_iter()
        .map(|a| softplus(a) + eps)
        .collect();
    (mu, sigma)
}

pub fn ref_encode(x: &[f64], p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let t = &p.tensors;
    let h = dense(&t.enc_hidden1, x, true);
    let h = dense(&t.enc_hidden2, &h, true);
    gaussian_head(&h, &t.z_mean, &t.z_std, p.epsilon)
}

pub fn ref_decode(z: &[f64], p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let t = &p.tensors;
    let h = dense(&t.dec_hidden1, z, true);
    let h = dense(&t.dec_hidden2, &h, true);
    gaussian_head(&h, &t.x_mean, &t.x_std, p.epsilon)
}

pub fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let r = (x - mu) / sigma;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * r * r
}

/// Single-sample unmasked ELBO: `log p(x|z) + log p(z) - log q(z|x)` with
/// `z = mu + xi * sigma`.
pub fn ref_elbo(x: &[f64], xi: &[f64], p: &ModelParams) -> f64 {
    let (mz, sz) = ref_encode(x, p);
    let z: Vec<f64> = (0..mz.len()).map(|k| mz[k] + xi[k] * sz[k]).collect();
    let (mx, sx) = ref_decode(&z, p);
    let recon: f64 = (0..x.len()).map(|w| log_normal(x[w], mx[w], sx[w])).sum();
    let prior: f64 = z.iter().map(|&v| log_normal(v, 0.0, 1.0)).sum();
    let post: f64 = (0..z.len()).map(|k| log_normal(z[k], mz[k], sz[k])).sum();
    recon + prior - post
}

// ---------------------------------------------------------------------------
// Finite differences.

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|)`, or 0 when both vanish.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compare the analytic gradient of the single-sample masked loss with
/// central differences at step `h`, over every parameter. Entries where
/// both are below `floor` in magnitude are skipped as numerically zero.
pub fn gradient_check(
    p: &ModelParams,
    x: &[f64],
    alpha: &[f64],
    beta: f64,
    xi: &[f64],
    h: f64,
    floor: f64,
) -> GradCheck {
    let (_, grads) = net::backward(x, alpha, beta, xi, p).unwrap();
    let analytic: Vec<f64> = grads.slices().concat();
    let mut probe = p.clone();
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut k = 0;
    let n_slices = probe.tensors.slices().len();
    for s in 0..n_slices {
        let len = probe.tensors.slices()[s].len();
        for j in 0..len {
            let orig = probe.tensors.slices()[s][j];
            probe.tensors.slices_mut()[s][j] = orig + h;
            let up = net::backward(x, alpha, beta, xi, &probe).unwrap().0;
            probe.tensors.slices_mut()[s][j] = orig - h;
            let down = net::backward(x, alpha, beta, xi, &probe).unwrap().0;
            probe.tensors.slices_mut()[s][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            k += 1;
            if a.abs() < floor && numeric.abs() < floor {
                continue;
            }
            checked += 1;
            max_rel_error = max_rel_error.max(rel_error(a, numeric));
        }
    }
    GradCheck {
        max_rel_error,
        checked,
    }
}

/// One random configuration of the toy network used for gradient checks.
pub struct ToyCase {
    pub params: ModelParams,
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub xi: Vec<f64>,
}

pub fn toy_case(seed: u64) -> ToyCase {
    let shape = NetShape::new(4, 2).with_hidden(5);
    let params = random_params(shape, seed);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let x = normals(4, &mut r);
    let alpha: Vec<f64> = (0..4)
        .map(|_| if r.random_bool(0.7) { 1.0 } else { 0.0 })
        .collect();
    let beta = alpha.iter().sum::<f64>() / 4.0;
    let xi = normals(2, &mut r);
    ToyCase {
        params,
        x,
        alpha,
        beta,
        xi,
    }
}

// ---------------------------------------------------------------------------
// Brute-force metrics.

pub struct MetricCase {
    pub truth: GroundTruth,
    pub scores: Vec<Option<f64>>,
}

/// Up to 50 points; scores from a small grid so ties are common; some
/// points unscored or missing.
pub fn random_metric_case(r: &mut impl Rng) -> MetricCase {
    let n = r.random_range(1..=50);
    let mut anomaly = vec![false; n];
    let mut i = 0;
    while i < n {
        if r.random_bool(0.15) {
            let len = r.random_range(1..=6);
            for a in anomaly.iter_mut().skip(i).take(len) {
                *a = true;
            }
            i += len;
        } else {
            i += 1;
        }
    }
    let missing: Vec<bool> = (0..n).map(|_| r.random_bool(0.1)).collect();
    let prefix = r.random_range(0..=n.min(5));
    let scores = (0..n)
        .map(|i| {
            if i < prefix || r.random_bool(0.05) {
                None
            } else {
                Some(r.random_range(0..12) as f64 * 0.5)
            }
        })
        .collect();
    MetricCase {
        truth: GroundTruth::new(anomaly, missing),
        scores,
    }
}

fn evaluable(c: &MetricCase, i: usize) -> bool {
    !c.truth.missing[i] && c.scores[i].is_some()
}

/// Segment adjustment by walking outwards from each flagged anomaly point.
pub fn brute_adjust(c: &MetricCase, threshold: f64) -> Vec<bool> {
    let n = c.scores.len();
    let raw: Vec<bool> = (0..n)
        .map(|i| evaluable(c, i) && c.scores[i].unwrap() >= threshold)
        .collect();
    let mut out = raw.clone();
    for i in 0..n {
        if !(raw[i] && c.truth.anomaly[i]) {
            continue;
        }
        let mut lo = i;
        while lo > 0 && c.truth.anomaly[lo - 1] {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && c.truth.anomaly[hi + 1] {
            hi += 1;
        }
        for (j, o) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
            if evaluable(c, j) {
                *o = true;
            }
        }
    }
    out
}

/// `(precision, recall, fscore)` at one threshold.
pub fn brute_prf(c: &MetricCase, threshold: f64) -> (f64, f64, f64) {
    let adj = brute_adjust(c, threshold);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..adj.len() {
        if !evaluable(c, i) {
            continue;
        }
        match (c.truth.anomaly[i], adj[i]) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Distinct evaluable scores ascending, then `+inf`.
pub fn brute_candidates(c: &MetricCase) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c.scores.len())
        .filter(|&i| evaluable(c, i))
        .map(|i| c.scores[i].unwrap())
        .collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.push(f64::INFINITY);
    v
}

/// `(best F, smallest threshold attaining it)`.
pub fn brute_best(c: &MetricCase) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for th in brute_candidates(c) {
        let f = brute_prf(c, th).2;
        if f > best.0 {
            best = (f, th);
        }
    }
    best
}

/// Step-interpolated average precision, thresholds descending.
pub fn brute_auc(c: &MetricCase) -> Option<f64> {
    let any = (0..c.scores.len()).any(|i| evaluable(c, i) && c.truth.anomaly[i]);
    if !any {
        return None;
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for th in brute_candidates(c).into_iter().rev() {
        let (p, r, _) = brute_prf(c, th);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}
