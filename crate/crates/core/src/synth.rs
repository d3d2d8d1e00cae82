//! Labeled synthetic seasonal KPIs.
//!
//! `value_t = seasonal(t) * (1 + jitter(t)) + drift * t + noise_t + offset_t`
//! where `seasonal` is a constant level plus harmonics of the period,
//! `jitter` is drawn once per cycle and blended smoothly across cycle
//! boundaries, `noise_t` is i.i.d. Gaussian and `offset_t` is nonzero only
//! inside injected anomaly segments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::series::RawSeries;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    /// Cycles per period.
    pub cycles: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    Spike,
    Dip,
    /// Sustained shift of random sign, four times the sampled duration.
    LevelShift,
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(Self::Spike),
            "dip" => Ok(Self::Dip),
            "level_shift" | "level-shift" => Ok(Self::LevelShift),
            other => Err(Error::config(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub length: usize,
    pub interval: i64,
    pub start: i64,
    /// Points per seasonal cycle.
    pub period: usize,
    pub level: f64,
    pub harmonics: Vec<Harmonic>,
    /// Per-cycle multiplicative jitter drawn from `U(-v, v)`.
    pub day_variation: f64,
    pub noise_sigma: f64,
    /// Linear drift per point.
    pub drift: f64,
    /// Target fraction of anomalous points.
    pub anomaly_rate: f64,
    /// Offset magnitude range in units of `noise_sigma`.
    pub anomaly_magnitude: (f64, f64),
    /// Segment length range in points, inclusive.
    pub anomaly_duration: (usize, usize),
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub missing_rate: f64,
    /// Missing burst length range in points, inclusive.
    pub missing_burst: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            length: 43_200,
            interval: 60,
            start: 1_500_000_000 - 1_500_000_000 % 86_400,
            period: 1440,
            level: 0.0,
            harmonics: vec![
                Harmonic {
                    cycles: 1.0,
                    amplitude: 1.0,
                    phase: 0.0,
                },
                Harmonic {
                    cycles: 2.0,
                    amplitude: 0.4,
                    phase: 1.0,
                },
                Harmonic {
                    cycles: 3.0,
                    amplitude: 0.15,
                    phase: 2.5,
                },
            ],
            day_variation: 0.05,
            noise_sigma: 0.05,
            drift: 0.0,
            anomaly_rate: 0.01,
            anomaly_magnitude: (6.0, 10.0),
            anomaly_duration: (1, 10),
            anomaly_kinds: vec![AnomalyKind::Spike, AnomalyKind::Dip, AnomalyKind::LevelShift],
            missing_rate: 0.003,
            missing_burst: (1, 5),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.length == 0 {
            return bad("length must be positive");
        }
        if self.interval <= 0 {
            return bad("interval must be positive");
        }
        if self.period < 2 {
            return bad("period must be at least 2");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) || !(0.0..1.0).contains(&self.missing_rate) {
            return bad("anomaly and missing rates must be in [0, 1)");
        }
        if self.anomaly_rate + self.missing_rate >= 1.0 {
            return bad("anomaly and missing rates together would cover the entire series");
        }
        if !(0.0..1.0).contains(&self.day_variation) {
            return bad("day_variation must be in [0, 1)");
        }
        let (lo, hi) = self.anomaly_magnitude;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("anomaly magnitude range must satisfy 0 <= min <= max");
        }
        for (name, (lo, hi)) in [
            ("anomaly duration", self.anomaly_duration),
            ("missing burst", self.missing_burst),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::config(format!(
                    "{name} range must satisfy 1 <= min <= max"
                )));
            }
        }
        if self.anomaly_rate > 0.0 && self.anomaly_kinds.is_empty() {
            return bad("anomaly_kinds must not be empty when anomaly_rate > 0");
        }
        Ok(())
    }

    /// Read from flat key-value configuration; absent keys keep defaults.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let amplitudes: Option<Vec<f64>> = kv.get_list("harmonic_amplitudes")?;
        let phases: Option<Vec<f64>> = kv.get_list("harmonic_phases")?;
        let harmonics = match (amplitudes, phases) {
            (None, None) => d.harmonics.clone(),
            (Some(a), p) => {
                let p = p.unwrap_or_else(|| vec![0.0; a.len()]);
                if p.len() != a.len() {
                    return Err(Error::config(
                        "harmonic_phases must have one entry per amplitude",
                    ));
                }
                a.iter()
                    .zip(&p)
                    .enumerate()
                    .map(|(i, (&amplitude, &phase))| Harmonic {
                        cycles: (i + 1) as f64,
                        amplitude,
                        phase,
                    })
                    .collect()
            }
            (None, Some(_)) => {
                return Err(Error::config("harmonic_phases given without harmonic_amplitudes"))
            }
        };
        let cfg = Self {
            length: kv.get_or("length", d.length)?,
            interval: kv.get_or("interval", d.interval)?,
            start: kv.get_or("start", d.start)?,
            period: kv.get_or("period", d.period)?,
            level: kv.get_or("level", d.level)?,
            harmonics,
            day_variation: kv.get_or("day_variation", d.day_variation)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            drift: kv.get_or("drift", d.drift)?,
            anomaly_rate: kv.get_or("anomaly_rate", d.anomaly_rate)?,
            anomaly_magnitude: (
                kv.get_or("anomaly_magnitude_min", d.anomaly_magnitude.0)?,
                kv.get_or("anomaly_magnitude_max", d.anomaly_magnitude.1)?,
            ),
            anomaly_duration: (
                kv.get_or("anomaly_duration_min", d.anomaly_duration.0)?,
                kv.get_or("anomaly_duration_max", d.anomaly_duration.1)?,
            ),
            anomaly_kinds: kv.get_list("anomaly_kinds")?.unwrap_or(d.anomaly_kinds),
            missing_rate: kv.get_or("missing_rate", d.missing_rate)?,
            missing_burst: (
                kv.get_or("missing_burst_min", d.missing_burst.0)?,
                kv.get_or("missing_burst_max", d.missing_burst.1)?,
            ),
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The noiseless, jitter-free seasonal waveform at point `t`.
    pub fn seasonal(&self, t: usize) -> f64 {
        let phase = 2.0 * PI * (t % self.period) as f64 / self.period as f64;
        self.level
            + self
                .harmonics
                .iter()
                .map(|h| h.amplitude * (h.cycles * phase + h.phase).sin())
                .sum::<f64>()
    }
}

const PLACEMENT_ATTEMPTS: usize = 1_000_000;

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Free,
    Anomaly,
    Missing,
}

/// Place non-touching segments until `target` points are covered. The last
/// segment is truncated to hit the target exactly.
fn place_segments<R: Rng>(
    slots: &mut [Slot],
    target: usize,
    durations: (usize, usize),
    scale_for: impl Fn(&mut R) -> (usize, f64),
    mark: Slot,
    rng: &mut R,
    mut on_place: impl FnMut(std::ops::Range<usize>, f64),
) -> Result<()> {
    let n = slots.len();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::config(
                "could not place anomaly/missing segments without overlap; lower the rates",
            ));
        }
        let (multiplier, extra) = scale_for(rng);
        let duration = rng.random_range(durations.0..=durations.1) * multiplier;
        let duration = duration.min(target - placed);
        let start = rng.random_range(0..n);
        let end = (start + duration).min(n);
        let lo = start.saturating_sub(1);
        let hi = (end + 1).min(n);
        if slots[lo..hi].iter().any(|&s| s != Slot::Free) {
            continue;
        }
        for s in &mut slots[start..end] {
            *s = mark;
        }
        placed += end - start;
        on_place(start..end, extra);
    }
    Ok(())
}

/// Generate a labeled series. Deterministic for a given configuration.
pub fn generate(cfg: &SynthConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let n = cfg.length;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };

    let mut jitter_rng = stream(0);
    let cycles = n / cfg.period + 2;
    let cycle_jitter: Vec<f64> = (0..cycles)
        .map(|_| {
            if cfg.day_variation > 0.0 {
                jitter_rng.random_range(-cfg.day_variation..cfg.day_variation)
            } else {
                0.0
            }
        })
        .collect();

    let mut noise_rng = stream(1);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut values: Vec<f64> = (0..n)
        .map(|t| {
            let c = t / cfg.period;
            let f = (t % cfg.period) as f64 / cfg.period as f64;
            let blend = 0.5 * (1.0 - (PI * f).cos());
            let jitter = cycle_jitter[c] + (cycle_jitter[c + 1] - cycle_jitter[c]) * blend;
            cfg.seasonal(t) * (1.0 + jitter) + cfg.drift * t as f64 + noise.sample(&mut noise_rng)
        })
        .collect();

    let mut slots = vec![Slot::Free; n];
    let mut anomaly_rng = stream(2);
    let anomaly_target = (cfg.anomaly_rate * n as f64).round() as usize;
    let kinds = cfg.anomaly_kinds.clone();
    let (mag_lo, mag_hi) = cfg.anomaly_magnitude;
    let sigma = cfg.noise_sigma;
    place_segments(
        &mut slots,
        anomaly_target,
        cfg.anomaly_duration,
        |rng: &mut ChaCha8Rng| {
            let kind = kinds[rng.random_range(0..kinds.len())];
            let magnitude = if mag_hi > mag_lo {
                rng.random_range(mag_lo..=mag_hi)
            } else {
                mag_lo
            } * sigma;
            match kind {
                AnomalyKind::Spike => (1, magnitude),
                AnomalyKind::Dip => (1, -magnitude),
                AnomalyKind::LevelShift => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (4, sign * magnitude)
                }
            }
        },
        Slot::Anomaly,
        &mut anomaly_rng,
        |range, offset| {
            for v in &mut values[range] {
                *v += offset;
            }
        },
    )?;

    let mut missing_rng = stream(3);
    let missing_target = (cfg.missing_rate * n as f64).round() as usize;
    place_segments(
        &mut slots,
        missing_target,
        cfg.missing_burst,
        |_: &mut ChaCha8Rng| (1, 0.0),
        Slot::Missing,
        &mut missing_rng,
        |_, _| {},
    )?;

    Ok(RawSeries {
        timestamps: (0..n as i64).map(|i| cfg.start + i * cfg.interval).collect(),
        values: values
            .iter()
            .zip(&slots)
            .map(|(&v, &s)| (s != Slot::Missing).then_some(v))
            .collect(),
        labels: slots.iter().map(|&s| Some(s == Slot::Anomaly)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(length: usize) -> SynthConfig {
        SynthConfig {
            length,
            noise_sigma: 0.0,
            day_variation: 0.0,
            anomaly_rate: 0.0,
            missing_rate: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn pure_waveform_without_noise() {
        let cfg = quiet(3000);
        let s = generate(&cfg).unwrap();
        for t in 0..3000 {
            assert_eq!(s.values[t], Some(cfg.seasonal(t)));
        }
        for t in 0..1500 {
            assert!((s.values[t].unwrap() - s.values[t + 1440].unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_only_changes_amplitude_between_cycles() {
        let cfg = SynthConfig {
            day_variation: 0.1,
            ..quiet(2880)
        };
        let s = generate(&cfg).unwrap();
        for t in (0..1440).step_by(37) {
            let a = s.values[t].unwrap();
            let b = s.values[t + 1440].unwrap();
            let base = cfg.seasonal(t);
            // both are base * (1 + j) with |j| < 0.1
            assert!((a - base).abs() <= 0.1 * base.abs() + 1e-12);
            assert!((b - base).abs() <= 0.1 * base.abs() + 1e-12);
        }
    }

    #[test]
    fn anomaly_count_in_range() {
        let cfg = SynthConfig {
            length: 100_000,
            anomaly_rate: 0.01,
            ..Default::default()
        };
        let s = generate(&cfg).unwrap();
        let count = s.anomaly_count();
        assert!((800..=1200).contains(&count), "{count}");
        assert_eq!(s.missing_count(), 300);
    }

    #[test]
    fn labels_cover_offsets_exactly() {
        let base = SynthConfig {
            length: 20_000,
            anomaly_rate: 0.0,
            missing_rate: 0.0,
            seed: 3,
            ..Default::default()
        };
        let clean = generate(&base).unwrap();
        let dirty = generate(&SynthConfig {
            anomaly_rate: 0.02,
            missing_rate: 0.01,
            ..base.clone()
        })
        .unwrap();
        for t in 0..base.length {
            match dirty.values[t] {
                None => assert!(!dirty.is_anomaly(t)),
                Some(v) => {
                    let delta = (v - clean.values[t].unwrap()).abs();
                    if dirty.is_anomaly(t) {
                        assert!(delta >= 6.0 * base.noise_sigma - 1e-12);
                    } else {
                        assert_eq!(delta, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            length: 5000,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn rejects_overfull_specs() {
        let cfg = SynthConfig {
            anomaly_rate: 0.6,
            missing_rate: 0.5,
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
        assert!(generate(&SynthConfig { period: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn key_value_config() {
        let mut kv = KeyValues::parse(
            "length = 500\nnoise_sigma = 0.2\nharmonic_amplitudes = 1, 0.5\nanomaly_kinds = spike, dip\n",
        )
        .unwrap();
        let cfg = SynthConfig::from_key_values(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg.length, 500);
        assert_eq!(cfg.harmonics.len(), 2);
        assert_eq!(cfg.harmonics[1].cycles, 2.0);
        assert_eq!(cfg.anomaly_kinds, vec![AnomalyKind::Spike, AnomalyKind::Dip]);
    }
}
