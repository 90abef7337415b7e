//! Synthetic polishing runs.
//!
//! Each run draws a target removal rate from its mode's range, builds the
//! rotation channels from mode setpoints, then scales the pressure proxy so
//! that `k · mean(P) · mean(V)` hits the drawn target exactly. An optional
//! slurry-flow term and Gaussian noise are added on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{channel_index, Mode, WaferRun, N_CHANNELS, PRESSURE_CHANNEL, VELOCITY_CHANNEL};
use crate::error::{Error, Result};

/// Target ranges per mode, nm/min.
pub const LOW_SPEED_MRR: (f64, f64) = (55.0, 110.0);
pub const HIGH_SPEED_MRR: (f64, f64) = (140.0, 170.0);

/// Channel whose mean carries the non-Preston effect.
pub const EFFECT_CHANNEL: &str = "SLURRY_FLOW_LINE_B";
const SLURRY_NOMINAL: f64 = 200.0;
const SLURRY_SPREAD: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_low: usize,
    pub n_high: usize,
    /// Inclusive raw length range, samples.
    pub length_range: [usize; 2],
    pub preston_k: f64,
    /// Std of additive target noise, nm/min.
    pub noise_std: f64,
    /// nm/min added per unit of standardized slurry-B deviation; 0 keeps the
    /// generator purely Preston.
    pub non_preston_gain: f64,
    /// Seconds between samples.
    pub sample_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_low: 1000,
            n_high: 200,
            length_range: [96, 320],
            preston_k: 0.3,
            noise_std: 0.0,
            non_preston_gain: 0.0,
            sample_period: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.length_range;
        if lo < 8 || lo > hi {
            return Err(Error::Config(format!(
                "length_range must satisfy 8 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if !(self.preston_k.is_finite() && self.preston_k > 0.0) {
            return Err(Error::Config(format!("preston_k must be positive, got {}", self.preston_k)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !self.non_preston_gain.is_finite() {
            return Err(Error::Config("non_preston_gain must be finite".into()));
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(Error::Config("sample_period must be positive".into()));
        }
        Ok(())
    }
}

fn mean(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

struct Gen {
    rng: ChaCha8Rng,
    unit: Normal<f64>,
}

impl Gen {
    fn normal(&mut self) -> f64 {
        self.unit.sample(&mut self.rng)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Three-phase setpoint profile (ramp-in, main, finish) with jitter.
    fn phased(&mut self, len: usize, level: f64, knots: (usize, usize), jitter: f64) -> Vec<f64> {
        (0..len)
            .map(|t| {
                let phase = if t < knots.0 {
                    0.55
                } else if t < knots.1 {
                    1.0
                } else {
                    0.75
                };
                level * (phase + jitter * self.normal())
            })
            .collect()
    }

    fn steady(&mut self, len: usize, level: f64, jitter: f64) -> Vec<f64> {
        (0..len).map(|_| level * (1.0 + jitter * self.normal())).collect()
    }

    /// Linear spin-up to `level` over `ramp` samples, then steady.
    fn spin(&mut self, len: usize, level: f64, ramp: usize, jitter: f64) -> Vec<f64> {
        (0..len)
            .map(|t| {
                let frac = if t < ramp { 0.5 + 0.5 * t as f64 / ramp as f64 } else { 1.0 };
                level * (frac + jitter * self.normal())
            })
            .collect()
    }

    fn usage(&mut self, len: usize, start_hi: f64, rate: f64) -> Vec<f64> {
        let mut u = self.uniform(0.0, start_hi);
        (0..len)
            .map(|_| {
                let v = u;
                u += rate * (1.0 + 0.1 * self.normal()).max(0.0);
                v
            })
            .collect()
    }
}

/// Generates `n_low` low-speed runs followed by `n_high` high-speed runs.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<WaferRun>> {
    cfg.validate()?;
    let p_idx = channel_index(PRESSURE_CHANNEL).unwrap();
    let v_idx = channel_index(VELOCITY_CHANNEL).unwrap();
    let e_idx = channel_index(EFFECT_CHANNEL).unwrap();
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(cfg.seed), unit: Normal::new(0.0, 1.0).unwrap() };
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut runs = Vec::with_capacity(cfg.n_low + cfg.n_high);

    let modes = std::iter::repeat_n(Mode::LowSpeed, cfg.n_low).chain(std::iter::repeat_n(Mode::HighSpeed, cfg.n_high));
    for (i, mode) in modes.enumerate() {
        let len = g.rng.random_range(cfg.length_range[0]..=cfg.length_range[1]);
        let (chambers, (lo, hi), v_nominal) = match mode {
            Mode::LowSpeed => ([4u32, 5, 6], LOW_SPEED_MRR, 60.0),
            Mode::HighSpeed => ([1u32, 2, 3], HIGH_SPEED_MRR, 120.0),
        };
        let chamber = chambers[g.rng.random_range(0..3)];
        // keep drawn targets off the range edges so rounding cannot leave it
        let margin = 0.01 * (hi - lo);
        let desired = g.uniform(lo + margin, hi - margin);

        let knots = (
            (len as f64 * g.uniform(0.05, 0.15)) as usize,
            (len as f64 * g.uniform(0.80, 0.92)) as usize,
        );
        let ramp = knots.0.max(1);
        let v_level = v_nominal * g.uniform(0.9, 1.1);
        let mut ch: Vec<Vec<f64>> = vec![Vec::new(); N_CHANNELS];

        ch[15] = g.spin(len, v_level, ramp, 0.005);
        ch[14] = g.spin(len, 0.95 * v_level, ramp, 0.005);
        ch[16] = g.spin(len, 1.02 * v_level, ramp, 0.005);
        let v_mean = mean(&ch[v_idx]);

        let p_level = desired / (cfg.preston_k * v_mean);
        let mut center = g.phased(len, p_level, knots, 0.01);
        let scale = p_level / mean(&center);
        center.iter_mut().for_each(|v| *v *= scale);
        ch[p_idx] = center;
        let outer = p_level * g.uniform(0.9, 1.1);
        ch[5] = g.phased(len, outer, knots, 0.01);
        ch[4] = g.phased(len, 1.2 * outer, knots, 0.01);
        let edge = 0.8 * p_level * g.uniform(0.9, 1.1);
        ch[18] = g.phased(len, edge, knots, 0.01);
        let retainer = g.uniform(4.0, 6.0);
        ch[7] = g.phased(len, retainer, knots, 0.01);
        let ripple = g.uniform(1.0, 2.0);
        ch[8] = g.phased(len, ripple, knots, 0.02);

        for (c, hi_start, rate) in [(0, 5000.0, 0.02), (1, 400.0, 0.01), (2, 300.0, 0.01), (3, 1500.0, 0.03), (9, 8000.0, 0.05), (10, 200.0, 0.01)] {
            ch[c] = g.usage(len, hi_start, rate);
        }

        let slurry_b = g.uniform(SLURRY_NOMINAL - SLURRY_SPREAD, SLURRY_NOMINAL + SLURRY_SPREAD);
        let slurry_a = g.uniform(SLURRY_NOMINAL - SLURRY_SPREAD, SLURRY_NOMINAL + SLURRY_SPREAD);
        let slurry_c = g.uniform(2.0, 8.0);
        ch[11] = g.steady(len, slurry_a, 0.01);
        ch[e_idx] = g.steady(len, slurry_b, 0.01);
        ch[13] = g.steady(len, slurry_c, 0.02);

        let switch = g.rng.random_range(len / 5..=(4 * len) / 5);
        ch[17] = (0..len).map(|t| if t >= switch { 1.0 } else { 0.0 }).collect();

        let mut target = cfg.preston_k * mean(&ch[p_idx]) * mean(&ch[v_idx]);
        target += cfg.non_preston_gain * (mean(&ch[e_idx]) - SLURRY_NOMINAL) / SLURRY_SPREAD;
        let eps = noise.sample(&mut g.rng);
        if cfg.noise_std > 0.0 {
            target += eps;
        }
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::Config(format!(
                "generator produced non-positive target {target}; reduce noise_std or non_preston_gain"
            )));
        }
        let timestamps: Vec<f64> = (0..len).map(|t| t as f64 * cfg.sample_period).collect();
        runs.push(WaferRun {
            run_id: format!("run_{i:05}"),
            chamber,
            mode,
            polishing_time: timestamps[len - 1] - timestamps[0],
            timestamps,
            channels: ch,
            target_mrr: target,
        });
    }
    Ok(runs)
}
