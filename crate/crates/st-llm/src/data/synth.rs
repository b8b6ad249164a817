//! Synthetic traffic generator: a daily sinusoid modulated weekly, with
//! per-station offset/scale/phase and seeded noise, clipped at zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TrafficTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-hour slots per day.
pub const T_DAY: usize = 48;
/// Monday 2016-04-04 00:00:00 UTC; generated series start on a Monday
/// midnight so calendar indices line up with slot zero.
pub const START_EPOCH: i64 = 1_459_728_000;
pub const INTERVAL_MINUTES: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub base_level: f64,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    pub noise_std: f64,
}

impl SynthConfig {
    /// High-volume flow with a strong daily cycle.
    pub fn taxi_like(n: usize, t: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            t,
            seed,
            base_level: 120.0,
            daily_amp: 60.0,
            weekly_amp: 25.0,
            noise_std: 6.0,
        }
    }

    /// Sparse, noisy counts; clipping at zero produces genuine zeros.
    pub fn bike_like(n: usize, t: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            t,
            seed,
            base_level: 6.0,
            daily_amp: 4.0,
            weekly_amp: 2.0,
            noise_std: 2.0,
        }
    }
}

/// Deterministic per seed. With zero noise the series is exactly periodic
/// with period 7 * T_DAY because phases are reduced modulo a week before
/// any floating-point trigonometry.
pub fn generate(cfg: &SynthConfig) -> Result<TrafficTensor> {
    if cfg.n == 0 || cfg.t == 0 {
        return Err(Error::Config("generator needs n >= 1 and t >= 1".into()));
    }
    if !cfg.base_level.is_finite() || cfg.noise_std < 0.0 {
        return Err(Error::Config("generator profile values must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let week = 7 * T_DAY;

    // per-station character, drawn before any noise
    let mut scale = Vec::with_capacity(cfg.n);
    let mut offset = Vec::with_capacity(cfg.n);
    let mut phase = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        scale.push(rng.random_range(0.85..1.15));
        offset.push(rng.random_range(-0.05..0.05) * cfg.base_level);
        phase.push(rng.random_range(0.0..T_DAY as f64));
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(cfg.t * cfg.n);
    for t in 0..cfg.t {
        let tau = t % week;
        let day_pos = (tau % T_DAY) as f64;
        let week_pos = tau as f64;
        for s in 0..cfg.n {
            let daily = (std::f64::consts::TAU * (day_pos + phase[s]) / T_DAY as f64).sin();
            let weekly = (std::f64::consts::TAU * week_pos / week as f64).sin();
            let mut v = cfg.base_level * scale[s]
                + offset[s]
                + cfg.daily_amp * scale[s] * daily
                + cfg.weekly_amp * scale[s] * weekly;
            if cfg.noise_std > 0.0 {
                v += cfg.noise_std * noise.sample(&mut rng);
            }
            data.push(v.max(0.0));
        }
    }
    TrafficTensor::new(
        Tensor::new(vec![cfg.t, cfg.n, 1], data)?,
        INTERVAL_MINUTES,
        START_EPOCH,
        (0..cfg.n).map(|i| format!("s{i:03}")).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SynthConfig::taxi_like(5, 300, 42);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.values.to_le_bytes(), b.values.to_le_bytes());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&SynthConfig::taxi_like(5, 300, 1)).unwrap();
        let b = generate(&SynthConfig::taxi_like(5, 300, 2)).unwrap();
        assert_ne!(a.values.data(), b.values.data());
    }

    #[test]
    fn zero_noise_is_exactly_weekly_periodic() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::taxi_like(3, 3 * 7 * T_DAY, 7)
        };
        let tt = generate(&cfg).unwrap();
        let week = 7 * T_DAY;
        for t in 0..(2 * week) {
            for s in 0..3 {
                let a = tt.values.at(&[t, s, 0]);
                let b = tt.values.at(&[t + week, s, 0]);
                assert_eq!(a.to_bits(), b.to_bits(), "t={t} s={s}");
            }
        }
    }

    #[test]
    fn corpus_mean_tracks_the_base_level() {
        // six full weeks, N = 20: periodic terms and noise average out
        let cfg = SynthConfig::taxi_like(20, 6 * 7 * T_DAY, 11);
        let tt = generate(&cfg).unwrap();
        let mean = tt.values.data().iter().sum::<f64>() / tt.values.numel() as f64;
        let rel = (mean - cfg.base_level).abs() / cfg.base_level;
        assert!(rel < 0.05, "mean {mean} vs base {}", cfg.base_level);
    }

    #[test]
    fn bike_profile_produces_zeros() {
        let tt = generate(&SynthConfig::bike_like(10, 7 * T_DAY, 3)).unwrap();
        let zeros = tt.values.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0, "bike-like series should clip at zero somewhere");
        assert!(tt.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = SynthConfig::bike_like(16, 2016, 9);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        for key in ["\"n\"", "\"t\"", "seed", "base_level", "daily_amp", "weekly_amp", "noise_std"] {
            assert!(json.contains(key), "{json}");
        }
    }
}
