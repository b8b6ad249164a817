//! Traffic data handling: validated series tensors, sliding windows with
//! calendar indices, chronological splits, and z-score normalization.

pub mod io;
pub mod synth;

use chrono::{DateTime, Datelike, Timelike, Utc};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A raw traffic series: `values` is [T, N, C] of nonnegative finite flow
/// counts at `interval_minutes` resolution, starting at `start_epoch`
/// (UTC seconds).
#[derive(Debug, Clone)]
pub struct TrafficTensor {
    pub values: Tensor,
    pub interval_minutes: u32,
    pub start_epoch: i64,
    pub station_ids: Vec<String>,
}

impl TrafficTensor {
    pub fn new(
        values: Tensor,
        interval_minutes: u32,
        start_epoch: i64,
        station_ids: Vec<String>,
    ) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape.iter().any(|&e| e == 0) {
            return Err(Error::Data(format!(
                "traffic tensor must be [T, N, C] with every extent >= 1, got {:?}",
                shape
            )));
        }
        if station_ids.len() != shape[1] {
            return Err(Error::Data(format!(
                "{} station ids for {} stations",
                station_ids.len(),
                shape[1]
            )));
        }
        if let Some(bad) = values.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!(
                "traffic values must be finite and nonnegative, found {bad}"
            )));
        }
        if interval_minutes == 0 {
            return Err(Error::Data("interval_minutes must be >= 1".into()));
        }
        Ok(TrafficTensor {
            values,
            interval_minutes,
            start_epoch,
            station_ids,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn stations(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// UTC timestamp (seconds) of a timestep.
    pub fn timestamp(&self, t_index: usize) -> i64 {
        self.start_epoch + t_index as i64 * self.interval_minutes as i64 * 60
    }
}

/// One supervised sample: `x` is the [P, N, C] history, `y` the [S, N, C]
/// continuation, and the calendar indices belong to the last input step.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub x: Tensor,
    pub y: Tensor,
    pub day_index: usize,
    pub week_index: usize,
}

/// Map a timestep to its (hour-of-day slot, weekday) pair. `t_day` slots
/// must tile the day exactly; weekdays run Monday = 0 through Sunday = 6 in
/// the proleptic Gregorian calendar.
pub fn calendar_indices(
    t_index: usize,
    start_epoch: i64,
    interval_minutes: u32,
    t_day: usize,
    t_week: usize,
) -> Result<(usize, usize)> {
    if t_day as u64 * interval_minutes as u64 != 1440 {
        return Err(Error::Config(format!(
            "day slots x interval must cover one day: {} x {} != 1440 minutes",
            t_day, interval_minutes
        )));
    }
    if t_week != 7 {
        return Err(Error::Config(format!("t_week must be 7, got {t_week}")));
    }
    let ts = start_epoch + t_index as i64 * interval_minutes as i64 * 60;
    let dt: DateTime<Utc> = DateTime::from_timestamp(ts, 0)
        .ok_or_else(|| Error::Config(format!("timestamp {ts} out of range")))?;
    let day_index = (dt.num_seconds_from_midnight() / (interval_minutes * 60)) as usize % t_day;
    let week_index = dt.weekday().num_days_from_monday() as usize;
    Ok((day_index, week_index))
}

/// Cut the series into every (history, future) pair: exactly T - P - S + 1
/// windows, ordered by start time.
pub fn make_windows(tt: &TrafficTensor, p: usize, s: usize, t_day: usize) -> Result<Vec<WindowSample>> {
    let t = tt.timesteps();
    if p == 0 || s == 0 {
        return Err(Error::Config("window lengths must be >= 1".into()));
    }
    if t < p + s {
        return Err(Error::Data(format!(
            "series of {t} steps is shorter than P + S = {}",
            p + s
        )));
    }
    let (n, c) = (tt.stations(), tt.channels());
    let row = n * c;
    let data = tt.values.data();
    let mut windows = Vec::with_capacity(t - p - s + 1);
    for start in 0..=(t - p - s) {
        let x = Tensor::new(
            vec![p, n, c],
            data[start * row..(start + p) * row].to_vec(),
        )?;
        let y = Tensor::new(
            vec![s, n, c],
            data[(start + p) * row..(start + p + s) * row].to_vec(),
        )?;
        let last_input = start + p - 1;
        let (day_index, week_index) =
            calendar_indices(last_input, tt.start_epoch, tt.interval_minutes, t_day, 7)?;
        windows.push(WindowSample {
            x,
            y,
            day_index,
            week_index,
        });
    }
    Ok(windows)
}

/// Contiguous chronological split. Validation and test take their floor
/// proportions (at least one window each); training keeps the remainder.
pub fn split_chronological(
    windows: Vec<WindowSample>,
    ratios: (usize, usize, usize),
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, Vec<WindowSample>)> {
    let (r_train, r_val, r_test) = ratios;
    if r_train == 0 || r_val == 0 || r_test == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let n = windows.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "{n} windows cannot fill three chronological partitions"
        )));
    }
    let total = (r_train + r_val + r_test) as f64;
    let mut n_val = ((n * r_val) as f64 / total).floor() as usize;
    let mut n_test = ((n * r_test) as f64 / total).floor() as usize;
    n_val = n_val.max(1);
    n_test = n_test.max(1);
    while n - n_val - n_test < 1 {
        if n_test > 1 {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    let n_train = n - n_val - n_test;
    let mut rest = windows;
    let tail = rest.split_off(n_train);
    let mut val = tail;
    let test = val.split_off(n_val);
    Ok((rest, val, test))
}

/// Per-channel z-score statistics, computed from the training split only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Accumulate over every value (history and target) of the given
    /// training windows.
    pub fn from_train_windows(train: &[WindowSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot compute stats from zero windows".into()));
        }
        let c = *train[0].x.shape().last().unwrap();
        let mut sum = vec![0.0; c];
        let mut count = vec![0usize; c];
        let mut accumulate = |t: &Tensor| {
            for (i, &v) in t.data().iter().enumerate() {
                let ch = i % c;
                sum[ch] += v;
                count[ch] += 1;
            }
        };
        for w in train {
            accumulate(&w.x);
            accumulate(&w.y);
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
        let mut sq = vec![0.0; c];
        let mut accumulate_sq = |t: &Tensor| {
            for (i, &v) in t.data().iter().enumerate() {
                let ch = i % c;
                let d = v - mean[ch];
                sq[ch] += d * d;
            }
        };
        for w in train {
            accumulate_sq(&w.x);
            accumulate_sq(&w.y);
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &k)| (s / k as f64).sqrt()).collect();
        let stats = NormStats { mean, std };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Data(format!(
                "normalization std must be positive and finite, got {:?}",
                self.std
            )));
        }
        Ok(())
    }

    /// z-score per channel; the channel axis is the last one.
    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.apply(t, |v, mean, std| (v - mean) / std)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.apply(t, |v, mean, std| v * std + mean)
    }

    fn apply(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        self.check()?;
        let c = *t.shape().last().unwrap_or(&0);
        if c != self.mean.len() {
            return Err(Error::Data(format!(
                "stats cover {} channels but tensor has {c}",
                self.mean.len()
            )));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn normalize_window(&self, w: &WindowSample) -> Result<WindowSample> {
        Ok(WindowSample {
            x: self.normalize(&w.x)?,
            y: self.normalize(&w.y)?,
            day_index: w.day_index,
            week_index: w.week_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthConfig};

    /// Monday 2016-04-04 00:00:00 UTC.
    const MONDAY: i64 = 1_459_728_000;

    fn series(t: usize, n: usize) -> TrafficTensor {
        let data: Vec<f64> = (0..t * n).map(|i| (i % 17) as f64).collect();
        TrafficTensor::new(
            Tensor::new(vec![t, n, 1], data).unwrap(),
            30,
            MONDAY,
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_negative_and_nonfinite_values() {
        let t = Tensor::new(vec![1, 1, 1], vec![-1.0]).unwrap();
        assert!(TrafficTensor::new(t, 30, 0, vec!["a".into()]).is_err());
        let t = Tensor::new(vec![1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(TrafficTensor::new(t, 30, 0, vec!["a".into()]).is_err());
    }

    #[test]
    fn window_count_matches_t_minus_p_minus_s_plus_one() {
        let tt = series(4368, 2);
        let windows = make_windows(&tt, 12, 12, 48).unwrap();
        assert_eq!(windows.len(), 4345);
    }

    #[test]
    fn exact_fit_yields_one_window() {
        let tt = series(24, 2);
        let windows = make_windows(&tt, 12, 12, 48).unwrap();
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn too_short_series_is_an_error() {
        let tt = series(23, 2);
        assert!(make_windows(&tt, 12, 12, 48).is_err());
    }

    #[test]
    fn windows_are_contiguous_and_cover_each_last_input_once() {
        let tt = series(40, 1);
        let p = 5;
        let s = 3;
        let windows = make_windows(&tt, p, s, 48).unwrap();
        assert_eq!(windows.len(), 40 - p - s + 1);
        for (i, w) in windows.iter().enumerate() {
            // x is rows i..i+p of the source, y immediately follows
            for step in 0..p {
                assert_eq!(w.x.at(&[step, 0, 0]), tt.values.at(&[i + step, 0, 0]));
            }
            for step in 0..s {
                assert_eq!(w.y.at(&[step, 0, 0]), tt.values.at(&[i + p + step, 0, 0]));
            }
        }
    }

    #[test]
    fn calendar_examples() {
        // Monday 00:00 start
        assert_eq!(calendar_indices(0, MONDAY, 30, 48, 7).unwrap(), (0, 0));
        // 49 half-hours later: Tuesday 00:30
        assert_eq!(calendar_indices(49, MONDAY, 30, 48, 7).unwrap(), (1, 1));
        // 2016-04-01 00:00 UTC is a Friday
        let april_first = MONDAY - 3 * 86_400;
        assert_eq!(calendar_indices(0, april_first, 30, 48, 7).unwrap().1, 4);
    }

    #[test]
    fn calendar_config_must_tile_the_day() {
        assert!(calendar_indices(0, MONDAY, 30, 47, 7).is_err());
        assert!(calendar_indices(0, MONDAY, 30, 48, 6).is_err());
    }

    #[test]
    fn calendar_is_periodic() {
        for t in [0usize, 5, 100] {
            let (d0, w0) = calendar_indices(t, MONDAY, 30, 48, 7).unwrap();
            let (d1, _) = calendar_indices(t + 48, MONDAY, 30, 48, 7).unwrap();
            let (d7, w7) = calendar_indices(t + 7 * 48, MONDAY, 30, 48, 7).unwrap();
            assert_eq!(d0, d1);
            assert_eq!(d0, d7);
            assert_eq!(w0, w7);
        }
    }

    #[test]
    fn split_proportions_follow_the_remainder_rule() {
        let sizes = |n: usize| {
            let tt = series(n + 7, 1);
            let windows = make_windows(&tt, 5, 3, 48).unwrap();
            assert_eq!(windows.len(), n);
            let (a, b, c) = split_chronological(windows, (6, 2, 2)).unwrap();
            (a.len(), b.len(), c.len())
        };
        assert_eq!(sizes(10), (6, 2, 2));
        assert_eq!(sizes(3), (1, 1, 1));
        assert_eq!(sizes(4345), (2607, 869, 869));
    }

    #[test]
    fn split_rejects_fewer_windows_than_partitions() {
        let tt = series(9, 1);
        let windows = make_windows(&tt, 5, 3, 48).unwrap();
        assert_eq!(windows.len(), 2);
        assert!(split_chronological(windows, (6, 2, 2)).is_err());
    }

    #[test]
    fn split_preserves_chronology_without_leakage() {
        let cfg = SynthConfig {
            n: 3,
            t: 200,
            seed: 5,
            ..SynthConfig::taxi_like(3, 200, 5)
        };
        let tt = generate(&cfg).unwrap();
        let windows = make_windows(&tt, 12, 12, 48).unwrap();
        let starts: Vec<f64> = windows.iter().map(|w| w.x.at(&[0, 0, 0])).collect();
        let (train, val, test) = split_chronological(windows, (6, 2, 2)).unwrap();
        // contiguous partition: concatenation reproduces the original order
        let mut rejoined: Vec<f64> = Vec::new();
        for w in train.iter().chain(&val).chain(&test) {
            rejoined.push(w.x.at(&[0, 0, 0]));
        }
        assert_eq!(starts, rejoined);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats {
            mean: vec![2.0],
            std: vec![2.0],
        };
        let x = Tensor::new(vec![1, 1, 1], vec![6.0]).unwrap();
        let z = stats.normalize(&x).unwrap();
        assert_eq!(z.data(), &[2.0]);
        let back = stats.denormalize(&z).unwrap();
        assert_eq!(back.data(), &[6.0]);

        // constant-at-mean input normalizes to zeros
        let c = Tensor::full(&[4, 2, 1], 2.0);
        let z = stats.normalize(&c).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_round_trip_is_tight() {
        let cfg = SynthConfig::taxi_like(4, 100, 9);
        let tt = generate(&cfg).unwrap();
        let windows = make_windows(&tt, 12, 12, 48).unwrap();
        let stats = NormStats::from_train_windows(&windows).unwrap();
        let w = &windows[7];
        let z = stats.normalize(&w.x).unwrap();
        let back = stats.denormalize(&z).unwrap();
        for (a, b) in w.x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_std_is_an_error() {
        let stats = NormStats {
            mean: vec![1.0],
            std: vec![0.0],
        };
        assert!(stats.normalize(&Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn stats_come_from_the_training_split_only() {
        let cfg = SynthConfig::taxi_like(2, 150, 3);
        let tt = generate(&cfg).unwrap();
        let windows = make_windows(&tt, 12, 12, 48).unwrap();
        let (train, _, mut test) = split_chronological(windows, (6, 2, 2)).unwrap();
        let before = NormStats::from_train_windows(&train).unwrap();
        // mutating the test split must not affect the stats
        for w in &mut test {
            w.x = Tensor::full(w.x.shape(), 1e6);
        }
        let after = NormStats::from_train_windows(&train).unwrap();
        assert_eq!(before, after);
    }
}
