//! Generate the two bundled synthetic profiles, write them in both on-disk
//! formats, read them back, and window one of them for training.
//!
//!     cargo run --example synthetic_data

use st_llm::data::synth::{generate, SynthConfig};
use st_llm::data::{io, make_windows, split_chronological, NormStats};

fn describe(name: &str, tt: &st_llm::data::TrafficTensor) {
    let data = tt.values.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let max = data.iter().cloned().fold(f64::MIN, f64::max);
    let zeros = data.iter().filter(|&&v| v == 0.0).count();
    println!(
        "{name}: {} steps x {} stations, mean {mean:.2}, max {max:.2}, {zeros} zero cells",
        tt.timesteps(),
        tt.stations()
    );
}

fn main() -> st_llm::Result<()> {
    let dir = std::env::temp_dir().join("stllm_data_example");
    std::fs::create_dir_all(&dir)?;

    let taxi = generate(&SynthConfig::taxi_like(20, 2016, 1))?;
    let bike = generate(&SynthConfig::bike_like(16, 2016, 2))?;
    describe("taxi-like", &taxi);
    describe("bike-like", &bike);

    let bin = dir.join("taxi.stll");
    let csv = dir.join("taxi.csv");
    io::save_binary(&taxi, &bin)?;
    io::save_csv(&taxi, &[csv.as_path()])?;
    let back = io::load_binary(&bin)?;
    assert_eq!(back.values.to_le_bytes(), taxi.values.to_le_bytes());
    println!("binary round-trip is bit-exact ({})", bin.display());

    let windows = make_windows(&taxi, 12, 12, 48)?;
    println!("{} sliding windows of 12 -> 12 steps", windows.len());
    let (train, val, test) = split_chronological(windows, (6, 2, 2))?;
    println!(
        "chronological 6:2:2 split: {} / {} / {}",
        train.len(),
        val.len(),
        test.len()
    );
    let stats = NormStats::from_train_windows(&train)?;
    println!(
        "train-split z-score stats: mean {:.3}, std {:.3}",
        stats.mean[0], stats.std[0]
    );
    let w = &train[0];
    println!(
        "first window: day slot {}, weekday {} (Monday = 0)",
        w.day_index, w.week_index
    );
    Ok(())
}
