//! Train on the taxi-like profile, then evaluate the same checkpoint on the
//! bike-like profile it never saw: no parameter updates, positional rows
//! reused for the smaller station set, normalization statistics from the
//! target's own training split.
//!
//!     cargo run --example zero_shot_transfer

use st_llm::data::synth::SynthConfig;
use st_llm::harness::{self, DataSource, ExperimentConfig};
use st_llm::model::{FreezeMode, ModelConfig};

fn main() -> st_llm::Result<()> {
    let dir = std::env::temp_dir().join("stllm_zero_shot_example");
    let model = ModelConfig {
        d: 8,
        heads: 4,
        layers: 4,
        frozen_layers: 3,
        unfrozen_layers: 1,
        freeze_mode: FreezeMode::NoPretrain,
        n_max: 12,
        ..ModelConfig::default()
    };
    let mut source = ExperimentConfig::new(
        DataSource::Generator {
            config: SynthConfig::taxi_like(12, 672, 6),
        },
        model.clone(),
    );
    source.epochs = 8;
    source.seed = 6;
    source.out_dir = Some(dir.join("source"));

    println!("training on the taxi-like source (N = 12)...");
    let record = harness::train(&source)?;
    let m = record.test_metrics.as_ref().unwrap();
    println!("  source test MAE {:.3} WAPE {:.2}%", m.mae, m.wape_pct);

    let ckpt = record.checkpoint.as_ref().unwrap();
    let mut target = ExperimentConfig::new(
        DataSource::Generator {
            config: SynthConfig::bike_like(9, 672, 7),
        },
        model,
    );
    target.seed = 7;
    println!("zero-shot onto the bike-like target (N = 9, never trained on)...");
    let zs = harness::zero_shot(ckpt, &target)?;
    println!("  target test MAE {:.3} WAPE {:.2}% (no parameter updates)", zs.mae, zs.wape_pct);

    // the sanity floor on the same target
    let ha = harness::historical_average(&target)?;
    println!("  target historical-average MAE {:.3} for comparison", ha.mae);
    Ok(())
}
