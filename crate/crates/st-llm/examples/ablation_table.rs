//! Small ablation sweep on a short synthetic series: the full model against
//! the removed-component variants and the fully frozen transformer, all on
//! identical data splits. Prints the comparison table the harness writes.
//!
//!     cargo run --example ablation_table

use st_llm::data::synth::SynthConfig;
use st_llm::harness::{self, DataSource, ExperimentConfig, PretrainConfig};
use st_llm::model::{FreezeMode, ModelConfig};

fn main() -> st_llm::Result<()> {
    let dir = std::env::temp_dir().join("stllm_ablation_example");
    let model = ModelConfig {
        d: 8,
        heads: 4,
        layers: 6,
        frozen_layers: 4,
        unfrozen_layers: 2,
        freeze_mode: FreezeMode::Pfa,
        n_max: 10,
        ..ModelConfig::default()
    };
    let mut cfg = ExperimentConfig::new(
        DataSource::Generator {
            config: SynthConfig::taxi_like(10, 672, 4),
        },
        model,
    );
    cfg.epochs = 8;
    cfg.seed = 4;
    cfg.pretrain = Some(PretrainConfig::default_for(10, 4));
    cfg.out_dir = Some(dir.clone());

    let results = harness::ablate(&cfg, &["full", "wo_t", "wo_s", "wo_st", "wo_llm", "fpt"])?;
    println!("tag,mae,rmse,mape_pct,wape_pct,trainable_params,frozen_params,sec_per_batch");
    for r in &results {
        let m = r.record.test_metrics.as_ref().unwrap();
        println!(
            "{},{:.4},{:.4},{:.2},{:.2},{},{},{:.5}",
            r.tag,
            m.mae,
            m.rmse,
            m.mape_pct,
            m.wape_pct,
            r.record.trainable_scalars,
            r.record.frozen_scalars,
            m.sec_per_batch
        );
    }
    println!("(same table written to {})", dir.join("comparison.csv").display());
    Ok(())
}
