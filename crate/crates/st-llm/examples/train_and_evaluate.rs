//! End-to-end training on the bundled taxi-like benchmark: pretrain the
//! transformer stack on a synthetic source corpus, fine-tune with partially
//! frozen attention (last two attention layers unfrozen), and compare the
//! test metrics against the historical-average baseline.
//!
//!     cargo run --example train_and_evaluate

use st_llm::data::synth::SynthConfig;
use st_llm::harness::{self, DataSource, ExperimentConfig, PretrainConfig};
use st_llm::model::{FreezeMode, ModelConfig};

fn main() -> st_llm::Result<()> {
    let dir = std::env::temp_dir().join("stllm_train_example");
    let model = ModelConfig {
        d: 8,
        heads: 4,
        layers: 6,
        frozen_layers: 4,
        unfrozen_layers: 2,
        freeze_mode: FreezeMode::Pfa,
        n_max: 20,
        ..ModelConfig::default()
    };
    let mut cfg = ExperimentConfig::new(
        DataSource::Generator {
            config: SynthConfig::taxi_like(20, 2016, 1),
        },
        model,
    );
    cfg.epochs = 12;
    cfg.seed = 1;
    cfg.pretrain = Some(PretrainConfig::default_for(20, 1));
    cfg.out_dir = Some(dir.clone());

    println!("pretraining the transformer stack on the source corpus...");
    let (ckpt, pre) = harness::pretrain_source(&cfg)?;
    println!(
        "  source val MAE {:.3} -> {:.3}",
        pre.initial_val_mae,
        pre.val_mae.last().unwrap()
    );
    cfg.pretrained_checkpoint = Some(ckpt);

    println!("fine-tuning with partially frozen attention (U = 2)...");
    let record = harness::train(&cfg)?;
    let m = record.test_metrics.as_ref().unwrap();
    println!(
        "  {} epochs (best {}), {} trainable / {} frozen scalars",
        record.epochs_run, record.best_epoch, record.trainable_scalars, record.frozen_scalars
    );
    println!(
        "  test MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  WAPE {:.2}%  ({:.1} ms/batch)",
        m.mae,
        m.rmse,
        m.mape_pct,
        m.wape_pct,
        1e3 * m.sec_per_batch
    );

    let ha = harness::historical_average(&cfg)?;
    println!(
        "historical average baseline: MAE {:.4}  RMSE {:.4}  WAPE {:.2}%",
        ha.mae, ha.rmse, ha.wape_pct
    );
    println!(
        "model improves on the baseline by {:.1}% MAE",
        100.0 * (1.0 - m.mae / ha.mae)
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}
