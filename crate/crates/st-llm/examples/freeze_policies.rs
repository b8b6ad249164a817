//! Show what each freeze policy does to the parameter set: which names
//! freeze, how many scalars stay trainable, and that frozen bytes survive
//! optimizer steps untouched.
//!
//!     cargo run --example freeze_policies

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use st_llm::graph::Graph;
use st_llm::head::{self, LossKind};
use st_llm::model::{Batch, FreezeMode, ModelConfig, StLlm};
use st_llm::optim::AdamW;
use st_llm::tensor::Tensor;
use st_llm::transformer::apply_freeze_policy;

fn main() -> st_llm::Result<()> {
    for (label, mode, layers, f, u) in [
        ("PFA  (F=5, U=1)", FreezeMode::Pfa, 6, 5, 1),
        ("PFA  (F=4, U=2)", FreezeMode::Pfa, 6, 4, 2),
        ("FPT", FreezeMode::Fpt, 6, 5, 1),
        ("FullTuning", FreezeMode::FullTuning, 6, 5, 1),
        ("FullLayer (12)", FreezeMode::FullLayer, 12, 11, 1),
    ] {
        let cfg = ModelConfig {
            d: 8,
            heads: 4,
            layers,
            frozen_layers: f,
            unfrozen_layers: u,
            freeze_mode: mode,
            n_max: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut model = StLlm::build(cfg, 7)?;
        let frozen = apply_freeze_policy(&mut model)?;
        let (total, frozen_scalars, trainable) = model.count_parameters();
        println!("{label}");
        println!(
            "  {} frozen tensors, {frozen_scalars}/{total} scalars frozen, {trainable} trainable",
            frozen.len()
        );
        let attn_frozen = frozen.iter().filter(|n| n.contains(".mha.")).count();
        let ffn_frozen = frozen.iter().filter(|n| n.contains(".ffn.")).count();
        println!("  attention tensors frozen: {attn_frozen}, ffn tensors frozen: {ffn_frozen}");

        // a few optimizer steps leave the frozen bytes bitwise unchanged
        let before = model.params.frozen_byte_snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut opt = AdamW::new(1e-2);
        for _ in 0..5 {
            let batch = Batch {
                x: Tensor::randn(&[2, 4, 12], 1.0, &mut rng),
                y: Tensor::randn(&[2, 12, 4, 1], 1.0, &mut rng),
                day_index: vec![rng.random_range(0..48), rng.random_range(0..48)],
                week_index: vec![rng.random_range(0..7), rng.random_range(0..7)],
            };
            let mut g = Graph::new();
            let pred = model.forward(&mut g, &batch, None)?;
            let target = g.leaf(batch.y.clone());
            let trainable: Vec<_> = g.trainable_params().iter().map(|(_, id)| *id).collect();
            let loss = head::loss(&mut g, pred, target, 1e-4, LossKind::Mae, &trainable)?;
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        assert_eq!(before, model.params.frozen_byte_snapshot());
        println!("  5 optimizer steps later: frozen bytes identical\n");
    }
    Ok(())
}
