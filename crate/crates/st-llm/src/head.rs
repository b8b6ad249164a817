//! Regression head and training loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{ModelConfig, INIT_STD};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let w = cfg.width();
    let out = cfg.output_steps * cfg.channels;
    params.insert(Parameter::new(HEAD_W, Tensor::randn(&[w, out], INIT_STD, rng)))?;
    params.insert(Parameter::new(HEAD_B, Tensor::zeros(&[out])))?;
    Ok(())
}

/// Per-token affine map 3D -> S*C, reshaped so predictions come out as
/// [B, S, N, C]. Token n's forecast depends only on its own row.
pub fn regress(
    g: &mut Graph,
    params: &ParamSet,
    h_out: NodeId,
    output_steps: usize,
    channels: usize,
) -> Result<NodeId> {
    let shape = g.shape(h_out).to_vec();
    let (b, n, e) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(h_out, vec![b * n, e])?;
    let w = g.param(params, HEAD_W)?;
    let bias = g.param(params, HEAD_B)?;
    let proj = g.matmul(flat, w)?;
    let proj = g.add(proj, bias)?;
    let staged = g.reshape(proj, vec![b, n, output_steps, channels])?;
    g.permute(staged, vec![0, 2, 1, 3])
}

/// How the prediction-error norm in the training objective is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean absolute error (the default reading).
    Mae,
    /// Mean squared error, kept for sensitivity runs.
    Mse,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Mae
    }
}

/// Training loss: mean error over all S*N*C entries plus
/// `lambda * sum(theta^2)` over the given trainable parameters.
pub fn loss(
    g: &mut Graph,
    prediction: NodeId,
    target: NodeId,
    lambda: f64,
    kind: LossKind,
    trainable: &[NodeId],
) -> Result<NodeId> {
    let diff = g.sub(prediction, target)?;
    let err = match kind {
        LossKind::Mae => {
            let a = g.abs(diff);
            g.mean_all(a)?
        }
        LossKind::Mse => {
            let sq = g.mul(diff, diff)?;
            g.mean_all(sq)?
        }
    };
    if lambda == 0.0 || trainable.is_empty() {
        return Ok(err);
    }
    let mut reg: Option<NodeId> = None;
    for &p in trainable {
        let sq = g.mul(p, p)?;
        let s = g.sum_all(sq);
        reg = Some(match reg {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let reg = g.scale(reg.unwrap(), lambda);
    g.add(err, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StLlm};
    use rand::SeedableRng;

    fn model_with(d: usize, s: usize, c: usize) -> StLlm {
        let cfg = ModelConfig {
            d,
            heads: 2,
            layers: 1,
            frozen_layers: 0,
            unfrozen_layers: 1,
            n_max: 8,
            output_steps: s,
            channels: c,
            ..ModelConfig::default()
        };
        StLlm::build(cfg, 2).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_predicts_zero() {
        let model = model_with(4, 2, 1);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros(&[1, 3, 12]));
        let y = regress(&mut g, &model.params, h, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_is_steps_by_stations_by_channels() {
        let model = model_with(16, 12, 1);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros(&[1, 8, 48]));
        let y = regress(&mut g, &model.params, h, 12, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 12, 8, 1]);
    }

    #[test]
    fn prediction_for_station_depends_only_on_its_row() {
        let model = model_with(4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::randn(&[1, 5, 12], 1.0, &mut rng);
        let mut poked = base.clone();
        for j in 0..12 {
            poked.set(&[0, 3, j], poked.at(&[0, 3, j]) + 1.5);
        }
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let h = g.leaf(t.clone());
            let y = regress(&mut g, &model.params, h, 2, 1).unwrap();
            g.value(y).clone()
        };
        let a = run(&base);
        let b = run(&poked);
        for step in 0..2 {
            for station in 0..5 {
                let same = a.at(&[0, step, station, 0]) == b.at(&[0, step, station, 0]);
                assert_eq!(same, station != 3, "station {station}");
            }
        }
    }

    #[test]
    fn perfect_prediction_with_zero_lambda_has_zero_loss() {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::full(&[2, 3], 1.25));
        let t = g.leaf(Tensor::full(&[2, 3], 1.25));
        let l = loss(&mut g, y, t, 0.0, LossKind::Mae, &[]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_unit_mae() {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::full(&[4, 2], 2.0));
        let t = g.leaf(Tensor::full(&[4, 2], 1.0));
        let l = loss(&mut g, y, t, 0.0, LossKind::Mae, &[]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);
    }

    #[test]
    fn l2_term_adds_lambda_times_squared_weights() {
        // |2 - 0| + 0.5 * 2^2 = 4
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("theta", Tensor::scalar(2.0))).unwrap();
        let mut g = Graph::new();
        let theta = g.param(&ps, "theta").unwrap();
        let y = g.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let t = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let l = loss(&mut g, y, t, 0.5, LossKind::Mae, &[theta]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 4.0);
    }

    #[test]
    fn loss_without_regularization_equals_the_mae_metric() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let p = Tensor::randn(&[3, 5], 2.0, &mut rng);
            let t = Tensor::randn(&[3, 5], 2.0, &mut rng);
            let mut g = Graph::new();
            let yp = g.leaf(p.clone());
            let yt = g.leaf(t.clone());
            let l = loss(&mut g, yp, yt, 0.0, LossKind::Mae, &[]).unwrap();
            let via_metrics = crate::metrics::metrics(p.data(), t.data(), 1e-3).unwrap().mae;
            let via_loss = g.value(l).item().unwrap();
            assert!((via_loss - via_metrics).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_kind_squares_the_error() {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::full(&[2], 3.0));
        let t = g.leaf(Tensor::full(&[2], 1.0));
        let l = loss(&mut g, y, t, 0.0, LossKind::Mse, &[]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 4.0);
    }
}
