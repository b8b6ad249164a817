//! Token, temporal, and spatial embeddings plus the fusion projection that
//! produces the transformer input.
//!
//! Every branch is a per-token map: applying a dense layer to each station's
//! flattened history is exactly a pointwise (1x1) convolution over the
//! station axis. The temporal branch looks up learnable hour-of-day and
//! day-of-week tables and is shared by all stations of a window.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{Activation, ModelConfig, INIT_STD};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const TOKEN_W: &str = "embed.token.w";
pub const TOKEN_B: &str = "embed.token.b";
pub const DAY_TABLE: &str = "embed.day";
pub const WEEK_TABLE: &str = "embed.week";
pub const SPATIAL_PROJ_W: &str = "embed.spatial.proj.w";
pub const SPATIAL_PROJ_B: &str = "embed.spatial.proj.b";
pub const SPATIAL_W: &str = "embed.spatial.w";
pub const SPATIAL_B: &str = "embed.spatial.b";
pub const FUSE_W: &str = "embed.fuse.w";
pub const FUSE_B: &str = "embed.fuse.b";

pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let pc = cfg.input_steps * cfg.channels;
    let d = cfg.d;
    let w = cfg.width();
    params.insert(Parameter::new(TOKEN_W, Tensor::randn(&[pc, d], INIT_STD, rng)))?;
    params.insert(Parameter::new(TOKEN_B, Tensor::zeros(&[d])))?;
    params.insert(Parameter::new(
        DAY_TABLE,
        Tensor::randn(&[cfg.day_slots, d], INIT_STD, rng),
    ))?;
    params.insert(Parameter::new(
        WEEK_TABLE,
        Tensor::randn(&[cfg.week_slots, d], INIT_STD, rng),
    ))?;
    params.insert(Parameter::new(
        SPATIAL_PROJ_W,
        Tensor::randn(&[pc, d], INIT_STD, rng),
    ))?;
    params.insert(Parameter::new(SPATIAL_PROJ_B, Tensor::zeros(&[d])))?;
    params.insert(Parameter::new(SPATIAL_W, Tensor::randn(&[d, d], INIT_STD, rng)))?;
    params.insert(Parameter::new(SPATIAL_B, Tensor::zeros(&[d])))?;
    params.insert(Parameter::new(FUSE_W, Tensor::randn(&[w, w], INIT_STD, rng)))?;
    params.insert(Parameter::new(FUSE_B, Tensor::zeros(&[w])))?;
    Ok(())
}

/// Token embedding: dense (P*C -> D) map of each station's flattened
/// history. `x` has one row per token.
pub fn embed_tokens(g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
    let w = g.param(params, TOKEN_W)?;
    let b = g.param(params, TOKEN_B)?;
    let proj = g.matmul(x, w)?;
    g.add(proj, b)
}

/// Temporal embedding rows: table[day] + table[week], one row per sample.
/// The caller broadcasts the row across that window's stations.
pub fn embed_temporal(
    g: &mut Graph,
    params: &ParamSet,
    day_index: &[usize],
    week_index: &[usize],
) -> Result<NodeId> {
    let day = g.param(params, DAY_TABLE)?;
    let week = g.param(params, WEEK_TABLE)?;
    let d_rows = g.rows(day, day_index)?;
    let w_rows = g.rows(week, week_index)?;
    g.add(d_rows, w_rows)
}

/// Adaptive spatial embedding: sigma(W_s . proj(x) + b_s), where proj is a
/// dedicated (P*C -> D) pre-projection separate from the token branch.
pub fn embed_spatial(
    g: &mut Graph,
    params: &ParamSet,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let pw = g.param(params, SPATIAL_PROJ_W)?;
    let pb = g.param(params, SPATIAL_PROJ_B)?;
    let ws = g.param(params, SPATIAL_W)?;
    let bs = g.param(params, SPATIAL_B)?;
    let proj = g.matmul(x, pw)?;
    let proj = g.add(proj, pb)?;
    let mixed = g.matmul(proj, ws)?;
    let mixed = g.add(mixed, bs)?;
    Ok(activation.apply(g, mixed))
}

/// Fusion: concatenate the three branches along the feature axis and apply
/// a shared per-token affine 3D -> 3D map.
pub fn fuse(g: &mut Graph, params: &ParamSet, ep: NodeId, es: NodeId, et: NodeId) -> Result<NodeId> {
    let shape = g.shape(ep).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let cat = g.concat(&[ep, es, et], 2)?;
    let flat = g.reshape(cat, vec![b * n, 3 * d])?;
    let w = g.param(params, FUSE_W)?;
    let bias = g.param(params, FUSE_B)?;
    let out = g.matmul(flat, w)?;
    let out = g.add(out, bias)?;
    g.reshape(out, vec![b, n, 3 * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StLlm};
    use rand::SeedableRng;

    fn tiny_model() -> StLlm {
        let cfg = ModelConfig {
            d: 4,
            heads: 2,
            layers: 2,
            frozen_layers: 1,
            unfrozen_layers: 1,
            n_max: 8,
            input_steps: 3,
            output_steps: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        StLlm::build(cfg, 7).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_tokens() {
        let model = tiny_model();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[5, 3]));
        let ep = embed_tokens(&mut g, &model.params, x).unwrap();
        assert!(g.value(ep).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_embedding_matches_per_station_loop() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let ep = embed_tokens(&mut g, &model.params, xn).unwrap();
        let w = &model.params.get(TOKEN_W).unwrap().tensor;
        let b = &model.params.get(TOKEN_B).unwrap().tensor;
        for station in 0..6 {
            for j in 0..4 {
                let mut acc = b.at(&[j]);
                for k in 0..3 {
                    acc += x.at(&[station, k]) * w.at(&[k, j]);
                }
                let got = g.value(ep).at(&[station, j]);
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn token_embedding_shape_contract() {
        // P = 12, N = 8, C = 1, D = 16 -> 8 x 16
        let cfg = ModelConfig {
            d: 16,
            heads: 4,
            layers: 1,
            frozen_layers: 0,
            unfrozen_layers: 1,
            n_max: 8,
            ..ModelConfig::default()
        };
        let model = StLlm::build(cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[8, 12]));
        let ep = embed_tokens(&mut g, &model.params, x).unwrap();
        assert_eq!(g.shape(ep), &[8, 16]);
    }

    #[test]
    fn temporal_rows_are_table_sums() {
        let model = tiny_model();
        let mut g = Graph::new();
        let et = embed_temporal(&mut g, &model.params, &[5, 0], &[2, 6]).unwrap();
        let day = &model.params.get(DAY_TABLE).unwrap().tensor;
        let week = &model.params.get(WEEK_TABLE).unwrap().tensor;
        for j in 0..4 {
            let expect = day.at(&[5, j]) + week.at(&[2, j]);
            assert_eq!(g.value(et).at(&[0, j]), expect);
            let expect2 = day.at(&[0, j]) + week.at(&[6, j]);
            assert_eq!(g.value(et).at(&[1, j]), expect2);
        }
    }

    #[test]
    fn temporal_index_out_of_range_is_error() {
        let model = tiny_model();
        let mut g = Graph::new();
        assert!(embed_temporal(&mut g, &model.params, &[48], &[0]).is_err());
        let mut g = Graph::new();
        assert!(embed_temporal(&mut g, &model.params, &[0], &[7]).is_err());
    }

    #[test]
    fn zeroed_week_table_reduces_to_day_lookup() {
        let mut model = tiny_model();
        let week = model.params.get_mut(WEEK_TABLE).unwrap();
        week.tensor = Tensor::zeros(week.tensor.shape());
        let mut g = Graph::new();
        let et = embed_temporal(&mut g, &model.params, &[7], &[3]).unwrap();
        let day = &model.params.get(DAY_TABLE).unwrap().tensor;
        for j in 0..4 {
            assert_eq!(g.value(et).at(&[0, j]), day.at(&[7, j]));
        }
    }

    #[test]
    fn spatial_embedding_matches_two_stage_loop() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let es = embed_spatial(&mut g, &model.params, xn, Activation::Relu).unwrap();
        let pw = &model.params.get(SPATIAL_PROJ_W).unwrap().tensor;
        let pb = &model.params.get(SPATIAL_PROJ_B).unwrap().tensor;
        let ws = &model.params.get(SPATIAL_W).unwrap().tensor;
        let bs = &model.params.get(SPATIAL_B).unwrap().tensor;
        for station in 0..6 {
            let mut proj = vec![0.0; 4];
            for j in 0..4 {
                let mut acc = pb.at(&[j]);
                for k in 0..3 {
                    acc += x.at(&[station, k]) * pw.at(&[k, j]);
                }
                proj[j] = acc;
            }
            for j in 0..4 {
                let mut acc = bs.at(&[j]);
                for k in 0..4 {
                    acc += proj[k] * ws.at(&[k, j]);
                }
                let expect = acc.max(0.0);
                let got = g.value(es).at(&[station, j]);
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn identity_spatial_mix_passes_nonnegative_projection_through() {
        let mut model = tiny_model();
        model.params.get_mut(SPATIAL_W).unwrap().tensor = Tensor::eye(4);
        model.params.get_mut(SPATIAL_B).unwrap().tensor = Tensor::zeros(&[4]);
        // force the pre-projection output nonnegative: zero weights, positive bias
        model.params.get_mut(SPATIAL_PROJ_W).unwrap().tensor = Tensor::zeros(&[3, 4]);
        model.params.get_mut(SPATIAL_PROJ_B).unwrap().tensor = Tensor::full(&[4], 0.7);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[5, 3], 2.0));
        let es = embed_spatial(&mut g, &model.params, x, Activation::Relu).unwrap();
        assert!(g.value(es).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn identity_fusion_equals_concatenation() {
        let mut model = tiny_model();
        model.params.get_mut(FUSE_W).unwrap().tensor = Tensor::eye(12);
        model.params.get_mut(FUSE_B).unwrap().tensor = Tensor::zeros(&[12]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let es_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let et_t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let ep = g.leaf(ep_t.clone());
        let es = g.leaf(es_t.clone());
        let et = g.leaf(et_t.clone());
        let hf = fuse(&mut g, &model.params, ep, es, et).unwrap();
        assert_eq!(g.shape(hf), &[2, 3, 12]);
        for b in 0..2 {
            for n in 0..3 {
                for j in 0..4 {
                    assert_eq!(g.value(hf).at(&[b, n, j]), ep_t.at(&[b, n, j]));
                    assert_eq!(g.value(hf).at(&[b, n, 4 + j]), es_t.at(&[b, n, j]));
                    assert_eq!(g.value(hf).at(&[b, n, 8 + j]), et_t.at(&[b, n, j]));
                }
            }
        }
    }

    #[test]
    fn fusion_is_station_permutation_equivariant() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ep = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let es = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let et = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];

        let run = |ep_t: &Tensor, es_t: &Tensor, et_t: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let a = g.leaf(ep_t.clone());
            let b = g.leaf(es_t.clone());
            let c = g.leaf(et_t.clone());
            let hf = fuse(&mut g, &model.params, a, b, c).unwrap();
            g.value(hf).clone()
        };
        let permute_rows = |t: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(t.shape());
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..4 {
                    out.set(&[0, dst, j], t.at(&[0, src, j]));
                }
            }
            out
        };

        let base = run(&ep, &es, &et);
        let permuted = run(&permute_rows(&ep), &permute_rows(&es), &permute_rows(&et));
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..12 {
                assert_eq!(permuted.at(&[0, dst, j]), base.at(&[0, src, j]));
            }
        }
    }
}
