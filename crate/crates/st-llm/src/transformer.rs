//! Pre-LN transformer stack over station tokens with partially frozen
//! attention.
//!
//! Each block computes `x + MHA(LN(x))` then `+ FFN(LN(.))`; one more layer
//! norm follows the final block. Attention runs across the N station tokens
//! of a window and is full (non-causal) by default. The freeze policy decides
//! which attention/FFN weights stay at their pretrained values; layer norms,
//! the positional encoding, embeddings, and the head always train.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{FreezeMode, ModelConfig, StLlm, INIT_STD, LN_EPS};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const PE: &str = "pe";
pub const FINAL_LN_GAMMA: &str = "final_ln.gamma";
pub const FINAL_LN_BETA: &str = "final_ln.beta";

// additive mask value for causal attention; finite so downstream stays NaN-free
const MASK_NEG: f64 = -1e30;

pub fn block_param(i: usize, leaf: &str) -> String {
    format!("block.{i}.{leaf}")
}

/// Parameter leaves of one block, in checkpoint order.
pub const BLOCK_LEAVES: [&str; 12] = [
    "ln1.gamma", "ln1.beta", "mha.wq", "mha.wk", "mha.wv", "mha.wo", "ln2.gamma", "ln2.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let w = cfg.width();
    let d_ff = cfg.ffn_width();
    // rows past the station count in use stay zero until trained
    params.insert(Parameter::new(PE, Tensor::zeros(&[cfg.n_max, w])))?;
    for i in 0..cfg.layers {
        params.insert(Parameter::new(block_param(i, "ln1.gamma"), Tensor::full(&[w], 1.0)))?;
        params.insert(Parameter::new(block_param(i, "ln1.beta"), Tensor::zeros(&[w])))?;
        for leaf in ["mha.wq", "mha.wk", "mha.wv", "mha.wo"] {
            params.insert(Parameter::new(
                block_param(i, leaf),
                Tensor::randn(&[w, w], INIT_STD, rng),
            ))?;
        }
        params.insert(Parameter::new(block_param(i, "ln2.gamma"), Tensor::full(&[w], 1.0)))?;
        params.insert(Parameter::new(block_param(i, "ln2.beta"), Tensor::zeros(&[w])))?;
        params.insert(Parameter::new(
            block_param(i, "ffn.w1"),
            Tensor::randn(&[w, d_ff], INIT_STD, rng),
        ))?;
        params.insert(Parameter::new(block_param(i, "ffn.b1"), Tensor::zeros(&[d_ff])))?;
        params.insert(Parameter::new(
            block_param(i, "ffn.w2"),
            Tensor::randn(&[d_ff, w], INIT_STD, rng),
        ))?;
        params.insert(Parameter::new(block_param(i, "ffn.b2"), Tensor::zeros(&[w])))?;
    }
    params.insert(Parameter::new(FINAL_LN_GAMMA, Tensor::full(&[w], 1.0)))?;
    params.insert(Parameter::new(FINAL_LN_BETA, Tensor::zeros(&[w])))?;
    Ok(())
}

/// Apply the model's freeze policy and return the frozen name set.
///
/// Pfa/FullLayer: blocks 0..F freeze attention + FFN, blocks F..L freeze only
/// the FFN. Fpt: every block freezes attention + FFN. FullTuning/NoPretrain:
/// nothing frozen. Layer norms, PE, embeddings, and the head never freeze.
pub fn apply_freeze_policy(model: &mut StLlm) -> Result<BTreeSet<String>> {
    let cfg = &model.config;
    if cfg.frozen_layers + cfg.unfrozen_layers != cfg.layers {
        return Err(Error::Config(format!(
            "freeze policy needs F + U == L, got {} + {} != {}",
            cfg.frozen_layers, cfg.unfrozen_layers, cfg.layers
        )));
    }
    let (layers, f, mode) = (cfg.layers, cfg.frozen_layers, cfg.freeze_mode);
    model.params.set_frozen("*", false);
    let mut frozen = BTreeSet::new();
    let freeze_group = |params: &mut ParamSet, i: usize, group: &str, out: &mut BTreeSet<String>| {
        let pattern = block_param(i, &format!("{group}.*"));
        params.set_frozen(&pattern, true);
        for leaf in BLOCK_LEAVES.iter().filter(|l| l.starts_with(group)) {
            out.insert(block_param(i, leaf));
        }
    };
    match mode {
        FreezeMode::FullTuning | FreezeMode::NoPretrain => {}
        FreezeMode::Fpt => {
            for i in 0..layers {
                freeze_group(&mut model.params, i, "mha", &mut frozen);
                freeze_group(&mut model.params, i, "ffn", &mut frozen);
            }
        }
        FreezeMode::Pfa | FreezeMode::FullLayer => {
            for i in 0..layers {
                if i < f {
                    freeze_group(&mut model.params, i, "mha", &mut frozen);
                }
                freeze_group(&mut model.params, i, "ffn", &mut frozen);
            }
        }
    }
    Ok(frozen)
}

/// Run the block stack: add positional rows, apply each pre-LN block, then
/// the final layer norm. Input and output are [B, N, 3D].
pub fn forward(
    g: &mut Graph,
    model: &StLlm,
    h_f: NodeId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let cfg = &model.config;
    let shape = g.shape(h_f).to_vec();
    let n = shape[1];
    if n > cfg.n_max {
        return Err(Error::invalid(
            "transformer",
            format!("{} stations exceed n_max = {}", n, cfg.n_max),
        ));
    }
    let pe = g.param(&model.params, PE)?;
    let pe_rows = g.slice_rows(pe, 0..n)?;
    let mut h = g.add(h_f, pe_rows)?;
    for i in 0..cfg.layers {
        h = block_forward(g, model, i, h, dropout_rng.as_deref_mut())?;
    }
    let gamma = g.param(&model.params, FINAL_LN_GAMMA)?;
    let beta = g.param(&model.params, FINAL_LN_BETA)?;
    g.layer_norm(h, gamma, beta, LN_EPS)
}

fn block_forward(
    g: &mut Graph,
    model: &StLlm,
    i: usize,
    x: NodeId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let params = &model.params;
    let g1 = g.param(params, &block_param(i, "ln1.gamma"))?;
    let b1 = g.param(params, &block_param(i, "ln1.beta"))?;
    let normed = g.layer_norm(x, g1, b1, LN_EPS)?;
    let attn = mha(g, model, i, normed, dropout_rng.as_deref_mut())?;
    let h1 = g.add(x, attn)?;

    let g2 = g.param(params, &block_param(i, "ln2.gamma"))?;
    let b2 = g.param(params, &block_param(i, "ln2.beta"))?;
    let normed2 = g.layer_norm(h1, g2, b2, LN_EPS)?;
    let ff = ffn(g, model, i, normed2, dropout_rng)?;
    g.add(h1, ff)
}

/// Multi-head scaled dot-product attention over the station axis.
fn mha(
    g: &mut Graph,
    model: &StLlm,
    i: usize,
    x: NodeId,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let cfg = &model.config;
    let shape = g.shape(x).to_vec();
    let (b, n, e) = (shape[0], shape[1], shape[2]);
    let (h, dk) = (cfg.heads, cfg.head_dim());

    let flat = g.reshape(x, vec![b * n, e])?;
    let wq = g.param(&model.params, &block_param(i, "mha.wq"))?;
    let wk = g.param(&model.params, &block_param(i, "mha.wk"))?;
    let wv = g.param(&model.params, &block_param(i, "mha.wv"))?;
    let wo = g.param(&model.params, &block_param(i, "mha.wo"))?;

    let q = g.matmul(flat, wq)?;
    let k = g.matmul(flat, wk)?;
    let v = g.matmul(flat, wv)?;

    // [B*N, E] -> [B*h, N, dk] with heads as column blocks
    let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
        let t4 = g.reshape(t, vec![b, n, h, dk])?;
        let p = g.permute(t4, vec![0, 2, 1, 3])?;
        g.reshape(p, vec![b * h, n, dk])
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;

    let kt = g.permute(kh, vec![0, 2, 1])?;
    let scores = g.bmm(qh, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    if cfg.causal_attention {
        let mut mask = Tensor::zeros(&[n, n]);
        for r in 0..n {
            for c in (r + 1)..n {
                mask.set(&[r, c], MASK_NEG);
            }
        }
        let m = g.leaf(mask);
        scores = g.add(scores, m)?;
    }
    let probs = g.softmax(scores)?;
    let probs = dropout(g, probs, cfg.dropout, dropout_rng);
    let ctx = g.bmm(probs, vh)?;

    // back to [B*N, E]
    let c4 = g.reshape(ctx, vec![b, h, n, dk])?;
    let cp = g.permute(c4, vec![0, 2, 1, 3])?;
    let cf = g.reshape(cp, vec![b * n, e])?;
    let out = g.matmul(cf, wo)?;
    g.reshape(out, vec![b, n, e])
}

fn ffn(
    g: &mut Graph,
    model: &StLlm,
    i: usize,
    x: NodeId,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let cfg = &model.config;
    let shape = g.shape(x).to_vec();
    let (b, n, e) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, vec![b * n, e])?;
    let w1 = g.param(&model.params, &block_param(i, "ffn.w1"))?;
    let b1 = g.param(&model.params, &block_param(i, "ffn.b1"))?;
    let w2 = g.param(&model.params, &block_param(i, "ffn.w2"))?;
    let b2 = g.param(&model.params, &block_param(i, "ffn.b2"))?;
    let h1 = g.matmul(flat, w1)?;
    let h1 = g.add(h1, b1)?;
    let act = cfg.ffn_activation.apply(g, h1);
    let h2 = g.matmul(act, w2)?;
    let h2 = g.add(h2, b2)?;
    let h2 = dropout(g, h2, cfg.dropout, dropout_rng);
    g.reshape(h2, vec![b, n, e])
}

/// Inverted-scale dropout as a mask multiply; identity when no RNG is given
/// (evaluation) or the rate is zero.
fn dropout(g: &mut Graph, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> NodeId {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let mask = g.leaf(Tensor::new(shape, data).unwrap());
    g.mul(x, mask).unwrap()
}
