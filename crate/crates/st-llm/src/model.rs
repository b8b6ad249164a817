//! Model assembly: configuration, parameter initialization, and the full
//! forward pass from an input window batch to multi-step predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::embedding;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::head;
use crate::param::ParamSet;
use crate::tensor::Tensor;
use crate::transformer;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Weight initialization scale for the seeded normal draw.
pub const INIT_STD: f64 = 0.02;

/// Which parameters stay frozen during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMode {
    /// Partially frozen attention: first F layers freeze attention + FFN,
    /// last U layers freeze only the FFN. Layer norms stay trainable.
    #[serde(rename = "PFA")]
    Pfa,
    /// Frozen pretrained transformer: attention + FFN frozen in every layer.
    #[serde(rename = "FPT")]
    Fpt,
    /// Nothing frozen; starts from a pretrained checkpoint when one is given.
    FullTuning,
    /// Nothing frozen; always starts from random initialization.
    NoPretrain,
    /// The Pfa pattern applied at depth 12.
    FullLayer,
}

impl FreezeMode {
    pub fn requires_pretrained(self) -> bool {
        matches!(self, FreezeMode::Pfa | FreezeMode::Fpt | FreezeMode::FullLayer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Embedding-branch ablation switches. A disabled branch contributes zeros
/// of the usual shape, so the downstream stack is identical across variants;
/// `wo_llm` bypasses the transformer stack entirely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub wo_llm: bool,
    #[serde(default)]
    pub wo_t: bool,
    #[serde(default)]
    pub wo_s: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn is_none(&self) -> bool {
        !(self.wo_llm || self.wo_t || self.wo_s)
    }

    /// Parameters structurally disconnected from the loss under these flags.
    /// The trainer freezes them so the optimizer's "gradient for every
    /// trainable parameter" contract still holds.
    pub fn inert_patterns(&self) -> Vec<&'static str> {
        let mut pats = Vec::new();
        if self.wo_t {
            pats.push("embed.day");
            pats.push("embed.week");
        }
        if self.wo_s {
            pats.push("embed.spatial.*");
        }
        if self.wo_llm {
            pats.push("pe");
            pats.push("block.*");
            pats.push("final_ln.*");
        }
        pats
    }
}

fn default_t_day() -> usize {
    48
}
fn default_t_week() -> usize {
    7
}
fn default_steps() -> usize {
    12
}
fn default_channels() -> usize {
    1
}
fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width D of each embedding branch; the transformer runs at 3D.
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Total transformer depth L.
    pub layers: usize,
    /// F: leading layers with attention and FFN frozen (Pfa/FullLayer).
    pub frozen_layers: usize,
    /// U: trailing layers whose attention is unfrozen (Pfa/FullLayer).
    pub unfrozen_layers: usize,
    pub freeze_mode: FreezeMode,
    /// FFN inner width; 0 selects the 4·3D convention.
    #[serde(default)]
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Positional-encoding capacity; forward rejects station counts above it.
    pub n_max: usize,
    #[serde(default = "default_steps")]
    pub input_steps: usize,
    #[serde(default = "default_steps")]
    pub output_steps: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_t_day")]
    pub day_slots: usize,
    #[serde(default = "default_t_week")]
    pub week_slots: usize,
    #[serde(default = "default_activation")]
    pub spatial_activation: Activation,
    #[serde(default = "default_activation")]
    pub ffn_activation: Activation,
    /// Spatial tokens are unordered, so attention is full by default; the
    /// autoregressive mask is kept behind this flag for comparison runs.
    #[serde(default)]
    pub causal_attention: bool,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            heads: 4,
            layers: 6,
            frozen_layers: 5,
            unfrozen_layers: 1,
            freeze_mode: FreezeMode::Pfa,
            d_ff: 0,
            dropout: default_dropout(),
            n_max: 266,
            input_steps: 12,
            output_steps: 12,
            channels: 1,
            day_slots: default_t_day(),
            week_slots: default_t_week(),
            spatial_activation: Activation::Relu,
            ffn_activation: Activation::Relu,
            causal_attention: false,
            ablation: Ablation::none(),
        }
    }
}

impl ModelConfig {
    /// Transformer width 3D.
    pub fn width(&self) -> usize {
        3 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.width()
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            return fail("d, heads, and layers must be >= 1".into());
        }
        if self.width() % self.heads != 0 {
            return fail(format!(
                "transformer width 3D = {} is not divisible by {} heads",
                self.width(),
                self.heads
            ));
        }
        if self.frozen_layers + self.unfrozen_layers != self.layers {
            return fail(format!(
                "F + U must equal L: {} + {} != {}",
                self.frozen_layers, self.unfrozen_layers, self.layers
            ));
        }
        if self.unfrozen_layers == 0 {
            return fail("U must be >= 1".into());
        }
        if self.freeze_mode == FreezeMode::FullLayer && self.layers != 12 {
            return fail(format!("FullLayer mode runs at depth 12, got {}", self.layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.n_max == 0 {
            return fail("n_max must be >= 1".into());
        }
        if self.input_steps == 0 || self.output_steps == 0 || self.channels == 0 {
            return fail("input_steps, output_steps, channels must be >= 1".into());
        }
        if self.week_slots != 7 {
            return fail(format!("week_slots must be 7, got {}", self.week_slots));
        }
        if self.day_slots == 0 {
            return fail("day_slots must be >= 1".into());
        }
        Ok(())
    }
}

/// The assembled forecaster: embedding stack, partially frozen transformer,
/// and regression head over one shared parameter set.
#[derive(Debug, Clone)]
pub struct StLlm {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl StLlm {
    /// Build with seeded scaled-normal weights. The same seed and config
    /// produce bitwise-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        embedding::init_params(&mut params, &config, &mut rng)?;
        transformer::init_params(&mut params, &config, &mut rng)?;
        head::init_params(&mut params, &config, &mut rng)?;
        Ok(StLlm { config, params })
    }

    /// (total, frozen, trainable) scalar parameter counts.
    pub fn count_parameters(&self) -> (usize, usize, usize) {
        self.params.count_scalars()
    }

    /// Full forward pass for a batch: embeddings, fusion, transformer stack
    /// (unless ablated away), regression. Returns the prediction node of
    /// shape [B, S, N, C]. Dropout is active only when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let shape = batch.x.shape();
        if shape.len() != 3 {
            return Err(Error::invalid(
                "forward",
                format!("expected input [B, N, P*C], got {:?}", shape),
            ));
        }
        let (b, n, pc) = (shape[0], shape[1], shape[2]);
        if pc != cfg.input_steps * cfg.channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![b, n, cfg.input_steps * cfg.channels],
            });
        }
        if n > cfg.n_max {
            return Err(Error::invalid(
                "forward",
                format!("{} stations exceed the positional capacity n_max = {}", n, cfg.n_max),
            ));
        }
        if batch.day_index.len() != b || batch.week_index.len() != b {
            return Err(Error::invalid(
                "forward",
                "calendar index count does not match batch size".to_string(),
            ));
        }

        let d = cfg.d;
        let x = g.leaf(batch.x.clone());
        let x_flat = g.reshape(x, vec![b * n, pc])?;

        // token branch
        let ep = embedding::embed_tokens(g, &self.params, x_flat)?;
        let ep = g.reshape(ep, vec![b, n, d])?;

        // spatial branch
        let es = if cfg.ablation.wo_s {
            g.leaf(Tensor::zeros(&[b, n, d]))
        } else {
            let es = embedding::embed_spatial(g, &self.params, x_flat, cfg.spatial_activation)?;
            g.reshape(es, vec![b, n, d])?
        };

        // temporal branch, one row per sample broadcast across stations
        let et = if cfg.ablation.wo_t {
            g.leaf(Tensor::zeros(&[b, n, d]))
        } else {
            let rows =
                embedding::embed_temporal(g, &self.params, &batch.day_index, &batch.week_index)?;
            let rows = g.reshape(rows, vec![b, 1, d])?;
            g.broadcast_to(rows, &[b, n, d])?
        };

        let fused = embedding::fuse(g, &self.params, ep, es, et)?;

        let h_out = if cfg.ablation.wo_llm {
            fused
        } else {
            transformer::forward(g, self, fused, dropout_rng.as_deref_mut())?
        };

        head::regress(g, &self.params, h_out, cfg.output_steps, cfg.channels)
    }
}

/// A collated batch of window samples, ready for the graph.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, N, P*C]: each station's flattened history.
    pub x: Tensor,
    /// [B, S, N, C]: targets in the same normalization as `x`.
    pub y: Tensor,
    pub day_index: Vec<usize>,
    pub week_index: Vec<usize>,
}

impl Batch {
    pub fn collate(windows: &[&WindowSample]) -> Result<Batch> {
        if windows.is_empty() {
            return Err(Error::Data("cannot collate an empty batch".into()));
        }
        let (p, n, c) = {
            let s = windows[0].x.shape();
            (s[0], s[1], s[2])
        };
        let s_steps = windows[0].y.shape()[0];
        let b = windows.len();
        let mut x = Tensor::zeros(&[b, n, p * c]);
        let mut y = Tensor::zeros(&[b, s_steps, n, c]);
        let mut day = Vec::with_capacity(b);
        let mut week = Vec::with_capacity(b);
        for (i, w) in windows.iter().enumerate() {
            if w.x.shape() != [p, n, c] || w.y.shape() != [s_steps, n, c] {
                return Err(Error::Data("ragged window shapes in batch".into()));
            }
            for station in 0..n {
                for step in 0..p {
                    for ch in 0..c {
                        x.set(&[i, station, step * c + ch], w.x.at(&[step, station, ch]));
                    }
                }
            }
            for step in 0..s_steps {
                for station in 0..n {
                    for ch in 0..c {
                        y.set(&[i, step, station, ch], w.y.at(&[step, station, ch]));
                    }
                }
            }
            day.push(w.day_index);
            week.push(w.week_index);
        }
        Ok(Batch {
            x,
            y,
            day_index: day,
            week_index: week,
        })
    }

    pub fn len(&self) -> usize {
        self.day_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.day_index.is_empty()
    }
}
