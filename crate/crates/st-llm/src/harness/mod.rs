//! Experiment orchestration: data preparation, the training loop with early
//! stopping, evaluation with wall-clock timing, desk-scale pretraining,
//! few-shot and zero-shot protocols, ablations, and the U sweep.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::synth::{self, SynthConfig};
use crate::data::{
    io as data_io, make_windows, split_chronological, NormStats, TrafficTensor, WindowSample,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{self, LossKind};
use crate::metrics::{metrics, MetricsReport, MAPE_EPSILON};
use crate::model::{Batch, FreezeMode, ModelConfig, StLlm};
use crate::optim::AdamW;
use crate::param::glob_match;
use crate::transformer::apply_freeze_policy;

/// Where the traffic series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Generator { config: SynthConfig },
    Binary { path: PathBuf },
    Csv {
        paths: Vec<PathBuf>,
        interval_minutes: u32,
        start_epoch: i64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<TrafficTensor> {
        match self {
            DataSource::Generator { config } => synth::generate(config),
            DataSource::Binary { path } => data_io::load_binary(path),
            DataSource::Csv {
                paths,
                interval_minutes,
                start_epoch,
            } => {
                let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
                data_io::load_csv(&refs, *interval_minutes, *start_epoch)
            }
        }
    }
}

/// Desk-scale pretraining task: next-step prediction on a synthetic source
/// corpus generated with its own profile and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub source: SynthConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl PretrainConfig {
    /// A source corpus distinct from both bundled target profiles.
    pub fn default_for(n: usize, seed: u64) -> Self {
        PretrainConfig {
            source: SynthConfig {
                n,
                t: 4 * 7 * synth::T_DAY,
                seed: seed.wrapping_add(9000),
                base_level: 80.0,
                daily_amp: 45.0,
                weekly_amp: 15.0,
                noise_std: 5.0,
            },
            epochs: 6,
            seed: seed.wrapping_add(1000),
        }
    }
}

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    15
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_fraction() -> f64 {
    0.10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Early-stopping patience on validation MAE, within the epoch cap.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub few_shot_fraction: f64,
    #[serde(default)]
    pub pretrained_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// When set, runs write run.json, metrics.json, and a checkpoint here.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, model: ModelConfig) -> Self {
        ExperimentConfig {
            data,
            model,
            lambda: default_lambda(),
            loss: LossKind::Mae,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            few_shot_fraction: default_fraction(),
            pretrained_checkpoint: None,
            pretrain: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "few_shot_fraction must be in (0, 1], got {}",
                self.few_shot_fraction
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Normalized splits plus the statistics that undo the normalization.
pub struct Dataset {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub stats: NormStats,
    pub stations: usize,
    /// FNV-1a over the raw split bytes; identical configs hash identically.
    pub split_hash: u64,
}

/// Load, window, split 6:2:2, truncate the training prefix for few-shot
/// runs, then normalize everything with statistics from the (possibly
/// truncated) training split only.
pub fn prepare_dataset(cfg: &ExperimentConfig, train_fraction: f64) -> Result<Dataset> {
    let tt = cfg.data.load()?;
    let windows = make_windows(&tt, cfg.model.input_steps, cfg.model.output_steps, cfg.model.day_slots)?;
    let (mut train, val, test) = split_chronological(windows, (6, 2, 2))?;
    if train_fraction < 1.0 {
        let keep = (train_fraction * train.len() as f64).ceil() as usize;
        if keep == 0 {
            return Err(Error::Config("few-shot fraction leaves zero training windows".into()));
        }
        train.truncate(keep);
    }

    let mut hash = Fnv::new();
    for split in [&train, &val, &test] {
        hash.write_usize(split.len());
        for w in split.iter() {
            hash.write_bytes(&w.x.to_le_bytes());
            hash.write_bytes(&w.y.to_le_bytes());
        }
    }

    let stats = NormStats::from_train_windows(&train)?;
    let normalize_all = |ws: Vec<WindowSample>| -> Result<Vec<WindowSample>> {
        ws.iter().map(|w| stats.normalize_window(w)).collect()
    };
    Ok(Dataset {
        stations: tt.stations(),
        train: normalize_all(train)?,
        val: normalize_all(val)?,
        test: normalize_all(test)?,
        stats,
        split_hash: hash.finish(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    AbortedNumerical { epoch: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub epochs_run: usize,
    /// Mean training loss per epoch (normalized scale, including the L2 term).
    pub train_loss: Vec<f64>,
    /// Denormalized validation MAE per epoch.
    pub val_mae: Vec<f64>,
    /// Validation MAE before the first optimizer step.
    pub initial_val_mae: f64,
    pub best_epoch: usize,
    pub test_metrics: Option<MetricsReport>,
    pub checkpoint: Option<PathBuf>,
    pub split_hash: String,
    /// Parameters frozen because an ablation disconnects them from the loss.
    pub inert_params: Vec<String>,
    pub frozen_scalars: usize,
    pub trainable_scalars: usize,
    /// Wall-clock training time; not reproducible across runs, unlike metrics.
    pub train_seconds: f64,
}

/// Supervised training per the experiment protocol: shuffle each epoch,
/// minimize MAE + lambda L2 with the adaptive-moment optimizer (linear
/// warmup over the first 5% of planned steps), early-stop on validation MAE,
/// keep the best-validation weights, then evaluate on the test split.
pub fn train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    train_with_fraction(cfg, 1.0)
}

/// Training on the chronological prefix of the training split.
pub fn few_shot(cfg: &ExperimentConfig) -> Result<RunRecord> {
    train_with_fraction(cfg, cfg.few_shot_fraction)
}

fn train_with_fraction(cfg: &ExperimentConfig, fraction: f64) -> Result<RunRecord> {
    cfg.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction must be in (0, 1], got {fraction}")));
    }
    let ds = prepare_dataset(cfg, fraction)?;
    if ds.stations > cfg.model.n_max {
        return Err(Error::Config(format!(
            "dataset has {} stations but n_max is {}",
            ds.stations, cfg.model.n_max
        )));
    }
    let mut model = init_model(cfg)?;
    apply_freeze_policy(&mut model)?;
    let mut inert_params = Vec::new();
    for pattern in cfg.model.ablation.inert_patterns() {
        model.params.set_frozen(pattern, true);
        for name in model.params.names() {
            if glob_match(pattern, name) {
                inert_params.push(name.to_string());
            }
        }
    }
    let (_, frozen_scalars, trainable_scalars) = model.count_parameters();

    let batches_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let planned_steps = batches_per_epoch * cfg.epochs;
    let warmup = ((planned_steps as f64) * 0.05).ceil() as usize;
    let mut opt = AdamW::new(cfg.learning_rate).with_warmup(warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut record = RunRecord {
        config: cfg.clone(),
        status: RunStatus::Completed,
        epochs_run: 0,
        train_loss: Vec::new(),
        val_mae: Vec::new(),
        initial_val_mae: f64::NAN,
        best_epoch: 0,
        test_metrics: None,
        checkpoint: None,
        split_hash: format!("{:016x}", ds.split_hash),
        inert_params,
        frozen_scalars,
        trainable_scalars,
        train_seconds: 0.0,
    };

    record.initial_val_mae = evaluate_model(&model, &ds.val, &ds.stats, cfg.batch_size)?.mae;
    let mut best_val = record.initial_val_mae;
    let mut best_params = model.params.clone();
    let mut bad_epochs = 0usize;
    let started = Instant::now();

    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&WindowSample> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let batch = Batch::collate(&refs)?;
            let mut g = Graph::new();
            let pred = model.forward(&mut g, &batch, Some(&mut rng))?;
            let target = g.leaf(batch.y.clone());
            let trainable: Vec<_> = g.trainable_params().iter().map(|(_, id)| *id).collect();
            let loss = head::loss(&mut g, pred, target, cfg.lambda, cfg.loss, &trainable)?;
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                record.status = RunStatus::AbortedNumerical { epoch };
                record.train_seconds = started.elapsed().as_secs_f64();
                write_artifacts(cfg, &mut record, None)?;
                return Err(Error::Numerical(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        record.train_loss.push(epoch_loss / ds.train.len() as f64);

        let val_mae = evaluate_model(&model, &ds.val, &ds.stats, cfg.batch_size)?.mae;
        record.val_mae.push(val_mae);
        record.epochs_run = epoch + 1;
        if val_mae < best_val {
            best_val = val_mae;
            record.best_epoch = epoch;
            best_params = model.params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break 'epochs;
            }
        }
    }
    record.train_seconds = started.elapsed().as_secs_f64();

    model.params = best_params;
    let report = evaluate_model(&model, &ds.test, &ds.stats, cfg.batch_size)?;
    record.test_metrics = Some(report);
    write_artifacts(cfg, &mut record, Some(&model))?;
    Ok(record)
}

/// Build the model and, where the freeze mode calls for it, overwrite the
/// transformer stack (PE, blocks, final layer norm) from a pretrained
/// checkpoint. Embeddings and the head always restart from scratch.
fn init_model(cfg: &ExperimentConfig) -> Result<StLlm> {
    let mut model = StLlm::build(cfg.model.clone(), cfg.seed)?;
    let mode = cfg.model.freeze_mode;
    match (&cfg.pretrained_checkpoint, mode.requires_pretrained()) {
        (Some(path), _) if mode != FreezeMode::NoPretrain => {
            let source = checkpoint::load(path)?;
            load_pretrained_stack(&mut model, &source)?;
        }
        (None, true) => {
            return Err(Error::Config(format!(
                "freeze mode {:?} requires a pretrained checkpoint",
                mode
            )));
        }
        _ => {}
    }
    Ok(model)
}

fn load_pretrained_stack(model: &mut StLlm, source: &StLlm) -> Result<()> {
    let (a, b) = (&model.config, &source.config);
    if a.d != b.d || a.layers != b.layers || a.n_max != b.n_max || a.ffn_width() != b.ffn_width() {
        return Err(Error::Config(format!(
            "pretrained checkpoint mismatch: d {} vs {}, layers {} vs {}, n_max {} vs {}, d_ff {} vs {}",
            b.d, a.d, b.layers, a.layers, b.n_max, a.n_max, b.ffn_width(), a.ffn_width()
        )));
    }
    for p in source.params.iter() {
        let stack = p.name == "pe" || p.name.starts_with("block.") || p.name.starts_with("final_ln.");
        if !stack {
            continue;
        }
        let dst = model
            .params
            .get_mut(&p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter `{}` not in model", p.name)))?;
        if dst.tensor.shape() != p.tensor.shape() {
            return Err(Error::Config(format!(
                "checkpoint shape mismatch for `{}`: {:?} vs {:?}",
                p.name,
                p.tensor.shape(),
                dst.tensor.shape()
            )));
        }
        dst.tensor = p.tensor.clone();
    }
    Ok(())
}

/// Forward the whole split in batches and compute denormalized metrics plus
/// mean wall-clock seconds per forward batch.
pub fn evaluate_model(
    model: &StLlm,
    windows: &[WindowSample],
    stats: &NormStats,
    batch_size: usize,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut seconds = 0.0;
    let mut batches = 0usize;
    for chunk in windows.chunks(batch_size) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let batch = Batch::collate(&refs)?;
        let t0 = Instant::now();
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &batch, None)?;
        seconds += t0.elapsed().as_secs_f64();
        batches += 1;
        let p = stats.denormalize(g.value(pred))?;
        let y = stats.denormalize(&batch.y)?;
        predictions.extend_from_slice(p.data());
        truths.extend_from_slice(y.data());
    }
    let mut report = metrics(&predictions, &truths, MAPE_EPSILON)?;
    report.sec_per_batch = seconds / batches as f64;
    Ok(report)
}

/// Evaluate a stored checkpoint on the test split of the configured data.
pub fn evaluate(cfg: &ExperimentConfig, ckpt: &Path) -> Result<MetricsReport> {
    let model = checkpoint::load(ckpt)?;
    let ds = prepare_dataset(cfg, 1.0)?;
    let report = evaluate_model(&model, &ds.test, &ds.stats, cfg.batch_size)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

/// Evaluate a source-trained checkpoint on a target dataset it never saw:
/// target normalization statistics come from the target's training split,
/// positional rows 0..N' are reused, and no parameter is updated (verified
/// byte for byte).
pub fn zero_shot(source_checkpoint: &Path, target: &ExperimentConfig) -> Result<MetricsReport> {
    let model = checkpoint::load(source_checkpoint)?;
    let ds = prepare_dataset(target, 1.0)?;
    if ds.stations > model.config.n_max {
        return Err(Error::Config(format!(
            "target has {} stations, beyond the source model's n_max {}",
            ds.stations, model.config.n_max
        )));
    }
    let before = checkpoint::to_bytes(&model)?;
    let report = evaluate_model(&model, &ds.test, &ds.stats, target.batch_size)?;
    let after = checkpoint::to_bytes(&model)?;
    if before != after {
        return Err(Error::Numerical(
            "zero-shot evaluation modified parameters".into(),
        ));
    }
    if let Some(dir) = &target.out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

/// Train the transformer stack on the synthetic source corpus (next-step
/// prediction, everything trainable, no freezing) and save the checkpoint
/// that later runs load their blocks from.
pub fn pretrain_source(cfg: &ExperimentConfig) -> Result<(PathBuf, RunRecord)> {
    let pre = cfg
        .pretrain
        .clone()
        .ok_or_else(|| Error::Config("no pretrain section in config".into()))?;
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("pretraining needs out_dir for the checkpoint".into()))?;
    std::fs::create_dir_all(&dir)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.output_steps = 1; // next-step task
    model_cfg.freeze_mode = FreezeMode::NoPretrain;
    model_cfg.ablation = Default::default();

    let source_dir = dir.join(format!("pretrain_l{}", model_cfg.layers));
    let sub = ExperimentConfig {
        data: DataSource::Generator { config: pre.source.clone() },
        model: model_cfg,
        epochs: pre.epochs,
        seed: pre.seed,
        pretrained_checkpoint: None,
        pretrain: None,
        out_dir: Some(source_dir.clone()),
        ..cfg.clone()
    };
    let record = train(&sub)?;
    let path = record
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Data("pretraining produced no checkpoint".into()))?;
    Ok((path, record))
}

/// Reuse the configured checkpoint, or pretrain once per required depth.
fn ensure_pretrained(
    cfg: &ExperimentConfig,
    layers: usize,
    cache: &mut HashMap<usize, PathBuf>,
) -> Result<PathBuf> {
    if let Some(path) = &cfg.pretrained_checkpoint {
        if layers == cfg.model.layers {
            return Ok(path.clone());
        }
    }
    if let Some(path) = cache.get(&layers) {
        return Ok(path.clone());
    }
    let mut pretrain_cfg = cfg.clone();
    pretrain_cfg.model.layers = layers;
    // F/U are irrelevant while pretraining; keep them consistent with L
    pretrain_cfg.model.unfrozen_layers = 1;
    pretrain_cfg.model.frozen_layers = layers - 1;
    pretrain_cfg.model.freeze_mode = FreezeMode::NoPretrain;
    if pretrain_cfg.pretrain.is_none() {
        pretrain_cfg.pretrain = Some(PretrainConfig::default_for(cfg.model.n_max, cfg.seed));
    }
    let (path, _) = pretrain_source(&pretrain_cfg)?;
    cache.insert(layers, path.clone());
    Ok(path)
}

/// One named row of an ablation or sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub tag: String,
    pub record: RunRecord,
}

/// Derive a variant configuration from a tag. Tags: `full`, `wo_llm`,
/// `wo_st`, `wo_t`, `wo_s`, `pfa`, `fpt`, `full_tuning`, `no_pretrain`,
/// `full_layer`, or `uK` for unfreezing the last K attention layers.
pub fn variant_config(base: &ExperimentConfig, tag: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match tag {
        "full" => {}
        "wo_llm" => cfg.model.ablation.wo_llm = true,
        "wo_st" => {
            cfg.model.ablation.wo_t = true;
            cfg.model.ablation.wo_s = true;
        }
        "wo_t" => cfg.model.ablation.wo_t = true,
        "wo_s" => cfg.model.ablation.wo_s = true,
        "pfa" => cfg.model.freeze_mode = FreezeMode::Pfa,
        "fpt" => cfg.model.freeze_mode = FreezeMode::Fpt,
        "full_tuning" => cfg.model.freeze_mode = FreezeMode::FullTuning,
        "no_pretrain" => {
            cfg.model.freeze_mode = FreezeMode::NoPretrain;
            cfg.pretrained_checkpoint = None;
        }
        "full_layer" => {
            cfg.model.freeze_mode = FreezeMode::FullLayer;
            cfg.model.layers = 12;
            cfg.model.frozen_layers = 12 - cfg.model.unfrozen_layers;
        }
        _ => {
            let parsed = tag
                .strip_prefix('u')
                .and_then(|rest| rest.parse::<usize>().ok());
            match parsed {
                Some(u) if u >= 1 && u < cfg.model.layers => {
                    cfg.model.freeze_mode = FreezeMode::Pfa;
                    cfg.model.unfrozen_layers = u;
                    cfg.model.frozen_layers = cfg.model.layers - u;
                }
                _ => {
                    return Err(Error::Config(format!("unknown variant tag `{tag}`")));
                }
            }
        }
    }
    Ok(cfg)
}

/// Run every variant with the shared seed and data, verify the splits hash
/// identically, and write a consolidated CSV comparison table.
pub fn ablate(base: &ExperimentConfig, tags: &[&str]) -> Result<Vec<VariantResult>> {
    let mut cache = HashMap::new();
    let mut results = Vec::new();
    for &tag in tags {
        let mut cfg = variant_config(base, tag)?;
        if cfg.model.freeze_mode.requires_pretrained() && cfg.pretrained_checkpoint.is_none() {
            let path = ensure_pretrained(base, cfg.model.layers, &mut cache)?;
            cfg.pretrained_checkpoint = Some(path);
        }
        if let Some(dir) = &base.out_dir {
            cfg.out_dir = Some(dir.join(tag));
        }
        let record = train(&cfg)?;
        results.push(VariantResult {
            tag: tag.to_string(),
            record,
        });
    }
    let hashes: Vec<&str> = results.iter().map(|r| r.record.split_hash.as_str()).collect();
    if hashes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Data(format!(
            "variants saw different data splits: {hashes:?}"
        )));
    }
    if let Some(dir) = &base.out_dir {
        write_comparison_csv(&dir.join("comparison.csv"), &results)?;
    }
    Ok(results)
}

/// Pfa runs over a range of unfrozen-attention depths.
pub fn sweep_u(base: &ExperimentConfig, us: &[usize]) -> Result<Vec<VariantResult>> {
    let tags: Vec<String> = us.iter().map(|u| format!("u{u}")).collect();
    let refs: Vec<&str> = tags.iter().map(|s| s.as_str()).collect();
    ablate(base, &refs)
}

pub fn write_comparison_csv(path: &Path, results: &[VariantResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    w.write_record([
        "tag",
        "mae",
        "rmse",
        "mape_pct",
        "wape_pct",
        "trainable_params",
        "frozen_params",
        "sec_per_batch",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for r in results {
        let m = r.record.test_metrics.as_ref().ok_or_else(|| {
            Error::Data(format!("variant `{}` has no test metrics", r.tag))
        })?;
        w.write_record([
            r.tag.clone(),
            m.mae.to_string(),
            m.rmse.to_string(),
            m.mape_pct.to_string(),
            m.wape_pct.to_string(),
            r.record.trainable_scalars.to_string(),
            r.record.frozen_scalars.to_string(),
            m.sec_per_batch.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// The sanity floor: predict each future value as the training-split mean of
/// its hour-of-day slot for that station and channel. Returns test-split
/// metrics on raw counts.
pub fn historical_average(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let ds = prepare_dataset(cfg, 1.0)?;
    let slots = cfg.model.day_slots;
    let (s_steps, n, c) = {
        let shape = ds.train[0].y.shape();
        (shape[0], shape[1], shape[2])
    };
    let mut sums = vec![0.0; slots * n * c];
    let mut counts = vec![0usize; slots * n * c];
    let mut global_sum = 0.0;
    let mut global_count = 0usize;
    for w in &ds.train {
        let y = ds.stats.denormalize(&w.y)?;
        for step in 0..s_steps {
            let slot = (w.day_index + 1 + step) % slots;
            for station in 0..n {
                for ch in 0..c {
                    let v = y.at(&[step, station, ch]);
                    sums[(slot * n + station) * c + ch] += v;
                    counts[(slot * n + station) * c + ch] += 1;
                    global_sum += v;
                    global_count += 1;
                }
            }
        }
    }
    let global_mean = global_sum / global_count.max(1) as f64;
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for w in &ds.test {
        let y = ds.stats.denormalize(&w.y)?;
        for step in 0..s_steps {
            let slot = (w.day_index + 1 + step) % slots;
            for station in 0..n {
                for ch in 0..c {
                    let ix = (slot * n + station) * c + ch;
                    let pred = if counts[ix] > 0 {
                        sums[ix] / counts[ix] as f64
                    } else {
                        global_mean
                    };
                    predictions.push(pred);
                    truths.push(y.at(&[step, station, ch]));
                }
            }
        }
    }
    metrics(&predictions, &truths, MAPE_EPSILON)
}

fn write_artifacts(cfg: &ExperimentConfig, record: &mut RunRecord, model: Option<&StLlm>) -> Result<()> {
    let Some(dir) = &cfg.out_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    if let Some(model) = model {
        let ckpt_path = dir.join("checkpoint.stck");
        checkpoint::save(model, &ckpt_path)?;
        record.checkpoint = Some(ckpt_path);
    }
    if let Some(metrics) = &record.test_metrics {
        write_json(&dir.join("metrics.json"), metrics)?;
    }
    write_json(&dir.join("run.json"), record)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot encode {}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// FNV-1a, 64-bit; enough to confirm identical splits across variants.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_usize(&mut self, v: usize) {
        self.write_bytes(&v.to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    fn quick_config(dir: Option<PathBuf>) -> ExperimentConfig {
        let model = ModelConfig {
            d: 4,
            heads: 2,
            layers: 2,
            frozen_layers: 1,
            unfrozen_layers: 1,
            freeze_mode: FreezeMode::NoPretrain,
            n_max: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut cfg = ExperimentConfig::new(
            DataSource::Generator {
                config: SynthConfig::taxi_like(4, 120, 3),
            },
            model,
        );
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.out_dir = dir;
        cfg
    }

    #[test]
    fn dataset_preparation_splits_and_hashes() {
        let cfg = quick_config(None);
        let a = prepare_dataset(&cfg, 1.0).unwrap();
        let b = prepare_dataset(&cfg, 1.0).unwrap();
        assert_eq!(a.split_hash, b.split_hash);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 120 - 24 + 1);
        // few-shot prefix changes only the training split
        let few = prepare_dataset(&cfg, 0.1).unwrap();
        assert_eq!(few.train.len(), (0.1f64 * a.train.len() as f64).ceil() as usize);
        assert_eq!(few.test.len(), a.test.len());
    }

    #[test]
    fn training_produces_a_complete_record() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Some(dir.path().to_path_buf()));
        let record = train(&cfg).unwrap();
        assert_eq!(record.status, RunStatus::Completed);
        assert_eq!(record.epochs_run, 2);
        assert_eq!(record.train_loss.len(), 2);
        assert_eq!(record.val_mae.len(), 2);
        assert!(record.test_metrics.is_some());
        assert!(dir.path().join("run.json").exists());
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir.path().join("checkpoint.stck").exists());
        // the stored checkpoint reloads
        let model = checkpoint::load(&dir.path().join("checkpoint.stck")).unwrap();
        assert_eq!(model.config.d, 4);
    }

    #[test]
    fn same_seed_runs_are_metric_identical() {
        let cfg = quick_config(None);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let (ma, mb) = (a.test_metrics.unwrap(), b.test_metrics.unwrap());
        assert_eq!(ma.mae.to_bits(), mb.mae.to_bits());
        assert_eq!(ma.rmse.to_bits(), mb.rmse.to_bits());
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_mae, b.val_mae);
    }

    #[test]
    fn pretraining_mode_without_checkpoint_is_an_error() {
        let mut cfg = quick_config(None);
        cfg.model.freeze_mode = FreezeMode::Pfa;
        let err = train(&cfg).unwrap_err();
        assert!(err.to_string().contains("pretrained"), "{err}");
    }

    #[test]
    fn ablation_marks_inert_parameters_frozen() {
        let mut cfg = quick_config(None);
        cfg.model.ablation = Ablation {
            wo_llm: false,
            wo_t: true,
            wo_s: false,
        };
        let record = train(&cfg).unwrap();
        assert!(record.inert_params.contains(&"embed.day".to_string()));
        assert!(record.inert_params.contains(&"embed.week".to_string()));
    }

    #[test]
    fn variant_tags_parse_or_reject() {
        let cfg = quick_config(None);
        assert!(variant_config(&cfg, "wo_st").unwrap().model.ablation.wo_t);
        assert!(variant_config(&cfg, "u1").is_ok());
        assert!(variant_config(&cfg, "u2").is_err(), "u must stay below L");
        assert!(variant_config(&cfg, "bogus").is_err());
    }

    #[test]
    fn few_shot_fraction_boundary_matches_full_training() {
        let mut cfg = quick_config(None);
        cfg.few_shot_fraction = 1.0;
        let full = train(&cfg).unwrap();
        let few = few_shot(&cfg).unwrap();
        assert_eq!(
            full.test_metrics.unwrap().mae.to_bits(),
            few.test_metrics.unwrap().mae.to_bits()
        );
    }

    #[test]
    fn historical_average_returns_finite_metrics() {
        let cfg = quick_config(None);
        let report = historical_average(&cfg).unwrap();
        assert!(report.mae.is_finite() && report.mae > 0.0);
        assert!(report.rmse >= report.mae);
    }

    #[test]
    fn full_tuning_and_no_pretrain_trajectories_coincide_without_a_checkpoint() {
        // the two modes differ only in whether a pretrained checkpoint is
        // loaded; with none given they are the same computation
        let mut a = quick_config(None);
        a.model.freeze_mode = FreezeMode::FullTuning;
        let mut b = quick_config(None);
        b.model.freeze_mode = FreezeMode::NoPretrain;
        let ra = train(&a).unwrap();
        let rb = train(&b).unwrap();
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_mae, rb.val_mae);
        assert_eq!(
            ra.test_metrics.unwrap().mae.to_bits(),
            rb.test_metrics.unwrap().mae.to_bits()
        );
    }

    #[test]
    fn constant_mean_prediction_has_closed_form_wape() {
        let cfg = quick_config(None);
        let ds = prepare_dataset(&cfg, 1.0).unwrap();
        // train-split mean on the raw scale
        let mut sum = 0.0;
        let mut count = 0usize;
        for w in &ds.train {
            let y = ds.stats.denormalize(&w.y).unwrap();
            sum += y.data().iter().sum::<f64>();
            count += y.numel();
        }
        let mean = sum / count as f64;
        let mut predictions = Vec::new();
        let mut truths = Vec::new();
        for w in &ds.test {
            let y = ds.stats.denormalize(&w.y).unwrap();
            truths.extend_from_slice(y.data());
            predictions.extend(std::iter::repeat(mean).take(y.numel()));
        }
        let report = metrics(&predictions, &truths, MAPE_EPSILON).unwrap();
        let abs_dev: f64 = truths.iter().map(|&t| (t - mean).abs()).sum::<f64>();
        let abs_truth: f64 = truths.iter().map(|&t| t.abs()).sum::<f64>();
        let expect = 100.0 * abs_dev / abs_truth;
        assert!((report.wape_pct - expect).abs() < 1e-9, "{} vs {}", report.wape_pct, expect);
    }

    #[test]
    fn u_sweep_produces_one_record_per_depth() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelConfig {
            d: 4,
            heads: 2,
            layers: 6,
            frozen_layers: 5,
            unfrozen_layers: 1,
            freeze_mode: FreezeMode::Pfa,
            n_max: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut cfg = ExperimentConfig::new(
            DataSource::Generator {
                config: SynthConfig::taxi_like(4, 120, 3),
            },
            model,
        );
        cfg.epochs = 1;
        cfg.batch_size = 64;
        cfg.pretrain = Some(PretrainConfig {
            source: SynthConfig::taxi_like(4, 120, 77),
            epochs: 1,
            seed: 9,
        });
        cfg.out_dir = Some(dir.path().to_path_buf());
        let results = sweep_u(&cfg, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(results.len(), 5);
        for (r, u) in results.iter().zip(1..) {
            assert_eq!(r.tag, format!("u{u}"));
            assert!(r.record.test_metrics.is_some());
        }
        assert!(dir.path().join("comparison.csv").exists());
    }

    #[test]
    fn zero_shot_onto_own_data_equals_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Some(dir.path().to_path_buf()));
        let record = train(&cfg).unwrap();
        let ckpt = record.checkpoint.unwrap();
        let direct = evaluate(&cfg, &ckpt).unwrap();
        let transferred = zero_shot(&ckpt, &cfg).unwrap();
        assert_eq!(direct.mae.to_bits(), transferred.mae.to_bits());
        assert_eq!(direct.rmse.to_bits(), transferred.rmse.to_bits());
        assert_eq!(direct.m, transferred.m);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = quick_config(Some(PathBuf::from("/tmp/x")));
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.batch_size, cfg.batch_size);
        assert_eq!(back.model.d, cfg.model.d);
        match back.data {
            DataSource::Generator { config } => assert_eq!(config.seed, 3),
            _ => panic!("wrong data source"),
        }
    }
}
