//! Command-line front end. All real work lives in the library; this binary
//! parses arguments, applies overrides to a JSON experiment config, and maps
//! errors to exit codes (0 ok, 2 config, 3 data, 4 numerical).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use st_llm::data::io as data_io;
use st_llm::data::synth::{self, SynthConfig};
use st_llm::error::{Error, Result};
use st_llm::harness::{self, DataSource, ExperimentConfig};
use st_llm::model::FreezeMode;

#[derive(Parser)]
#[command(name = "stllm", version, about = "Spatial-temporal traffic forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic traffic series and write it to disk.
    GenData(GenDataArgs),
    /// Train the transformer stack on a synthetic source corpus.
    Pretrain(RunArgs),
    /// Supervised training with early stopping; writes run artifacts.
    Train(RunArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval(EvalArgs),
    /// Train on a chronological prefix of the training split.
    FewShot(FewShotArgs),
    /// Evaluate a source checkpoint on a different dataset without updates.
    ZeroShot(EvalArgs),
    /// Run a list of model variants and emit a comparison table.
    Ablate(AblateArgs),
    /// Partially-frozen-attention runs over a range of unfrozen depths.
    SweepU(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON generator config (n, t, seed, base_level, daily_amp, weekly_amp, noise_std).
    #[arg(long, conflicts_with = "profile")]
    gen_config: Option<PathBuf>,
    /// Built-in profile: `taxi` or `bike`.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 2016)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; `.csv` writes the text format, anything else the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Replace the data source with this file (.csv or binary).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    interval_minutes: u32,
    #[arg(long, default_value_t = synth::START_EPOCH)]
    start_epoch: i64,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// pfa | fpt | full_tuning | no_pretrain | full_layer
    #[arg(long)]
    freeze_mode: Option<String>,
    /// Unfreeze the last U attention layers (sets F = L - U).
    #[arg(long)]
    u: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FewShotArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fraction of training windows to keep (chronological prefix).
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variant tags, e.g. full,wo_t,wo_s,wo_st,wo_llm,fpt.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Largest U to try; runs U = 1..=max_u.
    #[arg(long)]
    max_u: usize,
}

fn parse_freeze_mode(s: &str) -> Result<FreezeMode> {
    match s {
        "pfa" => Ok(FreezeMode::Pfa),
        "fpt" => Ok(FreezeMode::Fpt),
        "full_tuning" => Ok(FreezeMode::FullTuning),
        "no_pretrain" => Ok(FreezeMode::NoPretrain),
        "full_layer" => Ok(FreezeMode::FullLayer),
        other => Err(Error::Config(format!(
            "unknown freeze mode `{other}` (expected pfa, fpt, full_tuning, no_pretrain, full_layer)"
        ))),
    }
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_json_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            cfg.batch_size = batch;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if let Some(dropout) = self.dropout {
            cfg.model.dropout = dropout;
        }
        if let Some(path) = &self.data {
            cfg.data = match path.extension().and_then(|e| e.to_str()) {
                Some("csv") => DataSource::Csv {
                    paths: vec![path.clone()],
                    interval_minutes: self.interval_minutes,
                    start_epoch: self.start_epoch,
                },
                _ => DataSource::Binary { path: path.clone() },
            };
        }
        if let Some(p) = &self.pretrained {
            cfg.pretrained_checkpoint = Some(p.clone());
        }
        if let Some(mode) = &self.freeze_mode {
            cfg.model.freeze_mode = parse_freeze_mode(mode)?;
        }
        if let Some(u) = self.u {
            if u == 0 || u > cfg.model.layers {
                return Err(Error::Config(format!(
                    "u must be in 1..={}, got {u}",
                    cfg.model.layers
                )));
            }
            cfg.model.unfrozen_layers = u;
            cfg.model.frozen_layers = cfg.model.layers - u;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => {
            let gen = if let Some(path) = &args.gen_config {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str::<SynthConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            } else {
                match args.profile.as_deref() {
                    Some("taxi") | None => SynthConfig::taxi_like(args.n, args.t, args.seed),
                    Some("bike") => SynthConfig::bike_like(args.n, args.t, args.seed),
                    Some(other) => {
                        return Err(Error::Config(format!(
                            "unknown profile `{other}` (expected taxi or bike)"
                        )))
                    }
                }
            };
            let tt = synth::generate(&gen)?;
            match args.out.extension().and_then(|e| e.to_str()) {
                Some("csv") => data_io::save_csv(&tt, &[args.out.as_path()])?,
                _ => data_io::save_binary(&tt, &args.out)?,
            }
            println!(
                "wrote {} ({} steps x {} stations x {} channels)",
                args.out.display(),
                tt.timesteps(),
                tt.stations(),
                tt.channels()
            );
        }
        Cmd::Pretrain(args) => {
            let mut cfg = args.load()?;
            if cfg.pretrain.is_none() {
                cfg.pretrain = Some(harness::PretrainConfig::default_for(cfg.model.n_max, cfg.seed));
            }
            let (path, record) = harness::pretrain_source(&cfg)?;
            println!(
                "pretrained checkpoint: {} (val MAE {:.4} -> {:.4})",
                path.display(),
                record.initial_val_mae,
                record.val_mae.last().copied().unwrap_or(f64::NAN)
            );
        }
        Cmd::Train(args) => {
            let cfg = args.load()?;
            let record = harness::train(&cfg)?;
            let m = record.test_metrics.as_ref().unwrap();
            println!(
                "trained {} epochs (best {}), test MAE {:.4} RMSE {:.4} MAPE {:.2}% WAPE {:.2}%",
                record.epochs_run, record.best_epoch, m.mae, m.rmse, m.mape_pct, m.wape_pct
            );
        }
        Cmd::Eval(args) => {
            let cfg = args.run.load()?;
            let m = harness::evaluate(&cfg, &args.checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&m).unwrap());
        }
        Cmd::FewShot(args) => {
            let mut cfg = args.run.load()?;
            if let Some(f) = args.fraction {
                cfg.few_shot_fraction = f;
            }
            let record = harness::few_shot(&cfg)?;
            let m = record.test_metrics.as_ref().unwrap();
            println!(
                "few-shot ({:.0}%) test MAE {:.4} RMSE {:.4} MAPE {:.2}% WAPE {:.2}%",
                100.0 * cfg.few_shot_fraction,
                m.mae,
                m.rmse,
                m.mape_pct,
                m.wape_pct
            );
        }
        Cmd::ZeroShot(args) => {
            let cfg = args.run.load()?;
            let m = harness::zero_shot(&args.checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&m).unwrap());
        }
        Cmd::Ablate(args) => {
            let cfg = args.run.load()?;
            if args.variants.is_empty() {
                return Err(Error::Config("ablate needs at least one --variants tag".into()));
            }
            let tags: Vec<&str> = args.variants.iter().map(|s| s.as_str()).collect();
            let results = harness::ablate(&cfg, &tags)?;
            print_table(&results);
        }
        Cmd::SweepU(args) => {
            let cfg = args.run.load()?;
            if args.max_u == 0 || args.max_u >= cfg.model.layers {
                return Err(Error::Config(format!(
                    "max_u must be in 1..{} for L = {}",
                    cfg.model.layers, cfg.model.layers
                )));
            }
            let us: Vec<usize> = (1..=args.max_u).collect();
            let results = harness::sweep_u(&cfg, &us)?;
            print_table(&results);
        }
    }
    Ok(())
}

fn print_table(results: &[harness::VariantResult]) {
    println!("tag,mae,rmse,mape_pct,wape_pct,trainable_params,frozen_params,sec_per_batch");
    for r in results {
        if let Some(m) = &r.record.test_metrics {
            println!(
                "{},{:.6},{:.6},{:.4},{:.4},{},{},{:.6}",
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
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
