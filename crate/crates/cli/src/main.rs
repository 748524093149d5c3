use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tavlo_core::evaluation::{scenario_report, MetricsReport};
use tavlo_core::harness::{
    config_diff, evaluate, evaluate_oracle, export_heatmaps, external_records, load_manifest_clips, sample_media,
    train, write_manifest, write_suite, Checkpoint, ClipTensors, RunConfig, TrainOptions,
};
use tavlo_core::synthetic::{make_suite, Split};
use tavlo_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tavlo", version, about = "Temporal audio-visual localization toolkit")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the optimizer and synthetic-suite seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Refuse anything that would make results depend on wall time.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic suite with per-split manifests.
    Generate,
    /// Sample clips and key frames from a media directory into a manifest.
    Sample(SampleArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute the scenario report for a checkpoint or external heatmaps.
    Evaluate(EvaluateArgs),
    /// Write grayscale and overlay heatmap images for labeled frames.
    ExportHeatmaps(ExportArgs),
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Directory holding `audio.wav` and `frames.t4` or `frames/`.
    #[arg(long)]
    media: PathBuf,
    /// Number of clips to draw from the candidates.
    #[arg(long, default_value_t = 1)]
    clips: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Train on an in-memory synthetic suite built from the config.
    #[arg(long)]
    synthetic: bool,
    /// Stop after this many seconds of training.
    #[arg(long)]
    time_budget: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Use ground-truth masks as heatmaps.
    #[arg(long)]
    oracle: bool,
    /// Evaluate heatmaps from `{clip_id}.t4` or `{clip_id}_{frame}.png` files.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
    /// Value range spanned by 16-bit PNG codes 0..=65535.
    #[arg(long, num_args = 2, default_values_t = [-1.0, 1.0], allow_negative_numbers = true)]
    png_range: Vec<f64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } => 2,
        Error::Numerical { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.optimizer.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn missing(field: &'static str) -> Error {
    Error::InvalidConfig {
        module: "harness",
        field,
        message: "no manifest given on the command line or in the config".into(),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            create_out(&cli.out)?;
            let syn = &cfg.data.synthetic;
            let clips = make_suite(syn.seed, syn.counts, cfg.scene_geometry(), syn.splits)?;
            let manifests = write_suite(&cli.out, &clips)?;
            for m in manifests {
                println!("{}", m.display());
            }
            Ok(())
        }
        Command::Sample(args) => {
            create_out(&cli.out)?;
            let seed = cli.seed.unwrap_or(cfg.optimizer.seed);
            let (records, warnings) = sample_media(&args.media, &cfg, args.clips, seed)?;
            for w in warnings {
                log::warn!("{w}");
            }
            let path = cli.out.join("manifest.jsonl");
            write_manifest(&path, &records)?;
            println!("{} clips -> {}", records.len(), path.display());
            Ok(())
        }
        Command::Train(args) => {
            create_out(&cli.out)?;
            let (train_clips, val_clips) = if args.synthetic {
                let syn = &cfg.data.synthetic;
                let suite = make_suite(syn.seed, syn.counts, cfg.scene_geometry(), syn.splits)?;
                let pick = |split: Split| -> Result<Vec<ClipTensors>, Error> {
                    suite
                        .iter()
                        .filter(|c| c.split == split)
                        .map(|c| ClipTensors::from_labeled(c, &cfg))
                        .collect()
                };
                (pick(Split::Train)?, pick(Split::Val)?)
            } else {
                let train_path = args
                    .train_manifest
                    .clone()
                    .or_else(|| cfg.data.train_manifest.clone())
                    .ok_or_else(|| missing("train_manifest"))?;
                let val = match args.val_manifest.clone().or_else(|| cfg.data.val_manifest.clone()) {
                    Some(p) => load_manifest_clips(&p, &cfg)?,
                    None => Vec::new(),
                };
                (load_manifest_clips(&train_path, &cfg)?, val)
            };
            if cli.deterministic && args.time_budget.is_some() {
                return Err(Error::InvalidConfig {
                    module: "harness",
                    field: "time_budget",
                    message: "a wall-time budget cannot be combined with --deterministic".into(),
                });
            }
            let opts = TrainOptions {
                out_dir: Some(cli.out.clone()),
                time_budget_seconds: args.time_budget,
            };
            let ckpt = train(&cfg, &train_clips, &val_clips, &opts)?;
            println!(
                "trained {} steps on {} clips; final loss {}",
                ckpt.step,
                train_clips.len(),
                ckpt.history.last().map(|h| format!("{:.5}", h.loss)).unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let ckpt = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let data_cfg = match (&ckpt, &cli.config) {
                (Some(ck), Some(_)) => {
                    let diff = config_diff(&ck.config.model, &cfg.model);
                    if !diff.is_empty() {
                        return Err(Error::InvalidConfig {
                            module: "harness",
                            field: "model",
                            message: format!("checkpoint and config disagree: {}", diff.join("; ")),
                        });
                    }
                    cfg.clone()
                }
                (Some(ck), None) => ck.config.clone(),
                (None, _) => cfg.clone(),
            };
            let manifest = args
                .manifest
                .clone()
                .or_else(|| data_cfg.data.test_manifest.clone())
                .ok_or_else(|| missing("test_manifest"))?;
            let clips = load_manifest_clips(&manifest, &data_cfg)?;
            let report: MetricsReport = if args.oracle {
                evaluate_oracle(&clips, &cfg.eval)?
            } else if let Some(dir) = &args.heatmap_dir {
                let range = (args.png_range[0], args.png_range[1]);
                scenario_report(&external_records(&clips, dir, range)?, &cfg.eval)?
            } else {
                let ck = ckpt.as_ref().ok_or_else(|| Error::InvalidConfig {
                    module: "harness",
                    field: "checkpoint",
                    message: "evaluate needs --checkpoint, --oracle or --heatmap-dir".into(),
                })?;
                evaluate(ck, &clips, &cfg.eval)?
            };
            create_out(&cli.out)?;
            report.save(&cli.out.join("report.jsonl"))?;
            let table = report.table();
            std::fs::write(cli.out.join("report.txt"), &table).map_err(|e| Error::Io {
                path: cli.out.join("report.txt"),
                source: e,
            })?;
            print!("{table}");
            Ok(())
        }
        Command::ExportHeatmaps(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let manifest = args
                .manifest
                .clone()
                .or_else(|| ckpt.config.data.test_manifest.clone())
                .or_else(|| cfg.data.test_manifest.clone())
                .ok_or_else(|| missing("test_manifest"))?;
            let clips = load_manifest_clips(&manifest, &ckpt.config)?;
            let n = export_heatmaps(&ckpt, &clips, &cli.out)?;
            println!("{n} frames -> {}", cli.out.display());
            Ok(())
        }
    }
}
