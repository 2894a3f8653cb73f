use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use orbitkd::data::{write_dataset_patch, SynthConfig};
use orbitkd::error::Error;
use orbitkd::harness::{
    apply_override, benchmark_student, benchmark_teacher, emit_report, evaluate, load_splits, synthetic_patches, train,
    DataSource, EvalModel, EvalProtocol, Network, TrainConfig,
};

#[derive(Parser)]
#[command(name = "orbitkd", version, about = "Multi-modal teacher, single-frame student and panoptic evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic patches in the dataset directory layout.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Number of patches.
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Seed of the first patch; patch i uses seed `first_seed + i`.
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Folds assigned round-robin.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Synthetic generator settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides applied on top of the config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train from a config file; writes checkpoint, loss log and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Dataset directory; all patches are used unless `--folds` is given.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        /// Train config whose validation split is scored.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the single-frame choice.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Writes `<stem>.json` and `<stem>.csv` next to each other.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward latency of the student on one frame and the teacher on a series.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Collect run directories into tables, figures and a manifest.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Student,
    Teacher,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Protocol {
    TimeSeries,
    SingleFrame,
}

fn synth_config(path: Option<&Path>, overrides: &[String]) -> Result<SynthConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: SynthConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("synthetic config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn generate(out: &Path, count: u64, first_seed: u64, folds: usize, synth: &SynthConfig) -> Result<()> {
    if folds == 0 {
        return Err(Error::Config("folds must be at least 1".into()).into());
    }
    for (i, seed) in (first_seed..first_seed + count).enumerate() {
        let p = &synthetic_patches(synth, [seed])?[0];
        write_dataset_patch(out, &p.series, &p.target, Some(1 + i % folds))?;
    }
    std::fs::write(out.join("synth.toml"), toml::to_string(synth)?)?;
    info!("wrote {count} patches to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            count,
            first_seed,
            folds,
            config,
            overrides,
        } => {
            let synth = synth_config(config.as_deref(), &overrides)?;
            generate(&out, count, first_seed, folds, &synth)
        }
        Command::Train {
            config,
            seed,
            output,
            mut overrides,
        } => {
            overrides.push(format!("seed={seed}"));
            let mut cfg = TrainConfig::load(&config, &overrides)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let out = train(&cfg)?;
            println!(
                "{} steps; checkpoint {}",
                out.info.steps,
                cfg.output_dir.join("checkpoint.safetensors").display()
            );
            for e in &out.evaluations {
                println!(
                    "{} {}: PQ {:.2} SQ {:.2} RQ {:.2}",
                    e.model.as_str(),
                    e.protocol.as_str(),
                    100.0 * e.report.average.pq,
                    100.0 * e.report.average.sq,
                    100.0 * e.report.average.rq
                );
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            model,
            protocol,
            data,
            folds,
            config,
            seed,
            batch_size,
            out,
        } => {
            let (net, _) = Network::load(&checkpoint, DType::F32)?;
            let patches = match (data, config) {
                (Some(root), None) => {
                    let folds = if folds.is_empty() {
                        let mut all: Vec<usize> = orbitkd::data::read_folds(&root)?.into_iter().map(|(_, f)| f).collect();
                        all.sort_unstable();
                        all.dedup();
                        all
                    } else {
                        folds
                    };
                    let source = DataSource::Directory {
                        root,
                        train_folds: folds,
                        val_folds: Vec::new(),
                        orbit: Default::default(),
                    };
                    load_splits(&source, net.config())?.train
                }
                (None, Some(path)) => {
                    let cfg = TrainConfig::load(&path, &[])?;
                    load_splits(&cfg.data, net.config())?.val
                }
                _ => return Err(Error::Config("evaluate needs --data or --config".into()).into()),
            };
            let model = match model {
                Model::Student => EvalModel::Student,
                Model::Teacher => EvalModel::Teacher,
            };
            let protocol = match protocol {
                Protocol::TimeSeries => EvalProtocol::TimeSeries,
                Protocol::SingleFrame => EvalProtocol::SingleFrame,
            };
            let (report, _) = evaluate(&net, model, &patches, protocol, seed, batch_size)?;
            if let Some(stem) = out {
                if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(stem.with_extension("json"), report.to_json()?)?;
                std::fs::write(stem.with_extension("csv"), report.to_csv())?;
            }
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Benchmark {
            checkpoint,
            frames,
            size,
            repeats,
            warmup,
        } => {
            let (net, _) = Network::load(&checkpoint, DType::F32)?;
            let m = net.config();
            if m.radar_channels % 2 != 0 {
                return Err(Error::Config("benchmark sample needs an even radar channel count".into()).into());
            }
            let synth = SynthConfig {
                height: size,
                width: size,
                t_range: (frames, frames),
                n_classes: m.n_classes,
                multispec_channels: m.multispec_channels,
                radar_channels_per_orbit: m.radar_channels / 2,
                ..SynthConfig::default()
            };
            synth.validate()?;
            let sample = &synthetic_patches(&synth, [0])?[0];
            if net.student().is_some() {
                let s = benchmark_student(&net, &sample.series.frame(0), warmup, repeats)?;
                println!("student single frame: median {:.4}s spread {:.4}s", s.median, s.spread);
            }
            if net.teacher().is_some() {
                let t = benchmark_teacher(&net, &sample.series, warmup, repeats)?;
                println!("teacher {frames} frames: median {:.4}s spread {:.4}s", t.median, t.spread);
            }
            Ok(())
        }
        Command::Report { results, out } => {
            let manifest = emit_report(&results, &out)?;
            println!("{} runs reported to {}", manifest.runs.len(), out.display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Error>()) else {
        return if err.chain().any(|e| e.is::<std::io::Error>()) { 3 } else { 1 };
    };
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite { .. } => 4,
        Error::Data { .. }
        | Error::Io(_)
        | Error::Dimension(_)
        | Error::Alignment(_)
        | Error::Target(_)
        | Error::Generation(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("orbitkd") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
