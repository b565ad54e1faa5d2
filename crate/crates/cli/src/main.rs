//! `macil`: synthesize data, train, evaluate, plot and inspect parameter counts.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use macil_core::eval::{evaluate, export_embeddings, export_scores, read_scores, render_score_svg};
use macil_core::features::{load_manifest, VideoRecord};
use macil_core::network::parameter_counts;
use macil_core::synth::generate_dataset;
use macil_core::trainer::{fit, load_checkpoint, RunDir};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "macil", version, about = "Audio-visual violence detection with semi-bag contrastive learning and self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=30`. Repeatable; applied after MACIL_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: feature files plus train/test manifests.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset directory (or train manifest); writes metrics and a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory (or test manifest).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scores CSV as SVG score tracks.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable parameter counts of the AV network (light) and AV plus twin (full).
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("--{name} is required (or set \"{name}\" in the config)"))
}

/// A directory resolves to `<dir>/<default_name>`; manifest feature paths are relative to its directory.
fn manifest_records(data: &Path, default_name: &str) -> Result<Vec<VideoRecord>> {
    let manifest = if data.is_dir() { data.join(default_name) } else { data.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new("."));
    Ok(load_manifest(&manifest, root)?.records)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.resolve()?;
            let out = required(out, &cfg.out, "out")?;
            let dataset = generate_dataset(&cfg.synth_config())?;
            dataset.write(&out)?;
            write(&out.join("config.json"), cfg.to_json()?)?;
            println!("wrote {} videos to {}", dataset.videos.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let data = required(data, &cfg.data, "data")?;
            let out = required(out, &cfg.out, "out")?;
            let records = manifest_records(&data, "train.jsonl")?;
            let first = records.first().context("training manifest is empty")?;
            let (d_audio, d_visual) = (first.audio.dim(), first.visual.dim());
            for (key, given, found) in [("d_audio", cfg.d_audio, d_audio), ("d_visual", cfg.d_visual, d_visual)] {
                if given.is_some_and(|g| g != found) {
                    bail!("config {key}={} does not match the data's {found}-d features", given.unwrap());
                }
            }
            let resolved = RunConfig {
                d_audio: Some(d_audio),
                d_visual: Some(d_visual),
                data: Some(data),
                out: Some(out.clone()),
                ..cfg
            };
            create_dir(&out)?;
            write(&out.join("config.json"), resolved.to_json()?)?;
            let net = resolved.network_config(d_audio, d_visual);
            let run = RunDir::new(&out);
            let outcome = fit(&resolved.train_config(), &net, &records, Some(&run))?;
            if let Some(last) = outcome.state.history.last() {
                println!(
                    "epoch {}: bce {:.6} acc {:.4}; checkpoint {}",
                    last.epoch,
                    last.bce,
                    last.acc,
                    run.checkpoint().display()
                );
            } else {
                println!("no epochs run; metrics header written to {}", run.metrics().display());
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let records = manifest_records(&data, "test.jsonl")?;
            let report = evaluate(&ckpt.state.params, &ckpt.net, &records)?;
            create_dir(&out)?;
            write(&out.join("report.json"), serde_json::to_string_pretty(&report.summary())? + "\n")?;
            export_scores(&report, out.join("scores.csv"))?;
            export_embeddings(&report, out.join("embeddings.csv"))?;
            match report.frame_ap {
                Some(ap) => println!("frame AP {ap:.6}; video accuracy {:.4}", report.video_accuracy),
                None => println!("frame AP unavailable; video accuracy {:.4}", report.video_accuracy),
            }
        }
        Command::Plot { scores, out } => {
            let rows = read_scores(&scores)?;
            write(&out, render_score_svg(&rows))?;
        }
        Command::Params { config } => {
            let cfg = config.resolve()?;
            let net = cfg.default_network();
            net.validate()?;
            let (light, full) = parameter_counts(&net);
            println!("light {light}");
            println!("full {full}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
