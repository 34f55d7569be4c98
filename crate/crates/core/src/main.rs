use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmtta::checkpoint::{save_checkpoint, Checkpoint};
use mmtta::datagen::build_stream;
use mmtta::harness::{
    ablation_matrix_with, diagnosis_eval, joint_accuracy, prepare_source, render_summary, run_with_manifest,
    severity_sweep, stream_spec, write_report, ExperimentConfig, RunManifest,
};
use mmtta::model::AdapterBank;
use mmtta::{Error, Result};

/// Redundancy-diagnosed asymmetric test-time adaptation on a synthetic
/// multi-modal task.
#[derive(Parser, Debug)]
#[command(name = "mmtta", version, about)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML experiment config; flags below override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["episodic", "continual", "interleaved"])]
    protocol: Option<String>,
    #[arg(long, global = true, value_name = "MODE", value_parser = [
        "full", "no_stable", "no_plastic", "symmetric_all", "asymmetric_opposite", "source_only",
    ])]
    ablation: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=5))]
    severity: Option<u8>,
    #[arg(long, global = true, value_parser = ["input-gaussian", "rank1-latent"])]
    shift: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the source model and save a checkpoint.
    Pretrain,
    /// Run one adaptation experiment and write its report.
    Adapt,
    /// Score diagnosis quality without adapting.
    Diagnose,
    /// Run every ablation mode on the same stream.
    Ablate,
    /// Rerun an experiment from its manifest.
    Replay {
        /// manifest.json written by `adapt`.
        manifest: PathBuf,
    },
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &o.protocol {
        cfg.stream.protocol = p.parse()?;
    }
    if let Some(a) = &o.ablation {
        cfg.ablation = a.parse()?;
    }
    if let Some(s) = o.severity {
        cfg.stream.severity = s;
    }
    if let Some(s) = &o.shift {
        cfg.stream.shift = s.parse()?;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        let m = RunManifest::load(manifest)?;
        let report = m.replay()?;
        let dir = cli
            .overrides
            .out
            .clone()
            .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
        write_report(&report, &dir)?;
        print!("{}", render_summary(&report));
        eprintln!("replayed stream {} into {}", report.stream_digest, dir.display());
        return Ok(());
    }

    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Pretrain => {
            let dir = out_dir(&cfg, "pretrain");
            ensure_dir(&dir)?;
            let source = prepare_source(&cfg)?;
            let adapters = AdapterBank::fresh(source.config(), cfg.seed);
            let off = vec![false; adapters.len()];
            let accuracy = joint_accuracy(&source.model, &adapters, &source.data.test, &off)?;
            save_checkpoint(
                dir.join("checkpoint.bin"),
                &Checkpoint {
                    model: source.model.clone(),
                    adapters,
                    seed: cfg.seed,
                },
            )?;
            let summary = serde_json::json!({
                "seed": cfg.seed,
                "config_hash": cfg.hash(),
                "clean_accuracy": accuracy,
                "epoch_losses": source.log.as_ref().map(|l| l.epoch_losses.clone()),
            });
            write_json(&dir.join("pretrain.json"), &summary)?;
            println!("clean accuracy {accuracy:.2}%  checkpoint {}", dir.join("checkpoint.bin").display());
        }
        Command::Adapt => {
            let dir = out_dir(&cfg, "adapt");
            let source = prepare_source(&cfg)?;
            let (report, manifest) = run_with_manifest(&cfg, &source)?;
            write_report(&report, &dir)?;
            manifest.save(dir.join("manifest.json"))?;
            print!("{}", render_summary(&report));
        }
        Command::Diagnose => {
            let dir = out_dir(&cfg, "diagnose");
            ensure_dir(&dir)?;
            let source = prepare_source(&cfg)?;
            let stream = build_stream(&stream_spec(&cfg, &source)?, &source.data.test, source.config())?;
            let report = diagnosis_eval(&stream, &source.model, &cfg.adapt)?;
            let sweep = severity_sweep(&cfg, &source)?;
            write_json(
                &dir.join("diagnosis.json"),
                &serde_json::json!({
                    "seed": cfg.seed,
                    "config_hash": cfg.hash(),
                    "stream": report,
                    "severity_sweep": sweep,
                }),
            )?;
            println!("{:>8} {:>10} {:>8}", "severity", "precision", "recall");
            for (s, r) in &sweep {
                let recall = r.recall.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                println!("{s:>8} {:>10.3} {recall:>8}", r.precision);
            }
        }
        Command::Ablate => {
            let dir = out_dir(&cfg, "ablate");
            ensure_dir(&dir)?;
            let source = prepare_source(&cfg)?;
            let table = ablation_matrix_with(&cfg, &source)?;
            write_json(&dir.join("ablation.json"), &table)?;
            let text = table.render();
            std::fs::write(dir.join("ablation.txt"), &text).map_err(|e| Error::Io {
                path: dir.join("ablation.txt"),
                source: e,
            })?;
            print!("{text}");
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Spec(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
