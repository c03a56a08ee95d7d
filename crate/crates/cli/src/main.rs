//! `avseg` — command-line front end for the audio-visual segmentation
//! pipeline: dataset generation, training, evaluation, ablation grids,
//! hyperparameter sweeps, corpus analysis, and embedding export.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use avseg_core::harness::{
    ablate, build_dataset, evaluate_checkpoint, export_embeddings, generate_dataset_to_dir,
    load_checkpoint, sweep, train_resumable, AblationAxis, ExperimentConfig, SweepParam,
};
use avseg_core::metrics::corpus_complexity;

#[derive(Parser)]
#[command(name = "avseg", about = "Audio-visual segmentation training pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Compute device id; only 0 (CPU) exists in this build.
    #[arg(long, default_value_t = 0)]
    device: u32,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset on disk in the AVSBench directory layout.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Split directory to write (see the dataset layout).
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model; optionally resume from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one run per row of an ablation axis and tabulate J/F/J&F.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of: components, granularity, cf-dimension, cf-space,
        /// contrast-pairs, contrast-mode, pair-swap.
        #[arg(long)]
        axis: String,
    },
    /// Sweep one hyperparameter and report J&F per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: k_c, alpha_o, s_d, r_a, r_v.
        #[arg(long)]
        param: String,
        /// Comma-separated values ("inf" allowed for r_a).
        #[arg(long)]
        values: String,
    },
    /// Per-clip visual/audio complexity table with quadrant labels.
    AnalyzeCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Dump pre/post-alignment embeddings for external visualization.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, String> {
    if common.device != 0 {
        return Err(format!("device {} does not exist; this build is CPU-only", common.device));
    }
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| format!("cannot read {}: {e}", common.config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate().map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    match Cli::parse().cmd {
        Cmd::GenData { common, split } => {
            let cfg = load_config(&common)?;
            let split = serde_json::from_value(serde_json::Value::String(split))
                .map_err(|e| format!("bad split: {e}"))?;
            let n = generate_dataset_to_dir(&cfg.data, cfg.encoder.resolution, &common.out, split)
                .map_err(|e| e.to_string())?;
            println!("wrote {n} clips under {}", common.out.display());
        }
        Cmd::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let artifacts = train_resumable(&cfg, &common.out, resume.as_deref())
                .map_err(|e| e.to_string())?;
            print!("{}", artifacts.report.to_text());
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("metrics log: {}", artifacts.metrics_log.display());
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let clips =
                build_dataset(&cfg.data, cfg.encoder.resolution).map_err(|e| e.to_string())?;
            let report =
                evaluate_checkpoint(&checkpoint, &cfg, &clips).map_err(|e| e.to_string())?;
            print!("{}", report.to_text());
        }
        Cmd::Ablate { common, axis } => {
            let cfg = load_config(&common)?;
            let axis = AblationAxis::from_str(&axis).map_err(|e| e.to_string())?;
            let rows = ablate(&cfg, axis, &common.out).map_err(|e| e.to_string())?;
            println!("# {axis}: label J F J&F");
            for row in rows {
                println!(
                    "{} {:.2} {:.2} {:.2}",
                    row.label, row.report.j, row.report.f, row.report.jf
                );
            }
        }
        Cmd::Sweep { common, param, values } => {
            let cfg = load_config(&common)?;
            let param = SweepParam::from_str(&param).map_err(|e| e.to_string())?;
            let values = values
                .split(',')
                .map(|v| match v.trim() {
                    "inf" => Ok(f64::INFINITY),
                    other => other.parse::<f64>().map_err(|e| format!("bad value '{other}': {e}")),
                })
                .collect::<Result<Vec<f64>, String>>()?;
            let points = sweep(&cfg, param, &values, &common.out).map_err(|e| e.to_string())?;
            println!("# {param:?}: value J&F");
            for p in points {
                println!("{} {:.2}", p.value, p.jf);
            }
        }
        Cmd::AnalyzeCorpus { common } => {
            let cfg = load_config(&common)?;
            let clips =
                build_dataset(&cfg.data, cfg.encoder.resolution).map_err(|e| e.to_string())?;
            let rows = corpus_complexity(&clips).map_err(|e| e.to_string())?;
            println!("# clip_id visual_mse audio_melchange quadrant");
            for r in rows {
                println!("{} {:.6} {:.6} {}", r.clip_id, r.visual_mse, r.audio_melchange, r.quadrant);
            }
        }
        Cmd::ExportEmbeddings { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let clips =
                build_dataset(&cfg.data, cfg.encoder.resolution).map_err(|e| e.to_string())?;
            let (model, _) = load_checkpoint(&checkpoint, &cfg).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&common.out).map_err(|e| e.to_string())?;
            let matrix = common.out.join("embeddings.f32");
            let sidecar = common.out.join("embeddings.json");
            export_embeddings(&model, &cfg, &clips, &matrix, &sidecar)
                .map_err(|e| e.to_string())?;
            println!("wrote {} and {}", matrix.display(), sidecar.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
