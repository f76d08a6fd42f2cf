//! `avmil`: generate synthetic bags, train, evaluate and localize.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "avmil", version, about = "Weakly supervised audio-visual MIL: generate, train, evaluate, localize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted asynchronous evidence.
    Gen {
        /// TOML file with the same keys as the flags; flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: GenSettings,
    },
    /// Train a model into a new timestamped run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Tune thresholds on the validation split and report test F1.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: EvalSettings,
    },
    /// Export per-proposal heatmaps and hit@k against planted ground truth.
    Localize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: LocalizeSettings,
    },
}

/// Unset fields take the synthetic generator's defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSettings {
    /// Output directory [default: $AVMIL_OUT/data, else runs/data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of classes [default: 5]
    #[arg(long, value_parser = positive)]
    pub classes: Option<usize>,
    /// [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 200]
    #[arg(long)]
    pub train_bags: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    pub val_bags: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    pub test_bags: Option<usize>,
    /// Visual proposals per bag [default: 20]
    #[arg(long)]
    pub proposals: Option<usize>,
    /// Audio segments per bag [default: 10]
    #[arg(long)]
    pub segments: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub visual_dim: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub audio_dim: Option<usize>,
    /// Planted signal scale [default: 3]
    #[arg(long)]
    pub signal: Option<f64>,
    /// Background noise standard deviation [default: 1]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Planted visual proposals per positive class [default: 3]
    #[arg(long)]
    pub planted_visual: Option<usize>,
    /// Planted audio segments per positive class [default: 2]
    #[arg(long)]
    pub planted_audio: Option<usize>,
    /// Probability of each extra label [default: 0.1]
    #[arg(long)]
    pub multi_label: Option<f64>,
}

/// Unset fields take the preset's values.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Dataset directory holding train.jsonl and optionally val.jsonl
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output root [default: $AVMIL_OUT, else runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// desk: 2000 iterations, lr 2e-3, small towers; full: 25000 iterations,
    /// lr 1e-5, full-width towers. Both use batch 24 and dropout 0.5 [default: desk]
    #[arg(long, value_parser = PossibleValuesParser::new(["desk", "full"]))]
    pub preset: Option<String>,
    /// [default: two_stream]
    #[arg(long, value_parser = PossibleValuesParser::new(["two_stream", "one_stream", "wsddn_type"]))]
    pub model: Option<String>,
    /// [default: av]
    #[arg(long, value_parser = PossibleValuesParser::new(["av", "visual_only", "audio_only"]))]
    pub mode: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Per-class cap of the balanced sampling list [default: median class count]
    #[arg(long)]
    pub cap: Option<usize>,
    /// Validate every this many steps
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Hidden widths of the visual tower, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub visual_hidden: Option<Vec<usize>>,
    /// Hidden widths of the audio tower, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub audio_hidden: Option<Vec<usize>>,
    /// Resume from this checkpoint; only --iters, --data and --out apply
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Dataset directory holding val.jsonl and test.jsonl
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file, or a run directory (best.ckpt, else final.ckpt)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output root [default: $AVMIL_OUT, else runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeSettings {
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file, or a run directory (best.ckpt, else final.ckpt)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output root [default: $AVMIL_OUT, else runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: test]
    #[arg(long, value_parser = PossibleValuesParser::new(["train", "val", "test"]))]
    pub split: Option<String>,
    /// Export only this class, by its manifest name [default: every class]
    #[arg(long)]
    pub class_name: Option<String>,
    /// Second cutoff of the hit table, next to hit@1 [default: 3]
    #[arg(long, value_parser = positive)]
    pub topk: Option<usize>,
    /// Visual proposals per frame, for the frame column [default: 10]
    #[arg(long, value_parser = positive)]
    pub proposals_per_frame: Option<usize>,
    /// Audio segment stride in seconds, for the start column [default: 0.48]
    #[arg(long)]
    pub segment_stride: Option<f64>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("usage error");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen { config, settings } => commands::gen(config.as_deref(), &settings),
        Command::Train { config, settings } => commands::train(config.as_deref(), &settings),
        Command::Eval { config, settings } => commands::eval(config.as_deref(), &settings),
        Command::Localize { config, settings } => commands::localize(config.as_deref(), &settings),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
