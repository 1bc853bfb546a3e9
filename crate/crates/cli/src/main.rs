//! `uam`: synthesize radiomics tables, train and evaluate the classifier
//! zoo, run ablations, gradient checks, cost reports and the multimodal
//! toy task. Every command writes `resolved_config.txt` under `--out`.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uam_core::data::{SynthSpec, DEFAULT_TRAIN_RATIO};
use uam_core::layers::DEFAULT_LOAD_BALANCE_COEFF;
use uam_core::multimodal::{MultimodalTrainConfig, SegSynthSpec};
use uam_core::train::TrainConfig;
use uam_core::uam::{ModelConfig, Variant};

/// Exit status when a check (gradients, cost agreement) fails.
pub const EXIT_CHECK: u8 = 3;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "uam", version, about = "Radiomics sequence classifiers with attention, scan and expert layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cell table split by individual into train/test CSVs.
    Synth(SynthArgs),
    /// Train a classifier and write a checkpoint, loss trace and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a CSV.
    Eval(EvalArgs),
    /// Sweep block counts or architectures and tabulate test metrics.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and layer.
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP counts per architecture.
    Cost(CostArgs),
    /// Train the image + radiomics segmentation toy and report mask metrics.
    Multimodal(MultimodalArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: uam_core::Error| e.to_string())
}

fn parse_ratio(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Architecture: Trans, Trans-M, Mamba, Mamba-M, Jamba, UAM-L, UAM-M or UAM.
    #[arg(long, value_parser = parse_variant, default_value = "UAM")]
    variant: Variant,
    /// Embedding width.
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    d_model: usize,
    /// Number of stacked blocks.
    #[arg(long, default_value_t = ModelConfig::default().n_blocks)]
    blocks: usize,
    /// Attention heads; must divide the width.
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    heads: usize,
    /// Experts per MoE layer.
    #[arg(long, default_value_t = ModelConfig::default().n_experts)]
    experts: usize,
    /// Experts each token is routed to.
    #[arg(long, default_value_t = ModelConfig::default().top_k)]
    top_k: usize,
    /// Expert hidden width.
    #[arg(long, default_value_t = ModelConfig::default().d_ff)]
    d_ff: usize,
    /// Features per token.
    #[arg(long, default_value_t = ModelConfig::default().token_chunk)]
    token_chunk: usize,
    /// Attention:scan block ratio of the Jamba stack.
    #[arg(long, value_parser = parse_ratio, default_value = "1:3")]
    jamba_ratio: (usize, usize),
    /// Weight of the expert load-balancing loss.
    #[arg(long, default_value_t = DEFAULT_LOAD_BALANCE_COEFF)]
    aux_coeff: f64,
    /// Add sinusoidal positions to the token embeddings.
    #[arg(long)]
    positional: bool,
}

impl ModelArgs {
    fn config(&self, n_features: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_blocks: self.blocks,
            heads: self.heads,
            n_experts: self.experts,
            top_k: self.top_k,
            d_ff: self.d_ff,
            variant: self.variant,
            jamba_attn_ratio: self.jamba_ratio,
            token_chunk: self.token_chunk,
            n_classes,
            n_features,
            load_balance_coeff: self.aux_coeff,
            positional: self.positional,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// AdamW learning rate.
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    /// Seeds initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feed raw features instead of train-set z-scores.
    #[arg(long)]
    no_standardize: bool,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().n_individuals)]
    individuals: usize,
    /// Cells per individual.
    #[arg(long, default_value_t = SynthSpec::default().cells_per_individual)]
    cells: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_features)]
    features: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_classes)]
    classes: usize,
    /// 0 is linearly separable, 1 leaves only a nonlinear signal.
    #[arg(long, default_value_t = 0.0)]
    difficulty: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target share of cells in train.csv.
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    train_ratio: f64,
    /// Output directory for train.csv, test.csv and manifest.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training CSV.
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out CSV scored after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory for model.ckpt, losses.csv and metrics.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for metrics.csv, metrics_report.txt and predictions.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sweep {
    Blocks,
    Variant,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out CSV; without it `--data` is split by individual.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "blocks")]
    sweep: Sweep,
    /// Comma-separated sweep values; defaults to 2,4,6,8 or all eight variants.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    train_ratio: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory for ablation.csv and ablation.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = uam_core::gradsuite::SUITE_SEEDS)]
    seeds: u64,
    /// Negate the backward rule of one primitive (mutation testing).
    #[arg(long, hide = true)]
    inject_sign_flip: Option<String>,
    /// Optional output directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = ModelConfig::default().n_features)]
    features: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_classes)]
    classes: usize,
    /// Sequence length for FLOPs; defaults to the token count of one cell.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Include Trans-M and Mamba-M.
    #[arg(long)]
    all: bool,
    /// Optional output directory for cost.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EncoderArg {
    Toy,
    Frozen,
}

#[derive(Debug, Args)]
struct MultimodalArgs {
    /// Directory of saved training samples; synthesized when absent.
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Directory of saved test samples; synthesized when absent.
    #[arg(long)]
    test_dir: Option<PathBuf>,
    #[arg(long, default_value_t = SegSynthSpec::default().n_samples)]
    train_samples: usize,
    #[arg(long, default_value_t = 32)]
    test_samples: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = SegSynthSpec::default().size)]
    size: usize,
    #[arg(long, default_value_t = SegSynthSpec::default().n_features)]
    features: usize,
    #[arg(long, default_value_t = 1)]
    train_seed: u64,
    #[arg(long, default_value_t = 2)]
    test_seed: u64,
    /// Seeds initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MultimodalTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = MultimodalTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = MultimodalTrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = MultimodalTrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value = "toy")]
    encoder: EncoderArg,
    /// Keep the backbone at its initialization.
    #[arg(long)]
    freeze_backbone: bool,
    /// Also train a copy without radiomics rows and report both.
    #[arg(long)]
    ablate: bool,
    /// Write the samples used under OUT/samples.
    #[arg(long)]
    save_samples: bool,
    #[arg(long)]
    out: PathBuf,
}

/// A check ran to completion and failed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    match err.downcast_ref::<uam_core::Error>() {
        Some(uam_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Cost(a) => commands::cost(a),
        Command::Multimodal(a) => commands::multimodal(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
