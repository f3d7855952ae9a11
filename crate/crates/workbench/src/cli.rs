//! Argument structs. Each doubles as the JSON config schema of its
//! subcommand: every field except `config`, `jobs` and `print_config` can be
//! set from a `--config` file, and flags given on the command line win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "iforge", version, about = "Interaction laboratory for adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Craft a perturbation on one dataset sample.
    Attack(AttackArgs),
    /// Pairwise interactions and order profile of a stored perturbation.
    Analyze(AnalyzeArgs),
    /// Run theorem checks and write their reports.
    Verify(VerifyArgs),
    /// Transfer utility vs interaction across penalized attacks.
    Correlate(CorrelateArgs),
    /// Train a ReLU network (optionally adversarially, optionally IA-finetuned).
    Train(TrainArgs),
    /// Generate a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Summarize stored check reports.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Attack(_) => "attack",
            Command::Analyze(_) => "analyze",
            Command::Verify(_) => "verify",
            Command::Correlate(_) => "correlate",
            Command::Train(_) => "train",
            Command::GenData(_) => "gen-data",
            Command::Report(_) => "report",
        }
    }
}

/// Flags every subcommand accepts; not part of the config schema.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Runtime {
    /// JSON config (`"schema": 1`); command-line flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub jobs: usize,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    #[serde(skip)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// gaussian-blobs | ring | grid-texture
    #[arg(long, default_value = "gaussian-blobs")]
    pub generator: String,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Input dimension (blobs).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Distance of the class centers from the origin (blobs).
    #[arg(long, default_value_t = 2.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Image height (grid-texture).
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    /// Image width (grid-texture).
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset JSON written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// plain | residual
    #[arg(long, default_value = "plain")]
    pub arch: String,
    /// Hidden widths, comma separated (residual nets: each equals the input width).
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Train only on the first `train_split` samples (0 = all).
    #[arg(long, default_value_t = 0)]
    pub train_split: usize,
    /// L2 radius of the inner attack for adversarial training (0 = normal training).
    #[arg(long, default_value_t = 0.0)]
    pub adv_epsilon: f64,
    /// Inner attack steps for adversarial training.
    #[arg(long, default_value_t = 8)]
    pub adv_steps: usize,
    /// Single sigmoid logit instead of a softmax head (two-class data only).
    #[arg(long)]
    pub sigmoid: bool,
    /// IA finetuning steps after training (0 = none).
    #[arg(long, default_value_t = 0)]
    pub ia_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub ia_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "net.json")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackArgs {
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample index in the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// single | multi | pgd | closed-form | mi | mi-normalized | vr | pi | rap | il | linbp | sgm | ir
    #[arg(long, default_value = "multi")]
    pub method: String,
    /// Step size; defaults to `beta / m`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Accumulated step size `α·m` (used when `alpha` is unset).
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// unconstrained | l2 | linf
    #[arg(long, default_value = "unconstrained")]
    pub norm: String,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    /// Step along the gradient sign.
    #[arg(long)]
    pub sign: bool,
    /// Keep the trajectory in the output.
    #[arg(long)]
    pub record: bool,
    /// closed-form: use the infinite-step limit.
    #[arg(long)]
    pub infinite: bool,
    /// mi-normalized: momentum decay.
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// vr: noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// vr: antithetic noise pairs.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    /// vr: step scale η.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// pi: plain steps before redistribution (default m/2).
    #[arg(long)]
    pub m1: Option<usize>,
    /// pi: per-pixel budget that triggers redistribution.
    #[arg(long, default_value_t = 0.05)]
    pub pi_epsilon: f64,
    /// pi: neighborhood size, 4 or 8.
    #[arg(long, default_value_t = 4)]
    pub pi_k: usize,
    /// rap: inner descent steps.
    #[arg(long, default_value_t = 5)]
    pub m_r: usize,
    /// rap: L2 budget of the reverse perturbation.
    #[arg(long)]
    pub epsilon_r: Option<f64>,
    /// il: base strength is beta / il_ratio.
    #[arg(long, default_value_t = 10.0)]
    pub il_ratio: f64,
    /// linbp: first ReLU layer (0-based) that back-propagates linearly.
    #[arg(long, default_value_t = 0)]
    pub from: usize,
    /// sgm: residual-branch decay.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// ir: penalty weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// ir: grid side (units = grid × grid).
    #[arg(long, default_value_t = 3)]
    pub grid: usize,
    /// ir: unit pairs sampled per step.
    #[arg(long, default_value_t = 16)]
    pub pair_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (attack.json, delta.dat).
    #[arg(long, default_value = "out/attack")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// attack.json whose delta is analyzed.
    #[arg(long)]
    pub attack: Option<PathBuf>,
    /// Sample index the attack was run on.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Grid side for image data (0 = one unit per input coordinate).
    #[arg(long, default_value_t = 0)]
    pub grid: usize,
    /// loss-gap | margin
    #[arg(long, default_value = "loss-gap")]
    pub value: String,
    /// Evaluate coalitions on the frozen-gate linearization instead of the network.
    #[arg(long)]
    pub frozen: bool,
    /// Sample this many unit pairs instead of visiting all.
    #[arg(long)]
    pub pair_samples: Option<usize>,
    /// Sample this many contexts per pair instead of enumerating.
    #[arg(long)]
    pub context_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/analyze")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    /// Check id (repeatable), e.g. C2-psd, T1, P4.
    #[arg(long = "check")]
    pub check: Vec<String>,
    /// Run every check.
    #[arg(long)]
    pub all: bool,
    /// Override the trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Override the tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Generator parameter `key=value` (repeatable).
    #[arg(long = "param")]
    pub param: Vec<String>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value = "out/verify")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateArgs {
    /// Source network; with `target` and `data` replaces the built-in two-net setup.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Probe inputs for user-supplied nets.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Penalty weights `c`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.03,0.1,0.3,1")]
    pub cs: Vec<f64>,
    /// Norm exponents `p`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,5")]
    pub ps: Vec<f64>,
    /// Stop norm ‖δ‖₂.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    /// Built-in setup: input dimension.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Built-in setup: held-out probe count.
    #[arg(long, default_value_t = 48)]
    pub probes: usize,
    #[arg(long, default_value_t = 1.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value = "out/correlate")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    /// Directory of check reports written by `verify`.
    #[arg(long, default_value = "out/verify")]
    pub input: PathBuf,
    /// Summary CSV path (default: <input>/summary.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub rt: Runtime,
}
