//! `gazetr`: generate synthetic gaze data, train, evaluate, audit and ablate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Overrides, Scale};
use gazetr::data::SyntheticConfig;
use gazetr::models::VariantTag;
use gazetr::transformer::AttentionMode;

#[derive(Parser)]
#[command(name = "gazetr", version, about = "Transformer gaze estimation on synthetic faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and loss report.
    Train(TrainArgs),
    /// Mean angular error of a checkpoint or reference predictor.
    Eval(EvalArgs),
    /// Parameter counts per module.
    Audit(AuditArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Paired runs: learned vs uniform attention, deep vs shallow stem, hybrid vs conv.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML). Flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Any config field as dotted key=value, e.g. train.beta1=0.95.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Option<VariantTag>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long, value_parser = parse_attention)]
    attention: Option<AttentionMode>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    decay_step_epochs: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Shuffling and dropout seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    test_subjects: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    yaw_max: Option<f64>,
    #[arg(long)]
    pitch_max: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Also checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PredictorKind {
    /// A trained checkpoint (needs --checkpoint).
    Model,
    /// The mean label of the training split.
    Mean,
    /// Reads the iris position off the rendered image.
    Decoder,
    /// The labels themselves.
    Oracle,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "model")]
    predictor: PredictorKind,
    /// Also write the JSON result here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Variant to audit; all four when omitted.
    #[arg(value_parser = parse_variant)]
    variant: Option<VariantTag>,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// A check name, a group (op, nn, model) or a final name segment such as softmax.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale analytic gradients by 1.1 so the checks must fail.
    #[arg(long, hide = true)]
    corrupt: bool,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the hybrid-vs-conv pair.
    #[arg(long)]
    no_backbone: bool,
    #[arg(long)]
    overwrite: bool,
}

fn parse_variant(s: &str) -> Result<VariantTag, String> {
    VariantTag::parse(s).ok_or_else(|| {
        let names: Vec<&str> = VariantTag::ALL.iter().map(|t| t.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_attention(s: &str) -> Result<AttentionMode, String> {
    match s {
        "learned" => Ok(AttentionMode::Learned),
        "uniform-average" | "uniform" => Ok(AttentionMode::UniformAverage),
        _ => Err(format!("unknown attention mode {s:?}; expected learned or uniform-average")),
    }
}

impl Common {
    /// `--set` assignments go last so they win over every other flag.
    fn finish(&self, mut o: Overrides) -> Result<config::ExperimentConfig> {
        for s in &self.set {
            o.parse_assignment(s)?;
        }
        config::ExperimentConfig::load(self.config.as_deref(), &o)
    }
}

impl ModelArgs {
    fn apply(&self, o: &mut Overrides) -> Result<()> {
        o.opt("model.variant", self.variant.map(|v| v.name()));
        o.opt("model.scale", self.scale.map(|s| if s == Scale::Toy { "toy" } else { "full" }));
        o.usize("model.image_size", self.image_size)?;
        o.seed("model.seed", self.model_seed)?;
        let mode = self.attention.map(|m| match m {
            AttentionMode::Learned => "learned",
            AttentionMode::UniformAverage => "uniform-average",
        });
        o.opt("model.attention_mode", mode);
        Ok(())
    }
}

impl PlanArgs {
    fn apply(&self, o: &mut Overrides) -> Result<()> {
        o.usize("train.epochs", self.epochs)?;
        o.usize("train.batch_size", self.batch_size)?;
        o.opt("train.base_lr", self.lr);
        o.usize("train.warmup_epochs", self.warmup_epochs)?;
        o.usize("train.decay_step_epochs", self.decay_step_epochs)?;
        o.opt("train.decay_factor", self.decay_factor);
        o.seed("train.seed", self.seed)
    }
}

/// Raised for failures that are numerical rather than about usage.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<NumericalFailure>()
            || e.downcast_ref::<gazetr::Error>().is_some_and(|e| e.is_numerical())
            || matches!(e.downcast_ref::<gazetr::TensorError>(), Some(gazetr::TensorError::NonFinite { .. }))
    })
}

/// The error chain joined with ": ", dropping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let mut o = Overrides::default();
            o.path("data.dir", a.out.as_ref());
            let g = "data.generator";
            if let Some(size) = a.image_size {
                // geometry follows the image size unless set explicitly
                let s = SyntheticConfig::scaled_to(size);
                for (k, v) in [("gain", s.gain), ("socket_a", s.socket_a), ("socket_b", s.socket_b), ("iris_radius", s.iris_radius), ("eye_spacing", s.eye_spacing)] {
                    o.push(&format!("{g}.{k}"), v);
                }
            }
            o.usize(&format!("{g}.samples"), a.samples)?;
            o.usize(&format!("{g}.subjects"), a.subjects)?;
            o.usize(&format!("{g}.test_subjects"), a.test_subjects)?;
            o.usize(&format!("{g}.image_size"), a.image_size)?;
            o.opt(&format!("{g}.yaw_max"), a.yaw_max);
            o.opt(&format!("{g}.pitch_max"), a.pitch_max);
            o.opt(&format!("{g}.noise_std"), a.noise_std);
            o.seed(&format!("{g}.seed"), a.seed)?;
            if a.overwrite {
                o.push("overwrite", true);
            }
            commands::gen(&a.common.finish(o)?)
        }
        Command::Train(a) => {
            let mut o = Overrides::default();
            a.model.apply(&mut o)?;
            a.plan.apply(&mut o)?;
            o.path("data.dir", a.data.as_ref());
            o.path("output", a.out.as_ref());
            o.path("pretrain", a.pretrain.as_ref());
            if a.overwrite {
                o.push("overwrite", true);
            }
            commands::train(&a.common.finish(o)?, a.checkpoint_every)
        }
        Command::Eval(a) => commands::eval(a.checkpoint.as_deref(), &a.data, a.split, a.predictor, a.json.as_deref()),
        Command::Audit(a) => commands::audit(a.variant, a.scale, a.image_size, a.json.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(a.scope, a.seed, a.corrupt, a.json.as_deref()),
        Command::Ablate(a) => {
            let mut o = Overrides::default();
            a.model.apply(&mut o)?;
            a.plan.apply(&mut o)?;
            o.path("data.dir", a.data.as_ref());
            o.path("output", a.out.as_ref());
            if a.overwrite {
                o.push("overwrite", true);
            }
            commands::ablate(&a.common.finish(o)?, !a.no_backbone)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}
