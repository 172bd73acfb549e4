use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use crsfuse_cli::{commands, RunConfig};

/// Pre-trained dual encoders for conversational recommendation.
#[derive(Parser)]
#[command(name = "crsfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic catalog, interaction log and conversations.
    GenSynthetic(Common),
    /// Simulate one conversation per logged interaction.
    Simulate(Common),
    /// Pre-train the dual encoder with masked item prediction and
    /// substituted attribute discrimination.
    Pretrain(Common),
    /// Fine-tune on conversation records, from a checkpoint or from scratch.
    Finetune(Common),
    /// Rank held-out targets and write a report.
    Evaluate(Common),
}

#[derive(Args, Default)]
struct Common {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    conversations: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generator checkpoint to use instead of training one.
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long, value_parser = ["uniform", "generator"])]
    neg_policy: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    no_sad: bool,
    #[arg(long)]
    no_mip: bool,
    #[arg(long)]
    lr: Option<f32>,
    /// Any configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
            cfg.set(k, v)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("data_dir", path(&self.data_dir)),
            ("conversations", path(&self.conversations)),
            ("out_dir", path(&self.out_dir)),
            ("checkpoint", path(&self.checkpoint)),
            ("generator", path(&self.generator)),
            ("model_name", self.model_name.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("mask_prob", self.mask_prob.map(|v| v.to_string())),
            ("top_k", self.top_k.map(|v| v.to_string())),
            ("neg_policy", self.neg_policy.clone()),
            ("no_sad", self.no_sad.then(|| "true".into())),
            ("no_mip", self.no_mip.then(|| "true".into())),
            ("lr", self.lr.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(c) => commands::cmd_gen_synthetic(&c.resolve()?),
        Command::Simulate(c) => commands::cmd_simulate(&c.resolve()?).map(drop),
        Command::Pretrain(c) => commands::cmd_pretrain(&c.resolve()?),
        Command::Finetune(c) => commands::cmd_finetune(&c.resolve()?),
        Command::Evaluate(c) => commands::cmd_evaluate(&c.resolve()?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
