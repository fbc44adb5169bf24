use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use oracle_attn_cli::commands;
use oracle_attn_cli::config::{RunConfig, PRECISION_ENV};
use oracle_attn_cli::fail::Outcome;

#[derive(Parser)]
#[command(
    name = "oracle-attn",
    version,
    about = "Face completion with dual spatial attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=2e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator and critics.
    Train(Common),
    /// Complete images with a trained checkpoint.
    Infer(Common),
    /// Score completions with L1, PSNR and SSIM.
    Eval(Common),
    /// Time the attention layer against a patch-matching baseline.
    BenchDsa(Common),
}

fn run(cli: Cli) -> Outcome<()> {
    let (common, f): (&Common, fn(&RunConfig) -> Outcome<()>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Infer(c) => (c, commands::infer),
        Command::Eval(c) => (c, |cfg| commands::eval(cfg).map(drop)),
        Command::BenchDsa(c) => (c, |cfg| commands::bench_dsa(cfg).map(drop)),
    };
    let env = std::env::var(PRECISION_ENV).ok();
    let cfg = RunConfig::load(common.config.as_deref(), env.as_deref(), &common.set)?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            error!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
