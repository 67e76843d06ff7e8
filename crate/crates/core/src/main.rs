use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use vnoip::commands::{embed, eval_cmd, gen, gradcheck_cmd, plot_cmd, train_cmd};
use vnoip::config::{RunConfig, KEYS};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Generate a synthetic graph and cascade corpus
    Gen,
    /// Compute the global node embedding
    Embed,
    /// Train and store the best checkpoint
    Train,
    /// Score the checkpoint on the test split
    Eval,
    /// Run the gradient-check suite
    Gradcheck,
    /// Write loss and trend tables and figures
    Plot,
}

#[derive(Debug, Parser)]
#[command(version, about = "Cascade popularity prediction with variational neural ODEs")]
#[command(after_help = keys_help())]
struct Cli {
    command: Command,
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides, applied after the file
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (file or --key value):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<22}{d}\n"));
    }
    s
}

fn run(cli: Cli) -> vnoip::Result<()> {
    let mut file = cli.config;
    let mut flags = Vec::with_capacity(cli.overrides.len());
    let mut it = cli.overrides.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--config") {
            Some("") => file = it.next().map(PathBuf::from),
            Some(rest) if rest.starts_with('=') => file = Some(PathBuf::from(&rest[1..])),
            _ => flags.push(a),
        }
    }
    let cfg = RunConfig::load(file.as_deref(), &flags)?;
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Gen => gen(&cfg, &mut out),
        Command::Embed => embed(&cfg, &mut out).map(|_| ()),
        Command::Train => train_cmd(&cfg, &mut out),
        Command::Eval => eval_cmd(&cfg, &mut out),
        Command::Gradcheck => gradcheck_cmd(&mut out),
        Command::Plot => plot_cmd(&cfg, &mut out),
    }?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
