mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use commands::RunLog;
use settings::{parse_assignment, resolve, SEED_ENV};

#[derive(Parser)]
#[command(name = "glsr", version, about = "Reference-guided MRI super-resolution with global/local selective scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args)]
struct Common {
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets any config key, e.g. `--set channels=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        scale: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes loss.csv and checkpoints.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also save a checkpoint every this many steps.
        #[arg(long)]
        every: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset; writes metrics.csv and error maps.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Super-resolve one LR image with its reference.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lr_image: Option<PathBuf>,
        #[arg(long)]
        ref_image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant and gradient suite.
    Check {
        /// Only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Time the global scan against naive attention over grid sizes.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated grid sides.
        #[arg(long)]
        grids: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

type Flags = Vec<(&'static str, Option<String>)>;

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn num<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Check { .. } => "check",
            Command::Bench { .. } => "bench",
        }
    }

    fn parts(&self) -> (&Common, Flags) {
        match self {
            Command::GenData { out, count, size, scale, common } => {
                (common, vec![("out", path(out)), ("count", num(count)), ("size", num(size)), ("scale", num(scale))])
            }
            Command::Train { data, out, steps, every, resume, common } => (
                common,
                vec![
                    ("data", path(data)),
                    ("out", path(out)),
                    ("steps", num(steps)),
                    ("every", num(every)),
                    ("resume", path(resume)),
                ],
            ),
            Command::Eval { checkpoint, data, out, common } => {
                (common, vec![("checkpoint", path(checkpoint)), ("data", path(data)), ("out", path(out))])
            }
            Command::Infer { checkpoint, lr_image, ref_image, out, common } => (
                common,
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("lr_image", path(lr_image)),
                    ("ref_image", path(ref_image)),
                    ("out", path(out)),
                ],
            ),
            Command::Check { filter, common } => (common, vec![("filter", filter.clone())]),
            Command::Bench { out, grids, reps, common } => {
                (common, vec![("out", path(out)), ("grids", grids.clone()), ("reps", num(reps))])
            }
        }
    }
}

fn run(cmd: &Command) -> Result<()> {
    let (common, named) = cmd.parts();
    let mut flags = Vec::new();
    for s in &common.set {
        flags.push(parse_assignment(s)?);
    }
    if let Some(seed) = common.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    flags.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let kv = resolve(common.config.as_deref(), &flags, std::env::var(SEED_ENV).ok())?;
    let out = kv.get("out").map(PathBuf::from);
    let logged_out = match cmd {
        Command::Check { .. } => None,
        _ => out.as_deref(),
    };
    let mut log = RunLog::open(logged_out, cmd.name(), &kv)?;
    match cmd {
        Command::GenData { .. } => commands::gen_data(&kv, &mut log),
        Command::Train { .. } => commands::train(&kv, &mut log),
        Command::Eval { .. } => commands::eval(&kv, &mut log),
        Command::Infer { .. } => commands::infer(&kv, &mut log),
        Command::Bench { .. } => commands::bench(&kv, &mut log),
        Command::Check { .. } => {
            let failed = commands::check(&kv, &mut log)?;
            if !failed.is_empty() {
                bail!("{} check(s) failed: {}", failed.len(), failed.join(" "));
            }
            Ok(())
        }
    }
}

/// `error: <command>: <message>` on one line.
fn report(command: &str, msg: &str) -> ExitCode {
    let flat: Vec<&str> = msg.split_whitespace().collect();
    eprintln!("error: {command}: {}", flat.join(" "));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report("usage", first.trim_start_matches("error: "));
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(cli.command.name(), &format!("{e:#}")),
    }
}
