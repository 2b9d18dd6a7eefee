use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use misical::config::{
    merge, parse_assignment, parse_seeds, read_file_layer, resolve, set_key, RunConfig,
};
use misical::harness::{cmd_compare, cmd_run, cmd_synth, cmd_verify};
use misical::{Error, Result};

#[derive(Parser)]
#[command(
    name = "misical",
    version,
    about = "Reinforcement-learned single-class patch selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy over every seed and write per-seed logs plus a summary.
    Run(RunArgs),
    /// Generate a synthetic pool file.
    Synth(SynthArgs),
    /// Run several policies on shared seeds and compare final yields.
    Compare(CompareArgs),
    /// Run the built-in self-check suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: default or desk.
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key, e.g. --set agent.gamma=0.99 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    target_class: Option<i64>,
    /// Seed list: 3, 0,1,2 or 0..5.
    #[arg(long)]
    seeds: Option<String>,
    /// Total labelling budget as a fraction of the pool.
    #[arg(long)]
    budget_frac: Option<f64>,
    /// Size of the initial labelled set as a fraction of the pool.
    #[arg(long)]
    initial_frac: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: RunFlags,
    /// random, entropy, bald, coreset or misical.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: RunFlags,
    /// Comma-separated policies, e.g. misical,random,bald.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: Option<i64>,
    #[arg(long)]
    patches: Option<i64>,
    #[arg(long)]
    seed: Option<i64>,
    /// Output pool file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Pool file checked by the format suite instead of the built-in fixture.
    #[arg(long)]
    fixture: Option<PathBuf>,
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Builds the command-line layer: `--set` assignments, then named flags.
fn cli_layer(common: &Common, named: Table) -> Result<Table> {
    let mut layer = Table::new();
    for s in &common.set {
        merge(&mut layer, &parse_assignment(s)?);
    }
    if let Some(p) = &common.preset {
        layer.insert("preset".into(), Value::String(p.clone()));
    }
    merge(&mut layer, &named);
    Ok(layer)
}

fn run_flags(flags: &RunFlags) -> Result<Table> {
    let mut t = Table::new();
    if let Some(p) = &flags.pool {
        set_key(&mut t, "run", "pool", path_value(p));
    }
    if let Some(c) = flags.target_class {
        set_key(&mut t, "run", "target_class", Value::Integer(c));
    }
    if let Some(s) = &flags.seeds {
        let seeds = parse_seeds(s)?
            .into_iter()
            .map(|s| {
                i64::try_from(s)
                    .map(Value::Integer)
                    .map_err(|_| Error::Config("seed too large".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        set_key(&mut t, "run", "seeds", Value::Array(seeds));
    }
    if let Some(f) = flags.budget_frac {
        set_key(&mut t, "budget", "total_frac", Value::Float(f));
    }
    if let Some(f) = flags.initial_frac {
        set_key(&mut t, "budget", "initial_frac", Value::Float(f));
    }
    if let Some(o) = &flags.out {
        set_key(&mut t, "run", "out", path_value(o));
    }
    Ok(t)
}

fn load(common: &Common, named: Table) -> Result<RunConfig> {
    let file = common.config.as_deref().map(read_file_layer).transpose()?;
    resolve(file.as_ref(), &cli_layer(common, named)?)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) => {
            let mut named = run_flags(&a.flags)?;
            if let Some(p) = &a.policy {
                set_key(&mut named, "run", "policy", Value::String(p.clone()));
            }
            let cfg = load(&a.common, named)?;
            print!("{}", cmd_run(&cfg, a.common.force)?);
        }
        Command::Compare(a) => {
            let mut named = run_flags(&a.flags)?;
            if let Some(p) = &a.policy {
                let list = p
                    .split(',')
                    .map(|s| Value::String(s.trim().to_string()))
                    .collect();
                set_key(&mut named, "run", "policies", Value::Array(list));
            }
            let cfg = load(&a.common, named)?;
            let (_, table) = cmd_compare(&cfg, a.common.force)?;
            print!("{table}");
        }
        Command::Synth(a) => {
            let mut named = Table::new();
            for (key, v) in [
                ("n_classes", a.classes),
                ("n_patches", a.patches),
                ("seed", a.seed),
            ] {
                if let Some(v) = v {
                    set_key(&mut named, "synth", key, Value::Integer(v));
                }
            }
            let cfg = load(&a.common, named)?;
            print!("{}", cmd_synth(&cfg.synth, &a.out, a.common.force)?);
        }
        Command::Verify(a) => {
            let (reports, text) = cmd_verify(a.fixture.as_deref())?;
            print!("{text}");
            return Ok(reports.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
