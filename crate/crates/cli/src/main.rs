use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fedhug::config::ExperimentConfig;
use fedhug::federation::AggregationKind;

mod commands;
mod report;

#[derive(Parser)]
#[command(
    name = "fedhug",
    version,
    about = "Federated unsupervised DG simulator for remote physiological sensing"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark datasets, one directory per seed.
    Gen(CommonArgs),
    /// Supervised pre-training of the initial global model on the labeled pretrain split.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Retrain even if a converged model exists.
        #[arg(long)]
        force: bool,
    },
    /// Run federated training from the pretrained model.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Aggregation policy.
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Global distribution-aware learning controller.
        #[arg(long, value_enum)]
        gdlc: Option<Switch>,
        #[arg(long)]
        rounds: Option<u64>,
        /// Run name; defaults to one derived from the policy and controller.
        #[arg(long)]
        name: Option<String>,
        /// Continue from the last round checkpoint.
        #[arg(long)]
        resume: bool,
        /// Run clients one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Compare finished runs.
    Report {
        /// Run directories (a run with `seed_*` subdirectories, or one seed directory).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Seed count (`5` means 0..5) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fedavg,
    Mba,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if text.contains(',') {
        return text
            .split(',')
            .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
            .collect();
    }
    let n: u64 = text.parse().with_context(|| format!("bad seed count {text:?}"))?;
    if n == 0 {
        bail!("--seeds needs at least one seed");
    }
    Ok((0..n).collect())
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(&args.config).with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn finish_config(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate().context("invalid config")?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    Ok(())
}

fn default_run_name(cfg: &ExperimentConfig) -> &'static str {
    match (cfg.federation.policy.kind, cfg.federation.gdlc.enabled) {
        (AggregationKind::Mba, true) => "fedhug",
        (AggregationKind::Fedavg, true) => "no-mba",
        (AggregationKind::Mba, false) => "no-gdlc",
        (AggregationKind::Fedavg, false) => "fedavg",
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = load_config(&args)?;
            finish_config(&cfg)?;
            commands::gen(&cfg)
        }
        Command::Pretrain { common, force } => {
            let cfg = load_config(&common)?;
            finish_config(&cfg)?;
            commands::pretrain(&cfg, force)
        }
        Command::Run {
            common,
            policy,
            gdlc,
            rounds,
            name,
            resume,
            sequential,
        } => {
            let mut cfg = load_config(&common)?;
            let fed = &mut cfg.federation;
            match policy {
                Some(PolicyArg::Fedavg) => fed.policy.kind = AggregationKind::Fedavg,
                Some(PolicyArg::Mba) => fed.policy.kind = AggregationKind::Mba,
                None => {}
            }
            if let Some(g) = gdlc {
                fed.gdlc.enabled = matches!(g, Switch::On);
            }
            if let Some(r) = rounds {
                fed.rounds = r;
            }
            if sequential {
                fed.parallel = false;
            }
            finish_config(&cfg)?;
            let name = name.unwrap_or_else(|| default_run_name(&cfg).to_string());
            check_name(&name)?;
            commands::run(&cfg, &name, resume)
        }
        Command::Report { runs, out } => report::report(&runs, &out),
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        && Path::new(name).components().count() == 1
        && name != "."
        && name != "..";
    if !ok {
        bail!("run name {name:?} must be a plain file name");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
