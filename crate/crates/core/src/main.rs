use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epi::config::RunConfig;
use epi::runner::{execute, Command};
use epi::training::BaselineKind;
use epi::Error;

#[derive(Parser, Debug)]
#[command(name = "epi", version, about = "Environment-probing interaction policies")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (same as `--override training.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (same as `--override out=PATH`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` with a dotted key, e.g. `training.epi_iterations=50`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "EPI_THREADS", default_value_t = 0)]
    threads: usize,
    /// Print the default configuration and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the seed policy on the center environment.
    PretrainSeed,
    /// Collect the epsilon-greedy and vine transition dataset.
    CollectDataset,
    /// Train the probing policy and the prediction models.
    TrainEpi,
    /// Train the embedding-conditioned task policy.
    TrainTask,
    /// Train one baseline.
    TrainBaseline {
        /// simple, invariant, oracle, random-interaction, history, recurrent,
        /// system-id or direct-reward.
        kind: String,
    },
    /// Evaluate trained methods on the held-out grid.
    Evaluate {
        /// Method names; defaults to `epi`.
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Vary one parameter with the others at their defaults.
    Sweep {
        /// Method names; defaults to `epi` and `invariant`.
        #[arg(long = "method")]
        methods: Vec<String>,
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Number of evenly spaced values when `--values` is absent.
        #[arg(long, default_value_t = 9)]
        points: usize,
    },
    /// Write probe embeddings for every training environment.
    ExportEmbeddings,
    /// Train and evaluate every method of the comparison table.
    ReproduceTable1,
}

fn build_config(cli: &Cli) -> epi::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ov = Vec::new();
    if let Some(s) = cli.seed {
        ov.push(format!("training.seed={s}"));
    }
    if let Some(o) = &cli.out {
        ov.push(format!("out={}", toml::Value::String(o.display().to_string())));
    }
    ov.extend(cli.overrides.iter().cloned());
    base.with_overrides(&ov)
}

fn command(c: &Cmd) -> epi::Result<Command> {
    Ok(match c {
        Cmd::PretrainSeed => Command::PretrainSeed,
        Cmd::CollectDataset => Command::CollectDataset,
        Cmd::TrainEpi => Command::TrainEpi,
        Cmd::TrainTask => Command::TrainTask,
        Cmd::TrainBaseline { kind } => Command::TrainBaseline(BaselineKind::parse(kind)?),
        Cmd::Evaluate { methods } => Command::Evaluate {
            methods: methods.iter().map(|m| m.replace('-', "_")).collect(),
        },
        Cmd::Sweep {
            methods,
            param,
            values,
            points,
        } => Command::Sweep {
            methods: methods.iter().map(|m| m.replace('-', "_")).collect(),
            param: param.clone(),
            values: values.clone(),
            points: *points,
        },
        Cmd::ExportEmbeddings => Command::ExportEmbeddings,
        Cmd::ReproduceTable1 => Command::ReproduceTable1,
    })
}

fn run(cli: &Cli) -> epi::Result<()> {
    if cli.print_defaults {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    let Some(cmd) = &cli.command else {
        return Err(Error::InvalidArgument("no command given; see --help".into()));
    };
    let cfg = build_config(cli)?;
    let cmd = command(cmd)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    execute(&cmd, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}
