use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use badskp_cli::config::{Config, ConfigError};
use badskp_cli::experiment;

/// Knowledge-graph poisoning laboratory.
#[derive(Parser)]
#[command(name = "badskp", version, disable_help_subcommand = true)]
struct Cli {
    /// Layered TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, results, and plots.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic world and print its checksum.
    World,
    /// Train (or load) the victim pipeline.
    Train,
    /// Build the configured attack plan.
    Attack,
    /// Evaluate clean accuracy and attack success; append result rows.
    Eval,
    /// Run the prompt-condition factorial analysis.
    AnalyzeAnchoring,
    /// Evaluate under the configured defense and log per-query decisions.
    Defend,
    /// Sweep the injected-node budget.
    SweepK {
        /// Strictly increasing budgets, e.g. --values 0,2,4,8
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Sweep the suffix-length budget.
    SweepM {
        /// Strictly increasing lengths, e.g. --values 0,2,4,6
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Tamper the released module at two alignment weights and measure
    /// attack survival across downstream clean fine-tuning.
    Persistence,
    /// Render text tables and SVG plots from the results file.
    Report,
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, ConfigError> {
    match path {
        Some(p) => Config::from_path(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.config)?;
    let out = cli.out.as_path();
    match cli.verb {
        Verb::World => experiment::cmd_world(cfg, out),
        Verb::Train => experiment::cmd_train(cfg, cli.seed, out),
        Verb::Attack => experiment::cmd_attack(cfg, cli.seed, out),
        Verb::Eval => experiment::cmd_eval(cfg, cli.seed, out),
        Verb::AnalyzeAnchoring => experiment::cmd_analyze_anchoring(cfg, cli.seed, out),
        Verb::Defend => experiment::cmd_defend(cfg, cli.seed, out),
        Verb::SweepK { values } => experiment::cmd_sweep_k(cfg, cli.seed, out, &values),
        Verb::SweepM { values } => experiment::cmd_sweep_m(cfg, cli.seed, out, &values),
        Verb::Persistence => experiment::cmd_persistence(cfg, cli.seed, out),
        Verb::Report => experiment::cmd_report(out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.is::<ConfigError>() {
                eprintln!("config error: {err}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(3)
            }
        }
    }
}
