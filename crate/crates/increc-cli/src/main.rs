use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use increc_cli::config::Config;
use increc_cli::pipeline::{self, variant_from_name, PipelineError, Variant};

#[derive(Parser)]
#[command(
    name = "increc",
    about = "Cross-scenario incremental-sample retrieval pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set eval.k=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Artifact root; stages share `<out>/<confighash>-s<seed>/`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (default: available cores). 1 is always bit-stable;
    /// higher counts are too, because reductions run in fixed chunk order.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<Config, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-scenario event log.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the baseline retrieval state and dump RTG/ITG/ETG partitions.
    BuildSamples {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant and persist its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Variant: tb-online | tb-itg | tb-boost | increc-na | increc-ori | increc.
        #[arg(long, default_value = "increc")]
        mode: String,
    },
    /// Retrieve top-2K lists for the evaluation requests.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "increc")]
        mode: String,
        /// Serve a specific tower (basic | incremental | align).
        #[arg(long)]
        tower: Option<String>,
        /// Evaluation cutoff K (lists hold 2K items).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a retrieval dump: Base/Sup/Inc@K and exposure hitrate.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "increc")]
        mode: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the whole ablation grid over several seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Print the default configuration file.
    DefaultConfig,
}

fn tower_from_flag(
    s: &Option<String>,
) -> Result<Option<increc::model_core::Tower>, PipelineError> {
    match s {
        None => Ok(None),
        Some(name) => increc::model_core::Tower::from_name(name)
            .map(Some)
            .ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown tower `{name}` (expected basic, incremental, or align)"
                ))
            }),
    }
}

fn variant(mode: &str) -> Result<Variant, PipelineError> {
    variant_from_name(mode)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.config()?;
            pipeline::cmd_synth(&cfg, common.seed, &common.out)?;
        }
        Command::BuildSamples { common } => {
            let cfg = common.config()?;
            pipeline::cmd_build_samples(&cfg, common.seed, &common.out)?;
        }
        Command::Train { common, mode } => {
            let cfg = common.config()?;
            pipeline::cmd_train(&cfg, common.seed, &common.out, variant(&mode)?)?;
        }
        Command::Retrieve {
            common,
            mode,
            tower,
            k,
        } => {
            let cfg = common.config()?;
            pipeline::cmd_retrieve(
                &cfg,
                common.seed,
                &common.out,
                variant(&mode)?,
                tower_from_flag(&tower)?,
                k,
            )?;
        }
        Command::Eval { common, mode, k } => {
            let cfg = common.config()?;
            pipeline::cmd_eval(&cfg, common.seed, &common.out, variant(&mode)?, k)?;
        }
        Command::Experiment { common, seeds, k } => {
            let cfg = common.config()?;
            pipeline::cmd_experiment(&cfg, common.seed, &common.out, seeds, k)?;
        }
        Command::DefaultConfig => {
            print!("{}", Config::default_file());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
