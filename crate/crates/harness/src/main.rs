use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use navfuse_harness::commands::{self, output_dir};
use navfuse_harness::manifest::RhoSweep;
use navfuse_harness::{ExperimentConfig, HarnessError, Result, Task};

#[derive(Parser)]
#[command(name = "navfuse", version, about = "INS/DVL fusion experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; replaces the config's seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $NAVFUSE_OUT/<command>-seed<seed>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a mission and write IMU, DVL and truth logs.
    Simulate,
    /// Train BeamsNet on a simulated corpus or on recorded datasets.
    Train {
        /// Dataset directories with imu.csv, dvl.csv and truth.csv.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Parameter archive to continue training from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the filter over a simulated mission or a dataset directory.
    Fuse {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Paired cross-correlation aware and neglect runs over the config seeds.
    Compare {
        /// Also sweep rho over `lo:hi:step`.
        #[arg(long)]
        rho_sweep: Option<String>,
    },
    /// Convert foreign IMU/DVL/truth logs to the canonical files.
    Ingest {
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        dvl: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// TOML describing columns and units.
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let task = match cli.command {
        Command::Replay { manifest } => {
            if cli.common.config.is_some() || cli.common.seed.is_some() {
                return Err(HarnessError::Config(
                    "replay takes its config and seed from the manifest".into(),
                ));
            }
            let out = cli
                .common
                .out
                .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let outcome = commands::replay(&manifest, &out)?;
            println!(
                "replayed {} into {}: {} outputs identical",
                outcome.original.task.name(),
                out.display(),
                outcome.replayed.outputs.len()
            );
            return Ok(());
        }
        Command::Simulate => Task::Simulate,
        Command::Train { data, resume } => Task::Train { data, resume },
        Command::Fuse { data } => Task::Fuse { data },
        Command::Compare { rho_sweep } => Task::Compare {
            rho_sweep: rho_sweep.as_deref().map(RhoSweep::parse).transpose()?,
        },
        Command::Ingest {
            imu,
            dvl,
            truth,
            metadata,
        } => Task::Ingest {
            imu,
            dvl,
            truth,
            metadata,
        },
    };
    let config = load_config(&cli.common)?;
    let out = output_dir(cli.common.out.as_deref(), &config, &task);
    let manifest = commands::execute(&task, &config, &out)?;
    println!("{}: wrote {} files to {}", task.name(), manifest.outputs.len() + 1, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
