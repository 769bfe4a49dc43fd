use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tvo_gpbandit_cli::{prepare, run, CliError, RunOptions};

#[derive(Parser)]
#[command(
    name = "tvo-gpbandit",
    version,
    about = "Run TVO schedule-selection experiments from a JSON config"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Seeds run concurrently up to this many threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` in the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by the config's `kind`.
    Run { config: PathBuf },
    /// Run the ablation cross-product described by the config's `ablation` block.
    Ablate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TVO_GPBANDIT_LOG", "warn")).init();
    let cli = Cli::parse();
    let (path, ablate) = match cli.command {
        Command::Run { config } => (config, false),
        Command::Ablate { config } => (config, true),
    };
    let opts = RunOptions {
        jobs: cli.global.jobs,
        out: cli.global.out,
        seed_override: cli.global.seed_override,
        ablate,
    };
    match execute(&path, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(path: &std::path::Path, opts: &RunOptions) -> Result<(), CliError> {
    let cfg = prepare(path, opts)?;
    let art = run(&cfg, opts.jobs)?;
    for f in &art.files {
        println!("{}", cfg.output_dir.join(f).display());
    }
    Ok(())
}
