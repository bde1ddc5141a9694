use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use logistic_vb::experiment::{self, ExperimentConfig, Method, Task, WORKERS_ENV};

/// Variational logistic regression and sparse GP classification experiments.
#[derive(Debug, Parser)]
#[command(version, after_help = "Environment: LOGISTIC_VB_WORKERS sets the number of worker threads.\n\
Exit status: 0 success, 1 usage or config error, 2 data error, 3 non-convergence.")]
struct Cli {
    /// bound-grid, logistic-sim, gp-toy or fit-file.
    task: Task,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated subset of viper, vipg, vimc.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

fn configure_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{WORKERS_ENV} must be a positive integer, got {raw:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let mut config = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(p) = cli.output {
        config.output_path = Some(p);
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(r) = cli.repeats {
        config.n_repeats = r;
    }
    if let Some(m) = cli.methods {
        config.methods = m;
    }

    let report = match experiment::run(cli.task, &config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = experiment::write_report(&report, &config, &mut std::io::stdout().lock()) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    if report.nonconverged() {
        eprintln!("error: some fits did not converge (set allow_nonconverged to accept)");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
