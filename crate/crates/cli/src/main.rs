use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oqc_core::config::{ConfigError, ExperimentConfig, Matrix};
use oqc_core::metrics::MechanismReport;
use oqc_core::train::runner::{
    analyze_seed_dir, rank_sweep, run_decomposition, run_experiment, write_csv, EpochLog, RunError,
    DEFAULT_SWEEP_RANKS,
};
use oqc_core::verify;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "oqc", version, about = "Train, sweep, analyze and verify OQC vision transformers")]
struct Cli {
    /// Worker threads for gradient shards; 1 is the determinism reference.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (or the 8-cell decomposition matrix).
    Train { config: PathBuf },
    /// Train the config's low-rank variant at several ranks.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_RANKS)]
        ranks: Vec<usize>,
    },
    /// Recompute mechanism reports from saved checkpoints.
    Analyze { run_dir: PathBuf },
    /// Run the gradient, orthogonality, metric and equivalence suites.
    Verify {
        /// Random cases per gradient suite.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) | RunError::NoComplement => EXIT_USAGE,
            RunError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let quiet = cli.quiet;
    let mut progress = move |log: &EpochLog| {
        if !quiet {
            eprintln!(
                "seed {} epoch {:>3}  loss {:.4}  test acc {:.4}",
                log.seed, log.epoch, log.train_loss, log.test_acc
            );
        }
    };
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config, &mut progress),
        Command::Sweep { config, ranks } => cmd_sweep(&config, &ranks, &mut progress),
        Command::Analyze { run_dir } => cmd_analyze(&run_dir),
        Command::Verify { cases } => cmd_verify(cases),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn table_header() -> String {
    format!("{:<36} {:>14} {:>10} {:>9}", "variant", "acc % (±std)", "params", "img/s")
}

fn cmd_train(path: &Path, progress: &mut dyn FnMut(&EpochLog)) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(path)?;
    match cfg.matrix {
        Matrix::Single => {
            let result = run_experiment(&cfg, progress)?;
            println!("{}", table_header());
            println!("{}", result.summary().table_line());
            println!("outputs: {}", result.dir.display());
        }
        Matrix::Decomposition => {
            let (csv, cells) = run_decomposition(&cfg, progress)?;
            println!("{:<12} {:<9} {}", "condition", "host", table_header());
            for c in &cells {
                println!(
                    "{:<12} {:<9} {}",
                    c.cell.condition.label(),
                    c.cell.host.label(),
                    c.summary.table_line()
                );
            }
            println!("outputs: {}", csv.display());
        }
    }
    Ok(())
}

fn cmd_sweep(path: &Path, ranks: &[usize], progress: &mut dyn FnMut(&EpochLog)) -> Result<(), Failure> {
    if ranks.is_empty() {
        return Err(usage("--ranks needs at least one value".into()));
    }
    let cfg = ExperimentConfig::load(path)?;
    let (csv, rows) = rank_sweep(&cfg, ranks, progress)?;
    println!("{:<6} {:>14} {:>10} {:>9}", "rank", "acc % (±std)", "params", "img/s");
    for r in &rows {
        println!(
            "{:<6} {:>6.2} ± {:<5.2} {:>10} {:>9.1}",
            r.rank,
            100.0 * r.summary.acc_mean,
            100.0 * r.summary.acc_std,
            r.summary.params,
            r.summary.img_s
        );
    }
    println!("outputs: {}", csv.display());
    Ok(())
}

/// Accepts either `<root>/<hash>` or `<root>/<hash>/<seed>`.
fn cmd_analyze(run_dir: &Path) -> Result<(), Failure> {
    if !run_dir.is_dir() {
        return Err(usage(format!("{}: run directory not found", run_dir.display())));
    }
    let (exp_dir, seed_dirs) = if run_dir.join("config.toml").is_file() {
        let mut seeds: Vec<PathBuf> = std::fs::read_dir(run_dir)
            .map_err(|e| usage(format!("{}: {e}", run_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.parse::<u64>().is_ok()))
            .collect();
        seeds.sort_by_key(|p| p.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()));
        (run_dir.to_path_buf(), seeds)
    } else {
        let parent = run_dir.parent().unwrap_or(Path::new("."));
        (parent.to_path_buf(), vec![run_dir.to_path_buf()])
    };
    let cfg_path = exp_dir.join("config.toml");
    let cfg = ExperimentConfig::load(&cfg_path)?;
    if seed_dirs.is_empty() {
        return Err(usage(format!("{}: no seed directories with checkpoints", exp_dir.display())));
    }
    let data = cfg
        .dataset
        .load(cfg.backbone.image_size)
        .map_err(|e| Failure::from(ConfigError::from(e)))?;
    let mut reports: Vec<MechanismReport> = Vec::with_capacity(seed_dirs.len());
    for dir in &seed_dirs {
        reports.push(analyze_seed_dir(&cfg, dir, &data)?);
    }
    let rows: Vec<Vec<String>> = reports.iter().map(MechanismReport::csv_row).collect();
    let out = if seed_dirs.len() == 1 && seed_dirs[0] == run_dir {
        run_dir.join("mechanism.csv")
    } else {
        exp_dir.join("mechanism.csv")
    };
    write_csv(&out, &MechanismReport::CSV_HEADER, &rows)?;
    println!("{}", MechanismReport::CSV_HEADER.join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    println!("outputs: {}", out.display());
    Ok(())
}

fn cmd_verify(cases: usize) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let reports = verify::run_all(cases.max(1)).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} suites, {} failed, {:.1}s",
        reports.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_FAILURE,
            message: format!("{failed} suite(s) failed"),
        });
    }
    Ok(())
}
