use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bido::cli::{cmd_attack, cmd_selftest, cmd_sweep, cmd_train, exit_code, EXIT_FAILURE};
use bido::selftest::SelftestOptions;

/// Dependency-regularized training and model-inversion evaluation.
#[derive(Parser)]
#[command(name = "bido", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier; writes checkpoint, per-epoch CSV and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Invert a target checkpoint and score reconstructions with an
    /// evaluation checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Also write every reconstruction as raw f64 with a JSON sidecar.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train and attack every grid point; writes a privacy–utility table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check estimators against oracles, gradients and null calibration.
    Selftest {
        #[arg(long, hide = true)]
        perturb_hsic: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config).map(|a| {
            println!("wrote {}", a.checkpoint.display());
            println!("wrote {}", a.report_csv.display());
            println!("wrote {}", a.summary.display());
            true
        }),
        Command::Attack {
            config,
            target,
            eval,
            dump,
        } => cmd_attack(&config, &target, &eval, dump.as_deref()).map(|a| {
            println!(
                "attack accuracy {:.4} (top-5 {:.4}) over {} reconstructions",
                a.report.attack_acc,
                a.report.attack_acc5,
                a.report.rows.len()
            );
            println!("wrote {}", a.csv.display());
            println!("wrote {}", a.summary.display());
            true
        }),
        Command::Sweep { config } => cmd_sweep(&config).map(|a| {
            let failed = a.rows.iter().filter(|r| r.status != "ok").count();
            println!("{} points, {failed} failed", a.rows.len());
            println!("wrote {}", a.csv.display());
            true
        }),
        Command::Selftest { perturb_hsic } => {
            let options = SelftestOptions {
                hsic_perturbation: if perturb_hsic { 1e-3 } else { 0.0 },
            };
            cmd_selftest(&options, &mut std::io::stdout())
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
