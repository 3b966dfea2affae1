use std::path::PathBuf;
use std::process::ExitCode;

use beacon_core::backbone::ExitPoint;
use beacon_core::criteria::ScoreKind;
use beacon_core::pipeline::{run_gradchecks, Pipeline, PipelineError, RunConfig};
use clap::{Parser, Subcommand};
use log::info;

/// Early-exit modulation classification with learned forwarding decisions.
#[derive(Debug, Parser)]
#[command(name = "beacon", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "beacon-out")]
    out: PathBuf,
    /// Exit point (1, 2 or 3); defaults to the config value.
    #[arg(long, global = true)]
    exit_point: Option<ExitPoint>,
    /// Criterion to report (repeatable); all criteria when omitted.
    #[arg(long, global = true)]
    criterion: Vec<ScoreKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic I/Q dataset.
    GenData,
    /// Train the backbone and its final exit.
    TrainBackbone,
    /// Attach and train the early exit on the frozen backbone.
    TrainExit,
    /// Train the forwarding predictor for the selected exit point.
    TrainLbap,
    /// Percentile sweep of accuracy against average cost.
    Sweep,
    /// Entropy bins with outcome-case percentages.
    Bins,
    /// Best accuracy under each compute budget.
    Budget,
    /// Minimum cost reaching each accuracy target.
    MinCost,
    /// Recoverable-sample rate at matched invocation rates.
    Invocation,
    /// Trade-off curves per SNR band.
    SnrReport,
    /// Predicted against true recoverable ratio.
    Calibration,
    /// Accuracy and recoverability for all three exit points.
    Summary,
    /// Per-sample scores of the selected criteria.
    Scores,
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Every stage and report for all exit points.
    RunAll,
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

fn kinds(cli: &Cli) -> Vec<ScoreKind> {
    if cli.criterion.is_empty() {
        ScoreKind::ALL.to_vec()
    } else {
        cli.criterion.clone()
    }
}

fn run(cli: &Cli) -> Result<ExitCode, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(e) = cli.exit_point {
        cfg.arch.exit_point = e;
    }
    let e = cfg.arch.exit_point;

    match &cli.command {
        Command::PrintConfig => {
            let text = toml::to_string(&cfg.resolved())
                .map_err(|err| PipelineError::Config(err.to_string()))?;
            print!("{text}");
            return Ok(ExitCode::SUCCESS);
        }
        Command::Gradcheck { instances } => {
            let seed = cfg.resolved().seed.unwrap_or(1);
            let mut failed = 0;
            for (name, r) in run_gradchecks(seed, *instances)? {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!(
                    "[{status}] {name}: {} coordinates, max rel err {:.3e} (tol {:.0e})",
                    r.checked, r.max_rel_err, r.tolerance
                );
            }
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(7) });
        }
        _ => {}
    }

    let mut p = Pipeline::open(&cfg, &cli.out)?;
    let ks = kinds(cli);
    match &cli.command {
        Command::GenData => {
            let d = p.gen_data()?;
            println!("{} frames", d.len());
        }
        Command::TrainBackbone => {
            let log = p.train_backbone()?;
            println!(
                "best epoch {} with validation accuracy {:.4}",
                log.best_epoch, log.best_val_accuracy
            );
        }
        Command::TrainExit => {
            let log = p.train_exit(e)?;
            println!(
                "{}: best epoch {} with validation accuracy {:.4}",
                e.label(),
                log.best_epoch,
                log.best_val_accuracy
            );
        }
        Command::TrainLbap => {
            let log = p.train_lbap(e)?;
            println!(
                "{}: best epoch {} val bce {:.4} (base rate {:.4})",
                e.label(),
                log.best_epoch,
                log.best_val_bce,
                log.base_rate_val_bce
            );
        }
        Command::Sweep => {
            for c in p.report_sweep(e, &ks)? {
                for pt in &c.points {
                    println!(
                        "{} q={:>3} forwarded={:>4} avg_macs={:.0} acc={:.4}",
                        c.criterion, pt.percentile, pt.forwarded, pt.avg_macs, pt.accuracy
                    );
                }
            }
        }
        Command::Bins => report(p.report_bins(e)?),
        Command::Budget => report(p.report_budget(e, &ks)?),
        Command::MinCost => report(p.report_min_cost(e, &ks)?),
        Command::Invocation => report(p.report_invocation(e, &ks)?),
        Command::SnrReport => report(p.report_snr(e, &ks)?),
        Command::Calibration => report(p.report_calibration(&[e])?),
        Command::Summary => report(p.report_summary(&ExitPoint::ALL)?),
        Command::Scores => {
            for k in ks {
                report(p.report_scores(e, k)?);
            }
        }
        Command::RunAll => {
            p.run_all(&ExitPoint::ALL)?;
            println!("reports written to {}", cli.out.display());
        }
        Command::Gradcheck { .. } | Command::PrintConfig => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn report(path: PathBuf) {
    info!("wrote {}", path.display());
    println!("{}", path.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
