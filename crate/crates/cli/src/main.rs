//! `moe-nas` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 latency table
//! coverage error, 4 non-finite loss.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_nas::config::{Overrides, RunConfig};
use moe_nas::pipeline::{self, block_latency_rows};
use moe_nas::Error;

#[derive(Parser, Debug)]
#[command(name = "moe-nas", version, about = "Latency-aware architecture search over MoE transformer blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_ratio: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `phase1.epochs`.
    #[arg(long)]
    search_epochs: Option<usize>,
    /// Overrides `phase2.epochs`.
    #[arg(long)]
    retrain_epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time every block of the search space and write the latency table.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Re-profile even when a matching table exists.
        #[arg(long)]
        force: bool,
    },
    /// Train the supernet and write the sampled architecture.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain an architecture from scratch.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Architecture file; defaults to the searched one.
        #[arg(long)]
        arch: Option<PathBuf>,
    },
    /// Test-split loss of the retrained model.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Write plot-ready CSVs for all completed runs.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Search once per configured target ratio, then report.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Profile { common, .. }
            | Command::Search { common }
            | Command::Retrain { common, .. }
            | Command::Eval { common }
            | Command::Report { common }
            | Command::Sweep { common } => common,
        }
    }
}

fn load_config(c: &Common) -> moe_nas::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        target_ratio: c.target_ratio,
        output_dir: c.output_dir.clone(),
        phase1_epochs: c.search_epochs,
        phase2_epochs: c.retrain_epochs,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Coverage { .. } => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn print_report(r: &pipeline::ReportOutcome) {
    println!("run,target_ratio,target_us,estimated_us,target_met");
    for t in &r.targets {
        println!(
            "{},{:.2},{:.1},{:.1},{}",
            t.run, t.target_ratio, t.target_us, t.estimated_us, t.target_met
        );
    }
    for m in &r.ratios {
        match m.reference_ratio {
            Some(reference) => println!("{}: {:.2}x (reference {reference}x)", m.comparison, m.measured_ratio),
            None => println!("{}: {:.2}x", m.comparison, m.measured_ratio),
        }
    }
    let s = &r.summary;
    println!("target vs estimated: pearson {:.3}, spearman {:.3}", s.target_estimated_pearson, s.target_estimated_spearman);
    println!("estimated vs measured: pearson {:.3}", s.estimated_measured_pearson);
}

fn run(cli: &Cli) -> moe_nas::Result<()> {
    let cfg = load_config(cli.command.common())?;
    match &cli.command {
        Command::Profile { force, .. } => {
            let out = pipeline::cmd_profile(&cfg, *force)?;
            if out.cached() {
                println!("latency table is up to date");
            }
            println!("key,latency_us,normalized");
            for row in block_latency_rows(&out.table) {
                let norm = row.normalized.map(|n| format!("{n:.4}")).unwrap_or_default();
                println!("{},{:.3},{norm}", row.key, row.latency_us);
            }
        }
        Command::Search { .. } => {
            let out = pipeline::cmd_search(&cfg)?;
            print!("{}", out.descriptor.render());
            let d = &out.descriptor;
            println!(
                "estimated {:.1} us of baseline {:.1} us (target ratio {}): {}",
                d.estimated_latency_us.unwrap_or(f64::NAN),
                d.baseline_latency_us.unwrap_or(f64::NAN),
                cfg.target_ratio,
                if d.target_met == Some(true) { "target met" } else { "target not met" }
            );
        }
        Command::Retrain { arch, .. } => {
            let out = pipeline::cmd_retrain(&cfg, arch.as_deref())?;
            println!("parameters: {}", out.param_count);
            if let Some(last) = out.outcome.history.last() {
                println!(
                    "final step: ce {:.4}, balance_loss {:.4}, max_expert_fraction {:.3}",
                    last.ce, last.balance_loss, last.max_expert_fraction
                );
            }
            for v in &out.outcome.valid {
                println!("epoch {}: valid ce {:.4}", v.epoch, v.valid_ce);
            }
        }
        Command::Eval { .. } => {
            let row = pipeline::cmd_eval(&cfg)?;
            println!("test ce {:.4} ({:.4} bits/char)", row.ce, row.bits_per_char);
        }
        Command::Report { .. } => print_report(&pipeline::cmd_report(&cfg)?),
        Command::Sweep { .. } => print_report(&pipeline::cmd_sweep(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
