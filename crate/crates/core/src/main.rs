use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcsim::kernel::maxmin::{parse_flow_list, parse_link_list};
use dcsim::kernel::solve_max_min;
use dcsim::oracle::{check_max_min, max_min_oracle};
use dcsim::{emit_preset_scenario, load_scenario, run, RunError, ScenarioError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_INCOMPLETE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dcsim",
    version,
    about = "Distributed-cloud batch analysis simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write metrics.csv, events.log and summary.txt.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many simulated hours.
        #[arg(long)]
        until: Option<f64>,
        /// Seconds between metrics rows.
        #[arg(long = "sample-interval")]
        sample_interval: Option<f64>,
    },
    /// Write the built-in four-cloud scenario.
    #[command(name = "paper-scenario")]
    Preset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file and report every problem.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Reference solvers for cross-checking.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Max-min fair allocation.
    ///
    /// Flows: `name=link+link[:demand_bps]` separated by commas.
    /// Links: `name=capacity_bps` separated by commas.
    Maxmin {
        #[arg(long)]
        flows: String,
        #[arg(long)]
        links: String,
    },
}

fn scenario_exit(e: &ScenarioError) -> ExitCode {
    eprintln!("{e}");
    match e {
        ScenarioError::Io { .. } => ExitCode::from(EXIT_IO),
        _ => ExitCode::from(EXIT_VALIDATION),
    }
}

fn oracle_maxmin(flows: &str, links: &str) -> ExitCode {
    let parsed = parse_link_list(links).and_then(|l| parse_flow_list(flows).map(|f| (f, l)));
    let (flows, links) = match parsed {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let solved = match solve_max_min(&flows, &links) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let reference = max_min_oracle(&flows, &links).expect("inputs already validated");
    println!("flow,solver_bps,oracle_bps");
    for f in &flows {
        println!("{},{},{}", f.key, solved[&f.key], reference[&f.key]);
    }
    match check_max_min(&flows, &links, &solved, 1e-9) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("allocation is not max-min fair: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            out,
            until,
            sample_interval,
        } => {
            let mut cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(e) => return scenario_exit(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(h) = until {
                cfg.horizon_s = h * 3600.0;
            }
            if let Some(dt) = sample_interval {
                cfg.sample_interval_s = dt;
            }
            if let Err(issues) = cfg.validate() {
                return scenario_exit(&ScenarioError::Validation(issues));
            }
            match run(&cfg, &out) {
                Ok(summary) => {
                    print!("{}", summary.to_text());
                    if summary.all_completed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_INCOMPLETE)
                    }
                }
                Err(e @ RunError::Io { .. }) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_IO)
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Preset { out } => match emit_preset_scenario(&out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => scenario_exit(&e),
        },
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(cfg) => {
                println!(
                    "{}: ok ({} clouds, {} slots, {} jobs, {} faults)",
                    cfg.name,
                    cfg.clouds.len(),
                    cfg.total_slots(),
                    cfg.jobs().len(),
                    cfg.faults.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => scenario_exit(&e),
        },
        Command::Oracle {
            which: OracleCommand::Maxmin { flows, links },
        } => oracle_maxmin(&flows, &links),
    }
}
