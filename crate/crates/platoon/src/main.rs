use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use platoon::scenario::{self, RunSummary};
use platoon::monitor::check_weight_condition;
use platoon::PlatoonError;

#[derive(Parser)]
#[command(name = "platoon", about = "Distributed MPC platoon simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trace, report, and summary files.
    Run {
        /// Bundled preset name or path to a scenario config file.
        #[arg(long)]
        scenario: String,
        /// Override the number of simulation steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory (defaults to the scenario's own, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the runtime stability monitor.
        #[arg(long)]
        no_monitor: bool,
        /// Size of the worker thread pool.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Operations on the bundled preset library.
    Presets {
        #[command(subcommand)]
        command: PresetsCommand,
    },
    /// Tabulate summary files side by side.
    Compare {
        /// Summary JSON files produced by `run`.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Topology diagnostics without simulating.
    Topo {
        #[command(subcommand)]
        command: TopoCommand,
    },
}

#[derive(Subcommand)]
enum PresetsCommand {
    /// List the bundled preset names.
    List,
}

#[derive(Subcommand)]
enum TopoCommand {
    /// Print the spectral and weight-condition reports for a scenario.
    Analyze {
        #[arg(long)]
        scenario: String,
    },
}

const EXIT_MONITOR_FAIL: u8 = 1;
const EXIT_CONFIG_OR_HALT: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_for(err: &PlatoonError) -> u8 {
    match err {
        PlatoonError::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG_OR_HALT,
    }
}

fn run(cmd: Command) -> Result<u8, PlatoonError> {
    match cmd {
        Command::Run { scenario: name, steps, out, no_monitor, threads } => {
            if let Some(k) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                    .map_err(|e| PlatoonError::Config(format!("thread pool: {e}")))?;
            }
            let mut cfg = scenario::load(&name)?;
            if let Some(steps) = steps {
                cfg.duration = steps as f64 * cfg.engine.dt;
            }
            let out_dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let artifacts = scenario::run_scenario(&cfg, Some(&out_dir), !no_monitor)?;
            let s = &artifacts.summary;
            println!(
                "{}: {} steps, max |spacing error| {:.4} m, final {:.6} m ({:.2} s wall)",
                s.scenario, s.steps, s.max_spacing_error, s.final_max_spacing_error, s.wall_seconds
            );
            if let Some(report) = &artifacts.report {
                println!(
                    "monitor: {} asserted checks passed, {} failed{}",
                    report.asserted_pass,
                    report.asserted_fail,
                    report
                        .steps_to_consensus
                        .map_or(String::new(), |k| format!(", consensus after {k} steps"))
                );
                if !report.all_asserted_pass() {
                    return Ok(EXIT_MONITOR_FAIL);
                }
            }
            println!("artifacts written to {}", out_dir.display());
            Ok(0)
        }
        Command::Presets { command: PresetsCommand::List } => {
            for name in scenario::preset_names() {
                println!("{name}");
            }
            Ok(0)
        }
        Command::Compare { summaries } => {
            let parsed: Result<Vec<RunSummary>, PlatoonError> = summaries
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p)?;
                    serde_json::from_str(&text).map_err(|e| {
                        PlatoonError::Config(format!("{}: {e}", p.display()))
                    })
                })
                .collect();
            print!("{}", scenario::compare_summaries(&parsed?)?);
            Ok(0)
        }
        Command::Topo { command: TopoCommand::Analyze { scenario: name } } => {
            let cfg = scenario::load(&name)?;
            let topo = &cfg.engine.topology;
            let report = topo.spectral_report()?;
            println!("followers: {}", topo.follower_count());
            println!("unidirectional: {}", topo.is_unidirectional());
            println!("spanning tree from leader: {}", topo.has_spanning_tree());
            println!("spectral radius: {:.6}", report.spectral_radius);
            println!(
                "eigenvalue magnitudes: [{}]",
                report
                    .eigenvalue_magnitudes
                    .iter()
                    .map(|m| format!("{m:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            match report.nilpotency_degree {
                Some(k) => println!("consensus matrix nilpotent with degree {k}"),
                None => println!("consensus matrix not nilpotent"),
            }
            let mut ok = true;
            for check in check_weight_condition(topo, &cfg.engine.weights)? {
                println!(
                    "weight condition node {}: margin {:+.6} ({})",
                    check.node,
                    check.margin,
                    if check.pass { "ok" } else { "VIOLATED" }
                );
                ok &= check.pass;
            }
            Ok(if ok { 0 } else { EXIT_MONITOR_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}
