use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossdiff::cli::{parse_config_with_overrides, run_convergence, run_simulation, RunConfig};
use crossdiff::mesh::{load_mesh, validate_mesh};

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Entropy-stable finite-volume solver for cross-diffusion systems")]
struct Cli {
    /// Override a configuration entry, e.g. `--override time.dt=0.005`.
    #[arg(long = "override", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write the entropy ledger and field snapshots.
    Simulate { config: PathBuf },
    /// Run a self-convergence study on nested refinements of the configured mesh.
    Converge {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Parse and validate a mesh file.
    CheckMesh { mesh: PathBuf },
}

const RUN_FAILURE: u8 = 1;
const USAGE: u8 = 2;

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<RunConfig, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(USAGE)
    })?;
    parse_config_with_overrides(&text, overrides).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(USAGE)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config } => {
            let cfg = match load_config(&config, &cli.overrides) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_simulation(&cfg) {
                Ok(summary) => {
                    println!("wrote {} files to {}", summary.files.len(), cfg.output.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUN_FAILURE)
                }
            }
        }
        Command::Converge { config, levels } => {
            if levels < 2 {
                eprintln!("error: --levels must be at least 2");
                return ExitCode::from(USAGE);
            }
            let cfg = match load_config(&config, &cli.overrides) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_convergence(&cfg, levels) {
                Ok(report) => {
                    print!("{}", report.to_csv());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUN_FAILURE)
                }
            }
        }
        Command::CheckMesh { mesh } => {
            let text = match fs::read_to_string(&mesh) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", mesh.display());
                    return ExitCode::from(USAGE);
                }
            };
            match load_mesh(&text) {
                Ok(m) => {
                    println!(
                        "{}: {} cells, {} edges, size {:e}, regularity {:e}: {}",
                        mesh.display(),
                        m.num_cells(),
                        m.edges.len(),
                        m.size,
                        m.xi,
                        validate_mesh(&m)
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", mesh.display());
                    ExitCode::from(RUN_FAILURE)
                }
            }
        }
    }
}
