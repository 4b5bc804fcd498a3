//! Run configuration, simulation driver and file outputs.

mod config;
mod init;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

pub use config::{
    parse_config, parse_config_with_overrides, ConfigError, InitProfile, MeshSpec, ModelConfig, OutputConfig,
    RunConfig, TimeConfig,
};
pub use init::initial_state;

use crate::diagnostics::{mass_per_species, refinement_study, ConvergenceReport, DiagnosticsError, EntropyLedger, LedgerRow};
use crate::mesh::{load_mesh, Mesh, MeshError};
use crate::model::{build_model, build_model_with_weights, total_entropy, InteractionMatrix, ModelData, ModelError};
use crate::scheme::State;
use crate::solver::{advance, SolverError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Setup(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: SolverError,
    },
    #[error("step {step}: entropy inequality violated (slack {slack:e}, tolerance {tolerance:e})")]
    Entropy { step: usize, slack: f64, tolerance: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diagnostics(#[from] Box<DiagnosticsError>),
}

/// A configured run: model, mesh and initial data, ready to step.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RunConfig,
    pub model: ModelData,
    pub mesh: Mesh,
    pub initial: State,
    pub dt: f64,
    pub steps: usize,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mc = &config.model;
        let matrix = InteractionMatrix::new(&mc.a, mc.delta)?;
        let model = match &mc.pi {
            Some(pi) => build_model_with_weights(matrix, pi.clone())?,
            None => build_model(matrix)?,
        };
        let mesh = match &config.mesh {
            MeshSpec::Cartesian { nx, ny, lx, ly } => Mesh::cartesian(*nx, *ny, *lx, *ly)?,
            MeshSpec::File(path) => {
                let text = fs::read_to_string(path).map_err(|source| RunError::Io { path: path.clone(), source })?;
                load_mesh(&text)?
            }
        };
        let initial = initial_state(config, &mesh)?;
        let (steps, exact) = config.num_steps();
        if !exact {
            warn!(
                "t_final = {} is not a multiple of dt = {}; running {steps} steps to t = {}",
                config.time.t_final,
                config.time.dt,
                steps as f64 * config.time.dt
            );
        }
        Ok(Self { config: config.clone(), model, mesh, initial, dt: config.time.dt, steps })
    }

    fn initial_row(&self) -> LedgerRow {
        LedgerRow {
            k: 0,
            t: 0.0,
            h: total_entropy(&self.model, &self.mesh, &self.initial),
            grad_term: 0.0,
            pressure_term: 0.0,
            slack: 0.0,
            tolerance: 0.0,
            masses: mass_per_species(&self.mesh, &self.initial),
            min_value: self.initial.min_value(),
            newton_iters: 0,
            fallback_used: false,
        }
    }

    /// Steps to the final time, calling `on_step` with each accepted state and
    /// its ledger row. The ledger is returned even when the run fails; a step
    /// whose entropy certificate fails is recorded, then ends the run.
    pub fn run(&self, mut on_step: impl FnMut(&State, &LedgerRow)) -> (EntropyLedger, Result<State, RunError>) {
        let mut ledger = EntropyLedger { rows: vec![self.initial_row()] };
        let mut state = self.initial.clone();
        for k in 1..=self.steps {
            let (next, report) = match advance(&self.model, &self.mesh, &state, self.dt, &self.config.solver) {
                Ok(ok) => ok,
                Err(source) => return (ledger, Err(RunError::Step { step: k, source })),
            };
            let cert = &report.certificate;
            let row = LedgerRow {
                k,
                t: k as f64 * self.dt,
                h: cert.h_next,
                grad_term: cert.grad_term,
                pressure_term: cert.pressure_term,
                slack: cert.slack,
                tolerance: cert.tolerance,
                masses: report.masses.clone(),
                min_value: report.min_value,
                newton_iters: report.newton_iters,
                fallback_used: report.fallback_used,
            };
            ledger.rows.push(row);
            if !cert.satisfied {
                let err = RunError::Entropy { step: k, slack: cert.slack, tolerance: cert.tolerance };
                return (ledger, Err(err));
            }
            on_step(&next, ledger.rows.last().expect("row just pushed"));
            state = next;
        }
        (ledger, Ok(state))
    }
}

/// What a completed run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub ledger: EntropyLedger,
    pub final_state: State,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

fn create_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })
}

/// `cell_id,x,y,u_1..u_n`, one row per cell.
pub fn fields_csv(mesh: &Mesh, state: &State) -> String {
    let mut s = String::from("cell_id,x,y");
    for i in 1..=state.n() {
        let _ = write!(s, ",u_{i}");
    }
    s.push('\n');
    for c in &mesh.cells {
        let _ = write!(s, "{},{:.16e},{:.16e}", c.id, c.center.x, c.center.y);
        for &v in state.cell(c.id) {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

/// Legacy ASCII VTK. Cartesian meshes become `STRUCTURED_POINTS` with cell
/// data; other meshes become a point cloud of cell centers.
pub fn fields_vtk(mesh: &Mesh, state: &State) -> String {
    let mut s = String::from("# vtk DataFile Version 3.0\ncross-diffusion fields\nASCII\n");
    let nc = mesh.num_cells();
    match mesh.grid {
        Some(g) => {
            let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
            let _ = writeln!(s, "DIMENSIONS {} {} 1", g.nx + 1, g.ny + 1);
            let _ = writeln!(s, "ORIGIN 0 0 0");
            let _ = writeln!(s, "SPACING {:.16e} {:.16e} 1", g.dx(), g.dy());
            let _ = writeln!(s, "CELL_DATA {nc}");
        }
        None => {
            let _ = writeln!(s, "DATASET POLYDATA\nPOINTS {nc} double");
            for c in &mesh.cells {
                let _ = writeln!(s, "{:.16e} {:.16e} 0", c.center.x, c.center.y);
            }
            let _ = writeln!(s, "VERTICES {nc} {}", 2 * nc);
            for k in 0..nc {
                let _ = writeln!(s, "1 {k}");
            }
            let _ = writeln!(s, "POINT_DATA {nc}");
        }
    }
    for i in 0..state.n() {
        let _ = writeln!(s, "SCALARS u_{} double 1\nLOOKUP_TABLE default", i + 1);
        for k in 0..nc {
            let _ = writeln!(s, "{:.16e}", state.get(i, k));
        }
    }
    s
}

fn write_snapshot(sim: &Simulation, state: &State, k: usize, files: &mut Vec<PathBuf>) -> Result<(), RunError> {
    let dir = &sim.config.output.dir;
    let csv = dir.join(format!("fields_{k:06}.csv"));
    write_file(&csv, &fields_csv(&sim.mesh, state))?;
    files.push(csv);
    if sim.config.output.vtk {
        let vtk = dir.join(format!("fields_{k:06}.vtk"));
        write_file(&vtk, &fields_vtk(&sim.mesh, state))?;
        files.push(vtk);
    }
    Ok(())
}

/// Runs `config`, writing `ledger.csv` and the field snapshots into
/// `config.output.dir`. Any failure is also written to `error.log` there.
pub fn run_simulation(config: &RunConfig) -> Result<RunSummary, RunError> {
    let dir = config.output.dir.clone();
    create_dir(&dir)?;
    let result = run_inner(config);
    if let Err(e) = &result {
        let mut msg = format!("error: {e}\n");
        let mut src = std::error::Error::source(e);
        while let Some(s) = src {
            let _ = writeln!(msg, "caused by: {s}");
            src = s.source();
        }
        write_file(&dir.join("error.log"), &msg)?;
    }
    result
}

fn run_inner(config: &RunConfig) -> Result<RunSummary, RunError> {
    let sim = Simulation::new(config)?;
    let dir = &config.output.dir;
    let every = config.output.every;
    let mut files = Vec::new();
    if every > 0 {
        write_snapshot(&sim, &sim.initial, 0, &mut files)?;
    }
    let mut io_error = None;
    let last = sim.steps;
    let (ledger, outcome) = sim.run(|state, row| {
        if io_error.is_none() && every > 0 && (row.k % every == 0 || row.k == last) {
            if let Err(e) = write_snapshot(&sim, state, row.k, &mut files) {
                io_error = Some(e);
            }
        }
    });
    let ledger_path = dir.join("ledger.csv");
    write_file(&ledger_path, &ledger.to_csv())?;
    files.push(ledger_path);
    if let Some(e) = io_error {
        return Err(e);
    }
    let final_state = outcome?;
    info!("completed {} steps; H = {:e}", sim.steps, ledger.rows.last().map_or(0.0, |r| r.h));
    Ok(RunSummary { ledger, final_state, files })
}

/// Refinement study over `levels` nested meshes; writes `convergence.csv`.
pub fn run_convergence(config: &RunConfig, levels: usize) -> Result<ConvergenceReport, RunError> {
    let dir = config.output.dir.clone();
    create_dir(&dir)?;
    match refinement_study(config, levels) {
        Ok(report) => {
            write_file(&dir.join("convergence.csv"), &report.to_csv())?;
            Ok(report)
        }
        Err(e) => {
            write_file(&dir.join("error.log"), &format!("error: {e}\n"))?;
            Err(RunError::Diagnostics(Box::new(e)))
        }
    }
}
