//! Runtime certificates and empirical convergence diagnostics.
//!
//! The central check is the discrete entropy production inequality
//!
//! ```text
//! Σ_K m(K) h(u_K^k) + Δt λ Σ_i Σ_σ τ_σ (D_σ u_i^k)² + (Δt/δ) Σ_i Σ_σ τ_σ π_i ū_{i,σ} (D_σ p_i(u^k))²
//!     ≤ Σ_K m(K) h(u_K^{k−1})
//! ```
//!
//! evaluated by [`entropy_certificate`] for a pair of consecutive states.

use std::f64::consts::PI;

use thiserror::Error;

use crate::cli::{RunConfig, MeshSpec, RunError, Simulation};
use crate::mesh::Mesh;
use crate::model::{total_entropy, ModelData};
use crate::scheme::{gradient_part, upwind_value_pos, State};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("meshes are not nested Cartesian refinements: {0}")]
    MeshNotNested(String),
    #[error("refinement study needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("refinement study needs a Cartesian base mesh")]
    NotCartesian,
    #[error("level {level} (nx = {nx}) failed: {source}")]
    Level {
        level: usize,
        nx: usize,
        #[source]
        source: RunError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyCertificate {
    pub h_prev: f64,
    pub h_next: f64,
    pub grad_term: f64,
    pub pressure_term: f64,
    /// `h_prev − h_next − grad_term − pressure_term`.
    pub slack: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

pub fn entropy_certificate(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    next: &State,
    dt: f64,
    tolerance: f64,
) -> EntropyCertificate {
    let n = model.n();
    let h_prev = total_entropy(model, mesh, prev);
    let h_next = total_entropy(model, mesh, next);
    let mut grad = 0.0;
    let mut press = 0.0;
    for e in mesh.interior_edges() {
        let (k, l) = (e.cells.0, e.cells.1.unwrap());
        for i in 0..n {
            let (uk, ul) = (next.get(i, k), next.get(i, l));
            let dp: f64 = (0..n)
                .map(|j| model.matrix.get(i, j) * (next.get(j, l) - next.get(j, k)))
                .sum();
            grad += e.transmissibility * (ul - uk).powi(2);
            press += e.transmissibility * model.pi[i] * upwind_value_pos(uk, ul) * dp * dp;
        }
    }
    let grad_term = dt * model.lambda * grad;
    let pressure_term = dt / model.delta() * press;
    let slack = h_prev - h_next - grad_term - pressure_term;
    EntropyCertificate {
        h_prev,
        h_next,
        grad_term,
        pressure_term,
        slack,
        tolerance,
        satisfied: slack >= -tolerance,
    }
}

/// `M_i = Σ_K m(K) u_{i,K}`.
pub fn mass_per_species(mesh: &Mesh, state: &State) -> Vec<f64> {
    let mut m = vec![0.0; state.n()];
    for c in &mesh.cells {
        for (i, mi) in m.iter_mut().enumerate() {
            *mi += c.area * state.get(i, c.id);
        }
    }
    m
}

/// `max_i |Σ_k Σ_K m(K) (u^k_{i,K} − u^{k−1}_{i,K}) φ(x_K, t_k)|`, with
/// `t_k = k Δt` counted from the first state of `trajectory`.
pub fn weak_bv_functional(
    mesh: &Mesh,
    trajectory: &[State],
    dt: f64,
    phi: impl Fn(f64, f64, f64) -> f64,
) -> f64 {
    let Some(first) = trajectory.first() else { return 0.0 };
    let n = first.n();
    let mut sums = vec![0.0; n];
    for (k, pair) in trajectory.windows(2).enumerate() {
        let t = (k + 1) as f64 * dt;
        for c in &mesh.cells {
            let weight = c.area * phi(c.center.x, c.center.y, t);
            for (i, s) in sums.iter_mut().enumerate() {
                *s += weight * (pair[1].get(i, c.id) - pair[0].get(i, c.id));
            }
        }
    }
    sums.into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// `Σ_σ τ_σ (D_σ v)²`.
pub fn discrete_gradient_norm_sq(mesh: &Mesh, v: &[f64]) -> f64 {
    gradient_part(mesh, v)
}

/// Per-species `L²` norm of the piecewise-constant difference between a
/// coarse Cartesian solution and a nested refinement, integrated exactly on
/// the fine cells.
pub fn l2_difference(
    coarse_mesh: &Mesh,
    coarse: &State,
    fine_mesh: &Mesh,
    fine: &State,
) -> Result<Vec<f64>, DiagnosticsError> {
    let (Some(cg), Some(fg)) = (coarse_mesh.grid, fine_mesh.grid) else {
        return Err(DiagnosticsError::MeshNotNested("both meshes must be Cartesian".into()));
    };
    let same_domain = (cg.lx - fg.lx).abs() <= 1e-12 * cg.lx && (cg.ly - fg.ly).abs() <= 1e-12 * cg.ly;
    if !same_domain || fg.nx % cg.nx != 0 || fg.ny % cg.ny != 0 {
        return Err(DiagnosticsError::MeshNotNested(format!(
            "{}x{} on [{}, {}] does not refine {}x{} on [{}, {}]",
            fg.nx, fg.ny, fg.lx, fg.ly, cg.nx, cg.ny, cg.lx, cg.ly
        )));
    }
    if coarse.n() != fine.n() {
        return Err(DiagnosticsError::MeshNotNested("species counts differ".into()));
    }
    let (rx, ry) = (fg.nx / cg.nx, fg.ny / cg.ny);
    let mut acc = vec![0.0; fine.n()];
    for iy in 0..fg.ny {
        for ix in 0..fg.nx {
            let f = fg.cell_index(ix, iy);
            let c = cg.cell_index(ix / rx, iy / ry);
            let area = fine_mesh.cells[f].area;
            for (i, a) in acc.iter_mut().enumerate() {
                *a += area * (coarse.get(i, c) - fine.get(i, f)).powi(2);
            }
        }
    }
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub k: usize,
    pub t: f64,
    pub h: f64,
    pub grad_term: f64,
    pub pressure_term: f64,
    pub slack: f64,
    /// Certificate tolerance of this step (0 for the initial row).
    pub tolerance: f64,
    pub masses: Vec<f64>,
    pub min_value: f64,
    pub newton_iters: usize,
    pub fallback_used: bool,
}

/// Per-step audit trail of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntropyLedger {
    pub rows: Vec<LedgerRow>,
}

impl EntropyLedger {
    /// Whether every step satisfies its certificate.
    pub fn all_certified(&self) -> bool {
        self.rows.iter().skip(1).all(|r| r.slack >= -r.tolerance)
    }

    /// Whether `H` never exceeds an earlier value by more than the summed
    /// step tolerances in between.
    pub fn entropy_nonincreasing(&self) -> bool {
        let mut allowance = 0.0;
        self.rows.windows(2).all(|w| {
            allowance += w[1].tolerance;
            w[1].h <= w[0].h + w[1].tolerance && w[1].h <= self.rows[0].h + allowance
        })
    }

    pub fn csv_header(n: usize) -> String {
        let mut h = String::from("k,t,H,grad_term,pressure_term,slack,min_value,newton_iters,fallback");
        for i in 1..=n {
            h.push_str(&format!(",mass_{i}"));
        }
        h
    }

    pub fn csv_row(row: &LedgerRow) -> String {
        let mut s = format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            row.k,
            row.t,
            row.h,
            row.grad_term,
            row.pressure_term,
            row.slack,
            row.min_value,
            row.newton_iters,
            u8::from(row.fallback_used)
        );
        for m in &row.masses {
            s.push_str(&format!(",{m:.16e}"));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.masses.len());
        let mut out = Self::csv_header(n);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub nx: usize,
    pub ny: usize,
    /// Mesh size `Δx`.
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub weak_bv: f64,
    /// `weak_bv / ‖∇φ‖_∞` for `φ = sin(πx) sin(πy)`.
    pub weak_bv_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub coarse_level: usize,
    /// Per-species `L²` difference between levels `coarse_level` and `coarse_level + 1`.
    pub l2_diff: Vec<f64>,
    /// `log2(previous difference / this difference)`, from the second row on.
    pub order: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelSummary>,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.l2_diff.len());
        let mut out = String::from("coarse_nx,fine_nx,h_coarse,h_fine");
        for i in 1..=n {
            out.push_str(&format!(",l2_diff_{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",order_{i}"));
        }
        out.push_str(",weak_bv_ratio_coarse,weak_bv_ratio_fine\n");
        for row in &self.rows {
            let (c, f) = (&self.levels[row.coarse_level], &self.levels[row.coarse_level + 1]);
            out.push_str(&format!("{},{},{:.16e},{:.16e}", c.nx, f.nx, c.h, f.h));
            for d in &row.l2_diff {
                out.push_str(&format!(",{d:.16e}"));
            }
            for i in 0..n {
                match &row.order {
                    Some(o) => out.push_str(&format!(",{:.16e}", o[i])),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{:.16e},{:.16e}\n", c.weak_bv_ratio, f.weak_bv_ratio));
        }
        out
    }
}

/// `φ(x, y, t) = sin(πx) sin(πy)`; `‖∇φ‖_∞ = π`.
fn bv_test_function(x: f64, y: f64, _t: f64) -> f64 {
    (PI * x).sin() * (PI * y).sin()
}

/// Runs `base` on `levels` nested Cartesian meshes (`nx`, `ny` doubling per
/// level, `dt` halving with `Δx`) and compares consecutive final states.
/// Levels run concurrently; every level must complete fully certified.
pub fn refinement_study(base: &RunConfig, levels: usize) -> Result<ConvergenceReport, DiagnosticsError> {
    if levels < 2 {
        return Err(DiagnosticsError::TooFewLevels(levels));
    }
    let MeshSpec::Cartesian { nx, ny, lx, ly } = base.mesh else {
        return Err(DiagnosticsError::NotCartesian);
    };
    let configs: Vec<RunConfig> = (0..levels)
        .map(|level| {
            let f = 1usize << level;
            let mut c = base.clone();
            c.mesh = MeshSpec::Cartesian { nx: nx * f, ny: ny * f, lx, ly };
            c.time.dt = base.time.dt / f as f64;
            c
        })
        .collect();

    let results: Vec<Result<(Simulation, Vec<State>), DiagnosticsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .enumerate()
            .map(|(level, cfg)| {
                s.spawn(move || {
                    let wrap = |source| DiagnosticsError::Level { level, nx: nx << level, source };
                    let sim = Simulation::new(cfg).map_err(wrap)?;
                    let mut trajectory = vec![sim.initial.clone()];
                    let (_, outcome) = sim.run(|state, _| trajectory.push(state.clone()));
                    outcome.map_err(wrap)?;
                    Ok((sim, trajectory))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("level thread panicked")).collect()
    });

    let mut runs = Vec::with_capacity(levels);
    for r in results {
        runs.push(r?);
    }

    let summaries = runs
        .iter()
        .map(|(sim, traj)| {
            let g = sim.mesh.grid.expect("cartesian level");
            let weak_bv = weak_bv_functional(&sim.mesh, traj, sim.dt, bv_test_function);
            LevelSummary {
                nx: g.nx,
                ny: g.ny,
                h: sim.mesh.size,
                dt: sim.dt,
                steps: sim.steps,
                weak_bv,
                weak_bv_ratio: weak_bv / PI,
            }
        })
        .collect();

    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(levels - 1);
    for level in 0..levels - 1 {
        let (coarse, ct) = &runs[level];
        let (fine, ft) = &runs[level + 1];
        let l2_diff = l2_difference(&coarse.mesh, ct.last().unwrap(), &fine.mesh, ft.last().unwrap())?;
        let order = rows.last().map(|prev: &ConvergenceRow| {
            prev.l2_diff.iter().zip(&l2_diff).map(|(a, b)| (a / b).log2()).collect()
        });
        rows.push(ConvergenceRow { coarse_level: level, l2_diff, order });
    }
    Ok(ConvergenceReport { levels: summaries, rows })
}
