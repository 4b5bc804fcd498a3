//! One implicit Euler step of the scheme.
//!
//! [`advance`] first runs a semismooth Newton method on the scheme residual,
//! starting from the previous state. If that fails it falls back to
//! [`epsilon_continuation_solve`]: for each ε of a decreasing ladder, the
//! ε-regularized problem in entropy variables is solved (damped iteration of
//! the linear map `F_ε`, finished by Newton on the same regularized residual
//! when the damped iteration stalls), and the last iterate seeds the ε = 0
//! Newton solve. If that fails too, [`step_size_continuation_solve`] follows
//! the solution of the scheme from step size 0 up to `dt`. Accepted states are certified for nonnegativity, mass
//! conservation and the discrete entropy inequality.

use log::{debug, warn};
use thiserror::Error;

use crate::diagnostics::{entropy_certificate, mass_per_species, EntropyCertificate};
use crate::mesh::Mesh;
use crate::model::{total_entropy, ModelData};
use crate::scheme::{
    discrete_h1_norm_sq, jacobian, jacobian_regularized, regularization_operator, residual,
    residual_regularized, to_entropy_state, to_primal_state, State,
};
use crate::sparse::{solve_sparse, BandedLu, SparseError, SparseSystem};

/// Relative per-species mass drift tolerated on an accepted step.
pub const MASS_RTOL: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;
const MIN_DAMPING: f64 = 1e-8;
/// Smallest step-size increment of the step-size continuation, relative to `dt`.
const MIN_STAGE: f64 = 1e-6;
const MAX_STAGES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid input: {0}")]
    Precondition(String),
    #[error("{stage} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { stage: &'static str, iterations: usize, residual: f64 },
    #[error("step rejected: {0}")]
    CertificateViolation(Certificate),
    #[error("linear solve failed: {0}")]
    Linear(#[from] SparseError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    Nonnegativity { min_value: f64, tol_neg: f64 },
    Mass { species: usize, relative_drift: f64 },
}

impl std::fmt::Display for Certificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Certificate::Nonnegativity { min_value, tol_neg } => {
                write!(f, "minimum value {min_value:e} below -{tol_neg:e}")
            }
            Certificate::Mass { species, relative_drift } => {
                write!(f, "species {} mass drift {relative_drift:e}", species + 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Max-abs residual accepted as converged.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub line_search_shrink: f64,
    pub max_line_search: usize,
    /// Strictly decreasing, ending at 0.
    pub eps_ladder: Vec<f64>,
    pub fixed_point_damping: f64,
    pub max_fp_iters: usize,
    pub tol_neg: f64,
    /// Certificate tolerance is `entropy_slack_factor · newton_tol · (1 + |H_prev|)`.
    pub entropy_slack_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton_iters: 50,
            line_search_shrink: 0.5,
            max_line_search: 30,
            eps_ladder: vec![1e-2, 1e-4, 1e-6, 0.0],
            fixed_point_damping: 0.5,
            max_fp_iters: 200,
            tol_neg: 1e-10,
            entropy_slack_factor: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("newton_tol", self.newton_tol),
            ("tol_neg", self.tol_neg),
            ("entropy_slack_factor", self.entropy_slack_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err("line_search_shrink must lie in (0, 1)".into());
        }
        if !(self.fixed_point_damping > 0.0 && self.fixed_point_damping <= 1.0) {
            return Err("fixed_point_damping must lie in (0, 1]".into());
        }
        if self.max_newton_iters == 0 || self.max_line_search == 0 {
            return Err("iteration budgets must be positive".into());
        }
        let ladder = &self.eps_ladder;
        if ladder.last() != Some(&0.0) {
            return Err("eps_ladder must end at 0".into());
        }
        if ladder.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err("eps_ladder must be nonnegative and strictly decreasing".into());
        }
        Ok(())
    }

    pub fn entropy_tolerance(&self, h_prev: f64) -> f64 {
        self.entropy_slack_factor * self.newton_tol * (1.0 + h_prev.abs())
    }
}

/// Outcome of one rung of the ε-continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct RungReport {
    pub eps: f64,
    pub fixed_point_iters: usize,
    pub newton_iters: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// `ε Δt Σ_i ‖w_i‖²_{1,2}` at the rung's final iterate.
    pub regularized_energy: f64,
    /// `Σ_K m(K) h(prev_K)`.
    pub energy_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub newton_iters: usize,
    pub fallback_used: bool,
    pub eps_path: Vec<RungReport>,
    /// Accepted stages of the step-size continuation; 0 if it did not run.
    pub dt_stages: usize,
    pub residual_norm: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub dissipation_gradient_term: f64,
    pub dissipation_pressure_term: f64,
    /// Minimum entry before clamping.
    pub min_value: f64,
    /// Largest magnitude of a tiny negative entry set to zero.
    pub clamp_magnitude: f64,
    pub masses: Vec<f64>,
    pub max_mass_drift: f64,
    pub certificate: EntropyCertificate,
    pub entropy_inequality_satisfied: bool,
    pub slack: f64,
}

fn check_inputs(model: &ModelData, mesh: &Mesh, prev: &State, dt: f64) -> Result<(), SolverError> {
    if !prev.dims_match(model, mesh) {
        return Err(SolverError::Precondition(format!(
            "state has {} species x {} cells, expected {} x {}",
            prev.n(),
            prev.num_cells(),
            model.n(),
            mesh.num_cells()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SolverError::Precondition(format!("dt = {dt} must be positive")));
    }
    Ok(())
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Semismooth Newton with backtracking on `‖R‖₂`. `system` builds the Newton
/// system at an iterate, `res` evaluates the residual.
fn newton_loop(
    stage: &'static str,
    mut x: State,
    cfg: &SolverConfig,
    res: impl Fn(&State) -> (Vec<f64>, f64),
    system: impl Fn(&State) -> SparseSystem,
) -> Result<(State, usize, f64), SolverError> {
    let (r0, mut rmax) = res(&x);
    let mut merit = norm2(&r0);
    for iter in 0..cfg.max_newton_iters {
        if rmax <= cfg.newton_tol {
            return Ok((x, iter, rmax));
        }
        let sys = system(&x);
        let d = solve_sparse(&sys).map_err(|e| {
            debug!("{stage}: linear solve failed at iteration {iter}: {e}");
            SolverError::NoConvergence { stage, iterations: iter, residual: rmax }
        })?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..cfg.max_line_search {
            let mut trial = x.clone();
            for (t, di) in trial.values_mut().iter_mut().zip(&d) {
                *t += alpha * di;
            }
            let (tr, tmax) = res(&trial);
            let tmerit = norm2(&tr);
            if tmerit.is_finite() && tmerit <= (1.0 - ARMIJO * alpha) * merit {
                x = trial;
                rmax = tmax;
                merit = tmerit;
                accepted = true;
                break;
            }
            alpha *= cfg.line_search_shrink;
        }
        if !accepted {
            return Err(SolverError::NoConvergence { stage, iterations: iter, residual: rmax });
        }
    }
    if rmax <= cfg.newton_tol {
        Ok((x, cfg.max_newton_iters, rmax))
    } else {
        Err(SolverError::NoConvergence { stage, iterations: cfg.max_newton_iters, residual: rmax })
    }
}

fn newton_from(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    cfg: &SolverConfig,
    init: State,
) -> Result<(State, usize, f64), SolverError> {
    newton_loop(
        "newton",
        init,
        cfg,
        |u| {
            let r = residual(model, mesh, prev, u, dt);
            (r.values.values().to_vec(), r.norm)
        },
        |u| jacobian(model, mesh, prev, u, dt),
    )
}

/// One application of `F_ε`: solves the linear problem
/// `ε(−Δ_h + M) w_out,i = −(m(K)/Δt (u_i(w_in) − prev_i) + Σ_σ F⁺_i(u(w_in)))`.
pub fn solve_linear_epsilon(
    model: &ModelData,
    mesh: &Mesh,
    w_in: &State,
    prev: &State,
    dt: f64,
    eps: f64,
) -> Result<State, SolverError> {
    check_inputs(model, mesh, prev, dt)?;
    if !(eps > 0.0) {
        return Err(SolverError::Precondition(format!("eps = {eps} must be positive")));
    }
    let op = regularization_operator(mesh, eps);
    let lu = BandedLu::factor(&op)?;
    apply_f_eps(model, mesh, &op, &lu, w_in, prev, dt)
}

fn apply_f_eps(
    model: &ModelData,
    mesh: &Mesh,
    op: &SparseSystem,
    lu: &BandedLu,
    w_in: &State,
    prev: &State,
    dt: f64,
) -> Result<State, SolverError> {
    let n = model.n();
    let u = to_primal_state(model, w_in);
    let g = residual(model, mesh, prev, &u, dt).values;
    let mut out = State::zeros(n, mesh.num_cells());
    for i in 0..n {
        let rhs: Vec<f64> = g.species(i).iter().map(|v| -v).collect();
        let wi = lu.solve_refined(op, &rhs)?;
        for (k, v) in wi.into_iter().enumerate() {
            out.set(i, k, v);
        }
    }
    Ok(out)
}

fn regularized_energy(mesh: &Mesh, w: &State, eps: f64, dt: f64) -> f64 {
    let norms: f64 = (0..w.n()).map(|i| discrete_h1_norm_sq(mesh, &w.species(i))).sum();
    eps * dt * norms
}

fn solve_rung(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    eps: f64,
    cfg: &SolverConfig,
    mut w: State,
    energy_bound: f64,
) -> Result<(State, RungReport), SolverError> {
    let op = regularization_operator(mesh, eps);
    let lu = BandedLu::factor(&op)?;
    let res_norm = |w: &State| residual_regularized(model, mesh, w, prev, dt, eps).norm;

    let mut res = res_norm(&w);
    let mut theta = cfg.fixed_point_damping;
    let mut fp_iters = 0;
    while fp_iters < cfg.max_fp_iters && res > cfg.newton_tol && theta >= MIN_DAMPING {
        fp_iters += 1;
        let image = apply_f_eps(model, mesh, &op, &lu, &w, prev, dt)?;
        let mut cand = w.clone();
        for (c, f) in cand.values_mut().iter_mut().zip(image.values()) {
            *c += theta * (f - *c);
        }
        let r = res_norm(&cand);
        if r < res {
            w = cand;
            res = r;
        } else {
            theta *= cfg.line_search_shrink;
        }
    }

    let mut newton_iters = 0;
    if res > cfg.newton_tol {
        debug!("eps = {eps:e}: damped iteration stalled at {res:e}, switching to Newton");
        match newton_loop(
            "regularized newton",
            w.clone(),
            cfg,
            |w| {
                let r = residual_regularized(model, mesh, w, prev, dt, eps);
                (r.values.values().to_vec(), r.norm)
            },
            |w| jacobian_regularized(model, mesh, w, prev, dt, eps),
        ) {
            Ok((ws, iters, r)) => {
                w = ws;
                res = r;
                newton_iters = iters;
            }
            Err(e) => debug!("eps = {eps:e}: {e}"),
        }
    }

    let report = RungReport {
        eps,
        fixed_point_iters: fp_iters,
        newton_iters,
        residual_norm: res,
        converged: res <= cfg.newton_tol,
        regularized_energy: regularized_energy(mesh, &w, eps, dt),
        energy_bound,
    };
    Ok((w, report))
}

fn unchecked_report(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    next: &State,
    dt: f64,
    cfg: &SolverConfig,
) -> StepReport {
    let h_prev = total_entropy(model, mesh, prev);
    let cert = entropy_certificate(model, mesh, prev, next, dt, cfg.entropy_tolerance(h_prev));
    let before = mass_per_species(mesh, prev);
    let masses = mass_per_species(mesh, next);
    let floor = mesh.total_area * f64::EPSILON;
    let max_mass_drift = before
        .iter()
        .zip(&masses)
        .map(|(a, b)| (b - a).abs() / a.abs().max(floor))
        .fold(0.0, f64::max);
    StepReport {
        newton_iters: 0,
        fallback_used: false,
        eps_path: Vec::new(),
        dt_stages: 0,
        residual_norm: residual(model, mesh, prev, next, dt).norm,
        entropy_before: cert.h_prev,
        entropy_after: cert.h_next,
        dissipation_gradient_term: cert.grad_term,
        dissipation_pressure_term: cert.pressure_term,
        min_value: next.min_value(),
        clamp_magnitude: 0.0,
        masses,
        max_mass_drift,
        entropy_inequality_satisfied: cert.satisfied,
        slack: cert.slack,
        certificate: cert,
    }
}

/// Newton's method on the scheme, initial guess `prev`.
pub fn newton_step_solve(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(State, StepReport), SolverError> {
    check_inputs(model, mesh, prev, dt)?;
    let (state, iters, _) = newton_from(model, mesh, prev, dt, cfg, prev.clone())?;
    let mut report = unchecked_report(model, mesh, prev, &state, dt, cfg);
    report.newton_iters = iters;
    Ok((state, report))
}

/// ε-continuation in entropy variables, finished by Newton at ε = 0.
pub fn epsilon_continuation_solve(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(State, StepReport), SolverError> {
    check_inputs(model, mesh, prev, dt)?;
    let energy_bound = total_entropy(model, mesh, prev);
    let mut w = to_entropy_state(model, prev);
    let mut path = Vec::new();
    for &eps in cfg.eps_ladder.iter().filter(|&&e| e > 0.0) {
        let (ws, rung) = solve_rung(model, mesh, prev, dt, eps, cfg, w, energy_bound)?;
        debug!(
            "eps = {eps:e}: residual {:e} after {} damped + {} Newton iterations",
            rung.residual_norm, rung.fixed_point_iters, rung.newton_iters
        );
        w = ws;
        path.push(rung);
    }
    let init = to_primal_state(model, &w);
    let (state, iters, _) = newton_from(model, mesh, prev, dt, cfg, init)?;
    let mut report = unchecked_report(model, mesh, prev, &state, dt, cfg);
    report.newton_iters = iters;
    report.fallback_used = true;
    path.push(RungReport {
        eps: 0.0,
        fixed_point_iters: 0,
        newton_iters: iters,
        residual_norm: report.residual_norm,
        converged: true,
        regularized_energy: 0.0,
        energy_bound,
    });
    report.eps_path = path;
    Ok((state, report))
}

/// Continuation in the step size: solves the scheme with step `s·dt` for
/// `s` rising from 0 to 1, each stage started from the previous solution.
/// The increment doubles after a converged stage and halves after a failed one.
pub fn step_size_continuation_solve(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(State, StepReport), SolverError> {
    check_inputs(model, mesh, prev, dt)?;
    let mut u = prev.clone();
    let (mut s, mut ds) = (0.0f64, 0.125f64);
    let (mut stages, mut iters, mut attempts) = (0, 0, 0);
    while s < 1.0 {
        attempts += 1;
        let target = (s + ds).min(1.0);
        match newton_from(model, mesh, prev, target * dt, cfg, u.clone()) {
            Ok((next, it, _)) => {
                u = next;
                s = target;
                stages += 1;
                iters += it;
                ds = (2.0 * ds).min(1.0);
            }
            Err(e) => {
                ds *= 0.5;
                if ds < MIN_STAGE || attempts >= MAX_STAGES {
                    let residual = match e {
                        SolverError::NoConvergence { residual, .. } => residual,
                        _ => f64::NAN,
                    };
                    return Err(SolverError::NoConvergence {
                        stage: "step-size continuation",
                        iterations: attempts,
                        residual,
                    });
                }
            }
        }
    }
    debug!("step-size continuation: {stages} stages, {attempts} attempts, {iters} Newton iterations");
    let mut report = unchecked_report(model, mesh, prev, &u, dt, cfg);
    report.newton_iters = iters;
    report.fallback_used = true;
    report.dt_stages = stages;
    Ok((u, report))
}

/// Advances `prev` by one step of size `dt` and certifies the result.
///
/// Entries in `[−tol_neg, 0)` are set to zero; anything more negative, or a
/// per-species mass drift above [`MASS_RTOL`], rejects the step. The entropy
/// inequality is evaluated and reported but does not reject.
pub fn advance(
    model: &ModelData,
    mesh: &Mesh,
    prev: &State,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(State, StepReport), SolverError> {
    check_inputs(model, mesh, prev, dt)?;
    cfg.validate().map_err(SolverError::Precondition)?;
    let min_prev = prev.min_value();
    if !(min_prev >= -cfg.tol_neg) {
        return Err(SolverError::Precondition(format!(
            "previous state has negative entry {min_prev:e}"
        )));
    }

    let (mut state, mut report) = match newton_step_solve(model, mesh, prev, dt, cfg) {
        Ok(ok) => ok,
        Err(e) => {
            warn!("Newton failed ({e}); falling back to eps-continuation");
            match epsilon_continuation_solve(model, mesh, prev, dt, cfg) {
                Ok(ok) => ok,
                Err(e) => {
                    warn!("eps-continuation failed ({e}); falling back to step-size continuation");
                    step_size_continuation_solve(model, mesh, prev, dt, cfg)?
                }
            }
        }
    };

    let min_value = state.min_value();
    if !(min_value >= -cfg.tol_neg) {
        return Err(SolverError::CertificateViolation(Certificate::Nonnegativity {
            min_value,
            tol_neg: cfg.tol_neg,
        }));
    }
    let mut clamp = 0.0f64;
    for v in state.values_mut() {
        if *v < 0.0 {
            clamp = clamp.max(-*v);
            *v = 0.0;
        }
    }
    if clamp > 0.0 {
        debug!("clamped negative entries up to {clamp:e}");
    }
    state.time_index = prev.time_index + 1;

    let mut checked = unchecked_report(model, mesh, prev, &state, dt, cfg);
    checked.newton_iters = report.newton_iters;
    checked.fallback_used = report.fallback_used;
    checked.eps_path = std::mem::take(&mut report.eps_path);
    checked.dt_stages = report.dt_stages;
    checked.min_value = min_value;
    checked.clamp_magnitude = clamp;

    let before = mass_per_species(mesh, prev);
    let floor = mesh.total_area * f64::EPSILON;
    for (species, (a, b)) in before.iter().zip(&checked.masses).enumerate() {
        let relative_drift = (b - a).abs() / a.abs().max(floor);
        if !(relative_drift <= MASS_RTOL) {
            return Err(SolverError::CertificateViolation(Certificate::Mass { species, relative_drift }));
        }
    }
    Ok((state, checked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, InteractionMatrix};

    fn sym_model() -> ModelData {
        build_model(InteractionMatrix::new(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1.0).unwrap()).unwrap()
    }

    fn oracle_prev() -> State {
        State::from_species(&[vec![1.0, 0.0], vec![0.0, 1.0]])
    }

    #[test]
    fn default_config_is_valid() {
        assert_eq!(SolverConfig::default().validate(), Ok(()));
        let cfg = SolverConfig { eps_ladder: vec![1e-2, 1e-2, 0.0], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SolverConfig { eps_ladder: vec![1e-2, 1e-4], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SolverConfig { line_search_shrink: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn linear_epsilon_zero_input() {
        let model = sym_model();
        let mesh = Mesh::cartesian(3, 3, 1.0, 1.0).unwrap();
        let zero = State::zeros(2, 9);
        let w = solve_linear_epsilon(&model, &mesh, &zero, &zero, 0.1, 1e-2).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.0));
        assert!(solve_linear_epsilon(&model, &mesh, &zero, &zero, 0.1, 0.0).is_err());
    }

    #[test]
    fn linear_epsilon_single_cell() {
        let model = sym_model();
        let mesh = Mesh::cartesian(1, 1, 0.5, 0.8).unwrap();
        let area = 0.4;
        let w_in = State::constant(&[2.0, 1.0], 1);
        let prev = State::constant(&[0.3, 0.1], 1);
        let (dt, eps) = (0.2, 1e-3);
        let out = solve_linear_epsilon(&model, &mesh, &w_in, &prev, dt, eps).unwrap();
        let u = crate::model::entropy_to_primal(&model, w_in.cell(0));
        for i in 0..2 {
            let lhs = eps * area * out.get(i, 0);
            let rhs = -area / dt * (u[i] - prev.get(i, 0));
            assert!((lhs - rhs).abs() < 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        let model = sym_model();
        let mesh = Mesh::cartesian(4, 4, 1.0, 1.0).unwrap();
        let prev = State::constant(&[0.5, 1.5], 16);
        let (s, r) = newton_step_solve(&model, &mesh, &prev, 0.1, &SolverConfig::default()).unwrap();
        assert_eq!(r.newton_iters, 0);
        assert_eq!(s, prev);

        let (s, r) = epsilon_continuation_solve(&model, &mesh, &prev, 0.1, &SolverConfig::default()).unwrap();
        assert!(r.fallback_used);
        assert!(s.max_abs_diff(&prev) <= 1e-10);
    }

    #[test]
    fn newton_and_continuation_agree() {
        let model = sym_model();
        let mesh = Mesh::cartesian(2, 1, 1.0, 1.0).unwrap();
        let prev = oracle_prev();
        let cfg = SolverConfig::default();
        let (a, ra) = newton_step_solve(&model, &mesh, &prev, 0.1, &cfg).unwrap();
        let (b, rb) = epsilon_continuation_solve(&model, &mesh, &prev, 0.1, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
        assert!(ra.entropy_inequality_satisfied && rb.entropy_inequality_satisfied);
        assert_eq!(rb.eps_path.len(), 4);
        for rung in &rb.eps_path {
            assert!(rung.converged, "{rung:?}");
            assert!(rung.regularized_energy <= rung.energy_bound + 1e-8);
        }

        let short = SolverConfig { eps_ladder: vec![1e-6, 0.0], ..Default::default() };
        let (c, _) = epsilon_continuation_solve(&model, &mesh, &prev, 0.1, &short).unwrap();
        assert!(b.max_abs_diff(&c) < 1e-8);
    }

    #[test]
    fn step_size_continuation_matches_newton() {
        let model = sym_model();
        let mesh = Mesh::cartesian(2, 1, 1.0, 1.0).unwrap();
        let cfg = SolverConfig::default();
        let (a, _) = newton_step_solve(&model, &mesh, &oracle_prev(), 0.1, &cfg).unwrap();
        let (b, rb) = step_size_continuation_solve(&model, &mesh, &oracle_prev(), 0.1, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
        assert!(rb.dt_stages >= 1 && rb.fallback_used);
    }

    /// Rough data where Newton from `prev` stalls at a kink of the mobility.
    #[test]
    fn kinked_step_needs_step_size_continuation() {
        let a = vec![vec![3.233039744706362, 0.4812236707439525], vec![0.5231393578379328, 2.3613521000215876]];
        let model = build_model(InteractionMatrix::new(&a, 0.237431041147344).unwrap()).unwrap();
        let mesh = Mesh::cartesian(4, 4, 1.0, 1.0).unwrap();
        let prev = State::from_flat(
            2,
            vec![
                0.13352462754309213, 1.390522708427278, 0.6905342699387047, 0.3094346151899474,
                1.0811645962022145, 0.32563281625735785, 0.6618198091155612, 0.7697891131825658,
                1.0331566079655934, 1.807206219005956, 1.7827451594832104, 0.9285051736602314,
                1.7763014221709144, 1.1190820293053974, 1.0710615691572807, 0.7260043130941263,
                1.3318802911089982, 0.0, 1.9160964509920824, 0.6083026228542678, 0.038154119815151155,
                1.3417499710735505, 1.1073954294098596, 0.0, 0.26229469770220026, 0.0,
                0.12902059431833646, 0.0, 0.0, 0.5333882874111877, 1.9731002451406363, 0.0,
            ],
        );
        let cfg = SolverConfig::default();
        assert!(newton_step_solve(&model, &mesh, &prev, 0.05, &cfg).is_err());
        let (next, report) = advance(&model, &mesh, &prev, 0.05, &cfg).unwrap();
        assert!(report.dt_stages > 0);
        assert!(report.entropy_inequality_satisfied);
        assert!(next.min_value() > 0.0);
        assert!(residual(&model, &mesh, &prev, &next, 0.05).norm <= cfg.newton_tol);
    }

    #[test]
    fn rung_fixed_point_zeroes_regularized_residual() {
        let model = sym_model();
        let mesh = Mesh::cartesian(3, 2, 1.0, 1.0).unwrap();
        let prev = State::from_flat(2, vec![1.0, 0.2, 0.0, 0.5, 0.3, 0.3, 0.8, 0.0, 0.1, 0.9, 0.6, 0.4]);
        let (dt, eps) = (0.05, 1e-2);
        let cfg = SolverConfig::default();
        let bound = total_entropy(&model, &mesh, &prev);
        let (w, rung) =
            solve_rung(&model, &mesh, &prev, dt, eps, &cfg, to_entropy_state(&model, &prev), bound).unwrap();
        assert!(rung.converged);
        let image = solve_linear_epsilon(&model, &mesh, &w, &prev, dt, eps).unwrap();
        assert!(image.max_abs_diff(&w) < 1e-6, "{}", image.max_abs_diff(&w));
        assert!(residual_regularized(&model, &mesh, &w, &prev, dt, eps).norm <= cfg.newton_tol);
    }

    #[test]
    fn advance_rejects_negative_input() {
        let model = sym_model();
        let mesh = Mesh::cartesian(2, 1, 1.0, 1.0).unwrap();
        let prev = State::from_species(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            advance(&model, &mesh, &prev, 0.1, &SolverConfig::default()),
            Err(SolverError::Precondition(_))
        ));
        assert!(matches!(
            advance(&model, &mesh, &oracle_prev(), 0.0, &SolverConfig::default()),
            Err(SolverError::Precondition(_))
        ));
    }

    #[test]
    fn advance_constant_state() {
        let model = sym_model();
        let mesh = Mesh::cartesian(3, 3, 1.0, 1.0).unwrap();
        let prev = State::constant(&[1.0, 2.0], 9);
        let (next, r) = advance(&model, &mesh, &prev, 0.7, &SolverConfig::default()).unwrap();
        assert_eq!(next.values(), prev.values());
        assert_eq!(next.time_index, 1);
        assert_eq!(r.entropy_before, r.entropy_after);
        assert_eq!(r.dissipation_gradient_term, 0.0);
        assert_eq!(r.dissipation_pressure_term, 0.0);
        assert!(r.entropy_inequality_satisfied);
    }

    #[test]
    fn advance_two_cell_certificates() {
        let model = sym_model();
        let mesh = Mesh::cartesian(2, 1, 1.0, 1.0).unwrap();
        let (next, r) = advance(&model, &mesh, &oracle_prev(), 0.1, &SolverConfig::default()).unwrap();
        assert!(next.min_value() >= 0.0);
        assert!(r.entropy_inequality_satisfied);
        assert!(r.entropy_after + r.dissipation_gradient_term + r.dissipation_pressure_term
            <= r.entropy_before + 1e-9);
        assert!(r.max_mass_drift <= MASS_RTOL);
    }
}
