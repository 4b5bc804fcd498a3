//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossdiff::cli::parse_config;
use crossdiff::diagnostics::refinement_study;
use crossdiff::mesh::Mesh;
use crossdiff::model::{build_model, detailed_balance_weights, smallest_eigenvalue_sym, InteractionMatrix, ModelData, ModelError};
use crossdiff::scheme::{jacobian, residual, State};
use crossdiff::solver::{advance, epsilon_continuation_solve, newton_step_solve, SolverConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Positive matrix with detailed balance and positive definite symmetrization:
/// `a_ij = S_ij / π_i` with `S` symmetric, positive and diagonally dominant.
fn random_db_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.gen_range(0.1..1.0);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    for i in 0..n {
        let off: f64 = s[i].iter().sum();
        s[i][i] = off + rng.gen_range(0.5..2.0);
    }
    (0..n).map(|i| (0..n).map(|j| s[i][j] / pi[i]).collect()).collect()
}

fn masses(mesh: &Mesh, u: &State) -> Vec<f64> {
    (0..u.n()).map(|i| mesh.cells.iter().map(|c| c.area * u.get(i, c.id)).sum()).collect()
}

struct SuiteStats {
    steps: usize,
    min_before_clamp: f64,
    worst_cert_margin: f64,
    cert_failures: usize,
    monotone_failures: usize,
    max_mass_drift: f64,
    fallback_steps: usize,
    dt_continuation_steps: usize,
    errors: Vec<String>,
}

/// Shared randomized suite for nonnegativity, entropy production and mass.
fn randomized_suite() -> SuiteStats {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let sizes = [4usize, 8, 16, 32];
    let dts = [1e-3, 1e-2, 5e-2];
    let cfg = SolverConfig::default();
    let mut stats = SuiteStats {
        steps: 0,
        min_before_clamp: f64::INFINITY,
        worst_cert_margin: f64::INFINITY,
        cert_failures: 0,
        monotone_failures: 0,
        max_mass_drift: 0.0,
        fallback_steps: 0,
        dt_continuation_steps: 0,
        errors: Vec::new(),
    };
    for config in 0..20 {
        let n = 2 + config % 2;
        let a = random_db_matrix(&mut rng, n);
        let delta = rng.gen_range(0.1..1.0);
        let model = build_model(InteractionMatrix::new(&a, delta).unwrap()).unwrap();
        assert!(model.lambda > 0.0);
        let (nx, ny) = (sizes[rng.gen_range(0..4)], sizes[rng.gen_range(0..4)]);
        let mesh = Mesh::cartesian(nx, ny, 1.0, 1.0).unwrap();
        let dt = dts[rng.gen_range(0..3)];
        let species: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..mesh.num_cells())
                    .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..2.0) })
                    .collect()
            })
            .collect();
        let mut u = State::from_species(&species);
        let total_area = mesh.total_area;
        let mut h = Vec::new();
        let mut tols = Vec::new();
        for _ in 0..20 {
            let (next, report) = match advance(&model, &mesh, &u, dt, &cfg) {
                Ok(ok) => ok,
                Err(e) => {
                    stats.errors.push(format!("config {config} (n={n}, {nx}x{ny}, dt={dt}): {e}"));
                    break;
                }
            };
            stats.steps += 1;
            stats.fallback_steps += usize::from(report.fallback_used);
            stats.dt_continuation_steps += usize::from(report.dt_stages > 0);
            stats.min_before_clamp = stats.min_before_clamp.min(report.min_value);

            let c = &report.certificate;
            if h.is_empty() {
                h.push(c.h_prev);
            }
            let tol = 10.0 * cfg.newton_tol * (1.0 + c.h_prev.abs());
            let slack = c.h_prev - c.h_next - c.grad_term - c.pressure_term;
            stats.worst_cert_margin = stats.worst_cert_margin.min((slack + tol) / tol);
            if !(slack >= -tol) {
                stats.cert_failures += 1;
            }
            h.push(c.h_next);
            tols.push(tol);

            let (before, after) = (masses(&mesh, &u), masses(&mesh, &next));
            for (b, a) in before.iter().zip(&after) {
                let drift = (a - b).abs() / b.abs().max(total_area * f64::EPSILON);
                stats.max_mass_drift = stats.max_mass_drift.max(drift);
            }
            u = next;
        }
        let mut allowance = 0.0;
        for k in 1..h.len() {
            allowance += tols[k - 1];
            if h[k] > h[k - 1] + tols[k - 1] || h[k] > h[0] + allowance {
                stats.monotone_failures += 1;
            }
        }
    }
    stats
}

fn criterion_1(s: &SuiteStats) -> Outcome {
    check(
        s.errors.is_empty() && s.steps == 400 && s.min_before_clamp >= -1e-10,
        format!(
            "{} accepted steps, min before clamp {:e} (bound -1e-10), errors {:?}",
            s.steps, s.min_before_clamp, s.errors
        ),
    )
}

fn criterion_2(s: &SuiteStats) -> Outcome {
    check(
        s.errors.is_empty() && s.cert_failures == 0 && s.monotone_failures == 0,
        format!(
            "{} certificate failures, {} monotonicity failures, worst (slack + tol)/tol = {:.3e}",
            s.cert_failures, s.monotone_failures, s.worst_cert_margin
        ),
    )
}

fn criterion_3(s: &SuiteStats) -> Outcome {
    check(
        s.errors.is_empty() && s.max_mass_drift <= 1e-10,
        format!("max relative mass drift {:e} (bound 1e-10)", s.max_mass_drift),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.gen_range(0.1..10.0)).collect()).collect();
        let pi = detailed_balance_weights(&DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]))
            .map_err(|e| e.to_string())?;
        let (p1, p2) = (pi[0], pi[1]);
        let (q1, q2) = (a[1][0], a[0][1]);
        let err = (p1 / (p1 + p2) - q1 / (q1 + q2)).abs().max((p2 / (p1 + p2) - q2 / (q1 + q2)).abs());
        worst = worst.max(err);
    }
    let cycle = vec![vec![1.0, 2.0, 5.0], vec![1.0, 1.0, 3.0], vec![1.0, 1.0, 1.0]];
    let rejected = matches!(
        build_model(InteractionMatrix::new(&cycle, 1.0).unwrap()),
        Err(ModelError::DetailedBalanceViolation { .. })
    );
    check(
        worst <= 1e-10 && rejected,
        format!("max deviation from (a21, a12) direction {worst:e}; cycle example rejected: {rejected}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b, d): (f64, f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let m = DMatrix::from_row_slice(2, 2, &[a, b, b, d]);
        let tr = a + d;
        let det = a * d - b * b;
        let closed = tr / 2.0 - (tr * tr / 4.0 - det).sqrt();
        worst = worst.max((smallest_eigenvalue_sym(&m).unwrap() - closed).abs());
    }
    let special = smallest_eigenvalue_sym(&DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 2.0])).unwrap();
    let special_err = (special - (4.0 - 2.0 * 2f64.sqrt())).abs();
    check(
        worst <= 1e-10 && special_err <= 1e-10,
        format!("max error vs closed form {worst:e}; [[6,2],[2,2]] error {special_err:e}"),
    )
}

fn two_cell_problem() -> (ModelData, Mesh, State) {
    let model = build_model(InteractionMatrix::new(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1.0).unwrap()).unwrap();
    let mesh = Mesh::cartesian(2, 1, 1.0, 1.0).unwrap();
    let prev = State::from_species(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    (model, mesh, prev)
}

/// Dense brute-force solve of the two-cell step. Mass conservation leaves two
/// unknowns `x_i = u_{i,0}`; the cell-0 equation
/// `m (x_i − prev_i) − dt τ (δ (u_{i,1} − x_i) + min(x_i⁺, u_{i,1}⁺)(p_{i,1} − p_{i,0})) = 0`
/// is continued in `dt` from 0, with finite-difference Newton at each stage.
fn two_cell_oracle() -> [f64; 4] {
    let (m, tau, delta) = (0.5, 2.0, 1.0);
    let a = [[2.0, 1.0], [1.0, 2.0]];
    let prev0 = [1.0, 0.0];
    let total = [1.0, 1.0];
    let eq = |x: [f64; 2], dt: f64| -> [f64; 2] {
        let u0 = x;
        let u1 = [total[0] - x[0], total[1] - x[1]];
        let p = |u: [f64; 2], i: usize| a[i][0] * u[0] + a[i][1] * u[1];
        let mut r = [0.0; 2];
        for i in 0..2 {
            let mob = u0[i].max(0.0).min(u1[i].max(0.0));
            let f = -tau * (delta * (u1[i] - u0[i]) + mob * (p(u1, i) - p(u0, i)));
            r[i] = m * (x[i] - prev0[i]) + dt * f;
        }
        r
    };
    let mut x = prev0;
    let stages = 400;
    for s in 1..=stages {
        let dt = 0.1 * s as f64 / stages as f64;
        for _ in 0..100 {
            let r = eq(x, dt);
            if r[0].abs().max(r[1].abs()) < 1e-15 {
                break;
            }
            let h = 1e-7;
            let mut j = [[0.0; 2]; 2];
            for c in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[c] += h;
                xm[c] -= h;
                let (rp, rm) = (eq(xp, dt), eq(xm, dt));
                for row in 0..2 {
                    j[row][c] = (rp[row] - rm[row]) / (2.0 * h);
                }
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            let step = [
                (r[0] * j[1][1] - r[1] * j[0][1]) / det,
                (r[1] * j[0][0] - r[0] * j[1][0]) / det,
            ];
            let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
            let mut alpha = 1.0;
            loop {
                let trial = [x[0] - alpha * step[0], x[1] - alpha * step[1]];
                if norm(eq(trial, dt)) < norm(r) || alpha < 1e-12 {
                    x = trial;
                    break;
                }
                alpha *= 0.5;
            }
        }
    }
    // (species 1 cell 0, species 1 cell 1, species 2 cell 0, species 2 cell 1)
    [x[0], total[0] - x[0], x[1], total[1] - x[1]]
}

fn max_dev(state: &State, oracle: &[f64; 4]) -> f64 {
    let got = [state.get(0, 0), state.get(0, 1), state.get(1, 0), state.get(1, 1)];
    got.iter().zip(oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let (model, mesh, prev) = two_cell_problem();
    let oracle = two_cell_oracle();
    let cfg = SolverConfig::default();
    let (newton, _) = newton_step_solve(&model, &mesh, &prev, 0.1, &cfg).map_err(|e| format!("newton: {e}"))?;
    let (cont, _) =
        epsilon_continuation_solve(&model, &mesh, &prev, 0.1, &cfg).map_err(|e| format!("continuation: {e}"))?;
    let (dn, dc) = (max_dev(&newton, &oracle), max_dev(&cont, &oracle));
    check(
        dn <= 1e-8 && dc <= 1e-8,
        format!("oracle {oracle:.12?}; newton deviation {dn:e}, continuation deviation {dc:e} (bound 1e-8)"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let mesh = Mesh::cartesian(3, 3, 1.0, 1.0).unwrap();
    let nc = mesh.num_cells();
    let margin = 1e-3;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut points = 0;
    while points < 20 {
        let a = random_db_matrix(&mut rng, 2);
        let model = build_model(InteractionMatrix::new(&a, rng.gen_range(0.1..1.0)).unwrap()).unwrap();
        let dt = rng.gen_range(1e-3..1e-1);
        let draw = |rng: &mut ChaCha8Rng| {
            let s: Vec<Vec<f64>> = (0..2).map(|_| (0..nc).map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
            State::from_species(&s)
        };
        let prev = draw(&mut rng);
        let cand = draw(&mut rng);
        let switching = mesh.interior_edges().any(|e| {
            let (k, l) = (e.cells.0, e.cells.1.unwrap());
            (0..2).any(|i| (cand.get(i, k) - cand.get(i, l)).abs() < margin)
        });
        if switching {
            continue;
        }
        points += 1;
        let jac = jacobian(&model, &mesh, &prev, &cand, dt).to_dense();
        let dim = cand.values().len();
        for col in 0..dim {
            let (mut up, mut dn) = (cand.clone(), cand.clone());
            up.values_mut()[col] += h;
            dn.values_mut()[col] -= h;
            let (rp, rm) = (residual(&model, &mesh, &prev, &up, dt), residual(&model, &mesh, &prev, &dn, dt));
            for row in 0..dim {
                let fd = (rp.values.values()[row] - rm.values.values()[row]) / (2.0 * h);
                let dev = (jac[row][col] - fd).abs() / jac[row][col].abs().max(1.0);
                worst = worst.max(dev);
            }
        }
    }
    check(worst <= 1e-6, format!("max relative deviation {worst:e} over {points} points (bound 1e-6)"))
}

fn criterion_8() -> Outcome {
    let model = build_model(InteractionMatrix::new(&[vec![2.0, 1.0], vec![1.0, 2.0]], 0.5).unwrap()).unwrap();
    let mesh = Mesh::cartesian(8, 8, 1.0, 1.0).unwrap();
    let cfg = SolverConfig::default();
    let mut u = State::constant(&[0.7, 0.3], mesh.num_cells());
    let mut h0 = None;
    let mut worst_h = 0.0f64;
    let mut worst_diss = 0.0f64;
    let mut worst_state = 0.0f64;
    let initial = u.clone();
    for _ in 0..50 {
        let (next, report) = advance(&model, &mesh, &u, 0.01, &cfg).map_err(|e| e.to_string())?;
        let c = &report.certificate;
        let h0 = *h0.get_or_insert(c.h_prev);
        worst_h = worst_h.max((c.h_next - h0).abs() / (1.0 + h0));
        worst_diss = worst_diss.max(c.grad_term.abs()).max(c.pressure_term.abs());
        worst_state = worst_state.max(next.max_abs_diff(&initial));
        u = next;
    }
    check(
        worst_diss == 0.0 && worst_h <= 1e-12 && worst_state <= 1e-12,
        format!(
            "dissipation max {worst_diss:e}, |H^k - H^0|/(1 + H^0) max {worst_h:e}, state drift {worst_state:e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let config = parse_config(
        "model.n = 2\nmodel.delta = 0.2\nmodel.a.1 = 2 1\nmodel.a.2 = 1 2\n\
         mesh.cartesian = 8 8 1 1\ntime.t_final = 0.05\ntime.dt = 0.00625\n\
         init.1 = gaussian 0.35 0.5 0.15 1.0\ninit.2 = gaussian 0.65 0.5 0.15 1.0\n",
    )
    .map_err(|e| e.to_string())?;
    let report = refinement_study(&config, 3).map_err(|e| e.to_string())?;
    let (d0, d1) = (&report.rows[0].l2_diff, &report.rows[1].l2_diff);
    let ratios: Vec<f64> = d0.iter().zip(d1).map(|(a, b)| a / b).collect();
    let ok = d0.iter().zip(d1).all(|(a, b)| b < a) && ratios.iter().all(|r| *r >= 1.5);
    let bv: Vec<f64> = report.levels.iter().map(|l| l.weak_bv_ratio).collect();
    check(
        ok,
        format!("L2 diffs 8-16 {d0:.4?}, 16-32 {d1:.4?}, ratios {ratios:.3?} (need >= 1.5); weak-BV ratios {bv:.4?}"),
    )
}

fn criterion_10() -> Outcome {
    let (model, mesh, prev) = two_cell_problem();
    // Σ m(K) h(prev_K) = 0.5·(1/2)·2 + 0.5·(1/2)·2
    let bound = 1.0;
    let (_, report) =
        epsilon_continuation_solve(&model, &mesh, &prev, 0.1, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let rungs: Vec<_> = report.eps_path.iter().filter(|r| r.eps > 0.0 && r.converged).collect();
    let worst = rungs.iter().map(|r| r.regularized_energy - bound).fold(f64::NEG_INFINITY, f64::max);
    let bound_ok = report.eps_path.iter().all(|r| (r.energy_bound - bound).abs() < 1e-14);
    check(
        !rungs.is_empty() && bound_ok && worst <= 1e-8,
        format!(
            "{} converged rungs; energies {:?} vs bound {bound}",
            rungs.len(),
            rungs.iter().map(|r| (r.eps, r.regularized_energy)).collect::<Vec<_>>()
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {id:>2} {name} [{secs:.2}s]: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {id:>2} {name} [{secs:.2}s]: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    println!("acceptance suite");
    let start = Instant::now();
    let suite = randomized_suite();
    println!(
        "randomized suite: 20 configs, {} steps in {:.2}s ({} needed a fallback, {} of them step-size continuation)",
        suite.steps,
        start.elapsed().as_secs_f64(),
        suite.fallback_steps,
        suite.dt_continuation_steps
    );
    let results = [
        run(1, "nonnegativity", || criterion_1(&suite)),
        run(2, "entropy production", || criterion_2(&suite)),
        run(3, "mass conservation", || criterion_3(&suite)),
        run(4, "detailed balance", criterion_4),
        run(5, "eigenvalue oracle", criterion_5),
        run(6, "two-cell oracle", criterion_6),
        run(7, "jacobian vs finite differences", criterion_7),
        run(8, "stationarity", criterion_8),
        run(9, "self-convergence", criterion_9),
        run(10, "regularized energy bound", criterion_10),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
