//! Two-point flux finite-volume discretization with min-upwinded mobility.
//!
//! For a cell `K` and an edge `σ ∈ E_K` the flux of species `i` is
//!
//! ```text
//! F_{i,K,σ} = −τ_σ (δ D_{K,σ} u_i + ū_{i,σ} D_{K,σ} p_i(u)),   ū_{i,σ} = min(u_{i,K}⁺, u_{i,K,σ}⁺)
//! ```
//!
//! and one implicit Euler step reads `m(K)/Δt (u_K − u_K^prev) + Σ_σ F_{K,σ} = 0`.
//! Exterior edges carry no flux (`D_{K,σ} = 0` under no-flux conditions), so
//! every loop here runs over interior edges only. Each interior flux is
//! evaluated once and added to `K`, subtracted from `L`, which makes the
//! discrete conservation exact up to summation rounding.
//!
//! Unknowns are numbered species-minor within cell: index `K·n + i`.

use nalgebra::DMatrix;

use crate::mesh::{Edge, Mesh};
use crate::model::{entropy_to_primal, pressure_into, primal_to_entropy, ModelData};
use crate::sparse::SparseSystem;

/// Densities `u_{i,K}` at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    n: usize,
    values: Vec<f64>,
    pub time_index: usize,
}

impl State {
    pub fn zeros(n: usize, ncells: usize) -> Self {
        Self { n, values: vec![0.0; n * ncells], time_index: 0 }
    }

    pub fn constant(u: &[f64], ncells: usize) -> Self {
        Self { n: u.len(), values: u.repeat(ncells), time_index: 0 }
    }

    /// Builds a state from per-species cell arrays `species[i][K]`.
    pub fn from_species(species: &[Vec<f64>]) -> Self {
        let n = species.len();
        let ncells = species.first().map_or(0, Vec::len);
        assert!(species.iter().all(|s| s.len() == ncells), "ragged species arrays");
        let mut values = vec![0.0; n * ncells];
        for (i, s) in species.iter().enumerate() {
            for (k, &v) in s.iter().enumerate() {
                values[k * n + i] = v;
            }
        }
        Self { n, values, time_index: 0 }
    }

    /// Wraps a flat species-minor vector.
    pub fn from_flat(n: usize, values: Vec<f64>) -> Self {
        assert!(n > 0 && values.len().is_multiple_of(n));
        Self { n, values, time_index: 0 }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_cells(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, species: usize, cell: usize) -> f64 {
        self.values[cell * self.n + species]
    }

    pub fn set(&mut self, species: usize, cell: usize, v: f64) {
        self.values[cell * self.n + species] = v;
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.n..(cell + 1) * self.n]
    }

    pub fn species(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.n).copied().collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &State) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies a per-cell linear map (e.g. the entropy-variable transform).
    pub(crate) fn map_cells(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> State {
        let values = self.values.chunks(self.n).flat_map(f).collect();
        State { n: self.n, values, time_index: self.time_index }
    }

    pub fn dims_match(&self, model: &ModelData, mesh: &Mesh) -> bool {
        self.n == model.n() && self.num_cells() == mesh.num_cells()
    }
}

/// Per-cell residual values and their max-abs norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub values: State,
    pub norm: f64,
}

impl Residual {
    fn new(values: State) -> Self {
        let norm = values.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Self { values, norm }
    }

    pub fn get(&self, species: usize, cell: usize) -> f64 {
        self.values.get(species, cell)
    }
}

/// `D_{K,σ}u_i` and `D_{K,σ}p_i` for every species, seen from the owner `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDifference {
    pub edge: usize,
    pub du: Vec<f64>,
    pub dp: Vec<f64>,
}

pub fn edge_differences(model: &ModelData, mesh: &Mesh, state: &State, edge: usize) -> EdgeDifference {
    let e = &mesh.edges[edge];
    let n = model.n();
    let (k, l) = e.cells;
    let Some(l) = l else {
        return EdgeDifference { edge, du: vec![0.0; n], dp: vec![0.0; n] };
    };
    let du: Vec<f64> = (0..n).map(|i| state.get(i, l) - state.get(i, k)).collect();
    let mut dp = vec![0.0; n];
    pressure_into(model, &du, &mut dp);
    EdgeDifference { edge, du, dp }
}

/// `min(u_K, u_L)`.
pub fn upwind_value(uk: f64, ul: f64) -> f64 {
    uk.min(ul)
}

/// `min(u_K⁺, u_L⁺)`.
pub fn upwind_value_pos(uk: f64, ul: f64) -> f64 {
    uk.max(0.0).min(ul.max(0.0))
}

/// `F_{i,K,σ}` seen from `owner`, with the clipped upwind mobility.
pub fn flux(model: &ModelData, mesh: &Mesh, state: &State, species: usize, edge: usize, owner: usize) -> f64 {
    let e = &mesh.edges[edge];
    debug_assert!(e.cells.0 == owner || e.cells.1 == Some(owner));
    let Some(other) = e.other(owner) else {
        return 0.0;
    };
    let i = species;
    let (uk, ul) = (state.get(i, owner), state.get(i, other));
    let dp: f64 = (0..model.n())
        .map(|j| model.matrix.get(i, j) * (state.get(j, other) - state.get(j, owner)))
        .sum();
    -e.transmissibility * (model.delta() * (ul - uk) + upwind_value_pos(uk, ul) * dp)
}

/// Accumulates `Σ_σ F_{i,K,σ}` into `out`.
fn add_flux_divergence(model: &ModelData, mesh: &Mesh, u: &State, out: &mut State) {
    let n = model.n();
    let delta = model.delta();
    let mut p = vec![0.0; n * mesh.num_cells()];
    for (k, pk) in p.chunks_mut(n).enumerate() {
        pressure_into(model, u.cell(k), pk);
    }
    for e in mesh.interior_edges() {
        let (k, Some(l)) = e.cells else { continue };
        for i in 0..n {
            let (uk, ul) = (u.get(i, k), u.get(i, l));
            let dp = p[l * n + i] - p[k * n + i];
            let f = -e.transmissibility * (delta * (ul - uk) + upwind_value_pos(uk, ul) * dp);
            out.values[k * n + i] += f;
            out.values[l * n + i] -= f;
        }
    }
}

/// `R_{i,K} = m(K)/Δt (cand − prev)_{i,K} + Σ_σ F_{i,K,σ}(cand)`.
pub fn residual(model: &ModelData, mesh: &Mesh, prev: &State, cand: &State, dt: f64) -> Residual {
    let n = model.n();
    let mut r = State::zeros(n, mesh.num_cells());
    for c in &mesh.cells {
        let w = c.area / dt;
        for i in 0..n {
            r.values[c.id * n + i] = w * (cand.get(i, c.id) - prev.get(i, c.id));
        }
    }
    add_flux_divergence(model, mesh, cand, &mut r);
    Residual::new(r)
}

/// Residual of the ε-regularized problem in entropy variables `w`:
///
/// ```text
/// ε (Σ_σ τ_σ (w_{i,K} − w_{i,K,σ}) + m(K) w_{i,K}) + m(K)/Δt (u_{i,K}(w) − prev) + Σ_σ F_{i,K,σ}(u(w))
/// ```
///
/// The regularization is the positive definite `ε(−Δ + I)`.
pub fn residual_regularized(
    model: &ModelData,
    mesh: &Mesh,
    w: &State,
    prev: &State,
    dt: f64,
    eps: f64,
) -> Residual {
    let u = w.map_cells(|wk| entropy_to_primal(model, wk));
    let mut r = residual(model, mesh, prev, &u, dt).values;
    if eps != 0.0 {
        add_regularization(mesh, w, eps, &mut r);
    }
    Residual::new(r)
}

fn add_regularization(mesh: &Mesh, w: &State, eps: f64, out: &mut State) {
    let n = w.n;
    for c in &mesh.cells {
        for i in 0..n {
            out.values[c.id * n + i] += eps * c.area * w.get(i, c.id);
        }
    }
    for e in mesh.interior_edges() {
        let (k, Some(l)) = e.cells else { continue };
        for i in 0..n {
            let g = eps * e.transmissibility * (w.get(i, k) - w.get(i, l));
            out.values[k * n + i] += g;
            out.values[l * n + i] -= g;
        }
    }
}

/// Dense `n×n` blocks of a cell-coupled operator: one diagonal block per cell
/// and two off-diagonal blocks per interior edge.
struct BlockOperator {
    n: usize,
    diag: Vec<Vec<f64>>,
    /// (edge owner K, neighbor L, block at (K, L), block at (L, K))
    off: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl BlockOperator {
    fn into_system(self, right: Option<&DMatrix<f64>>) -> SparseSystem {
        let n = self.n;
        let ncells = self.diag.len();
        let mut sys = SparseSystem::new(n * ncells);
        let mut emit = |row: usize, col: usize, block: &[f64]| {
            for i in 0..n {
                for j in 0..n {
                    let v = match right {
                        Some(r) => (0..n).map(|l| block[i * n + l] * r[(l, j)]).sum(),
                        None => block[i * n + j],
                    };
                    sys.push(row * n + i, col * n + j, v);
                }
            }
        };
        for (k, b) in self.diag.iter().enumerate() {
            emit(k, k, b);
        }
        for (k, l, kl, lk) in &self.off {
            emit(*k, *l, kl);
            emit(*l, *k, lk);
        }
        sys
    }
}

/// Active-branch derivative of `F_{i,K,σ}` with respect to `u_K` and `u_L`.
/// The argmin selector breaks ties toward the owner `K`.
fn flux_derivative_blocks(model: &ModelData, e: &Edge, u: &State, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n();
    let delta = model.delta();
    let tau = e.transmissibility;
    let (k, l) = (e.cells.0, e.cells.1.expect("interior edge"));
    let mut dk = vec![0.0; n * n];
    let mut dl = vec![0.0; n * n];
    for i in 0..n {
        let (uk, ul) = (u.get(i, k), u.get(i, l));
        let ub = upwind_value_pos(uk, ul);
        let dp = p[l * n + i] - p[k * n + i];
        let owner_active = uk <= ul;
        let (sk, sl) = if owner_active {
            (if uk > 0.0 { 1.0 } else { 0.0 }, 0.0)
        } else {
            (0.0, if ul > 0.0 { 1.0 } else { 0.0 })
        };
        for j in 0..n {
            let a = model.matrix.get(i, j);
            let diag = if i == j { 1.0 } else { 0.0 };
            dk[i * n + j] = -tau * (-delta * diag - ub * a + dp * sk * diag);
            dl[i * n + j] = -tau * (delta * diag + ub * a + dp * sl * diag);
        }
    }
    (dk, dl)
}

fn scheme_blocks(model: &ModelData, mesh: &Mesh, cand: &State, dt: f64) -> BlockOperator {
    let n = model.n();
    let mut p = vec![0.0; n * mesh.num_cells()];
    for (k, pk) in p.chunks_mut(n).enumerate() {
        pressure_into(model, cand.cell(k), pk);
    }
    let mut diag: Vec<Vec<f64>> = mesh
        .cells
        .iter()
        .map(|c| {
            let mut b = vec![0.0; n * n];
            for i in 0..n {
                b[i * n + i] = c.area / dt;
            }
            b
        })
        .collect();
    let mut off = Vec::new();
    for e in mesh.interior_edges() {
        let (k, Some(l)) = e.cells else { continue };
        let (dk, dl) = flux_derivative_blocks(model, e, cand, &p);
        for t in 0..n * n {
            diag[k][t] += dk[t];
            diag[l][t] -= dl[t];
        }
        let lk: Vec<f64> = dk.iter().map(|v| -v).collect();
        off.push((k, l, dl, lk));
    }
    BlockOperator { n, diag, off }
}

/// Newton system at `cand`: the exact derivative of [`residual`] with the
/// upwind selectors frozen, and right-hand side `−R(cand)`.
pub fn jacobian(model: &ModelData, mesh: &Mesh, prev: &State, cand: &State, dt: f64) -> SparseSystem {
    let mut sys = scheme_blocks(model, mesh, cand, dt).into_system(None);
    sys.rhs = residual(model, mesh, prev, cand, dt).values.values.iter().map(|v| -v).collect();
    sys
}

/// Newton system of [`residual_regularized`] with respect to `w`, right-hand
/// side `−R_ε(w)`.
pub fn jacobian_regularized(
    model: &ModelData,
    mesh: &Mesh,
    w: &State,
    prev: &State,
    dt: f64,
    eps: f64,
) -> SparseSystem {
    let n = model.n();
    let u = w.map_cells(|wk| entropy_to_primal(model, wk));
    let mut sys = scheme_blocks(model, mesh, &u, dt).into_system(Some(&model.entropy_transform_inv));
    if eps != 0.0 {
        let lap = regularization_operator(mesh, eps);
        for ((&r, &c), &v) in lap.rows.iter().zip(&lap.cols).zip(&lap.values) {
            for i in 0..n {
                sys.push(r * n + i, c * n + i, v);
            }
        }
    }
    sys.compress();
    sys.rhs = residual_regularized(model, mesh, w, prev, dt, eps)
        .values
        .values
        .iter()
        .map(|v| -v)
        .collect();
    sys
}

/// The scalar cell operator `ε(−Δ_h + M)`: `ε(Σ_σ τ_σ (v_K − v_L) + m(K) v_K)`.
pub fn regularization_operator(mesh: &Mesh, eps: f64) -> SparseSystem {
    let mut sys = SparseSystem::new(mesh.num_cells());
    for c in &mesh.cells {
        sys.push(c.id, c.id, eps * c.area);
    }
    for e in mesh.interior_edges() {
        let (k, Some(l)) = e.cells else { continue };
        let t = eps * e.transmissibility;
        sys.push(k, k, t);
        sys.push(l, l, t);
        sys.push(k, l, -t);
        sys.push(l, k, -t);
    }
    sys.compress();
    sys
}

/// `Σ_σ τ_σ (D_σ v)² + Σ_K m(K) v_K²`.
pub fn discrete_h1_norm_sq(mesh: &Mesh, v: &[f64]) -> f64 {
    gradient_part(mesh, v) + mesh.cells.iter().map(|c| c.area * v[c.id] * v[c.id]).sum::<f64>()
}

pub(crate) fn gradient_part(mesh: &Mesh, v: &[f64]) -> f64 {
    mesh.interior_edges()
        .map(|e| {
            let (k, l) = (e.cells.0, e.cells.1.unwrap());
            e.transmissibility * (v[l] - v[k]).powi(2)
        })
        .sum()
}

pub(crate) fn to_entropy_state(model: &ModelData, u: &State) -> State {
    u.map_cells(|uk| primal_to_entropy(model, uk))
}

pub(crate) fn to_primal_state(model: &ModelData, w: &State) -> State {
    w.map_cells(|wk| entropy_to_primal(model, wk))
}
