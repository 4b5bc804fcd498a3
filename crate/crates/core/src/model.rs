//! Interaction data of the cross-diffusion system
//! `∂_t u_i = div(δ ∇u_i + u_i ∇p_i(u))`, `p_i(u) = Σ_j a_ij u_j`.
//!
//! Under detailed balance (`π_i a_ij = π_j a_ji`) the weighted quadratic
//! entropy `h(u) = (1/2δ) Σ π_i a_ij u_i u_j` is a Lyapunov functional. This
//! module builds the weights `π`, the symmetric matrix `M_ij = π_i a_ij`, its
//! smallest eigenvalue `λ`, and the entropy-variable transform
//! `w_i = (π_i/δ) p_i(u)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mesh::Mesh;
use crate::scheme::State;

/// Relative tolerance of the pairwise detailed-balance check.
pub const DETAILED_BALANCE_RTOL: f64 = 1e-10;
/// Absolute symmetry tolerance accepted by [`smallest_eigenvalue_sym`].
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("need at least 2 species, got {0}")]
    TooFewSpecies(usize),
    #[error("interaction matrix must be {n}x{n}")]
    Shape { n: usize },
    #[error("a[{i}][{j}] = {value} is not positive")]
    NonPositiveEntry { i: usize, j: usize, value: f64 },
    #[error("diffusion coefficient {0} is not positive")]
    NonPositiveDelta(f64),
    #[error("detailed balance fails for species pair ({i}, {j}): residual {residual:e}")]
    DetailedBalanceViolation { i: usize, j: usize, residual: f64 },
    #[error("weights must be {n} positive numbers")]
    InvalidWeights { n: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("(pi_i a_ij) is not positive definite: smallest eigenvalue {0}")]
    NotPositiveDefinite(f64),
    #[error("entropy-variable transform is singular")]
    SingularTransform,
}

/// The matrix `A = (a_ij)` and the common diffusion coefficient `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    a: DMatrix<f64>,
    delta: f64,
}

impl InteractionMatrix {
    pub fn new(rows: &[Vec<f64>], delta: f64) -> Result<Self, ModelError> {
        let n = rows.len();
        if n < 2 {
            return Err(ModelError::TooFewSpecies(n));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(ModelError::Shape { n });
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(ModelError::NonPositiveEntry { i, j, value });
                }
            }
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ModelError::NonPositiveDelta(delta));
        }
        let a = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Ok(Self { a, delta })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }
}

/// Weights `π` with `π_1 = 1` and `π_i a_ij = π_j a_ji` for all pairs.
///
/// Ratios are propagated along the star rooted at species 1
/// (`π_j = a_1j / a_j1`), then every pair is verified.
pub fn detailed_balance_weights(a: &DMatrix<f64>) -> Result<Vec<f64>, ModelError> {
    let n = a.nrows();
    let pi: Vec<f64> = (0..n)
        .map(|j| if j == 0 { 1.0 } else { a[(0, j)] / a[(j, 0)] })
        .collect();
    check_detailed_balance(a, &pi)?;
    Ok(pi)
}

fn check_detailed_balance(a: &DMatrix<f64>, pi: &[f64]) -> Result<(), ModelError> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let lhs = pi[i] * a[(i, j)];
            let rhs = pi[j] * a[(j, i)];
            let residual = (lhs - rhs).abs();
            if !(residual <= DETAILED_BALANCE_RTOL * lhs.max(rhs)) {
                return Err(ModelError::DetailedBalanceViolation { i, j, residual });
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix by the cyclic Jacobi method.
pub fn smallest_eigenvalue_sym(m: &DMatrix<f64>) -> Result<f64, ModelError> {
    let asym = (m - m.transpose()).abs().max();
    if !(asym <= SYMMETRY_TOL) || !m.is_square() {
        return Err(ModelError::NotSymmetric(asym));
    }
    Ok(jacobi_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min))
}

/// All eigenvalues (unsorted) of a symmetric matrix, cyclic Jacobi sweeps.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    const MAX_SWEEPS: usize = 100;
    let n = m.nrows();
    let mut a = m.clone();
    let scale = a.norm();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J on rows/columns p, q
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Everything the scheme needs about the interaction model, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub matrix: InteractionMatrix,
    pub pi: Vec<f64>,
    /// Smallest eigenvalue of `sym`.
    pub lambda: f64,
    /// `M_ij = π_i a_ij`, symmetrized.
    pub sym: DMatrix<f64>,
    /// `W_ij = π_i a_ij / δ`, maps `u` to entropy variables.
    pub entropy_transform: DMatrix<f64>,
    pub entropy_transform_inv: DMatrix<f64>,
}

impl ModelData {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn delta(&self) -> f64 {
        self.matrix.delta
    }

    /// Coercivity constant `c` in `h(u) ≥ c |u|²`, equal to `λ/(2δ)`.
    pub fn coercivity(&self) -> f64 {
        self.lambda / (2.0 * self.delta())
    }
}

pub fn build_model(matrix: InteractionMatrix) -> Result<ModelData, ModelError> {
    let pi = detailed_balance_weights(&matrix.a)?;
    build_model_with_weights(matrix, pi)
}

/// Like [`build_model`] but with caller-supplied weights, which must satisfy
/// detailed balance themselves.
pub fn build_model_with_weights(
    matrix: InteractionMatrix,
    pi: Vec<f64>,
) -> Result<ModelData, ModelError> {
    let n = matrix.n();
    if pi.len() != n || pi.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(ModelError::InvalidWeights { n });
    }
    check_detailed_balance(&matrix.a, &pi)?;

    let m = DMatrix::from_fn(n, n, |i, j| pi[i] * matrix.a[(i, j)]);
    let sym = (&m + m.transpose()) * 0.5;
    let lambda = smallest_eigenvalue_sym(&sym)?;
    if !(lambda > 0.0) {
        return Err(ModelError::NotPositiveDefinite(lambda));
    }
    let entropy_transform = &sym / matrix.delta;
    let entropy_transform_inv = entropy_transform
        .clone()
        .try_inverse()
        .ok_or(ModelError::SingularTransform)?;
    let check = (&entropy_transform * &entropy_transform_inv - DMatrix::identity(n, n))
        .abs()
        .max();
    if !(check <= 1e-10) {
        return Err(ModelError::SingularTransform);
    }
    Ok(ModelData { matrix, pi, lambda, sym, entropy_transform, entropy_transform_inv })
}

/// `p_i = Σ_j a_ij u_j`.
pub fn pressure(model: &ModelData, u: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; u.len()];
    pressure_into(model, u, &mut p);
    p
}

pub(crate) fn pressure_into(model: &ModelData, u: &[f64], p: &mut [f64]) {
    let a = &model.matrix.a;
    for (i, pi) in p.iter_mut().enumerate() {
        *pi = u.iter().enumerate().map(|(j, uj)| a[(i, j)] * uj).sum();
    }
}

/// `h(u) = (1/2δ) Σ_ij π_i a_ij u_i u_j`.
pub fn entropy_density(model: &ModelData, u: &[f64]) -> f64 {
    let v = DVector::from_column_slice(u);
    0.5 * v.dot(&(&model.sym * &v)) / model.delta()
}

/// `w = W u` with `W_ij = π_i a_ij / δ`.
pub fn primal_to_entropy(model: &ModelData, u: &[f64]) -> Vec<f64> {
    mat_vec(&model.entropy_transform, u)
}

/// Inverse of [`primal_to_entropy`].
pub fn entropy_to_primal(model: &ModelData, w: &[f64]) -> Vec<f64> {
    mat_vec(&model.entropy_transform_inv, w)
}

pub(crate) fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| x.iter().enumerate().map(|(j, xj)| m[(i, j)] * xj).sum())
        .collect()
}

/// Discrete entropy `Σ_K m(K) h(u_K)`.
pub fn total_entropy(model: &ModelData, mesh: &Mesh, state: &State) -> f64 {
    mesh.cells
        .iter()
        .map(|c| c.area * entropy_density(model, state.cell(c.id)))
        .sum()
}
