//! Triplet-assembled sparse systems and a banded direct solver.
//!
//! The matrix graph is reordered by reverse Cuthill-McKee when that shrinks
//! the bandwidth, then factored by banded LU with partial pivoting (the
//! `gbtrf` storage scheme: `kl` extra superdiagonals absorb pivoting fill).

use std::collections::VecDeque;

use thiserror::Error;

/// Required relative residual `‖Ax − b‖ / ‖b‖` of [`solve_sparse`].
pub const SOLVE_RTOL: f64 = 1e-12;
const REFINEMENT_STEPS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is singular (zero pivot at column {column})")]
    Singular { column: usize },
    #[error("index ({row}, {col}) out of range for dimension {dim}")]
    OutOfRange { row: usize, col: usize, dim: usize },
    #[error("right-hand side has length {got}, expected {dim}")]
    RhsLength { got: usize, dim: usize },
    #[error("relative residual {0:e} above tolerance after refinement")]
    Inaccurate(f64),
}

/// Square matrix in coordinate form plus a right-hand side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseSystem {
    pub dim: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn new(dim: usize) -> Self {
        Self { dim, rhs: vec![0.0; dim], ..Default::default() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.rows.push(row);
        self.cols.push(col);
        self.values.push(value);
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Sorts triplets row-major and sums duplicates.
    pub fn compress(&mut self) {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by_key(|&t| (self.rows[t], self.cols[t]));
        let (mut rows, mut cols, mut values) = (Vec::new(), Vec::new(), Vec::<f64>::new());
        for t in order {
            let (r, c, v) = (self.rows[t], self.cols[t], self.values[t]);
            if rows.last() == Some(&r) && cols.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                cols.push(c);
                values.push(v);
            }
        }
        self.rows = rows;
        self.cols = cols;
        self.values = values;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.values) {
            y[r] += v * x[c];
        }
        y
    }

    /// Dense copy, row-major. Test and debugging helper.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.dim]; self.dim];
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.values) {
            a[r][c] += v;
        }
        a
    }

    fn check_indices(&self) -> Result<(), SparseError> {
        for (&row, &col) in self.rows.iter().zip(&self.cols) {
            if row >= self.dim || col >= self.dim {
                return Err(SparseError::OutOfRange { row, col, dim: self.dim });
            }
        }
        if self.rhs.len() != self.dim {
            return Err(SparseError::RhsLength { got: self.rhs.len(), dim: self.dim });
        }
        Ok(())
    }
}

/// Solves `system`, refining iteratively until the relative residual is at
/// most [`SOLVE_RTOL`].
pub fn solve_sparse(system: &SparseSystem) -> Result<Vec<f64>, SparseError> {
    system.check_indices()?;
    let lu = BandedLu::factor(system)?;
    lu.solve_refined(system, &system.rhs)
}

/// LU factors of a reordered banded matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    dim: usize,
    kl: usize,
    ku: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// Band storage, column-major, leading dimension `2 kl + ku + 1`.
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn factor(system: &SparseSystem) -> Result<Self, SparseError> {
        system.check_indices()?;
        let dim = system.dim;
        let perm = bandwidth_ordering(system);
        let mut inv = vec![0; dim];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let (mut kl, mut ku) = (0usize, 0usize);
        for (&r, &c) in system.rows.iter().zip(&system.cols) {
            let (i, j) = (inv[r], inv[c]);
            kl = kl.max(i.saturating_sub(j));
            ku = ku.max(j.saturating_sub(i));
        }
        let ld = 2 * kl + ku + 1;
        let mut lu = Self { dim, kl, ku, perm, ab: vec![0.0; ld * dim], ipiv: vec![0; dim] };
        let mut amax = 0.0f64;
        for ((&r, &c), &v) in system.rows.iter().zip(&system.cols).zip(&system.values) {
            let at = lu.at(inv[r], inv[c]);
            lu.ab[at] += v;
            amax = amax.max(v.abs());
        }
        lu.factorize(amax)?;
        Ok(lu)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        let ld = 2 * self.kl + self.ku + 1;
        (self.kl + self.ku + i - j) + j * ld
    }

    fn factorize(&mut self, amax: f64) -> Result<(), SparseError> {
        let n = self.dim;
        let (kl, kv) = (self.kl, self.kl + self.ku);
        let tiny = amax * f64::EPSILON * n as f64 * 1e-3;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = -1.0;
            for r in 0..=km {
                let v = self.ab[self.at(j + r, j)].abs();
                if v > best {
                    best = v;
                    jp = r;
                }
            }
            self.ipiv[j] = j + jp;
            if !(best > tiny) {
                return Err(SparseError::Singular { column: self.perm[j] });
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let (x, y) = (self.at(j + jp, c), self.at(j, c));
                    self.ab.swap(x, y);
                }
            }
            let pivot = self.ab[self.at(j, j)];
            for r in 1..=km {
                let at = self.at(j + r, j);
                self.ab[at] /= pivot;
            }
            for c in (j + 1)..=ju {
                let ujc = self.ab[self.at(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                for r in 1..=km {
                    let l = self.ab[self.at(j + r, j)];
                    let at = self.at(j + r, c);
                    self.ab[at] -= l * ujc;
                }
            }
            debug_assert!(ju < j + kv + 1);
        }
        Ok(())
    }

    /// One forward/back substitution in the original ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let kv = self.kl + self.ku;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            let jp = self.ipiv[j];
            if jp != j {
                x.swap(j, jp);
            }
            let xj = x[j];
            if xj != 0.0 {
                for r in 1..=self.kl.min(n - 1 - j) {
                    x[j + r] -= self.ab[self.at(j + r, j)] * xj;
                }
            }
        }
        for j in (0..n).rev() {
            x[j] /= self.ab[self.at(j, j)];
            let xj = x[j];
            if xj != 0.0 {
                for i in j.saturating_sub(kv)..j {
                    x[i] -= self.ab[self.at(i, j)] * xj;
                }
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Solve with iterative refinement against the original matrix `system`.
    pub fn solve_refined(&self, system: &SparseSystem, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        let bnorm = norm2(b);
        if bnorm == 0.0 {
            return Ok(vec![0.0; self.dim]);
        }
        let mut x = self.solve(b);
        let mut rel = f64::INFINITY;
        for step in 0..=REFINEMENT_STEPS {
            let ax = system.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rel = norm2(&r) / bnorm;
            if rel <= SOLVE_RTOL || step == REFINEMENT_STEPS {
                break;
            }
            let dx = self.solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        if rel <= SOLVE_RTOL {
            Ok(x)
        } else {
            Err(SparseError::Inaccurate(rel))
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn band_of(system: &SparseSystem, inv: &[usize]) -> usize {
    system
        .rows
        .iter()
        .zip(&system.cols)
        .map(|(&r, &c)| inv[r].abs_diff(inv[c]))
        .max()
        .unwrap_or(0)
}

/// Identity or reverse Cuthill-McKee, whichever has the smaller bandwidth.
fn bandwidth_ordering(system: &SparseSystem) -> Vec<usize> {
    let n = system.dim;
    let identity: Vec<usize> = (0..n).collect();
    let natural = band_of(system, &identity);
    if natural <= 1 {
        return identity;
    }
    let rcm = reverse_cuthill_mckee(system);
    let mut inv = vec![0; n];
    for (new, &old) in rcm.iter().enumerate() {
        inv[old] = new;
    }
    if band_of(system, &inv) < natural {
        rcm
    } else {
        identity
    }
}

fn reverse_cuthill_mckee(system: &SparseSystem) -> Vec<usize> {
    let n = system.dim;
    let mut adj = vec![Vec::new(); n];
    for (&r, &c) in system.rows.iter().zip(&system.cols) {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        let root = peripheral_node(&adj, start);
        visited[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Pseudo-peripheral node of the component containing `start` (George-Liu).
fn peripheral_node(adj: &[Vec<usize>], start: usize) -> usize {
    let mut root = start;
    let mut depth = 0;
    loop {
        let levels = bfs_levels(adj, root);
        let ecc = *levels.iter().flatten().max().unwrap_or(&0);
        if ecc <= depth && root != start {
            return root;
        }
        depth = ecc;
        let candidate = levels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(ecc))
            .min_by_key(|(v, _)| (adj[*v].len(), *v))
            .map(|(v, _)| v)
            .unwrap_or(root);
        if candidate == root {
            return root;
        }
        let next_ecc = *bfs_levels(adj, candidate).iter().flatten().max().unwrap_or(&0);
        if next_ecc <= ecc {
            return candidate;
        }
        root = candidate;
    }
}

fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let l = level[v].unwrap();
        for &u in &adj[v] {
            if level[u].is_none() {
                level[u] = Some(l + 1);
                queue.push_back(u);
            }
        }
    }
    level
}
