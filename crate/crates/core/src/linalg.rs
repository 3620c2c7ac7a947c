//! Sparse matrices and the linear solvers used by assembly and the PDE solves.
//!
//! Nonsymmetric systems (state, linearized and adjoint) go through [`LuFactorization`]:
//! a reverse Cuthill-McKee reordering followed by a banded LU with partial pivoting.
//! One factorization serves both `A x = b` and `Aᵀ x = b`. Symmetric positive definite
//! systems can use [`solve_cg`].

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular: pivot {pivot:e} at elimination step {step}")]
    SingularMatrix { step: usize, pivot: f64 },
    #[error("CG stopped after {iterations} iterations with relative residual {relative_residual:e}")]
    IterationLimit {
        iterations: usize,
        relative_residual: f64,
        best: Vec<f64>,
    },
    #[error("matrix is not symmetric (max |A - Aᵀ| = {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
}

/// Compressed sparse row matrix. Column indices are sorted and unique within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-format accumulator. Duplicate entries are summed in insertion order
/// when converted, so assembly is deterministic.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, capacity: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(capacity),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> CsrMatrix {
        // stable sort keeps insertion order among duplicates
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl CsrMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut b = TripletBuilder::with_capacity(nrows, ncols, triplets.len());
        for &(i, j, v) in triplets {
            b.push(i, j, v);
        }
        b.build()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut b = TripletBuilder::new(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "mul_vec dimension mismatch");
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// `Aᵀ y` without forming the transpose.
    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows, "transpose_mul_vec dimension mismatch");
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * yi;
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let p = next[j];
                col_idx[p] = i;
                values[p] = v;
                next[j] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Entrywise `self + scale * other` on the union of both patterns.
    pub fn add_scaled(&self, scale: f64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(self.nnz().max(other.nnz()));
        row_ptr.push(0);
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ca.len() || q < cb.len() {
                let ja = ca.get(p).copied().unwrap_or(usize::MAX);
                let jb = cb.get(q).copied().unwrap_or(usize::MAX);
                if ja == jb {
                    col_idx.push(ja);
                    values.push(va[p] + scale * vb[q]);
                    p += 1;
                    q += 1;
                } else if ja < jb {
                    col_idx.push(ja);
                    values.push(va[p]);
                    p += 1;
                } else {
                    col_idx.push(jb);
                    values.push(scale * vb[q]);
                    q += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |A - Aᵀ|` over all entries.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let t = self.transpose();
        self.add_scaled(-1.0, &t).max_abs()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reverse Cuthill-McKee ordering of the symmetrized pattern. Returns `perm` with
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let (cols, _) = a.row(i);
        for &j in cols {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let bfs_levels = |start: usize, visited_mask: &[bool]| -> (Vec<usize>, usize) {
        // returns nodes of the last level and the eccentricity
        let mut level = vec![usize::MAX; n];
        let mut queue = VecDeque::from([start]);
        level[start] = 0;
        let mut max_level = 0;
        let mut order = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            max_level = max_level.max(level[v]);
            for &w in &adj[v] {
                if !visited_mask[w] && level[w] == usize::MAX {
                    level[w] = level[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        let last = order.into_iter().filter(|&v| level[v] == max_level).collect();
        (last, max_level)
    };

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut last, mut ecc) = bfs_levels(start, &visited);
        for _ in 0..4 {
            let cand = *last.iter().min_by_key(|&&v| (degree[v], v)).unwrap();
            let (l2, e2) = bfs_levels(cand, &visited);
            if e2 > ecc {
                start = cand;
                last = l2;
                ecc = e2;
            } else {
                break;
            }
        }
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// LU factorization with partial pivoting of a symmetrically permuted band matrix.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    n: usize,
    perm: Vec<usize>,
    kl: usize,
    kv: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl LuFactorization {
    pub fn new(a: &CsrMatrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for i in 0..n {
            let (cols, _) = a.row(i);
            for &j in cols {
                let (pi, pj) = (inv[i], inv[j]);
                if pi > pj {
                    kl = kl.max(pi - pj);
                } else {
                    ku = ku.max(pj - pi);
                }
            }
        }
        let kv = kl + ku;
        let ldab = kl + kv + 1;
        let mut ab = vec![0.0; ldab * n];
        let idx = |i: usize, j: usize| j * ldab + kv + i - j;
        let mut scale = 0.0f64;
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                ab[idx(inv[i], inv[j])] += v;
                scale = scale.max(v.abs());
            }
        }
        let threshold = 1e-14 * scale;
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for k in 0..n {
            let km = kl.min(n - 1 - k);
            let col = k * ldab + kv;
            let mut p = 0;
            let mut best = ab[col].abs();
            for r in 1..=km {
                let v = ab[col + r].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > threshold) {
                return Err(LinalgError::SingularMatrix {
                    step: k,
                    pivot: best,
                });
            }
            let prow = k + p;
            ipiv[k] = prow;
            ju = ju.max((prow + ku).min(n - 1));
            if p != 0 {
                for j in k..=ju {
                    ab.swap(idx(k, j), idx(prow, j));
                }
            }
            let pivot = ab[col];
            for r in 1..=km {
                ab[col + r] /= pivot;
            }
            for j in k + 1..=ju {
                let akj = ab[idx(k, j)];
                if akj == 0.0 {
                    continue;
                }
                let base_j = idx(k, j);
                for r in 1..=km {
                    let l = ab[col + r];
                    ab[base_j + r] -= l * akj;
                }
            }
        }
        Ok(Self {
            n,
            perm,
            kl,
            kv,
            ldab,
            ab,
            ipiv,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Lower and upper bandwidth after reordering.
    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.kv - self.kl)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.ab[j * self.ldab + self.kv + i - j]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                let km = self.kl.min(n - 1 - k);
                for r in 1..=km {
                    x[k + r] -= self.at(k + r, k) * xk;
                }
            }
        }
        for k in (0..n).rev() {
            x[k] /= self.at(k, k);
            let xk = x[k];
            if xk != 0.0 {
                for i in k.saturating_sub(self.kv)..k {
                    x[i] -= self.at(i, k) * xk;
                }
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            let mut s = x[k];
            for i in k.saturating_sub(self.kv)..k {
                s -= self.at(i, k) * x[i];
            }
            x[k] = s / self.at(k, k);
        }
        for k in (0..n).rev() {
            let km = self.kl.min(n - 1 - k);
            let mut s = x[k];
            for r in 1..=km {
                s -= self.at(k + r, k) * x[k + r];
            }
            x[k] = s;
            let p = self.ipiv[k];
            if p != k {
                x.swap(k, p);
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

pub fn solve_direct(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    check_rhs(a, b)?;
    Ok(LuFactorization::new(a)?.solve(b))
}

pub fn transpose_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    check_rhs(a, b)?;
    Ok(LuFactorization::new(a)?.solve_transpose(b))
}

fn check_rhs(a: &CsrMatrix, b: &[f64]) -> Result<(), LinalgError> {
    if b.len() != a.nrows() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.nrows(),
            found: b.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
    pub check_symmetry: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 10_000,
            preconditioner: Preconditioner::Jacobi,
            check_symmetry: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for symmetric positive definite `A`.
/// Converged when `‖b - Ax‖ ≤ tol ‖b‖`.
pub fn solve_cg(a: &CsrMatrix, b: &[f64], opts: &CgOptions) -> Result<CgSolution, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    check_rhs(a, b)?;
    if opts.check_symmetry {
        let asym = a.asymmetry();
        if asym > 1e-12 {
            return Err(LinalgError::NotSymmetric(asym));
        }
    }
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = match opts.preconditioner {
        Preconditioner::None => vec![1.0; n],
        Preconditioner::Jacobi => a
            .diagonal()
            .iter()
            .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
            .collect(),
    };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut best = x.clone();
    let mut best_res = 1.0;
    for it in 1..=opts.max_iterations {
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm2(&r) / bnorm;
        if rel < best_res {
            best_res = rel;
            best.copy_from_slice(&x);
        }
        if rel <= opts.tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                relative_residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::IterationLimit {
        iterations: opts.max_iterations,
        relative_residual: best_res,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, per_row: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.push(i, i, 4.0 + rng.random::<f64>());
            for _ in 0..per_row {
                let j = rng.random_range(0..n);
                b.push(i, j, rng.random_range(-1.0..1.0));
            }
        }
        b.build()
    }

    fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let ax = a.mul_vec(x);
        norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
    }

    #[test]
    fn builder_sums_duplicates_sorted() {
        let a = CsrMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 2, 0.5)]);
        assert_eq!(a.row(1).0, &[0, 2]);
        assert_eq!(a.get(1, 2), 1.5);
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = CsrMatrix::identity(7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        assert_eq!(solve_direct(&a, &b).unwrap(), b);
    }

    #[test]
    fn two_by_two_hand_solve() {
        let a = CsrMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let x = solve_direct(&a, &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonsymmetric_transpose_hand_solve() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let x = transpose_solve(&a, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let a = CsrMatrix::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let x = solve_direct(&a, &[2.0, 3.0]).unwrap();
        assert_eq!(x, vec![3.0, 2.0]);
        let xt = transpose_solve(&a, &[2.0, 3.0]).unwrap();
        assert_eq!(xt, vec![3.0, 2.0]);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(
            solve_direct(&a, &[1.0, 1.0]),
            Err(LinalgError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn random_spd_residual_bound() {
        // A = L Lᵀ with seeded random lower-triangular L
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < 0.2 {
                    l[i][j] = rng.random_range(-1.0..1.0);
                }
            }
            l[i][i] = 1.0 + rng.random::<f64>();
        }
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                dense[i][j] = (0..n).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        let a = CsrMatrix::from_dense(&dense);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = solve_direct(&a, &b).unwrap();
        let bound = 1e-10 * (a.frobenius_norm() * norm2(&x) + norm2(&b));
        assert!(residual(&a, &x, &b) <= bound);
    }

    #[test]
    fn random_nonsymmetric_recovers_solution() {
        let a = random_sparse(200, 4, 11);
        let x0: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = a.mul_vec(&x0);
        let x = solve_direct(&a, &b).unwrap();
        let err = norm2(&x.iter().zip(&x0).map(|(p, q)| p - q).collect::<Vec<_>>());
        assert!(err <= 1e-9 * norm2(&x0));
        let bt = a.transpose_mul_vec(&x0);
        let xt = transpose_solve(&a, &bt).unwrap();
        let err = norm2(&xt.iter().zip(&x0).map(|(p, q)| p - q).collect::<Vec<_>>());
        assert!(err <= 1e-9 * norm2(&x0));
    }

    #[test]
    fn transpose_identity_randomized() {
        let a = random_sparse(100, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&a.mul_vec(&x), &y);
        let rhs = dot(&x, &a.transpose_mul_vec(&y));
        let rhs2 = dot(&x, &a.transpose().mul_vec(&y));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        assert!((lhs - rhs2).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn symmetric_transpose_solve_matches_direct() {
        let a = CsrMatrix::from_dense(&[
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ]);
        let b = [1.0, 2.0, 3.0];
        let x = solve_direct(&a, &b).unwrap();
        let xt = transpose_solve(&a, &b).unwrap();
        for (p, q) in x.iter().zip(&xt) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn cg_identity_one_iteration() {
        let a = CsrMatrix::identity(10);
        let b = vec![1.0; 10];
        let s = solve_cg(
            &a,
            &b,
            &CgOptions {
                preconditioner: Preconditioner::None,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.x, b);
    }

    #[test]
    fn cg_jacobi_diagonal_one_iteration() {
        let n = 20;
        let a = CsrMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, (i + 1) as f64)).collect::<Vec<_>>());
        let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let s = solve_cg(&a, &b, &CgOptions::default()).unwrap();
        assert_eq!(s.iterations, 1);
        for i in 0..n {
            assert!((s.x[i] - i as f64 / (i + 1) as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn cg_reports_iteration_limit_with_best_iterate() {
        let a = random_sparse(50, 3, 1);
        let sym = a.add_scaled(1.0, &a.transpose());
        let b = vec![1.0; 50];
        let err = solve_cg(
            &sym,
            &b,
            &CgOptions {
                tol: 1e-30,
                max_iterations: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            LinalgError::IterationLimit { best, .. } => assert_eq!(best.len(), 50),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cg_symmetry_check() {
        let a = CsrMatrix::from_dense(&[vec![2.0, 1.0], vec![0.0, 2.0]]);
        let opts = CgOptions {
            check_symmetry: true,
            ..Default::default()
        };
        assert!(matches!(solve_cg(&a, &[1.0, 1.0], &opts), Err(LinalgError::NotSymmetric(_))));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = random_sparse(64, 3, 9);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, (0..64).collect::<Vec<_>>());
    }
}
