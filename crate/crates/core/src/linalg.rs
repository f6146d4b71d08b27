//! Sparse storage and the direct solver used for every linear system.
//!
//! Systems are equilibrated with symmetric Ruiz scaling, reordered by
//! reverse Cuthill-McKee, and factored by a band LU with partial pivoting.
//! A few steps of iterative refinement against the original matrix bring
//! the residual down to the requested tolerance.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite entries in matrix or right-hand side")]
    NonFinite,
    #[error("linear solve did not converge: {0}")]
    Failed(LinearSolveReport),
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..nrows {
            order.clear();
            order.extend(counts[r]..counts[r + 1]);
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                    last = cols[k];
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix { nrows, ncols, row_ptr, col_idx, values, symmetric: false }
    }

    /// Builds a matrix from a fixed pattern (sorted columns per row).
    pub fn from_pattern(nrows: usize, ncols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(row_ptr.len(), nrows + 1);
        debug_assert_eq!(col_idx.len(), values.len());
        SparseMatrix { nrows, ncols, row_ptr, col_idx, values, symmetric: false }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
            symmetric: true,
        }
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

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    /// Marks the matrix symmetric after checking the data agrees up to
    /// `rel_tol · max|a_ij|`.
    pub fn mark_symmetric(&mut self, rel_tol: f64) -> bool {
        self.symmetric = self.nrows == self.ncols && self.asymmetry() <= rel_tol * self.max_abs();
        self.symmetric
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Slot of `(r, c)` in the value array, if stored.
    pub fn slot(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()].binary_search(&c).ok().map(|k| range.start + k)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                let t = if c < self.nrows { self.get(c, r) } else { 0.0 };
                worst = worst.max((v - t).abs());
            }
        }
        worst
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.nrows) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    /// `xᵀ A y`.
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// Zeros rows and columns of `dofs` and puts `diag` on their diagonal.
    pub fn eliminate_symmetric(&mut self, is_fixed: &[bool], diag: f64) {
        for r in 0..self.nrows {
            let fixed_row = is_fixed[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                if fixed_row || is_fixed[c] {
                    self.values[k] = if r == c { diag } else { 0.0 };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearSolveReport {
    /// `‖A x − b‖₂`.
    pub residual_norm: f64,
    /// `‖b‖₂`.
    pub rhs_norm: f64,
    /// Krylov iterations; always 0 for the direct solver.
    pub iterations: usize,
    pub refinement_steps: usize,
    pub success: bool,
}

impl LinearSolveReport {
    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm == 0.0 {
            self.residual_norm
        } else {
            self.residual_norm / self.rhs_norm
        }
    }
}

impl fmt::Display for LinearSolveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "relative residual {:.3e} after {} refinement steps ({})",
            self.relative_residual(),
            self.refinement_steps,
            if self.success { "ok" } else { "failed" }
        )
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_REFINEMENT: usize = 6;

/// Reverse Cuthill-McKee ordering of the symmetrized pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for &c in &a.col_idx[a.row_ptr[r]..a.row_ptr[r + 1]] {
            if c != r {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree = |v: usize| adj[v].len();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut level = vec![0usize; n];
    while order.len() < n {
        let seed = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree(v), v)).unwrap();
        let start = pseudo_peripheral(&adj, seed, &mut level);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        let mut nbrs = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(adj[v].iter().copied().filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (degree(w), w));
            for &w in &nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adj: &[Vec<usize>], seed: usize, level: &mut [usize]) -> usize {
    let mut start = seed;
    let mut depth = 0;
    for _ in 0..8 {
        let (far, d) = bfs_farthest(adj, start, level);
        if d <= depth {
            break;
        }
        depth = d;
        start = far;
    }
    start
}

fn bfs_farthest(adj: &[Vec<usize>], start: usize, level: &mut [usize]) -> (usize, usize) {
    for l in level.iter_mut() {
        *l = usize::MAX;
    }
    let mut queue = VecDeque::new();
    level[start] = 0;
    queue.push_back(start);
    let mut far = start;
    while let Some(v) = queue.pop_front() {
        let lv = level[v];
        if lv > level[far] || (lv == level[far] && adj[v].len() < adj[far].len()) {
            far = v;
        }
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = lv + 1;
                queue.push_back(w);
            }
        }
    }
    (far, level[far])
}

/// Band LU with partial pivoting, LAPACK `gbtrf` storage.
#[derive(Debug, Clone)]
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
    singular: bool,
}

impl BandLu {
    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        self.kl + self.ku + r - c + c * self.ldab
    }

    fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandLu { n, kl, ku, ldab, ab: vec![0.0; ldab * n], ipiv: vec![0; n], singular: false }
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        let k = self.idx(r, c);
        self.ab[k] = v;
    }

    fn factor(&mut self) {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ldab + kv;
            // pivot search in column j, rows j..=j+km
            let mut jp = 0;
            let mut best = self.ab[col].abs();
            for t in 1..=km {
                let v = self.ab[col + t].abs();
                if v > best {
                    best = v;
                    jp = t;
                }
            }
            self.ipiv[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                self.singular = true;
                continue;
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + jp, c);
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[col];
            let inv = 1.0 / pivot;
            for t in 1..=km {
                self.ab[col + t] *= inv;
            }
            for c in (j + 1)..=ju {
                let ujc = self.ab[self.idx(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                let base = c * ldab + kv + j - c;
                for t in 1..=km {
                    let l = self.ab[col + t];
                    self.ab[base + t] -= l * ujc;
                }
            }
        }
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ldab) = (self.n, self.kl, self.ldab);
        let kv = kl + self.ku;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                let col = j * ldab + kv;
                for t in 1..=km {
                    b[j + t] -= self.ab[col + t] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let col = j * ldab + kv;
            b[j] /= self.ab[col];
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(kv);
                for r in lo..j {
                    b[r] -= self.ab[col + r - j] * bj;
                }
            }
        }
    }
}

/// Reusable factorization of a square sparse matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    matrix: SparseMatrix,
    scale: Vec<f64>,
    /// `perm[new] = old`
    perm: Vec<usize>,
    lu: BandLu,
}

impl Factorization {
    pub fn new(matrix: &SparseMatrix) -> Result<Self, SolveError> {
        if matrix.nrows != matrix.ncols {
            return Err(SolveError::NotSquare { rows: matrix.nrows, cols: matrix.ncols });
        }
        if matrix.values.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }
        let n = matrix.nrows;
        let scale = ruiz_scaling(matrix, 8);
        let perm = rcm_ordering(matrix);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for r in 0..n {
            for &c in &matrix.col_idx[matrix.row_ptr[r]..matrix.row_ptr[r + 1]] {
                let (pr, pc) = (inv[r], inv[c]);
                if pr > pc {
                    kl = kl.max(pr - pc);
                } else {
                    ku = ku.max(pc - pr);
                }
            }
        }
        let mut lu = BandLu::new(n, kl, ku);
        for r in 0..n {
            for (c, v) in matrix.row(r) {
                if v != 0.0 {
                    lu.set(inv[r], inv[c], v * scale[r] * scale[c]);
                }
            }
        }
        lu.factor();
        Ok(Factorization { matrix: matrix.clone(), scale, perm, lu })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.lu.kl, self.lu.ku)
    }

    fn apply_inverse(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut work = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            work[new] = rhs[old] * self.scale[old];
        }
        self.lu.solve_in_place(&mut work);
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = work[new] * self.scale[old];
        }
        x
    }

    /// Solves `A x = b` to `‖Ax − b‖ ≤ tol ‖b‖` when possible. The report
    /// always comes back; `success` says whether the bound was met.
    pub fn solve(&self, rhs: &[f64], tol: f64) -> Result<(Vec<f64>, LinearSolveReport), SolveError> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(SolveError::Dimension { expected: n, got: rhs.len() });
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }
        let rhs_norm = norm2(rhs);
        let mut report = LinearSolveReport { rhs_norm, ..Default::default() };
        if rhs_norm == 0.0 {
            report.success = true;
            return Ok((vec![0.0; n], report));
        }
        if self.lu.singular {
            report.residual_norm = rhs_norm;
            return Ok((vec![0.0; n], report));
        }
        // Refinement is driven by the equilibrated residual so that rows with
        // small entries (the divergence block) are resolved as well.
        let scaled = |r: &[f64]| -> f64 {
            let s: f64 = r.iter().zip(&self.scale).map(|(v, d)| (v * d) * (v * d)).sum();
            math::sqrt(s)
        };
        let mut x = self.apply_inverse(rhs);
        let mut r = residual(&self.matrix, &x, rhs);
        let mut rn = norm2(&r);
        let mut sn = scaled(&r);
        let mut steps = 0;
        while steps < MAX_REFINEMENT && rn.is_finite() && sn > 0.0 {
            let dx = self.apply_inverse(&r);
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let tr = residual(&self.matrix, &trial, rhs);
            let (tn, ts) = (norm2(&tr), scaled(&tr));
            steps += 1;
            if !(ts < sn) {
                break;
            }
            let slow = ts > 0.5 * sn;
            x = trial;
            r = tr;
            rn = tn;
            sn = ts;
            if slow && rn <= tol * rhs_norm {
                break;
            }
        }
        report.residual_norm = rn;
        report.refinement_steps = steps;
        report.success = rn.is_finite() && rn <= tol * rhs_norm;
        Ok((x, report))
    }
}

/// Symmetric equilibration `D A D` so every row/column max is close to one.
fn ruiz_scaling(a: &SparseMatrix, sweeps: usize) -> Vec<f64> {
    let n = a.nrows;
    let mut d = vec![1.0; n];
    let mut m = vec![0.0f64; n];
    for _ in 0..sweeps {
        m.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..n {
            for (c, v) in a.row(r) {
                let s = (v * d[r] * d[c]).abs();
                m[r] = m[r].max(s);
                m[c] = m[c].max(s);
            }
        }
        let mut done = true;
        for i in 0..n {
            if m[i] > 0.0 {
                if (m[i] - 1.0).abs() > 1e-2 {
                    done = false;
                }
                d[i] /= math::sqrt(m[i]);
            }
        }
        if done {
            break;
        }
    }
    d
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = a.matvec(x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    r
}

pub fn norm2(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * math::sqrt(s)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-shot factor and solve. Failures of the bound are reported, not raised.
pub fn solve(matrix: &SparseMatrix, rhs: &[f64], tol: f64) -> Result<(Vec<f64>, LinearSolveReport), SolveError> {
    Factorization::new(matrix)?.solve(rhs, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_solves_to_rhs() {
        let b = [1.0, -2.0, 3.5, 0.0];
        let (x, rep) = solve(&SparseMatrix::identity(4), &b, DEFAULT_TOL).unwrap();
        assert_eq!(x, b.to_vec());
        assert!(rep.success);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn diagonal_system() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 4.0)]);
        let (x, rep) = solve(&a, &[2.0, 8.0], DEFAULT_TOL).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!(rep.success);
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 1.0), (0, 2, 2.0), (1, 1, 5.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 2), 3.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]), vec![4.0, 5.0]);
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
        // Random sparse M, A = MᵀM + I.
        let mut m = Vec::new();
        for r in 0..n {
            for _ in 0..4 {
                m.push((r, rng.gen_range(0..n), rng.gen_range(-1.0..1.0)));
            }
        }
        let m = SparseMatrix::from_triplets(n, n, &m);
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 1.0));
        }
        for r in 0..n {
            for (c1, v1) in m.row(r) {
                for (c2, v2) in m.row(r) {
                    trip.push((c1, c2, v1 * v2));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &trip)
    }

    #[test]
    fn random_spd_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(50, &mut rng);
        assert!(a.clone().mark_symmetric(1e-14));
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (x, rep) = solve(&a, &b, DEFAULT_TOL).unwrap();
        assert!(rep.success);
        let r = residual(&a, &x, &b);
        assert!(norm2(&r) <= 1e-10 * norm2(&b));
    }

    #[test]
    fn refinement_resolves_rows_with_small_entries() {
        // [[1e8 A, Bᵀ], [B, 0]] with B ~ 1e-4: the constraint rows are far
        // below the norm of the whole residual.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (40, 10);
        let a = random_spd(n, &mut rng);
        let mut trip = Vec::new();
        for r in 0..n {
            for (c, v) in a.row(r) {
                trip.push((r, c, 1e8 * v));
            }
        }
        for i in 0..m {
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                let v = 1e-4 * rng.gen_range(0.5..1.5);
                trip.push((n + i, j, v));
                trip.push((j, n + i, v));
            }
            trip.push((n + i, 2 * i, 1e-4));
            trip.push((2 * i, n + i, 1e-4));
        }
        let k = SparseMatrix::from_triplets(n + m, n + m, &trip);
        let b: Vec<f64> = (0..n + m).map(|i| if i < n { 1e8 * rng.gen_range(-1.0..1.0) } else { 1e-4 }).collect();
        let (x, rep) = solve(&k, &b, DEFAULT_TOL).unwrap();
        assert!(rep.success);
        let r = residual(&k, &x, &b);
        for i in n..n + m {
            let scale: f64 = k.row(i).map(|(c, v)| (v * x[c]).abs()).sum::<f64>() + b[i].abs();
            assert!(r[i].abs() <= 1e-13 * scale, "row {i}: {} vs {scale}", r[i]);
        }
    }

    #[test]
    fn saddle_point_needs_pivoting() {
        // [[2, 1], [1, 0]] has a zero in the (1,1) slot.
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (0, 2, 1.0), (2, 0, 1.0), (1, 1, 3.0)]);
        let (x, rep) = solve(&a, &[4.0, 3.0, 1.0], DEFAULT_TOL).unwrap();
        assert!(rep.success);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[2] - 2.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_is_reported_not_panicked() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        let (_, rep) = solve(&a, &[1.0, 2.0], DEFAULT_TOL).unwrap();
        assert!(!rep.success);
        let z = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0)]);
        let (_, rep) = solve(&z, &[1.0, 1.0], DEFAULT_TOL).unwrap();
        assert!(!rep.success);
    }

    #[test]
    fn errors_on_bad_input() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0)]);
        assert!(matches!(solve(&a, &[1.0, 1.0], 1e-10), Err(SolveError::NotSquare { .. })));
        let a = SparseMatrix::identity(2);
        assert!(matches!(solve(&a, &[1.0], 1e-10), Err(SolveError::Dimension { .. })));
        assert!(matches!(solve(&a, &[f64::NAN, 1.0], 1e-10), Err(SolveError::NonFinite)));
    }

    #[test]
    fn rcm_reduces_bandwidth_of_shuffled_path() {
        // A path graph with scrambled labels.
        let n = 40;
        let label: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((label[i], label[i], 2.0));
            if i + 1 < n {
                trip.push((label[i], label[i + 1], -1.0));
                trip.push((label[i + 1], label[i], -1.0));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &trip);
        let f = Factorization::new(&a).unwrap();
        assert_eq!(f.bandwidth(), (1, 1));
    }

    #[test]
    fn symmetric_elimination_keeps_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_spd(12, &mut rng);
        let mut fixed = vec![false; 12];
        fixed[3] = true;
        fixed[7] = true;
        a.eliminate_symmetric(&fixed, 1.0);
        assert!(a.mark_symmetric(0.0));
        assert_eq!(a.get(3, 3), 1.0);
        assert!(a.row(7).all(|(c, v)| c == 7 || v == 0.0));
    }
}
