//! Compressed sparse rows, banded LU with partial pivoting after a
//! reverse Cuthill-McKee reordering, and Jacobi-preconditioned BiCGSTAB.

use std::collections::VecDeque;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries and drops exact zeros.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut row_of = Vec::with_capacity(triplets.len());
        let mut it = triplets.into_iter().peekable();
        while let Some((r, c, mut v)) = it.next() {
            while let Some(&(r2, c2, v2)) = it.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    it.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                indices.push(c);
                values.push(v);
                row_of.push(r);
            }
        }
        for r in row_of {
            indptr[r + 1] += 1;
        }
        for r in 0..n {
            indptr[r + 1] += indptr[r];
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    /// Exact transpose: every stored value is moved, never recomputed.
    pub fn transpose(&self) -> Self {
        let t = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n, t)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// `alpha I + beta self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let mut t: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (r, c, beta * v))
            .collect();
        t.extend((0..self.n).map(|i| (i, i, alpha)));
        Self::from_triplets(self.n, t)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn bandwidths(&self, perm_inv: &[usize]) -> (usize, usize) {
        let (mut lo, mut up) = (0, 0);
        for r in 0..self.n {
            let pr = perm_inv[r];
            for (c, _) in self.row(r) {
                let pc = perm_inv[c];
                if pc < pr {
                    lo = lo.max(pr - pc);
                } else {
                    up = up.max(pc - pr);
                }
            }
        }
        (lo, up)
    }

    /// Reverse Cuthill-McKee ordering of the symmetrised sparsity pattern.
    /// `perm[new] = old`.
    pub fn rcm_order(&self) -> Vec<usize> {
        let n = self.n;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c, _) in self.triplets() {
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let start = (0..n)
                .filter(|&i| !visited[i])
                .min_by_key(|&i| (adj[i].len(), i))
                .expect("unvisited node");
            visited[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
                next.sort_by_key(|&w| (adj[w].len(), w));
                for w in next {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
        order.reverse();
        order
    }
}

/// LU factors of a banded matrix, LAPACK `gbtrf` style: row interchanges
/// are recorded per step and the multipliers stay in place.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    width: usize,
    rows: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    fn slot(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    /// Factors `a` permuted by `perm[new] = old`.
    pub fn factor(a: &CsrMatrix, perm: &[usize]) -> Result<Self> {
        let n = a.dim();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (kl, ku) = a.bandwidths(&inv);
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            width,
            rows: vec![0.0; n * width],
            pivots: vec![0; n],
        };
        for (r, c, v) in a.triplets() {
            let s = lu.slot(inv[r], inv[c]);
            lu.rows[s] = v;
        }
        let reach = kl + ku;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + reach).min(n - 1);
            let mut p = k;
            let mut best = lu.rows[lu.slot(k, k)].abs();
            for i in k + 1..=last_row {
                let v = lu.rows[lu.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::LinearSolve(format!("singular matrix at pivot {k}")));
            }
            lu.pivots[k] = p;
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (lu.slot(k, j), lu.slot(p, j));
                    lu.rows.swap(a, b);
                }
            }
            let pivot = lu.rows[lu.slot(k, k)];
            for i in k + 1..=last_row {
                let sik = lu.slot(i, k);
                let l = lu.rows[sik] / pivot;
                if l == 0.0 {
                    continue;
                }
                lu.rows[sik] = l;
                for j in k + 1..=last_col {
                    let u = lu.rows[lu.slot(k, j)];
                    if u != 0.0 {
                        let s = lu.slot(i, j);
                        lu.rows[s] -= l * u;
                    }
                }
            }
        }
        Ok(lu)
    }

    /// Solves in the permuted ordering.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let reach = self.width - self.kl - 1;
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n - 1) {
                    b[i] -= self.rows[self.slot(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= self.rows[self.slot(k, j)] * b[j];
            }
            b[k] = s / self.rows[self.slot(k, k)];
        }
    }
}

/// Stopping rule for the iterative solver.
#[derive(Debug, Clone, Copy)]
pub struct IterativeOptions {
    pub relative_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-10,
            max_iterations: 5000,
        }
    }
}

/// Prepared solver for a fixed matrix.
#[derive(Debug, Clone)]
pub enum LinearSolver {
    Banded {
        perm: Vec<usize>,
        lu: BandedLu,
    },
    Iterative {
        matrix: CsrMatrix,
        inv_diag: Vec<f64>,
        options: IterativeOptions,
    },
}

impl LinearSolver {
    /// Banded LU on the better of the natural and RCM orderings.
    pub fn direct(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let natural: Vec<usize> = (0..n).collect();
        let rcm = a.rcm_order();
        let band = |perm: &[usize]| {
            let mut inv = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let (l, u) = a.bandwidths(&inv);
            2 * l + u
        };
        let perm = if band(&rcm) < band(&natural) { rcm } else { natural };
        let lu = BandedLu::factor(a, &perm)?;
        Ok(LinearSolver::Banded { perm, lu })
    }

    pub fn iterative(a: &CsrMatrix, options: IterativeOptions) -> Result<Self> {
        let inv_diag = a
            .diagonal()
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                if d == 0.0 {
                    Err(Error::LinearSolve(format!("zero diagonal in row {i}")))
                } else {
                    Ok(1.0 / d)
                }
            })
            .collect::<Result<_>>()?;
        Ok(LinearSolver::Iterative {
            matrix: a.clone(),
            inv_diag,
            options,
        })
    }

    /// Solves `A x = b`; `guess` seeds the iterative method.
    pub fn solve(&self, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            LinearSolver::Banded { perm, lu } => {
                let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
                lu.solve_in_place(&mut y);
                let mut x = vec![0.0; b.len()];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = y[new];
                }
                Ok(x)
            }
            LinearSolver::Iterative {
                matrix,
                inv_diag,
                options,
            } => bicgstab(matrix, inv_diag, b, guess, *options),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn bicgstab(
    a: &CsrMatrix,
    inv_diag: &[f64],
    b: &[f64],
    guess: Option<&[f64]>,
    opts: IterativeOptions,
) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = guess.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let ax = a.matvec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let target = opts.relative_tolerance * bnorm;
    if norm(&r) <= target {
        return Ok(x);
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for _ in 0..opts.max_iterations {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.matvec_into(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(x);
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.matvec_into(&z, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= target {
            return Ok(x);
        }
        if !omega.is_finite() || omega == 0.0 {
            break;
        }
    }
    let ax = a.matvec(&x);
    let res = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
    if res <= opts.relative_tolerance {
        Ok(x)
    } else {
        Err(Error::LinearSolve(format!(
            "BiCGSTAB stalled at relative residual {res:e}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + i as f64 * 0.01));
            t.push((i, (i + 1) % n, -1.0));
            t.push((i, (i + n - 1) % n, -1.5));
            t.push((i, (i + 2) % n, 0.25));
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_sum_and_zeros_drop() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 1, 1.0), (0, 1, -1.0), (1, 0, 2.0), (1, 0, 3.0)]);
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.get(1, 0), 5.0);
    }

    #[test]
    fn transpose_is_exact() {
        let a = ring(17);
        let t = a.transpose();
        for i in 0..17 {
            for j in 0..17 {
                assert_eq!(a.get(i, j), t.get(j, i));
            }
        }
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn banded_solver_handles_wraparound() {
        let a = ring(200);
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.matvec(&x);
        let s = LinearSolver::direct(&a).unwrap();
        let got = s.solve(&b, None).unwrap();
        let err = got.iter().zip(&x).fold(0.0f64, |m, (g, e)| m.max((g - e).abs()));
        assert!(err < 1e-12, "{err}");
        if let LinearSolver::Banded { lu, .. } = &s {
            assert!(lu.kl <= 6, "rcm bandwidth {}", lu.kl);
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let a = CsrMatrix::from_triplets(
            3,
            vec![(0, 1, 1.0), (1, 0, 1.0), (1, 2, 2.0), (2, 1, 3.0), (2, 2, 1.0)],
        );
        let x = [1.0, -2.0, 0.5];
        let b = a.matvec(&x);
        let got = LinearSolver::direct(&a).unwrap().solve(&b, None).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn bicgstab_converges() {
        let a = ring(300);
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.1).cos()).collect();
        let b = a.matvec(&x);
        let s = LinearSolver::iterative(&a, IterativeOptions::default()).unwrap();
        let got = s.solve(&b, None).unwrap();
        let err = got.iter().zip(&x).fold(0.0f64, |m, (g, e)| m.max((g - e).abs()));
        assert!(err < 1e-8, "{err}");
    }
}
