//! Sparse symmetric factorization.
//!
//! Matrices are stored as the upper triangle (diagonal included) in
//! compressed-column form. Factorization is an up-looking LDL' with a
//! symbolic phase driven by the elimination tree, so the symbolic work is
//! shared across repeated numeric factorizations of a fixed pattern.

use std::collections::BTreeSet;

/// Upper triangle of a symmetric matrix in compressed-column form.
#[derive(Debug, Clone, PartialEq)]
pub struct CscUpper {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscUpper {
    /// Builds the pattern from `(row, col)` pairs with `row <= col`; values
    /// start at zero. Duplicate pairs are merged.
    pub fn from_pattern(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in entries {
            debug_assert!(r <= c && c < n);
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for mut rows in cols {
            rows.sort_unstable();
            rows.dedup();
            row_idx.extend(rows);
            col_ptr.push(row_idx.len());
        }
        let nnz = row_idx.len();
        Self { n, col_ptr, row_idx, values: vec![0.0; nnz] }
    }

    /// Position of entry `(row, col)` (with `row <= col`) in `values`.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let rows = &self.row_idx[self.col_ptr[col]..self.col_ptr[col + 1]];
        rows.binary_search(&row).ok().map(|p| p + self.col_ptr[col])
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn diagonal_positions(&self) -> Vec<usize> {
        (0..self.n)
            .map(|k| self.position(k, k).expect("pattern must contain the diagonal"))
            .collect()
    }

    /// `y = A x` using the symmetric completion of the stored triangle.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let a = self.values[p];
                y[r] += a * x[c];
                if r != c {
                    y[c] += a * x[r];
                }
            }
        }
    }

    /// Dense symmetric copy, for tests and small problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                m[(r, c)] = self.values[p];
                m[(c, r)] = self.values[p];
            }
        }
        m
    }
}

/// Elimination tree and column counts for a fixed pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    parent: Vec<usize>,
    lp: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl LdlSymbolic {
    pub fn new(a: &CscUpper) -> Self {
        let n = a.n;
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut i = a.row_idx[p];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        Self { parent, lp }
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.lp.len() - 1]
    }

    /// Numeric factorization; `None` when a pivot is not strictly positive
    /// (the matrix is not numerically positive definite).
    pub fn factor(&self, a: &CscUpper) -> Option<LdlFactor> {
        let n = a.n;
        let mut li = vec![0usize; self.factor_nnz()];
        let mut lx = vec![0.0; self.factor_nnz()];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut i = a.row_idx[p];
                y[i] += a.values[p];
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            while top < n {
                let i = pattern[top];
                let yi = y[i];
                y[i] = 0.0;
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[p2] = k;
                lx[p2] = l_ki;
                lnz[i] += 1;
                top += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return None;
            }
        }
        Some(LdlFactor { lp: self.lp.clone(), li, lx, d })
    }
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                xj -= self.lx[p] * x[self.li[p]];
            }
            x[j] = xj;
        }
    }
}

/// Greedy minimum-degree elimination order for an undirected graph given as
/// adjacency lists. Ties break on the lower vertex id.
pub fn minimum_degree_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(v, list)| list.iter().copied().filter(|&w| w != v).collect())
        .collect();
    // symmetrize
    for v in 0..n {
        let ns: Vec<usize> = adj[v].iter().copied().collect();
        for w in ns {
            adj[w].insert(v);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        let ns: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &ns {
            queue.remove(&(adj[a].len(), a));
            adj[a].remove(&v);
        }
        for (i, &a) in ns.iter().enumerate() {
            for &b in &ns[i + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &a in &ns {
            queue.insert((adj[a].len(), a));
        }
    }
    order
}

/// Jacobi-preconditioned conjugate gradients. Returns the iteration count and
/// final residual norm.
pub fn conjugate_gradient(a: &CscUpper, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> (usize, f64) {
    let n = a.n;
    let diag: Vec<f64> = a
        .diagonal_positions()
        .into_iter()
        .map(|p| if a.values[p] > 0.0 { a.values[p] } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = (0..n).map(|i| r[i] / diag[i]).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let mut res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut it = 0;
    while it < max_iter && res > tol {
        a.mul_vec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
    }
    (it, res)
}
