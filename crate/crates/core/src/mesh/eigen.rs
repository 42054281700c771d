//! Generalized symmetric eigenproblem `L φ = λ M φ` with diagonal `M`.
//!
//! The problem is reduced to the standard symmetric form on
//! `A = M^{-1/2} L M^{-1/2}`. Small meshes use a dense decomposition; larger
//! ones use shift-inverted block subspace iteration with a profile Cholesky
//! factor under reverse Cuthill-McKee ordering, which copes with the exactly
//! repeated eigenvalues of symmetric surfaces.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Meshes with at most this many vertices use the dense solver.
pub const DENSE_EIGEN_LIMIT: usize = 600;

const RESIDUAL_TOL: f64 = 1e-10;
const MAX_SUBSPACE_ITERS: usize = 2000;

#[derive(Clone, Debug)]
pub struct Eigenpairs {
    /// Ascending.
    pub values: Vec<f64>,
    /// Row-major `n × k`, M-orthonormal columns.
    pub vectors: Vec<f64>,
    pub k: usize,
}

fn scaled_operator(laplacian: &CsrMatrix, mass: &[f64]) -> CsrMatrix {
    let inv_sqrt: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut trip = Vec::with_capacity(laplacian.nnz());
    for r in 0..laplacian.rows {
        for (c, v) in laplacian.row(r) {
            trip.push((r, c, inv_sqrt[r] * v * inv_sqrt[c]));
        }
    }
    CsrMatrix::from_triplets(laplacian.rows, laplacian.cols, &trip)
}

/// Fix the sign so the largest-magnitude entry (first on ties) is positive.
fn canonical_sign(col: &mut [f64]) {
    let mut best = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() * (1.0 + 1e-9) {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}

fn finish(values: Vec<f64>, y: &DMatrix<f64>, order: &[usize], mass: &[f64]) -> Eigenpairs {
    let n = mass.len();
    let k = order.len();
    let mut vectors = vec![0.0; n * k];
    for (j, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| y[(i, src)] / mass[i].sqrt()).collect();
        canonical_sign(&mut col);
        for i in 0..n {
            vectors[i * k + j] = col[i];
        }
    }
    Eigenpairs { values, vectors, k }
}

pub fn dense_eigenpairs(laplacian: &CsrMatrix, mass: &[f64], k: usize) -> Result<Eigenpairs> {
    let n = mass.len();
    if k > n {
        return Err(Error::Param(format!("K = {k} exceeds N = {n}")));
    }
    let a = scaled_operator(laplacian, mass);
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        for (c, v) in a.row(r) {
            dense[(r, c)] = v;
        }
    }
    let eig = SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    order.truncate(k);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(finish(values, &eig.eigenvectors, &order, mass))
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
fn rcm_order(a: &CsrMatrix) -> Vec<usize> {
    let n = a.rows;
    let degree: Vec<usize> = (0..n).map(|i| a.indptr[i + 1] - a.indptr[i]).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs_levels = |start: usize| -> (usize, usize) {
        // (last node reached, eccentricity)
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut q = VecDeque::from([start]);
        let mut last = start;
        while let Some(v) = q.pop_front() {
            last = v;
            for (w, _) in a.row(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        (last, dist[last])
    };
    while order.len() < n {
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).unwrap();
        // pseudo-peripheral start
        let mut start = seed;
        let (mut far, mut ecc) = bfs_levels(start);
        loop {
            let (far2, ecc2) = bfs_levels(far);
            if ecc2 <= ecc {
                break;
            }
            start = far;
            far = far2;
            ecc = ecc2;
        }
        visited[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(w, _)| w).filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                q.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky factor `P B Pᵀ = R Rᵀ` of a sparse SPD matrix.
struct ProfileCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ProfileCholesky {
    fn factor(b: &CsrMatrix) -> Result<Self> {
        let n = b.rows;
        let perm = rcm_order(b);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (c, _) in b.row(old) {
                let j = inv[c];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            offsets.push(offsets[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; offsets[n]];
        for old in 0..n {
            let i = inv[old];
            for (c, v) in b.row(old) {
                let j = inv[c];
                if j <= i {
                    values[offsets[i] + (j - first[i])] = v;
                }
            }
        }
        for i in 0..n {
            for j in first[i]..=i {
                let lo = first[i].max(first[j]);
                let mut s = values[offsets[i] + (j - first[i])];
                for k in lo..j {
                    s -= values[offsets[i] + (k - first[i])] * values[offsets[j] + (k - first[j])];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::Singular(format!(
                            "shifted operator not positive definite at pivot {i}"
                        )));
                    }
                    values[offsets[i] + (i - first[i])] = s.sqrt();
                } else {
                    values[offsets[i] + (j - first[i])] = s / values[offsets[j] + (j - first[j])];
                }
            }
        }
        Ok(Self {
            perm,
            first,
            offsets,
            values,
        })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.offsets[i] + (j - self.first[i])]
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in self.first[i]..i {
                s -= self.at(i, k) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            y[i] /= self.at(i, i);
            let yi = y[i];
            for k in self.first[i]..i {
                y[k] -= self.at(i, k) * yi;
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = y[new];
        }
        out
    }
}

fn orthonormalize(x: &mut DMatrix<f64>) {
    // two passes of modified Gram-Schmidt
    let (n, p) = x.shape();
    for _ in 0..2 {
        for j in 0..p {
            for i in 0..j {
                let d: f64 = (0..n).map(|r| x[(r, i)] * x[(r, j)]).sum();
                for r in 0..n {
                    x[(r, j)] -= d * x[(r, i)];
                }
            }
            let len: f64 = (0..n).map(|r| x[(r, j)] * x[(r, j)]).sum::<f64>().sqrt();
            for r in 0..n {
                x[(r, j)] /= len;
            }
        }
    }
}

/// The `k` smallest eigenpairs via shift-inverted block subspace iteration.
pub fn subspace_eigenpairs(laplacian: &CsrMatrix, mass: &[f64], k: usize) -> Result<Eigenpairs> {
    let n = mass.len();
    if k > n {
        return Err(Error::Param(format!("K = {k} exceeds N = {n}")));
    }
    let a = scaled_operator(laplacian, mass);
    let diag_mean = (0..n).map(|i| a.get(i, i)).sum::<f64>() / n as f64;
    let shift = 1e-3 * diag_mean;
    let mut trip = Vec::with_capacity(a.nnz() + n);
    for r in 0..n {
        for (c, v) in a.row(r) {
            trip.push((r, c, v));
        }
        trip.push((r, r, shift));
    }
    let shifted = CsrMatrix::from_triplets(n, n, &trip);
    let chol = ProfileCholesky::factor(&shifted)?;

    let p = (k + (k / 2).max(8)).min(n);
    // deterministic, non-degenerate start block
    let mut x = DMatrix::<f64>::from_fn(n, p, |i, j| {
        let t = (i as f64 + 1.0) * (j as f64 + 1.0);
        (t * 0.618_033_988_749_895).fract() - 0.5 + if j == 0 { 1.0 } else { 0.0 }
    });
    orthonormalize(&mut x);
    let mut achieved = 0;
    for _ in 0..MAX_SUBSPACE_ITERS {
        let mut y = DMatrix::<f64>::zeros(n, p);
        for j in 0..p {
            let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
            let s = chol.solve(&col);
            for i in 0..n {
                y[(i, j)] = s[i];
            }
        }
        orthonormalize(&mut y);
        // Rayleigh-Ritz on A
        let mut ay = DMatrix::<f64>::zeros(n, p);
        for j in 0..p {
            let col: Vec<f64> = (0..n).map(|i| y[(i, j)]).collect();
            let s = a.mul_vec(&col);
            for i in 0..n {
                ay[(i, j)] = s[i];
            }
        }
        let mut h = y.transpose() * &ay;
        h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let sorted = DMatrix::<f64>::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
        x = &y * &sorted;
        let ax = &ay * &sorted;
        let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        achieved = 0;
        for j in 0..k {
            let lam = eig.eigenvalues[order[j]];
            let res: f64 = (0..n)
                .map(|i| (ax[(i, j)] - lam * x[(i, j)]).powi(2))
                .sum::<f64>()
                .sqrt();
            if res <= RESIDUAL_TOL * scale {
                achieved += 1;
            } else {
                break;
            }
        }
        if achieved == k {
            let values: Vec<f64> = (0..k).map(|j| eig.eigenvalues[order[j]]).collect();
            let idx: Vec<usize> = (0..k).collect();
            return Ok(finish(values, &x, &idx, mass));
        }
    }
    Err(Error::Eigen { achieved, requested: k })
}
