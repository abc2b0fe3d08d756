//! Compressed sparse rows and the few dense kernels the solvers need.

use nalgebra::{DMatrix, DVector};

use crate::error::{QspecError, Result};

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csr {
    cols: usize,
    row_ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    pub fn new(cols: usize) -> Self {
        Csr {
            cols,
            row_ptr: vec![0],
            idx: Vec::new(),
            val: Vec::new(),
        }
    }

    /// Appends a row given as (column, value) pairs; zeros are dropped.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, v) in entries {
            debug_assert!(j < self.cols);
            if v != 0.0 {
                self.idx.push(j);
                self.val.push(v);
            }
        }
        self.row_ptr.push(self.idx.len());
    }

    pub fn from_dense_rows(cols: usize, rows: &[Vec<f64>]) -> Self {
        let mut m = Csr::new(cols);
        for r in rows {
            m.push_row(r.iter().copied().enumerate());
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    pub fn row_dot(&self, i: usize, v: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &x)| x * v[j]).sum()
    }

    /// Rows in the order given, repeats allowed.
    pub fn select_rows(&self, rows: &[usize]) -> Csr {
        let mut out = Csr::new(self.cols);
        for &i in rows {
            let (idx, val) = self.row(i);
            out.idx.extend_from_slice(idx);
            out.val.extend_from_slice(val);
            out.row_ptr.push(out.idx.len());
        }
        out
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Csr) -> Result<Csr> {
        if self.cols != other.cols {
            return Err(QspecError::Shape(format!(
                "cannot stack {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut out = self.clone();
        let base = out.idx.len();
        out.idx.extend_from_slice(&other.idx);
        out.val.extend_from_slice(&other.val);
        out.row_ptr.extend(other.row_ptr[1..].iter().map(|p| p + base));
        Ok(out)
    }

    /// Keeps only the listed columns, renumbered in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Csr {
        let mut map = vec![usize::MAX; self.cols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut out = Csr::new(keep.len());
        for i in 0..self.rows() {
            let (idx, val) = self.row(i);
            out.push_row(
                idx.iter()
                    .zip(val)
                    .filter(|(j, _)| map[**j] != usize::MAX)
                    .map(|(&j, &v)| (map[j], v)),
            );
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row_dot(i, v)).collect()
    }

    /// `A^T w`.
    pub fn tmul_vec(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (&j, &x) in idx.iter().zip(val) {
                out[j] += x * wi;
            }
        }
        out
    }

    /// `sum_i q_i a_i a_i^T`, lower triangle filled then mirrored.
    pub fn weighted_gram(&self, q: &[f64]) -> DMatrix<f64> {
        let p = self.cols;
        let mut g = DMatrix::<f64>::zeros(p, p);
        let gs = g.as_mut_slice(); // column-major
        for (i, &qi) in q.iter().enumerate() {
            let (idx, val) = self.row(i);
            for (a, (&ja, &va)) in idx.iter().zip(val).enumerate() {
                let s = qi * va;
                for (&jb, &vb) in idx[..=a].iter().zip(&val[..=a]) {
                    let (r, c) = if ja >= jb { (ja, jb) } else { (jb, ja) };
                    gs[c * p + r] += s * vb;
                }
            }
        }
        g.fill_upper_triangle_with_lower_triangle();
        g
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| {
                let mut r = vec![0.0; self.cols];
                let (idx, val) = self.row(i);
                for (&j, &v) in idx.iter().zip(val) {
                    r[j] += v;
                }
                r
            })
            .collect()
    }
}

/// Solves `g x = b` for symmetric positive definite `g`, adding a tiny
/// diagonal jitter if the plain factorization fails.
pub fn spd_solve(g: DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    if g.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(QspecError::Domain("normal equations contain non-finite values".into()));
    }
    let rhs = DVector::from_column_slice(b);
    let scale = g.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..6 {
        let mut m = g.clone();
        if jitter > 0.0 {
            for k in 0..m.nrows() {
                m[(k, k)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.solve(&rhs).iter().copied().collect());
        }
        jitter = if jitter == 0.0 { scale * 1e-13 } else { jitter * 100.0 };
    }
    Err(QspecError::Domain("normal matrix is not positive definite".into()))
}

/// Greedy rank check: walks the columns of a Gram matrix in order and
/// returns the indices whose residual norm after projecting out the
/// earlier accepted columns is negligible.
pub fn dependent_columns(g: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let p = g.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut accepted: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..p {
        let gjj = g[(j, j)];
        // l[j, k] for accepted k
        let mut row = vec![0.0; accepted.len()];
        for (a, &k) in accepted.iter().enumerate() {
            let mut s = g[(j, k)];
            for b in 0..a {
                s -= row[b] * l[(k, accepted[b])];
            }
            row[a] = s / l[(k, k)];
        }
        let resid = gjj - row.iter().map(|v| v * v).sum::<f64>();
        if gjj <= 0.0 || resid <= rel_tol * gjj {
            dependent.push(j);
            continue;
        }
        for (a, &k) in accepted.iter().enumerate() {
            l[(j, k)] = row[a];
        }
        l[(j, j)] = resid.sqrt();
        accepted.push(j);
    }
    dependent
}

/// Pairwise (cascade) summation; deterministic regardless of threading.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matches_dense() {
        let rows = vec![vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 1.0], vec![1.0, 1.0, 0.0]];
        let a = Csr::from_dense_rows(3, &rows);
        let q = [0.5, 2.0, 1.0];
        let g = a.weighted_gram(&q);
        for r in 0..3 {
            for c in 0..3 {
                let want: f64 = (0..3).map(|i| q[i] * rows[i][r] * rows[i][c]).sum();
                assert!((g[(r, c)] - want).abs() < 1e-14);
            }
        }
        assert_eq!(a.tmul_vec(&[1.0, 1.0, 1.0]), vec![2.0, 4.0, 3.0]);
        assert_eq!(a.select_cols(&[2, 0]).to_dense()[0], vec![2.0, 1.0]);
    }

    #[test]
    fn finds_dependent_columns() {
        // third column = first + second
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let a = i as f64;
                let b = (i * i) as f64;
                vec![a, b, a + b, 1.0]
            })
            .collect();
        let g = Csr::from_dense_rows(4, &rows).weighted_gram(&[1.0; 6]);
        assert_eq!(dependent_columns(&g, 1e-10), vec![2]);
    }

    #[test]
    fn solves_spd() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = spd_solve(g, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
    }
}
