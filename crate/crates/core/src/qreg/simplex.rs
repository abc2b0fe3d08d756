//! Dense bounded-variable primal simplex on the same dual LP as the
//! interior point solver. Used for small problems; returns vertex
//! solutions, so the fit interpolates `p` observations exactly.

use crate::error::{QspecError, Result};
use crate::linalg::Csr;

pub(crate) struct SimplexOutput {
    pub theta: Vec<f64>,
    pub iterations: usize,
}

struct Tableau {
    p: usize,
    nvar: usize,
    n_struct: usize,
    // row-major p x nvar: B^{-1} [A | S]
    t: Vec<f64>,
    basic: Vec<usize>,
    xb: Vec<f64>,
    is_basic: Vec<bool>,
    at_upper: Vec<bool>,
    upper: Vec<f64>,
    iterations: usize,
}

impl Tableau {
    fn col(&self, k: usize, j: usize) -> f64 {
        self.t[k * self.nvar + j]
    }

    fn value(&self, j: usize) -> f64 {
        if self.at_upper[j] {
            self.upper[j]
        } else {
            0.0
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nv = self.nvar;
        let piv = self.t[r * nv + j];
        for v in &mut self.t[r * nv..(r + 1) * nv] {
            *v /= piv;
        }
        let (before, rest) = self.t.split_at_mut(r * nv);
        let (row_r, after) = rest.split_at_mut(nv);
        for chunk in before.chunks_mut(nv).chain(after.chunks_mut(nv)) {
            let f = chunk[j];
            if f != 0.0 {
                for (c, rv) in chunk.iter_mut().zip(row_r.iter()) {
                    *c -= f * rv;
                }
            }
        }
    }

    /// Minimizes `cost' x` from the current basis. Dantzig pricing on
    /// maintained reduced costs, switching to Bland's rule after a run of
    /// degenerate pivots.
    fn optimize(&mut self, cost: &[f64], eps: f64, max_iter: usize) -> Result<()> {
        let mut reduced: Vec<f64> = (0..self.nvar)
            .map(|j| cost[j] - (0..self.p).map(|k| cost[self.basic[k]] * self.col(k, j)).sum::<f64>())
            .collect();
        let mut degenerate = 0usize;
        loop {
            if self.iterations >= max_iter {
                return Err(QspecError::NonConvergence {
                    iterations: self.iterations,
                    trace: Vec::new(),
                });
            }
            let bland = degenerate > 50;
            let mut entering = None;
            let mut best_gain = 0.0;
            for j in 0..self.nvar {
                if self.is_basic[j] || self.upper[j] == 0.0 {
                    continue;
                }
                let gain = if self.at_upper[j] { reduced[j] } else { -reduced[j] };
                if gain > eps && (entering.is_none() || (!bland && gain > best_gain)) {
                    entering = Some(j);
                    best_gain = gain;
                    if bland {
                        break;
                    }
                }
            }
            let Some(j) = entering else {
                return Ok(());
            };
            self.iterations += 1;
            let dir = if self.at_upper[j] { -1.0 } else { 1.0 };
            // ratio test: basic k moves by -dir * theta * T[k, j]
            let mut best = self.upper[j];
            let mut leave: Option<(usize, bool)> = None;
            for k in 0..self.p {
                let alpha = dir * self.col(k, j);
                let b = self.basic[k];
                let (limit, to_upper) = if alpha > 1e-11 {
                    (self.xb[k].max(0.0) / alpha, false)
                } else if alpha < -1e-11 && self.upper[b].is_finite() {
                    ((self.upper[b] - self.xb[k]).max(0.0) / -alpha, true)
                } else {
                    continue;
                };
                if limit < best - 1e-13 {
                    best = limit;
                    leave = Some((k, to_upper));
                } else if limit <= best + 1e-13 {
                    // ties: a bound flip wins, otherwise the smallest variable index leaves
                    if let Some((kk, _)) = leave {
                        if b < self.basic[kk] {
                            leave = Some((k, to_upper));
                        }
                    }
                }
            }
            if !best.is_finite() {
                return Err(QspecError::Domain("linear program is unbounded".into()));
            }
            if best > 1e-12 {
                degenerate = 0;
            } else {
                degenerate += 1;
            }
            for k in 0..self.p {
                self.xb[k] -= dir * best * self.col(k, j);
            }
            match leave {
                None => {
                    self.at_upper[j] = !self.at_upper[j];
                }
                Some((r, to_upper)) => {
                    let entering_value = self.value(j) + dir * best;
                    let old = self.basic[r];
                    self.is_basic[old] = false;
                    self.at_upper[old] = to_upper;
                    self.pivot(r, j);
                    let dj = reduced[j];
                    for (rc, tv) in reduced.iter_mut().zip(&self.t[r * self.nvar..(r + 1) * self.nvar]) {
                        *rc -= dj * tv;
                    }
                    reduced[j] = 0.0;
                    self.basic[r] = j;
                    self.is_basic[j] = true;
                    self.at_upper[j] = false;
                    self.xb[r] = entering_value;
                }
            }
        }
    }
}

pub(crate) fn solve(x: &Csr, y: &[f64], tau: &[f64], start_upper: &[bool], max_iter: usize) -> Result<SimplexOutput> {
    let n = x.rows();
    let p = x.cols();
    let nvar = n + p;
    let dense = x.to_dense();
    let at_upper_init: Vec<bool> = (0..nvar).map(|j| j < n && start_upper[j]).collect();
    let a0: Vec<f64> = (0..n).map(|j| if at_upper_init[j] { 1.0 } else { 0.0 }).collect();
    let b = x.tmul_vec(&tau.iter().map(|t| 1.0 - t).collect::<Vec<_>>());
    let ax = x.tmul_vec(&a0);
    let resid: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let sign: Vec<f64> = resid.iter().map(|r| if *r < 0.0 { -1.0 } else { 1.0 }).collect();

    // T = S [A | S] = [S A | I]
    let mut t = vec![0.0; p * nvar];
    for k in 0..p {
        for j in 0..n {
            t[k * nvar + j] = sign[k] * dense[j][k];
        }
        t[k * nvar + n + k] = 1.0;
    }
    let mut upper = vec![1.0; nvar];
    for u in &mut upper[n..] {
        *u = f64::INFINITY;
    }
    let mut is_basic = vec![false; nvar];
    for k in 0..p {
        is_basic[n + k] = true;
    }
    let mut tab = Tableau {
        p,
        nvar,
        n_struct: n,
        t,
        basic: (n..n + p).collect(),
        xb: resid.iter().map(|r| r.abs()).collect(),
        is_basic,
        at_upper: at_upper_init,
        upper,
        iterations: 0,
    };

    let yscale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut cost = vec![0.0; nvar];
    for c in &mut cost[n..] {
        *c = 1.0;
    }
    tab.optimize(&cost, 1e-10, max_iter)?;
    let infeas: f64 = tab
        .basic
        .iter()
        .zip(&tab.xb)
        .filter(|(b, _)| **b >= n)
        .map(|(_, v)| v.abs())
        .sum();
    if infeas > 1e-7 * (1.0 + b.iter().map(|v| v.abs()).sum::<f64>()) {
        return Err(QspecError::Domain(format!("phase 1 left infeasibility {infeas}")));
    }
    // drive remaining artificials out of the basis with degenerate pivots
    for r in 0..p {
        if tab.basic[r] < n {
            continue;
        }
        let pick = (0..n)
            .filter(|&j| !tab.is_basic[j])
            .max_by(|&i, &j| tab.col(r, i).abs().total_cmp(&tab.col(r, j).abs()));
        match pick {
            Some(j) if tab.col(r, j).abs() > 1e-9 => {
                let old = tab.basic[r];
                let val = tab.value(j);
                tab.is_basic[old] = false;
                tab.at_upper[old] = false;
                tab.pivot(r, j);
                tab.basic[r] = j;
                tab.is_basic[j] = true;
                tab.at_upper[j] = false;
                tab.xb[r] = val;
            }
            _ => return Err(QspecError::Domain("design is rank deficient".into())),
        }
    }
    for j in n..nvar {
        tab.upper[j] = 0.0;
        tab.at_upper[j] = false;
    }
    let mut cost = vec![0.0; nvar];
    for j in 0..n {
        cost[j] = -y[j];
    }
    tab.optimize(&cost, 1e-11 * yscale, max_iter)?;

    // theta = y_B' B^{-1}; B^{-1} = T[:, n..] S
    let mut theta = vec![0.0; p];
    for (r, &bj) in tab.basic.iter().enumerate() {
        debug_assert!(bj < tab.n_struct);
        for k in 0..p {
            theta[k] += y[bj] * tab.col(r, n + k) * sign[k];
        }
    }
    Ok(SimplexOutput {
        theta,
        iterations: tab.iterations,
    })
}
