//! Primal-dual interior point method for the bounded dual of the
//! quantile regression LP:
//!
//! `max y'a  s.t.  X'a = X'(1 - tau),  0 <= a <= 1`
//!
//! with Mehrotra predictor-corrector steps. The coefficient vector is the
//! negated dual variable of the equality constraints.

use crate::error::{QspecError, Result};
use crate::linalg::{spd_solve, Csr};

const STEP: f64 = 0.99995;

pub(crate) struct IpmOutput {
    pub theta: Vec<f64>,
    pub iterations: usize,
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1e20, f64::min)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares start for the dual variable, `(X'X)^{-1} X'(-y)`.
fn least_squares(x: &Csr, y: &[f64]) -> Result<Vec<f64>> {
    let g = x.weighted_gram(&vec![1.0; x.rows()]);
    let rhs: Vec<f64> = x.tmul_vec(y).iter().map(|v| -v).collect();
    spd_solve(g, &rhs)
}

pub(crate) fn solve(x: &Csr, y: &[f64], tau: &[f64], tol: f64, max_iter: usize) -> Result<IpmOutput> {
    let n = x.rows();
    // primal a and slack s = 1 - a
    let mut a: Vec<f64> = tau.iter().map(|t| 1.0 - t).collect();
    let mut s: Vec<f64> = tau.to_vec();
    let b = x.tmul_vec(&a);
    let c: Vec<f64> = y.iter().map(|v| -v).collect();

    let mut d = least_squares(x, y)?;
    let fitted = x.mul_vec(&d);
    let r: Vec<f64> = c.iter().zip(&fitted).map(|(ci, f)| ci - f).collect();
    let scale = r.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let delta = (scale * 1e-2).max(1e-8);
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0) + delta).collect();
    let mut w: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + delta).collect();

    let gap_of = |a: &[f64], d: &[f64], w: &[f64]| dot(&c, a) - dot(&b, d) + w.iter().sum::<f64>();
    let mut gap = gap_of(&a, &d, &w);
    let mut trace = Vec::new();
    let mut q = vec![0.0; n];
    let mut rz = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut it = 0;
    loop {
        let obj = dot(&c, &a).abs();
        if gap <= tol * (1.0 + obj) {
            break;
        }
        if it >= max_iter || !gap.is_finite() {
            let tail = trace.len().saturating_sub(5);
            return Err(QspecError::NonConvergence {
                iterations: it,
                trace: trace[tail..].to_vec(),
            });
        }
        it += 1;
        for i in 0..n {
            q[i] = a[i] * s[i] / (z[i] * s[i] + w[i] * a[i]).max(1e-300);
            rz[i] = z[i] - w[i];
        }
        let g = x.weighted_gram(&q);
        // affine-scaling predictor
        let qr: Vec<f64> = q.iter().zip(&rz).map(|(qi, ri)| qi * ri).collect();
        let near = it > 1 && gap <= 1e-6 * (1.0 + obj);
        let mut dy = match spd_solve(g.clone(), &x.tmul_vec(&qr)) {
            Ok(dy) => dy,
            Err(_) if near => break,
            Err(e) => return Err(e),
        };
        let ady = x.mul_vec(&dy);
        for i in 0..n {
            dx[i] = q[i] * (ady[i] - rz[i]);
            dz[i] = -z[i] * (1.0 + dx[i] / a[i]);
            dw[i] = -w[i] * (1.0 - dx[i] / s[i]);
        }
        let neg_dx: Vec<f64> = dx.iter().map(|v| -v).collect();
        let mut fp = max_step(&a, &dx).min(max_step(&s, &neg_dx));
        let mut fd = max_step(&w, &dw).min(max_step(&z, &dz));
        fp = (STEP * fp).min(1.0);
        fd = (STEP * fd).min(1.0);

        if fp.min(fd) < 1.0 {
            // centering-corrector
            let mu0 = dot(&z, &a) + dot(&w, &s);
            let mut gp = 0.0;
            for i in 0..n {
                gp += (z[i] + fd * dz[i]) * (a[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (s[i] - fp * dx[i]);
            }
            let mu = mu0 * (gp / mu0).powi(3) / (2.0 * n as f64);
            let mut rhs = vec![0.0; n];
            let mut dxdz = vec![0.0; n];
            let mut dsdw = vec![0.0; n];
            for i in 0..n {
                dxdz[i] = dx[i] * dz[i];
                dsdw[i] = -dx[i] * dw[i];
                let xi = mu * (1.0 / a[i] - 1.0 / s[i]);
                rhs[i] = rz[i] + dxdz[i] / a[i] - dsdw[i] / s[i] - xi;
            }
            let qrhs: Vec<f64> = q.iter().zip(&rhs).map(|(qi, ri)| qi * ri).collect();
            dy = match spd_solve(g, &x.tmul_vec(&qrhs)) {
                Ok(dy) => dy,
                Err(_) if near => break,
                Err(e) => return Err(e),
            };
            let ady = x.mul_vec(&dy);
            for i in 0..n {
                dx[i] = q[i] * (ady[i] - rhs[i]);
                let ds = -dx[i];
                dz[i] = mu / a[i] - z[i] - (z[i] * dx[i] + dxdz[i]) / a[i];
                dw[i] = mu / s[i] - w[i] - (w[i] * ds + dsdw[i]) / s[i];
            }
            let neg_dx: Vec<f64> = dx.iter().map(|v| -v).collect();
            fp = (STEP * max_step(&a, &dx).min(max_step(&s, &neg_dx))).min(1.0);
            fd = (STEP * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);
        }
        for i in 0..n {
            a[i] += fp * dx[i];
            s[i] -= fp * dx[i];
            z[i] += fd * dz[i];
            w[i] += fd * dw[i];
        }
        for (dk, dyk) in d.iter_mut().zip(&dy) {
            *dk += fd * dyk;
        }
        gap = gap_of(&a, &d, &w);
        trace.push(gap);
    }
    Ok(IpmOutput {
        theta: d.iter().map(|v| -v).collect(),
        iterations: it,
    })
}
