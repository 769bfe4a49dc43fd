//! Projected quasi-Newton ascent used for GP hyperparameter fitting and
//! acquisition maximization.
//!
//! Each iterate is mapped back into the feasible set by a caller-supplied
//! projection after every step. The inverse-Hessian estimate is a standard
//! BFGS update; it is reset whenever the projected step fails to produce a
//! usable curvature pair.

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Stop when the projected gradient step moves less than this (sup norm).
    pub grad_tol: f64,
    /// Stop when the relative objective improvement falls below this.
    pub f_tol: f64,
    /// Cap on the length of the first trial step.
    pub max_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            max_iters: 100,
            grad_tol: 1e-9,
            f_tol: 1e-12,
            max_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Maximize `f` from `x0`. `f` returns the value and gradient. The returned
/// point always has a value at least that of the projected start.
pub fn maximize_projected<F, P>(mut f: F, project: P, x0: &[f64], opts: &AscentOptions) -> Result<AscentResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = project(x0);
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity(n);
    let mut iters = 0;

    while iters < opts.max_iters {
        iters += 1;
        let stationary = {
            let probe: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
            sup_dist(&project(&probe), &x) < opts.grad_tol
        };
        if stationary || !g.iter().all(|v| v.is_finite()) {
            break;
        }

        let mut dir = mat_vec(&h, &g);
        if dot(&dir, &g) <= 0.0 {
            h = identity(n);
            dir = g.clone();
        }
        let norm = dot(&dir, &dir).sqrt();
        let mut alpha = if norm > opts.max_step {
            opts.max_step / norm
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
            let trial = project(&trial);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if sup_dist(&trial, &x) == 0.0 {
                break;
            }
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft >= fx + 1e-4 * dot(&g, &step).max(0.0) {
                    accepted = Some((trial, step, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, s, fn_, gn)) = accepted else {
            break;
        };

        // curvature pair for the minimization of -f
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-12 {
            bfgs_update(&mut h, &s, &y, ys);
        } else {
            h = identity(n);
        }

        let improvement = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        if improvement.abs() <= opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    Ok(AscentResult { x, value: fx, iters })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], ys: f64) {
    let n = s.len();
    let rho = 1.0 / ys;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_quadratic() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = -(x[0] - 0.3).powi(2) - 4.0 * (x[1] + 0.2).powi(2) - x[0] * x[1];
            Ok((v, vec![-2.0 * (x[0] - 0.3) - x[1], -8.0 * (x[1] + 0.2) - x[0]]))
        };
        let r = maximize_projected(f, |x| x.to_vec(), &[2.0, 2.0], &AscentOptions::default()).unwrap();
        // stationary point of the quadratic: solve [[2,1],[1,8]] x = [0.6,-1.6]
        let det = 15.0;
        let ex = (0.6 * 8.0 + 1.6) / det;
        let ey = (2.0 * -1.6 - 0.6) / det;
        assert!((r.x[0] - ex).abs() < 1e-6 && (r.x[1] - ey).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn respects_box_projection() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0], vec![1.0])) };
        let proj = |x: &[f64]| vec![x[0].clamp(0.0, 1.0)];
        let r = maximize_projected(f, proj, &[0.2], &AscentOptions::default()).unwrap();
        assert_eq!(r.x, vec![1.0]);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok(((3.0 * x[0]).sin(), vec![3.0 * (3.0 * x[0]).cos()])) };
        for s in [-2.0, -0.4, 0.1, 1.3] {
            let start = (3.0f64 * s).sin();
            let r = maximize_projected(f, |x| x.to_vec(), &[s], &AscentOptions::default()).unwrap();
            assert!(r.value >= start);
        }
    }
}
