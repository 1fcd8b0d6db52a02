//! BFGS minimization with an Armijo backtracking line search.
//!
//! The objective returns `Err` or a non-finite value outside its domain; the
//! line search treats both as `+inf` and backs off.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    /// Gradient infinity-norm below tolerance.
    GradientTolerance,
    /// Relative change of the objective below tolerance.
    FunctionTolerance,
    MaxIterations,
    /// No step along the search direction (or steepest descent) decreased the objective.
    LineSearchFailed,
    /// The objective could not be evaluated at the start.
    InvalidStart,
}

impl OptimStatus {
    pub fn converged(self) -> bool {
        matches!(self, OptimStatus::GradientTolerance | OptimStatus::FunctionTolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            rel_tol: 1e-9,
            c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptimStatus,
}

impl BfgsResult {
    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn minimize<F, E>(mut objective: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let n = x0.len();
    let mut evaluations = 1;
    let mut eval = |x: &[f64], evaluations: &mut usize| -> Option<(f64, Vec<f64>)> {
        *evaluations += 1;
        match objective(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
            _ => None,
        }
    };
    let Some((mut f, mut g)) = eval(x0, &mut 0) else {
        return BfgsResult {
            x: x0.to_vec(),
            f: f64::INFINITY,
            grad: vec![f64::NAN; n],
            iterations: 0,
            evaluations,
            status: OptimStatus::InvalidStart,
        };
    };
    let mut x = x0.to_vec();
    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut fresh = true;
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            status = OptimStatus::GradientTolerance;
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 || !slope.is_finite() {
            h = identity(n);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        // unscaled steepest-descent steps start no longer than one unit per coordinate
        let mut step = if fresh { 1.0f64.min(1.0 / inf_norm(&d)) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = eval(&trial, &mut evaluations) {
                if ft <= f + opts.c1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                status = OptimStatus::LineSearchFailed;
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let rel_change = (f - f_new).abs() / f.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        f = f_new;
        g = g_new;
        if rel_change < opts.rel_tol {
            status = if inf_norm(&g) < opts.grad_tol {
                OptimStatus::GradientTolerance
            } else {
                OptimStatus::FunctionTolerance
            };
            break;
        }
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                // Shanno–Phua scaling of the initial approximation
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
    }
    BfgsResult {
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        status,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `H <- (I - rho s y') H (I - rho y s') + rho s s'`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>), ()> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.status.converged(), "{:?}", r.status);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn quadratic_exact_minimum() {
        // f = 0.5 x'Ax - b'x with A = [[3,1],[1,2]], b = [1,1]; minimum at A^-1 b = (0.2, 0.4)
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>), ()> {
            let ax = [3.0 * x[0] + x[1], x[0] + 2.0 * x[1]];
            Ok((
                0.5 * (x[0] * ax[0] + x[1] * ax[1]) - x[0] - x[1],
                vec![ax[0] - 1.0, ax[1] - 1.0],
            ))
        };
        let opts = BfgsOptions {
            grad_tol: 1e-11,
            rel_tol: 0.0,
            ..Default::default()
        };
        let r = minimize(f, &[5.0, -7.0], &opts);
        assert!(r.status.converged(), "{r:?}");
        // |x - x*| <= |g| / lambda_min(A), lambda_min ~ 1.38
        assert!((r.x[0] - 0.2).abs() < 1e-10 && (r.x[1] - 0.4).abs() < 1e-10, "{r:?}");
    }

    #[test]
    fn backs_off_from_domain_errors() {
        // log barrier: defined for x > 0 only, minimum at x = 1
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>), ()> {
            if x[0] <= 0.0 {
                return Err(());
            }
            Ok((x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]))
        };
        let r = minimize(f, &[8.0], &BfgsOptions::default());
        assert!(r.status.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_start_reported() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>), ()> { Err(()) };
        let r = minimize(f, &[0.0], &BfgsOptions::default());
        assert_eq!(r.status, OptimStatus::InvalidStart);
        assert!(!r.status.converged());
    }

    #[test]
    fn max_iterations_is_not_convergence() {
        let opts = BfgsOptions {
            max_iter: 2,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert_eq!(r.status, OptimStatus::MaxIterations);
    }
}
