//! Quasi-Newton maximization (BFGS with backtracking) and finite-difference
//! derivatives.

use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::NumericsError;

/// A function to be maximized. Implementors that can supply an analytic
/// gradient override [`Objective::value_and_gradient`]; everything else
/// falls back to central differences.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.value(x), fd_gradient(|p| self.value(p), x))
    }

    fn has_analytic_gradient(&self) -> bool {
        false
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64,
{
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Pairs a value closure with an analytic gradient closure.
pub struct WithGradient<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Objective for WithGradient<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        ((self.value)(x), (self.gradient)(x))
    }

    fn has_analytic_gradient(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    /// Hessian of the *negative* objective at `argmax`.
    pub hessian: Matrix,
    pub gradient: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct OptimOptions {
    /// Convergence threshold on the gradient max-norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Upper bound on the Euclidean length of a single step.
    pub max_step: f64,
    pub max_halvings: usize,
    pub compute_hessian: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            tolerance: 1e-6,
            max_iterations: 500,
            max_step: 5.0,
            max_halvings: 60,
            compute_hessian: true,
        }
    }
}

pub fn maximize<O: Objective + ?Sized>(
    objective: &O,
    start: &[f64],
    tolerance: f64,
) -> Result<OptimResult, NumericsError> {
    maximize_with(
        objective,
        start,
        &OptimOptions {
            tolerance,
            ..OptimOptions::default()
        },
    )
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn maximize_with<O: Objective + ?Sized>(
    objective: &O,
    start: &[f64],
    opts: &OptimOptions,
) -> Result<OptimResult, NumericsError> {
    let n = start.len();
    let mut x = start.to_vec();
    // Work with the minimization problem internally: f = -objective.
    let (v0, g0) = objective.value_and_gradient(&x);
    if !v0.is_finite() {
        return Err(NumericsError::NonFiniteStart);
    }
    let mut f = -v0;
    let mut g: Vec<f64> = g0.iter().map(|d| -d).collect();
    let mut h_inv = Matrix::identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut stalled = 0;

    while iterations < opts.max_iterations && max_norm(&g) >= opts.tolerance {
        iterations += 1;
        let mut p: Vec<f64> = h_inv.mat_vec(&g).iter().map(|d| -d).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h_inv = Matrix::identity(n);
            fresh = true;
            p = g.iter().map(|d| -d).collect();
            slope = dot(&g, &p);
        }
        let len = dot(&p, &p).sqrt();
        if len > opts.max_step {
            let s = opts.max_step / len;
            p.iter_mut().for_each(|d| *d *= s);
            slope *= s;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            let ft = -objective.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }

        let Some((x_new, _)) = accepted else {
            if !fresh {
                // Curvature model went stale; retry from steepest descent.
                h_inv = Matrix::identity(n);
                fresh = true;
                continue;
            }
            break;
        };

        let (v_new, g_raw) = objective.value_and_gradient(&x_new);
        let f_new = -v_new;
        let g_new: Vec<f64> = g_raw.iter().map(|d| -d).collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h_inv = Matrix::identity(n).scale(scale);
            }
            bfgs_update(&mut h_inv, &s, &y, sy);
            fresh = false;
        }

        if (f - f_new).abs() <= 1e-15 * f.abs().max(1.0) && max_norm(&s) <= 1e-14 {
            stalled += 1;
            if stalled > 3 {
                x = x_new;
                f = f_new;
                g = g_new;
                break;
            }
        } else {
            stalled = 0;
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    let converged = max_norm(&g) < opts.tolerance;
    let hessian = if opts.compute_hessian {
        neg_hessian(objective, &x)
    } else {
        Matrix::zeros(n, n)
    };
    Ok(OptimResult {
        argmax: x,
        value: -f,
        hessian,
        gradient: g.iter().map(|d| -d).collect(),
        converged,
        iterations,
    })
}

fn bfgs_update(h: &mut Matrix, s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = h.mat_vec(y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Central-difference step, `ε^{1/3} · max(|x|, 1)`.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Hessian of `-objective` at `x`. Uses central differences of the
/// gradient when it is analytic, otherwise second differences of values
/// with step `ε^{1/4}`.
pub fn neg_hessian<O: Objective + ?Sized>(objective: &O, x: &[f64]) -> Matrix {
    let n = x.len();
    let mut h = Matrix::zeros(n, n);
    let mut p = x.to_vec();
    if objective.has_analytic_gradient() {
        for j in 0..n {
            let step = fd_step(x[j]);
            p[j] = x[j] + step;
            let (_, gu) = objective.value_and_gradient(&p);
            p[j] = x[j] - step;
            let (_, gd) = objective.value_and_gradient(&p);
            p[j] = x[j];
            for i in 0..n {
                h[(i, j)] = -(gu[i] - gd[i]) / (2.0 * step);
            }
        }
    } else {
        let steps: Vec<f64> = x.iter().map(|xi| f64::EPSILON.powf(0.25) * xi.abs().max(1.0)).collect();
        let f0 = objective.value(x);
        for i in 0..n {
            for j in 0..=i {
                let (hi, hj) = (steps[i], steps[j]);
                let val = if i == j {
                    p[i] = x[i] + hi;
                    let up = objective.value(&p);
                    p[i] = x[i] - hi;
                    let down = objective.value(&p);
                    p[i] = x[i];
                    (up - 2.0 * f0 + down) / (hi * hi)
                } else {
                    let mut eval = |di: f64, dj: f64| {
                        p[i] = x[i] + di;
                        p[j] = x[j] + dj;
                        let v = objective.value(&p);
                        p[i] = x[i];
                        p[j] = x[j];
                        v
                    };
                    (eval(hi, hj) - eval(hi, -hj) - eval(-hi, hj) + eval(-hi, -hj)) / (4.0 * hi * hj)
                };
                h[(i, j)] = -val;
                h[(j, i)] = -val;
            }
        }
    }
    h.symmetrize();
    h
}
