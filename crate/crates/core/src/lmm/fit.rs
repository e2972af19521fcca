use serde::{Deserialize, Serialize};

use super::design::SubjectDesign;
use super::{LmmError, LmmSpec};
use crate::data::Cohort;
use crate::numerics::{
    invert_information_pruning, maximize_with, Cholesky, Matrix, OptimOptions, SpdMatrix, WithGradient,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Keeps the residual variance strictly positive when the data are
/// noiseless; the optimizer then drives `log σ` down until the score
/// vanishes.
pub(crate) const SIGMA2_FLOOR: f64 = 1e-10;

/// Position of each parameter block in the unconstrained vector
/// `θ = [β, ζ, vech(L) with log diagonal, log σ]`, where `B = LLᵀ` and
/// `vech` runs row by row over the lower triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub p_fixed: usize,
    pub p_extra: usize,
    pub q: usize,
}

impl ParamLayout {
    pub fn n_coef(&self) -> usize {
        self.p_fixed + self.p_extra
    }

    pub fn n_chol(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    pub fn chol_offset(&self) -> usize {
        self.n_coef()
    }

    pub fn sigma_index(&self) -> usize {
        self.n_coef() + self.n_chol()
    }

    pub fn len(&self) -> usize {
        self.sigma_index() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lower-triangular factor encoded at `theta[chol_offset()..]`.
    pub fn chol_factor(&self, theta: &[f64]) -> Matrix {
        let mut l = Matrix::zeros(self.q, self.q);
        let mut k = self.chol_offset();
        for i in 0..self.q {
            for j in 0..=i {
                l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
                k += 1;
            }
        }
        l
    }

    pub fn unpack(&self, theta: &[f64]) -> LmmParams {
        let l = self.chol_factor(theta);
        let mut b = l.matmul(&l.transpose());
        b.symmetrize();
        LmmParams {
            beta: theta[..self.p_fixed].to_vec(),
            zeta: theta[self.p_fixed..self.n_coef()].to_vec(),
            re_cov: b,
            sigma2: (2.0 * theta[self.sigma_index()]).exp() + SIGMA2_FLOOR,
        }
    }

    pub fn pack(&self, p: &LmmParams) -> Result<Vec<f64>, LmmError> {
        let l = crate::numerics::cholesky(&p.re_cov)?;
        let mut theta = Vec::with_capacity(self.len());
        theta.extend_from_slice(&p.beta);
        theta.extend_from_slice(&p.zeta);
        for i in 0..self.q {
            for j in 0..=i {
                theta.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
            }
        }
        theta.push(0.5 * (p.sigma2 - SIGMA2_FLOOR).max(1e-300).ln());
        Ok(theta)
    }
}

/// Natural-scale model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmParams {
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Random-effects covariance `B`.
    pub re_cov: Matrix,
    pub sigma2: f64,
}

impl LmmParams {
    pub fn coef(&self) -> Vec<f64> {
        let mut c = self.beta.clone();
        c.extend_from_slice(&self.zeta);
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmFit {
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub re_cov: SpdMatrix,
    pub sigma2: f64,
    /// Asymptotic covariance of `theta`. Parameters on a flat boundary
    /// (listed in `flat`) get zero rows and columns, so this is only
    /// positive semi-definite in general.
    pub param_cov: Matrix,
    pub theta: Vec<f64>,
    pub layout: ParamLayout,
    pub flat: Vec<usize>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LmmFit {
    pub fn params(&self) -> LmmParams {
        self.layout.unpack(&self.theta)
    }
}

/// Everything a subject contributes at fixed parameters.
pub(crate) struct Precomputed {
    /// Lower Cholesky factor of `B`.
    pub l: Matrix,
    pub b_inv: Matrix,
    pub coef: Vec<f64>,
    pub sigma2: f64,
}

impl Precomputed {
    pub fn new(p: &LmmParams) -> Result<Self, LmmError> {
        let chol = Cholesky::new(&p.re_cov)?;
        Ok(Precomputed {
            l: chol.factor().clone(),
            b_inv: chol.inverse(),
            coef: p.coef(),
            sigma2: p.sigma2,
        })
    }
}

pub(crate) struct SubjectPosterior {
    /// `C = σ²B⁻¹ + ZᵀZ`, factorized.
    pub c: Cholesky,
    /// Posterior mean of the random effects.
    pub mean: Vec<f64>,
}

pub(crate) fn subject_posterior(d: &SubjectDesign, pre: &Precomputed) -> Result<SubjectPosterior, LmmError> {
    let q = d.z.cols();
    let xb = d.x.mat_vec(&pre.coef);
    let resid: Vec<f64> = d.y.iter().zip(&xb).map(|(y, m)| y - m).collect();
    let mut ztr = vec![0.0; q];
    for (j, r) in resid.iter().enumerate() {
        for k in 0..q {
            ztr[k] += d.z[(j, k)] * r;
        }
    }
    let c_mat = pre.b_inv.scale(pre.sigma2).add(&d.ztz);
    let c = Cholesky::new(&c_mat)?;
    let mean = c.solve(&ztr);
    Ok(SubjectPosterior { c, mean })
}

/// Marginal log-likelihood of one subject, plus score contributions when
/// `grad` is given: `XᵀV⁻¹r` into the coefficient slots, `∂ℓ/∂L` for the
/// Cholesky factor of `B` into `dl_acc`, and `∂ℓ/∂σ²` returned alongside.
///
/// The residual is split as `r = Z·ĉ + e` with `e` orthogonal to `Z`, and
/// `V⁻¹r = e/σ² + Z·w` with `w = (BZᵀZ + σ²I)⁻¹ĉ`. Nothing is divided by
/// `σ²` that does not vanish with the data's own noise, so the score stays
/// accurate when `σ²` is tiny. With `A = LᵀZᵀZL + σ²I`,
/// `log|V| = (n−q)·log σ² + log|A|`.
fn subject_terms(
    d: &SubjectDesign,
    pre: &Precomputed,
    grad: Option<(&mut [f64], &mut Matrix)>,
) -> Result<(f64, f64), LmmError> {
    let n = d.n();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let q = d.z.cols();
    let s2 = pre.sigma2;
    let l = &pre.l;
    let m = &d.ztz;
    let cx = d.c_x.mat_vec(&pre.coef);
    let c: Vec<f64> = d.c_y.iter().zip(&cx).map(|(a, b)| a - b).collect();
    let e: Vec<f64> = match &d.x_perp {
        Some(xp) => {
            let xb = xp.mat_vec(&pre.coef);
            d.y_perp.iter().zip(&xb).map(|(y, m)| y - m).collect()
        }
        None => d.y_perp.clone(),
    };
    let ee: f64 = e.iter().map(|x| x * x).sum();

    let ml = m.matmul(l);
    let mut a = l.transpose().matmul(&ml);
    for k in 0..q {
        a[(k, k)] += s2;
    }
    a.symmetrize();
    let a = Cholesky::new(&a)?;
    let mut n_mat = l.matmul(&l.transpose()).matmul(m);
    for k in 0..q {
        n_mat[(k, k)] += s2;
    }
    let w = solve_small(n_mat, c.clone())?;
    let mw = m.mat_vec(&w);
    let cmw: f64 = c.iter().zip(&mw).map(|(a, b)| a * b).sum();
    let ll = -0.5 * (n as f64 * LN_2PI + (n as f64 - q as f64) * s2.ln() + a.log_det() + ee / s2 + cmw);
    let Some((g_coef, dl_acc)) = grad else {
        return Ok((ll, 0.0));
    };
    let p = d.x.cols();
    let xzw = d.xtz.mat_vec(&w);
    for k in 0..p {
        g_coef[k] += xzw[k];
    }
    if let Some(xp) = &d.x_perp {
        for (j, ej) in e.iter().enumerate() {
            for k in 0..p {
                g_coef[k] += xp[(j, k)] * ej / s2;
            }
        }
    }
    // v̂ = A⁻¹LᵀZᵀr with Zᵀr = ZᵀZ·ĉ.
    let ltmc = ml.transpose().mat_vec(&c);
    let v = a.solve(&ltmc);
    let a_inv = a.inverse();
    let gla = ml.matmul(&a_inv);
    let mut tr_a_inv = 0.0;
    for i in 0..q {
        tr_a_inv += a_inv[(i, i)];
        for j in 0..q {
            dl_acc[(i, j)] += mw[i] * v[j] - gla[(i, j)];
        }
    }
    let wmw: f64 = w.iter().zip(&mw).map(|(a, b)| a * b).sum();
    let d_sigma2 = 0.5 * (ee / (s2 * s2) + wmw - (n as f64 - q as f64) / s2 - tr_a_inv);
    Ok((ll, d_sigma2))
}

/// Gaussian elimination with partial pivoting for the small nonsymmetric
/// system `BZᵀZ + σ²I`.
fn solve_small(mut a: Matrix, mut b: Vec<f64>) -> Result<Vec<f64>, LmmError> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
            .unwrap_or(k);
        if !(a[(p, k)].abs() > 0.0) {
            return Err(LmmError::Spec("singular random-effects system".into()));
        }
        if p != k {
            for j in 0..n {
                let t = a[(k, j)];
                a[(k, j)] = a[(p, j)];
                a[(p, j)] = t;
            }
            b.swap(k, p);
        }
        for i in k + 1..n {
            let f = a[(i, k)] / a[(k, k)];
            for j in k..n {
                a[(i, j)] -= f * a[(k, j)];
            }
            b[i] -= f * b[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[(k, j)] * b[j]).sum();
        b[k] = (b[k] - s) / a[(k, k)];
    }
    Ok(b)
}

fn designs(c: &Cohort, spec: &LmmSpec) -> Result<Vec<SubjectDesign>, LmmError> {
    c.subjects()
        .iter()
        .filter(|s| s.has_visits())
        .map(|s| SubjectDesign::new(spec, s))
        .collect()
}

fn total_loglik(designs: &[SubjectDesign], layout: &ParamLayout, theta: &[f64]) -> f64 {
    let Ok(pre) = Precomputed::new(&layout.unpack(theta)) else {
        return f64::NAN;
    };
    let mut ll = 0.0;
    for d in designs {
        match subject_terms(d, &pre, None) {
            Ok((l, _)) => ll += l,
            Err(_) => return f64::NAN,
        }
    }
    ll
}

fn total_score(designs: &[SubjectDesign], layout: &ParamLayout, theta: &[f64]) -> (f64, Vec<f64>) {
    let params = layout.unpack(theta);
    let Ok(pre) = Precomputed::new(&params) else {
        return (f64::NAN, vec![f64::NAN; layout.len()]);
    };
    let mut g = vec![0.0; layout.len()];
    let mut dl = Matrix::zeros(layout.q, layout.q);
    let mut ll = 0.0;
    let mut d_sigma2 = 0.0;
    for d in designs {
        match subject_terms(d, &pre, Some((&mut g[..layout.n_coef()], &mut dl))) {
            Ok((l, ds)) => {
                ll += l;
                d_sigma2 += ds;
            }
            Err(_) => return (f64::NAN, vec![f64::NAN; layout.len()]),
        }
    }
    let l = &pre.l;
    let mut k = layout.chol_offset();
    for i in 0..layout.q {
        for j in 0..=i {
            g[k] = if i == j { dl[(i, j)] * l[(i, i)] } else { dl[(i, j)] };
            k += 1;
        }
    }
    let s = theta[layout.sigma_index()];
    g[layout.sigma_index()] = d_sigma2 * 2.0 * (2.0 * s).exp();
    (ll, g)
}

/// Marginal log-likelihood at natural-scale parameters.
pub fn loglik(c: &Cohort, spec: &LmmSpec, params: &LmmParams) -> Result<f64, LmmError> {
    let pre = Precomputed::new(params)?;
    let mut ll = 0.0;
    for s in c.subjects().iter().filter(|s| s.has_visits()) {
        ll += subject_terms(&SubjectDesign::new(spec, s)?, &pre, None)?.0;
    }
    Ok(ll)
}

/// Log-likelihood and analytic score with respect to the unconstrained
/// parameter vector.
pub fn loglik_and_score(c: &Cohort, spec: &LmmSpec, theta: &[f64]) -> Result<(f64, Vec<f64>), LmmError> {
    let d = designs(c, spec)?;
    Ok(total_score(&d, &spec.layout(), theta))
}

fn start_values(designs: &[SubjectDesign], layout: &ParamLayout) -> Result<Vec<f64>, LmmError> {
    let p = layout.n_coef();
    let mut xtx = Matrix::zeros(p, p);
    let mut xty = vec![0.0; p];
    let mut n_obs = 0usize;
    let mut zz = vec![0.0; layout.q];
    for d in designs {
        for j in 0..d.n() {
            let row = d.x.row(j);
            for a in 0..p {
                xty[a] += row[a] * d.y[j];
                for b in 0..p {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
            for k in 0..layout.q {
                zz[k] += d.z[(j, k)] * d.z[(j, k)];
            }
        }
        n_obs += d.n();
    }
    if n_obs <= p {
        return Err(LmmError::TooFewVisits {
            visits: n_obs,
            params: p,
        });
    }
    let chol = Cholesky::new(&xtx).map_err(|_| LmmError::Spec("fixed-effect design is rank deficient".into()))?;
    let coef = chol.solve(&xty);
    let mut rss = 0.0;
    for d in designs {
        for (y, m) in d.y.iter().zip(d.x.mat_vec(&coef)) {
            rss += (y - m) * (y - m);
        }
    }
    let v = if rss > 0.0 { rss / (n_obs - p) as f64 } else { 1.0 };
    let mut theta = coef;
    for i in 0..layout.q {
        for j in 0..=i {
            theta.push(if i == j {
                0.5 * (0.5 * v / (zz[i] / n_obs as f64).max(1e-8)).ln()
            } else {
                0.0
            });
        }
    }
    theta.push(0.5 * (0.5 * v).ln());
    Ok(theta)
}

const NEWTON_DECREMENT_TOL: f64 = 1e-8;

/// `gᵀ H⁻¹ g`, twice the log-likelihood gain a Newton step would predict.
fn newton_decrement(cov: &Matrix, g: &[f64]) -> f64 {
    let hg = cov.mat_vec(g);
    g.iter().zip(&hg).map(|(a, b)| a * b).sum()
}

pub fn fit_lmm(c: &Cohort, spec: &LmmSpec) -> Result<LmmFit, LmmError> {
    fit_lmm_with(c, spec, None)
}

/// As [`fit_lmm`], optionally warm-started from an unconstrained vector.
pub fn fit_lmm_with(c: &Cohort, spec: &LmmSpec, start: Option<&[f64]>) -> Result<LmmFit, LmmError> {
    spec.validate()?;
    let layout = spec.layout();
    let designs = designs(c, spec)?;
    let start = match start {
        Some(s) => s.to_vec(),
        None => start_values(&designs, &layout)?,
    };
    let objective = WithGradient {
        value: |t: &[f64]| total_loglik(&designs, &layout, t),
        gradient: |t: &[f64]| total_score(&designs, &layout, t).1,
    };
    let opts = OptimOptions {
        tolerance: 1e-6,
        max_iterations: 1000,
        ..OptimOptions::default()
    };
    let res = maximize_with(&objective, &start, &opts)?;
    let gnorm = res.gradient.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let variance_params: Vec<usize> = (layout.chol_offset()..layout.len()).collect();
    let inverted = invert_information_pruning(&res.hessian, &variance_params);
    let mut converged = res.converged;
    if !converged {
        // Large cohorts, and error variances sitting on the floor, leave
        // rounding noise in the gradient above the tolerance. Accept the
        // point if a Newton step would gain nothing.
        converged = match &inverted {
            Ok((cov, flat)) => {
                flat.iter().all(|&i| res.gradient[i].abs() <= 1e-3)
                    && newton_decrement(cov, &res.gradient) < NEWTON_DECREMENT_TOL
            }
            Err(_) => false,
        };
        if !converged && gnorm > 1e-3 {
            return Err(LmmError::NonConvergence {
                best: res.argmax,
                gradient_norm: gnorm,
            });
        }
    }
    let (param_cov, flat) = inverted.map_err(|e| LmmError::SingularHessian(e.to_string()))?;
    let params = layout.unpack(&res.argmax);
    Ok(LmmFit {
        beta: params.beta,
        zeta: params.zeta,
        re_cov: SpdMatrix::new(params.re_cov)?,
        sigma2: params.sigma2,
        param_cov,
        theta: res.argmax,
        layout,
        flat,
        loglik: res.value,
        converged,
        iterations: res.iterations,
    })
}
