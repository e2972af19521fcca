//! Shared-random-effects joint model: a linear mixed model for the exposure
//! and a proportional hazards model with the current true value `X*(t)` as
//! the time-varying covariate, fitted by maximizing the marginal likelihood.
//!
//! The random effects are integrated out by pseudo-adaptive Gauss-Hermite
//! quadrature: nodes for subject `i` sit at `ĉᵢ + √2 Rᵢ x`, where `ĉᵢ` and
//! `RᵢRᵢᵀ` are the mixed-model posterior mean and covariance. The nodes are
//! held fixed while the parameters move and re-centred between rounds.

use serde::{Deserialize, Serialize};

use super::{cox_err, lmm_err, rc_paths, EstimateResult, EstimatorError, Method, DEFAULT_N_QUAD};
use crate::data::{truncate_at_event, Cohort, SubjectRecord};
use crate::lmm::{fit_lmm, LmmSpec, Regressor};
use crate::numerics::optim::neg_hessian;
use crate::numerics::{
    gauss_hermite, invert_information_pruning, maximize_with, Cholesky, Matrix, OptimOptions, UnitRule, WithGradient,
};
use crate::par;
use crate::survival::{fit_cox_data, CoxData, CoxOptions, ParametricBaseline, StepFunction};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SIGMA2_FLOOR: f64 = 1e-6;
const NEWTON_DECREMENT_TOL: f64 = 1e-6;
/// Interior cuts of the piecewise-constant baseline, at equal quantiles of
/// the observed event times.
const N_CUTS: usize = 5;
const PIECE_NODES: usize = 8;
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JmBaseline {
    Weibull,
    PiecewiseConstant,
}

#[derive(Debug, Clone)]
pub struct JmOptions {
    /// Gauss-Hermite nodes per random-effect dimension.
    pub n_quad: usize,
    pub baseline: JmBaseline,
    /// Holds the association fixed instead of estimating it.
    pub fixed_gamma: Option<f64>,
    /// Gauss-Legendre nodes for the Weibull cumulative hazard.
    pub legendre_nodes: usize,
    pub max_rounds: usize,
    /// Gradient max-norm at which a round stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for JmOptions {
    fn default() -> Self {
        JmOptions {
            n_quad: DEFAULT_N_QUAD,
            baseline: JmBaseline::Weibull,
            fixed_gamma: None,
            legendre_nodes: 15,
            max_rounds: 5,
            tolerance: 1e-4,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    q: usize,
    p_extra: usize,
    p_surv: usize,
    n_base: usize,
}

impl Layout {
    fn chol(&self) -> usize {
        self.q + self.p_extra
    }
    fn sigma(&self) -> usize {
        self.chol() + self.q * (self.q + 1) / 2
    }
    fn gamma(&self) -> usize {
        self.sigma() + 1
    }
    fn alpha(&self) -> usize {
        self.gamma() + 1
    }
    fn base(&self) -> usize {
        self.alpha() + self.p_surv
    }
    fn len(&self) -> usize {
        self.base() + self.n_base
    }
    /// Variance-component slots, which may sit on a flat boundary.
    fn variance_slots(&self) -> Vec<usize> {
        let mut k = self.chol();
        let mut out = Vec::new();
        for i in 0..self.q {
            k += i;
            out.push(k);
            k += 1;
        }
        out.push(self.sigma());
        out
    }
}

/// Data of one subject in the form the likelihood consumes.
struct Subject {
    n: f64,
    /// Least-squares anchor `m₀` for the trajectory coefficients and the
    /// residual `e₀ = y − Fm₀` summarised as `‖e₀‖²`, `Σe₀` and `Fᵀe₀`.
    /// Expanding sums of squares around `m₀` instead of zero keeps them
    /// accurate when the measurement error is tiny.
    m0: Vec<f64>,
    rss0: f64,
    se0: f64,
    fe0: Vec<f64>,
    sf: Vec<f64>,
    sff: Matrix,
    g: Vec<f64>,
    w: Vec<f64>,
    event: bool,
    ln_t: f64,
    piece_t: usize,
    f_t: Vec<f64>,
    /// Cumulative-hazard nodes: time, weight, basis row, baseline piece.
    node_s: Vec<f64>,
    node_v: Vec<f64>,
    node_f: Vec<f64>,
    node_piece: Vec<usize>,
}

impl Subject {
    /// `‖y − o − Fm‖²` for `m = m₀ + delta`.
    fn rss(&self, delta: &[f64], o: f64) -> f64 {
        let q = delta.len();
        let mut sd = 0.0;
        for a in 0..q {
            let row: f64 = (0..q).map(|b| self.sff[(a, b)] * delta[b]).sum();
            sd += delta[a] * row;
        }
        self.rss0 - 2.0 * o * self.se0 - 2.0 * dot(delta, &self.fe0)
            + self.n * o * o
            + 2.0 * o * dot(&self.sf, delta)
            + sd
    }
}

/// Quadrature placement for one subject.
#[derive(Clone)]
struct Centre {
    chat: Vec<f64>,
    root: Matrix,
    log_jac: f64,
    /// `√2 Rᵀ F(s_l)` per node, row-major.
    a: Vec<f64>,
    /// `F(s_l)ᵀ ĉ` per node.
    fc: Vec<f64>,
}

enum BaseVals {
    Weibull { k: f64, ln_k: f64, ln_lam: f64 },
    Pieces { ln_rates: Vec<f64> },
}

struct Decoded {
    beta: Vec<f64>,
    zeta: Vec<f64>,
    l: Matrix,
    b_inv: Matrix,
    log_det_b: f64,
    sigma2: f64,
    gamma: f64,
    alpha: Vec<f64>,
    base: BaseVals,
}

struct Acc {
    grad: Vec<f64>,
    m: Matrix,
}

impl Acc {
    fn new(len: usize, q: usize) -> Self {
        Acc {
            grad: vec![0.0; len],
            m: Matrix::zeros(q, q),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Joint-model likelihood for one cohort, with its quadrature state.
pub struct JmProblem {
    layout: Layout,
    baseline: JmBaseline,
    cuts: Vec<f64>,
    subjects: Vec<Subject>,
    centres: Vec<Centre>,
    xi: Vec<f64>,
    /// Node indices per grid point, `K × q`.
    grid_idx: Vec<usize>,
    /// `ln w_k + |x_k|²` per grid point.
    grid_logw: Vec<f64>,
}

impl JmProblem {
    /// Requires the random-effect basis to equal the fixed basis and every
    /// extra regressor to be a time-constant covariate. The nodes start
    /// centred at the prior; call [`JmProblem::recentre`] before use.
    pub fn new(c: &Cohort, spec: &LmmSpec, opts: &JmOptions) -> Result<Self, EstimatorError> {
        spec.validate().map_err(lmm_err("joint model"))?;
        if spec.fixed_basis != spec.random_basis {
            return Err(EstimatorError::Argument(
                "the joint model needs the random-effect basis to equal the fixed basis".into(),
            ));
        }
        let mut covariate_regressors = Vec::new();
        for (label, r) in &spec.extra_regressors {
            match r {
                Regressor::Covariate { name } => covariate_regressors.push(name.clone()),
                _ => {
                    return Err(EstimatorError::Argument(format!(
                        "joint model supports only time-constant covariate regressors, got '{label}'"
                    )))
                }
            }
        }
        if opts.n_quad < 1 {
            return Err(EstimatorError::Argument("n_quad must be positive".into()));
        }
        let q = spec.fixed_basis.dimension();
        let cuts = match opts.baseline {
            JmBaseline::Weibull => Vec::new(),
            JmBaseline::PiecewiseConstant => quantile_cuts(c),
        };
        let layout = Layout {
            q,
            p_extra: covariate_regressors.len(),
            p_surv: c.covariate_names().len(),
            n_base: match opts.baseline {
                JmBaseline::Weibull => 2,
                JmBaseline::PiecewiseConstant => cuts.len() + 1,
            },
        };
        let rule = match opts.baseline {
            JmBaseline::Weibull => UnitRule::legendre(opts.legendre_nodes)?,
            JmBaseline::PiecewiseConstant => UnitRule::legendre(PIECE_NODES)?,
        };
        let subjects = c
            .subjects()
            .iter()
            .map(|s| {
                build_subject(
                    s,
                    spec,
                    &covariate_regressors,
                    c.covariate_names(),
                    opts.baseline,
                    &cuts,
                    &rule,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        let (xi, wts) = gauss_hermite(opts.n_quad)?;
        let k_total = opts.n_quad.pow(q as u32);
        let mut grid_idx = Vec::with_capacity(k_total * q);
        let mut grid_logw = Vec::with_capacity(k_total);
        for flat in 0..k_total {
            let mut rem = flat;
            let mut idx = vec![0; q];
            for slot in idx.iter_mut().rev() {
                *slot = rem % opts.n_quad;
                rem /= opts.n_quad;
            }
            grid_logw.push(idx.iter().map(|&j| wts[j].ln() + xi[j] * xi[j]).sum());
            grid_idx.extend(idx);
        }
        let mut p = JmProblem {
            layout,
            baseline: opts.baseline,
            cuts,
            subjects,
            centres: Vec::new(),
            xi,
            grid_idx,
            grid_logw,
        };
        let prior = p.centre_prior();
        p.centres = prior;
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn gamma_index(&self) -> usize {
        self.layout.gamma()
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    fn centre_prior(&self) -> Vec<Centre> {
        let q = self.layout.q;
        self.subjects
            .iter()
            .map(|s| self.make_centre(s, vec![0.0; q], Matrix::identity(q)))
            .collect()
    }

    fn make_centre(&self, s: &Subject, chat: Vec<f64>, root: Matrix) -> Centre {
        let q = self.layout.q;
        let l_n = s.node_s.len();
        let mut a = vec![0.0; l_n * q];
        let mut fc = vec![0.0; l_n];
        for l in 0..l_n {
            let f = &s.node_f[l * q..(l + 1) * q];
            for d in 0..q {
                a[l * q + d] = std::f64::consts::SQRT_2 * (d..q).map(|e| root[(e, d)] * f[e]).sum::<f64>();
            }
            fc[l] = dot(f, &chat);
        }
        let log_jac = 0.5 * q as f64 * std::f64::consts::LN_2 + (0..q).map(|d| root[(d, d)].ln()).sum::<f64>();
        Centre {
            chat,
            root,
            log_jac,
            a,
            fc,
        }
    }

    /// Moves every subject's nodes to its mixed-model posterior at `theta`.
    pub fn recentre(&mut self, theta: &[f64]) -> Result<(), EstimatorError> {
        let d = self.decode(theta)?;
        let centres = par::map_collect(&self.subjects, |s| {
            let o = dot(&s.g, &d.zeta);
            let q = self.layout.q;
            let c_mat = d.b_inv.scale(d.sigma2).add(&s.sff);
            let chol = Cholesky::new(&c_mat)?;
            // Fᵀ(y − o − Fβ), written around the anchor.
            let rhs: Vec<f64> = (0..q)
                .map(|a| s.fe0[a] - o * s.sf[a] + (0..q).map(|b| s.sff[(a, b)] * (s.m0[b] - d.beta[b])).sum::<f64>())
                .collect();
            let chat = chol.solve(&rhs);
            let mut cov = chol.inverse().scale(d.sigma2);
            cov.symmetrize();
            let root = crate::numerics::cholesky(&cov)?;
            Ok::<_, EstimatorError>(self.make_centre(s, chat, root))
        });
        self.centres = centres.into_iter().collect::<Result<_, _>>()?;
        Ok(())
    }

    fn decode(&self, theta: &[f64]) -> Result<Decoded, EstimatorError> {
        let ly = &self.layout;
        if theta.len() != ly.len() {
            return Err(EstimatorError::Argument(format!(
                "expected {} joint-model parameters, got {}",
                ly.len(),
                theta.len()
            )));
        }
        let q = ly.q;
        let mut l = Matrix::zeros(q, q);
        let mut k = ly.chol();
        for i in 0..q {
            for j in 0..=i {
                l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
                k += 1;
            }
        }
        let mut b = l.matmul(&l.transpose());
        b.symmetrize();
        let chol = Cholesky::new(&b)?;
        let base = match self.baseline {
            JmBaseline::Weibull => {
                let ln_k = theta[ly.base()];
                BaseVals::Weibull {
                    k: ln_k.exp(),
                    ln_k,
                    ln_lam: theta[ly.base() + 1],
                }
            }
            JmBaseline::PiecewiseConstant => BaseVals::Pieces {
                ln_rates: theta[ly.base()..].to_vec(),
            },
        };
        Ok(Decoded {
            beta: theta[..q].to_vec(),
            zeta: theta[q..ly.chol()].to_vec(),
            l,
            b_inv: chol.inverse(),
            log_det_b: chol.log_det(),
            sigma2: (2.0 * theta[ly.sigma()]).exp() + SIGMA2_FLOOR,
            gamma: theta[ly.gamma()],
            alpha: theta[ly.alpha()..ly.base()].to_vec(),
            base,
        })
    }

    fn ln_h0(d: &Decoded, ln_s: f64, piece: usize) -> f64 {
        match &d.base {
            BaseVals::Weibull { k, ln_k, ln_lam } => ln_k - k * ln_lam + (k - 1.0) * ln_s,
            BaseVals::Pieces { ln_rates } => ln_rates[piece],
        }
    }

    /// Log-likelihood contribution of subject `i`; adds its score to `acc`.
    fn subject_term(&self, i: usize, d: &Decoded, acc: Option<&mut Acc>) -> f64 {
        let ly = &self.layout;
        let q = ly.q;
        let s = &self.subjects[i];
        let c = &self.centres[i];
        let nq = self.xi.len();
        let k_n = self.grid_logw.len();
        let l_n = s.node_s.len();
        let e = if s.event { 1.0 } else { 0.0 };

        let o = dot(&s.g, &d.zeta);
        let lin_w = dot(&d.alpha, &s.w);
        let eaw = lin_w.exp();
        let s2 = d.sigma2;

        // Random effects at each grid point, kept as offsets from the centre.
        let mut du = vec![0.0; k_n * q];
        for k in 0..k_n {
            let idx = &self.grid_idx[k * q..(k + 1) * q];
            for a in 0..q {
                let mut v = 0.0;
                for b in 0..=a {
                    v += std::f64::consts::SQRT_2 * c.root[(a, b)] * self.xi[idx[b]];
                }
                du[k * q + a] = v;
            }
        }
        let u: Vec<f64> = (0..k_n * q).map(|j| c.chat[j % q] + du[j]).collect();

        let ln_h0_t = Self::ln_h0(d, s.ln_t, s.piece_t);
        let constant = -0.5 * s.n * (LN_2PI + s2.ln()) - 0.5 * (q as f64 * LN_2PI + d.log_det_b)
            + e * (ln_h0_t + d.gamma * o + lin_w);
        let mut lf = vec![0.0; k_n];
        let mut m = vec![0.0; q];
        let mut delta = vec![0.0; q];
        for k in 0..k_n {
            let uk = &u[k * q..(k + 1) * q];
            for a in 0..q {
                m[a] = d.beta[a] + uk[a];
                delta[a] = m[a] - s.m0[a];
            }
            let rss = s.rss(&delta, o);
            let mut quad = 0.0;
            for a in 0..q {
                let bu: f64 = (0..q).map(|b| d.b_inv[(a, b)] * uk[b]).sum();
                quad += uk[a] * bu;
            }
            lf[k] = self.grid_logw[k] + constant - 0.5 * rss / s2 - 0.5 * quad + e * d.gamma * dot(&s.f_t, &m);
        }

        // Cumulative hazard at each grid point. exp(γ a_l·x_k) factorizes
        // over dimensions, so only q·n_quad exponentials are needed per node.
        let fb: Vec<f64> = (0..l_n)
            .map(|l| dot(&s.node_f[l * q..(l + 1) * q], &d.beta) + c.fc[l] + o)
            .collect();
        let mut cl = vec![0.0; l_n];
        let mut buf = vec![0.0; l_n * k_n];
        let mut lam = vec![0.0; k_n];
        let mut fac = vec![0.0; q * nq];
        for l in 0..l_n {
            cl[l] = eaw * s.node_v[l] * (Self::ln_h0(d, s.node_s[l].ln(), s.node_piece[l]) + d.gamma * fb[l]).exp();
            for a in 0..q {
                let ga = d.gamma * c.a[l * q + a];
                for j in 0..nq {
                    fac[a * nq + j] = (ga * self.xi[j]).exp();
                }
            }
            let row = &mut buf[l * k_n..(l + 1) * k_n];
            for k in 0..k_n {
                let idx = &self.grid_idx[k * q..(k + 1) * q];
                let mut v = 1.0;
                for a in 0..q {
                    v *= fac[a * nq + idx[a]];
                }
                row[k] = v;
                lam[k] += cl[l] * v;
            }
        }
        for k in 0..k_n {
            lf[k] -= lam[k];
        }
        let mx = lf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in lf.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        let ll = mx + total.ln() + c.log_jac;

        let Some(acc) = acc else { return ll };
        let pi: Vec<f64> = lf.iter().map(|v| v / total).collect();

        // Posterior moments about the centre, then the raw second moment.
        let mut dbar = vec![0.0; q];
        let mut sd = Matrix::zeros(q, q);
        let mut lam_bar = 0.0;
        for k in 0..k_n {
            let dk = &du[k * q..(k + 1) * q];
            for a in 0..q {
                dbar[a] += pi[k] * dk[a];
                for b in 0..q {
                    sd[(a, b)] += pi[k] * dk[a] * dk[b];
                }
            }
            lam_bar += pi[k] * lam[k];
        }
        let ubar: Vec<f64> = (0..q).map(|a| c.chat[a] + dbar[a]).collect();
        let mut post_cov = Matrix::zeros(q, q);
        let mut su = Matrix::zeros(q, q);
        for a in 0..q {
            for b in 0..q {
                post_cov[(a, b)] = sd[(a, b)] - dbar[a] * dbar[b];
                su[(a, b)] = post_cov[(a, b)] + ubar[a] * ubar[b];
            }
        }
        let mbar: Vec<f64> = (0..q).map(|a| d.beta[a] + ubar[a]).collect();
        let dbar_m: Vec<f64> = (0..q).map(|a| mbar[a] - s.m0[a]).collect();

        let mut ebar = vec![0.0; l_n];
        let mut exbar = vec![0.0; l_n];
        for l in 0..l_n {
            let row = &buf[l * k_n..(l + 1) * k_n];
            let al = &c.a[l * q..(l + 1) * q];
            let (mut eb, mut ex) = (0.0, 0.0);
            for k in 0..k_n {
                let idx = &self.grid_idx[k * q..(k + 1) * q];
                let shift: f64 = (0..q).map(|a| al[a] * self.xi[idx[a]]).sum();
                let pe = pi[k] * row[k];
                eb += pe;
                ex += pe * (fb[l] + shift);
            }
            ebar[l] = eb;
            exbar[l] = ex;
        }

        let g = &mut acc.grad;
        // β
        let mut surv_f = vec![0.0; q];
        let mut surv_1 = 0.0;
        for l in 0..l_n {
            let w = cl[l] * ebar[l];
            surv_1 += w;
            for a in 0..q {
                surv_f[a] += w * s.node_f[l * q + a];
            }
        }
        for a in 0..q {
            // Fᵀ(y − o − F m̄)
            let sm: f64 = (0..q).map(|b| s.sff[(a, b)] * dbar_m[b]).sum();
            g[a] += (s.fe0[a] - o * s.sf[a] - sm) / s2 + e * d.gamma * s.f_t[a] - d.gamma * surv_f[a];
        }
        // ζ through the offset
        let g_o = (s.se0 - s.n * o - dot(&s.sf, &dbar_m)) / s2 + e * d.gamma - d.gamma * surv_1;
        for (j, gv) in s.g.iter().enumerate() {
            g[q + j] += g_o * gv;
        }
        // σ
        let mut tr = 0.0;
        for a in 0..q {
            for b in 0..q {
                tr += s.sff[(a, b)] * post_cov[(a, b)];
            }
        }
        let e_rss = s.rss(&dbar_m, o) + tr;
        let g_s2 = -0.5 * s.n / s2 + 0.5 * e_rss / (s2 * s2);
        g[ly.sigma()] += g_s2 * 2.0 * (s2 - SIGMA2_FLOOR);
        // B, finished in `assemble`
        let bsb = d.b_inv.matmul(&su).matmul(&d.b_inv);
        for a in 0..q {
            for b in 0..q {
                acc.m[(a, b)] += bsb[(a, b)] - d.b_inv[(a, b)];
            }
        }
        // γ
        let x_t = dot(&s.f_t, &mbar) + o;
        g[ly.gamma()] += e * x_t - (0..l_n).map(|l| cl[l] * exbar[l]).sum::<f64>();
        // α
        for (j, wv) in s.w.iter().enumerate() {
            g[ly.alpha() + j] += (e - lam_bar) * wv;
        }
        // baseline
        match &d.base {
            BaseVals::Weibull { k, ln_lam, .. } => {
                let surv: f64 = (0..l_n)
                    .map(|l| cl[l] * ebar[l] * (1.0 + k * (s.node_s[l].ln() - ln_lam)))
                    .sum();
                g[ly.base()] += e * (1.0 + k * (s.ln_t - ln_lam)) - surv;
                g[ly.base() + 1] += -e * k + k * lam_bar;
            }
            BaseVals::Pieces { .. } => {
                if s.event {
                    g[ly.base() + s.piece_t] += 1.0;
                }
                for l in 0..l_n {
                    g[ly.base() + s.node_piece[l]] -= cl[l] * ebar[l];
                }
            }
        }
        ll
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>), EstimatorError> {
        let d = self.decode(theta)?;
        let ly = self.layout;
        let n = self.subjects.len();
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |ch| {
            let mut acc = want_grad.then(|| Acc::new(ly.len(), ly.q));
            let mut ll = 0.0;
            for i in ch * CHUNK..((ch + 1) * CHUNK).min(n) {
                ll += self.subject_term(i, &d, acc.as_mut());
            }
            (ll, acc)
        });
        let mut ll = 0.0;
        let mut total = Acc::new(ly.len(), ly.q);
        for (v, acc) in parts {
            ll += v;
            if let Some(a) = acc {
                for (t, x) in total.grad.iter_mut().zip(&a.grad) {
                    *t += x;
                }
                total.m = total.m.add(&a.m);
            }
        }
        if !want_grad {
            return Ok((ll, Vec::new()));
        }
        let gl = total.m.matmul(&d.l);
        let mut k = ly.chol();
        for i in 0..ly.q {
            for j in 0..=i {
                total.grad[k] = if i == j { gl[(i, j)] * d.l[(i, i)] } else { gl[(i, j)] };
                k += 1;
            }
        }
        Ok((ll, total.grad))
    }

    /// Log-likelihood at `theta` with the current node placement.
    pub fn loglik(&self, theta: &[f64]) -> Result<f64, EstimatorError> {
        Ok(self.evaluate(theta, false)?.0)
    }

    /// Log-likelihood and its gradient with respect to `theta`, with the
    /// current node placement.
    pub fn loglik_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), EstimatorError> {
        self.evaluate(theta, true)
    }

    /// Natural-scale baseline encoded in `theta`.
    pub fn baseline_at(&self, theta: &[f64]) -> ParametricBaseline {
        let b = self.layout.base();
        match self.baseline {
            JmBaseline::Weibull => ParametricBaseline::Weibull {
                shape: theta[b].exp(),
                scale: theta[b + 1].exp(),
            },
            JmBaseline::PiecewiseConstant => ParametricBaseline::PiecewiseConstant {
                cuts: self.cuts.clone(),
                rates: theta[b..].iter().map(|v| v.exp()).collect(),
            },
        }
    }
}

fn build_subject(
    s: &SubjectRecord,
    spec: &LmmSpec,
    regressors: &[String],
    survival_covariates: &[String],
    baseline: JmBaseline,
    cuts: &[f64],
    rule: &UnitRule,
) -> Result<Subject, EstimatorError> {
    let basis = &spec.fixed_basis;
    let q = basis.dimension();
    let data_err = |e: crate::data::DataError| EstimatorError::Argument(e.to_string());
    let mut sub = Subject {
        n: s.visits.len() as f64,
        m0: vec![0.0; q],
        rss0: 0.0,
        se0: 0.0,
        fe0: vec![0.0; q],
        sf: vec![0.0; q],
        sff: Matrix::zeros(q, q),
        g: regressors
            .iter()
            .map(|n| s.covariate(n))
            .collect::<Result<_, _>>()
            .map_err(data_err)?,
        w: survival_covariates
            .iter()
            .map(|n| s.covariate(n))
            .collect::<Result<_, _>>()
            .map_err(data_err)?,
        event: s.event,
        ln_t: s.event_time.ln(),
        piece_t: cuts.partition_point(|&c| c <= s.event_time),
        f_t: basis.evaluate(s.event_time),
        node_s: Vec::new(),
        node_v: Vec::new(),
        node_f: Vec::new(),
        node_piece: Vec::new(),
    };
    let mut f = vec![0.0; q];
    let mut sfy = vec![0.0; q];
    for v in &s.visits {
        basis.evaluate_into(v.time, &mut f);
        for a in 0..q {
            sfy[a] += f[a] * v.value;
            sub.sf[a] += f[a];
            for b in 0..q {
                sub.sff[(a, b)] += f[a] * f[b];
            }
        }
    }
    // Any anchor is exact; a (lightly ridged) least-squares fit keeps the
    // expansion terms small. Subjects with fewer visits than coefficients
    // get the minimum-norm-like ridge solution.
    let ridge = 1e-9 * (0..q).map(|a| sub.sff[(a, a)]).sum::<f64>().max(1.0);
    let mut ridged = sub.sff.clone();
    for a in 0..q {
        ridged[(a, a)] += ridge;
    }
    sub.m0 = Cholesky::new(&ridged)?.solve(&sfy);
    for v in &s.visits {
        basis.evaluate_into(v.time, &mut f);
        let e0 = v.value - dot(&f, &sub.m0);
        sub.rss0 += e0 * e0;
        sub.se0 += e0;
        for a in 0..q {
            sub.fe0[a] += f[a] * e0;
        }
    }
    let t = s.event_time;
    let push = |sub: &mut Subject, time: f64, weight: f64, piece: usize| {
        sub.node_s.push(time);
        sub.node_v.push(weight);
        sub.node_f.extend(basis.evaluate(time));
        sub.node_piece.push(piece);
    };
    match baseline {
        JmBaseline::Weibull => {
            // s = T x² absorbs the s^{k-1} behaviour at the origin.
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                push(&mut sub, t * x * x, 2.0 * t * x * w, 0);
            }
        }
        JmBaseline::PiecewiseConstant => {
            let mut lo = 0.0;
            for m in 0..=cuts.len() {
                let hi = cuts.get(m).copied().unwrap_or(f64::INFINITY).min(t);
                if hi > lo {
                    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                        push(&mut sub, lo + (hi - lo) * x, (hi - lo) * w, m);
                    }
                }
                if hi >= t {
                    break;
                }
                lo = hi;
            }
        }
    }
    Ok(sub)
}

fn quantile_cuts(c: &Cohort) -> Vec<f64> {
    let mut times: Vec<f64> = c.subjects().iter().filter(|s| s.event).map(|s| s.event_time).collect();
    times.sort_by(f64::total_cmp);
    if times.is_empty() {
        return Vec::new();
    }
    let mut cuts: Vec<f64> = (1..=N_CUTS)
        .map(|m| {
            let pos = m as f64 / (N_CUTS + 1) as f64 * (times.len() - 1) as f64;
            let (lo, frac) = (pos.floor() as usize, pos.fract());
            let hi = (lo + 1).min(times.len() - 1);
            times[lo] + frac * (times[hi] - times[lo])
        })
        .filter(|v| *v > 0.0)
        .collect();
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    cuts
}

/// Fitted joint model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JmFit {
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub re_cov: Matrix,
    pub sigma2: f64,
    pub gamma: f64,
    /// `None` when the association was held fixed.
    pub gamma_se: Option<f64>,
    pub alpha: Vec<f64>,
    pub baseline: ParametricBaseline,
    pub theta: Vec<f64>,
    /// Inverse observed information over `theta`; zero rows for held or
    /// boundary parameters.
    pub cov: Matrix,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rounds: usize,
}

/// Weibull `(ln k, ln λ)` by least squares of `ln Λ̂(t)` on `ln t`.
fn weibull_start(breslow: &StepFunction) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = breslow
        .times()
        .iter()
        .zip(breslow.values())
        .filter(|(t, v)| **t > 0.0 && **v > 0.0)
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            let k = (sxy / sxx).clamp(0.2, 10.0);
            let ln_lam = mx - my / k;
            return vec![k.ln(), ln_lam];
        }
    }
    match (breslow.times().last(), breslow.values().last()) {
        (Some(t), Some(v)) if *v > 0.0 => vec![0.0, (t / v).ln()],
        _ => vec![0.0, 0.0],
    }
}

fn pieces_start(breslow: &StepFunction, cuts: &[f64]) -> Vec<f64> {
    let end = breslow.times().last().copied().unwrap_or(1.0);
    let overall = breslow.values().last().copied().unwrap_or(0.0) / end.max(1e-12);
    let floor = (1e-3 * overall).max(1e-8);
    let mut lo = 0.0;
    (0..=cuts.len())
        .map(|m| {
            let hi = cuts.get(m).copied().unwrap_or(end.max(lo + 1e-8));
            let rate = (breslow.eval(hi) - breslow.eval(lo)) / (hi - lo);
            lo = hi;
            rate.max(floor).ln()
        })
        .collect()
}

/// Fits the joint model. Start values come from the two-stage fit: the mixed
/// model, then a Cox model on the predicted path with a parametric baseline
/// matched to its Breslow estimate.
pub fn fit_jm(c: &Cohort, spec: &LmmSpec, opts: &JmOptions) -> Result<JmFit, EstimatorError> {
    let truncated;
    let c = if c.truncated_at_event() {
        c
    } else {
        truncated = truncate_at_event(c);
        &truncated
    };
    let mut problem = JmProblem::new(c, spec, opts)?;
    let ly = problem.layout;

    let lmm = fit_lmm(c, spec).map_err(lmm_err("jm start"))?;
    let paths = rc_paths(c, spec, &lmm.params())?;
    let data = CoxData::new(c, &paths, c.covariate_names()).map_err(cox_err("jm start"))?;
    let cox_beta = match opts.fixed_gamma {
        Some(g) => {
            let mut b = vec![0.0; data.dim()];
            b[0] = g;
            b
        }
        None => {
            fit_cox_data(&data, &CoxOptions::default())
                .map_err(cox_err("jm start"))?
                .gamma
        }
    };
    let breslow = data.breslow(&cox_beta);
    let mut theta = lmm.theta.clone();
    theta.push(cox_beta[0]);
    theta.extend_from_slice(&cox_beta[1..]);
    theta.extend(match opts.baseline {
        JmBaseline::Weibull => weibull_start(&breslow),
        JmBaseline::PiecewiseConstant => pieces_start(&breslow, &problem.cuts),
    });
    debug_assert_eq!(theta.len(), ly.len());

    // Free coordinates: everything except a held association.
    let free: Vec<usize> = (0..ly.len())
        .filter(|&k| opts.fixed_gamma.is_none() || k != ly.gamma())
        .collect();
    let expand = |x: &[f64], base: &[f64]| {
        let mut t = base.to_vec();
        for (&k, v) in free.iter().zip(x) {
            t[k] = *v;
        }
        t
    };

    let mut iterations = 0;
    let mut rounds = 0;
    let mut trace = Vec::new();
    let mut converged;
    let mut gnorm;
    problem.recentre(&theta)?;
    loop {
        rounds += 1;
        let template = theta.clone();
        let p = &problem;
        let objective = WithGradient {
            value: |x: &[f64]| p.loglik(&expand(x, &template)).unwrap_or(f64::NEG_INFINITY),
            gradient: |x: &[f64]| match p.loglik_and_gradient(&expand(x, &template)) {
                Ok((_, g)) => free.iter().map(|&k| g[k]).collect(),
                Err(_) => vec![0.0; free.len()],
            },
        };
        let start: Vec<f64> = free.iter().map(|&k| theta[k]).collect();
        let res = maximize_with(
            &objective,
            &start,
            &OptimOptions {
                tolerance: opts.tolerance,
                max_iterations: opts.max_iterations,
                compute_hessian: false,
                ..OptimOptions::default()
            },
        )?;
        iterations += res.iterations;
        theta = expand(&res.argmax, &template);
        trace.push(theta.clone());
        converged = res.converged;
        gnorm = res.gradient.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        let before = res.value;
        problem.recentre(&theta)?;
        let after = problem.loglik(&theta)?;
        if (after - before).abs() < 1e-6 || rounds >= opts.max_rounds {
            break;
        }
    }
    let (loglik, grad) = problem.loglik_and_gradient(&theta)?;
    let free_grad: Vec<f64> = free.iter().map(|&k| grad[k]).collect();
    gnorm = gnorm.max(free_grad.iter().fold(0.0_f64, |m, g| m.max(g.abs())));

    let template = theta.clone();
    let p = &problem;
    let objective = WithGradient {
        value: |x: &[f64]| p.loglik(&expand(x, &template)).unwrap_or(f64::NEG_INFINITY),
        gradient: |x: &[f64]| match p.loglik_and_gradient(&expand(x, &template)) {
            Ok((_, g)) => free.iter().map(|&k| g[k]).collect(),
            Err(_) => vec![f64::NAN; free.len()],
        },
    };
    let x: Vec<f64> = free.iter().map(|&k| theta[k]).collect();
    let mut info = neg_hessian(&objective, &x);
    info.symmetrize();
    let prunable: Vec<usize> = ly
        .variance_slots()
        .iter()
        .filter_map(|s| free.iter().position(|k| k == s))
        .collect();
    let inverted = invert_information_pruning(&info, &prunable);
    if !converged && gnorm > 1e-2 {
        // Same rule as the mixed model: with a nearly noiseless exposure
        // the likelihood is sharp enough that rounding dominates the raw
        // gradient, so judge the point by the gain a Newton step predicts.
        let decrement = match &inverted {
            Ok((cov, flat)) if flat.iter().all(|&i| free_grad[i].abs() <= 1e-2) => {
                let hg = cov.mat_vec(&free_grad);
                free_grad.iter().zip(&hg).map(|(a, b)| a * b).sum::<f64>()
            }
            _ => f64::INFINITY,
        };
        if !(decrement < NEWTON_DECREMENT_TOL) {
            return Err(EstimatorError::JmNonConvergence {
                gradient_norm: gnorm,
                iterations,
                trace,
            });
        }
        converged = true;
    }
    let (free_cov, _) = inverted.map_err(|e| EstimatorError::JmHessian(e.to_string()))?;
    let mut cov = Matrix::zeros(ly.len(), ly.len());
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            cov[(i, j)] = free_cov[(a, b)];
        }
    }
    let gamma_se = match opts.fixed_gamma {
        Some(_) => None,
        None => {
            let v = cov[(ly.gamma(), ly.gamma())];
            if !(v > 0.0) {
                return Err(EstimatorError::JmHessian("association has no curvature".into()));
            }
            Some(v.sqrt())
        }
    };
    let d = problem.decode(&theta)?;
    let mut re_cov = d.l.matmul(&d.l.transpose());
    re_cov.symmetrize();
    Ok(JmFit {
        beta: d.beta,
        zeta: d.zeta,
        re_cov,
        sigma2: d.sigma2,
        gamma: d.gamma,
        gamma_se,
        alpha: d.alpha,
        baseline: problem.baseline_at(&theta),
        theta,
        cov,
        loglik,
        converged,
        iterations,
        rounds,
    })
}

/// Log-likelihood of `theta` with nodes centred at `theta` itself.
pub fn jm_loglik(c: &Cohort, spec: &LmmSpec, opts: &JmOptions, theta: &[f64]) -> Result<f64, EstimatorError> {
    let mut p = JmProblem::new(c, spec, opts)?;
    p.recentre(theta)?;
    p.loglik(theta)
}

pub fn estimate_jm(
    c: &Cohort,
    spec: &LmmSpec,
    baseline: JmBaseline,
    n_quad: usize,
) -> Result<EstimateResult, EstimatorError> {
    let fit = fit_jm(
        c,
        spec,
        &JmOptions {
            n_quad,
            baseline,
            ..JmOptions::default()
        },
    )?;
    let se = fit.gamma_se.unwrap_or(f64::NAN);
    let mut res = EstimateResult::new(Method::Jm, fit.gamma, se, fit.converged)
        .with("loglik", fit.loglik)
        .with("iterations", fit.iterations as f64)
        .with("rounds", fit.rounds as f64)
        .with("sigma2", fit.sigma2);
    if let ParametricBaseline::Weibull { shape, scale } = fit.baseline {
        res = res.with("weibull_shape", shape).with("weibull_scale", scale);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ExposurePath, Visit};
    use crate::lmm::loglik as lmm_loglik;
    use crate::numerics::optim::fd_gradient;
    use crate::numerics::{gauss_legendre, RngStream};
    use crate::simulate::{generate, preset};
    use crate::survival::cumulative_hazard;

    fn small_cohort(n: usize, seed: u64) -> Cohort {
        let mut cfg = preset("8").unwrap();
        cfg.n_subjects = n;
        generate(&cfg, &RngStream::new(seed, 0)).unwrap().0
    }

    fn theta_for(p: &JmProblem) -> Vec<f64> {
        let mut t = vec![0.1, 0.9, -0.2, 0.15, -0.4, 0.05, 0.3];
        t.resize(p.layout.gamma(), 0.0);
        t.push(0.35);
        while t.len() < p.layout.base() {
            t.push(0.1);
        }
        match p.baseline {
            JmBaseline::Weibull => t.extend([0.4, 2.7]),
            JmBaseline::PiecewiseConstant => t.extend((0..p.layout.n_base).map(|m| -3.0 + 0.1 * m as f64)),
        }
        t
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = small_cohort(60, 3);
        for baseline in [JmBaseline::Weibull, JmBaseline::PiecewiseConstant] {
            let opts = JmOptions {
                baseline,
                n_quad: 5,
                ..JmOptions::default()
            };
            let mut p = JmProblem::new(&c, &LmmSpec::linear(), &opts).unwrap();
            let theta = theta_for(&p);
            p.recentre(&theta).unwrap();
            let (_, g) = p.loglik_and_gradient(&theta).unwrap();
            let fd = fd_gradient(|t| p.loglik(t).unwrap(), &theta);
            for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-5 * b.abs().max(1.0),
                    "{baseline:?} slot {k}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn gradient_with_covariates() {
        let mut c = small_cohort(50, 8);
        let subjects: Vec<SubjectRecord> = c
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut s = s.clone();
                s.covariates.insert("age".into(), (i % 7) as f64 / 7.0 - 0.4);
                s
            })
            .collect();
        c = Cohort::new(subjects, true, vec!["age".into()]).unwrap();
        let spec = LmmSpec::linear().with_regressor("age", Regressor::Covariate { name: "age".into() });
        let mut p = JmProblem::new(&c, &spec, &JmOptions::default()).unwrap();
        assert_eq!(p.layout.p_extra, 1);
        assert_eq!(p.layout.p_surv, 1);
        let theta = theta_for(&p);
        p.recentre(&theta).unwrap();
        let (_, g) = p.loglik_and_gradient(&theta).unwrap();
        let fd = fd_gradient(|t| p.loglik(t).unwrap(), &theta);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    /// Brute-force marginal likelihood of one subject: a dense tensor
    /// Gauss-Legendre rule over a wide box in `u`, with the cumulative
    /// hazard from the general-purpose integrator.
    fn brute_force(s: &SubjectRecord, theta: &[f64], baseline: &ParametricBaseline) -> f64 {
        let beta = [theta[0], theta[1]];
        let l = [[theta[2].exp(), 0.0], [theta[3], theta[4].exp()]];
        let b = [
            [l[0][0] * l[0][0], l[0][0] * l[1][0]],
            [l[0][0] * l[1][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
        ];
        let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
        let s2 = (2.0 * theta[5]).exp() + SIGMA2_FLOOR;
        let gamma = theta[6];
        let (x, w) = gauss_legendre(120).unwrap();
        let half = [8.0 * b[0][0].sqrt(), 8.0 * b[1][1].sqrt()];
        let mut total = 0.0;
        for (xa, wa) in x.iter().zip(&w) {
            for (xb, wb) in x.iter().zip(&w) {
                let u = [xa * half[0], xb * half[1]];
                let coef = vec![beta[0] + u[0], beta[1] + u[1]];
                let path = ExposurePath::polynomial(coef.clone(), s.event_time);
                let mut lf = 0.0;
                for v in &s.visits {
                    let r = v.value - coef[0] - coef[1] * v.time;
                    lf += -0.5 * (LN_2PI + s2.ln()) - 0.5 * r * r / s2;
                }
                let quad = (b[1][1] * u[0] * u[0] - 2.0 * b[0][1] * u[0] * u[1] + b[0][0] * u[1] * u[1]) / det;
                lf += -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
                if s.event {
                    lf += baseline.hazard(s.event_time).ln() + gamma * path.value(s.event_time);
                }
                lf -= cumulative_hazard(baseline, &path, gamma, s.event_time);
                total += wa * wb * half[0] * half[1] * lf.exp();
            }
        }
        total.ln()
    }

    #[test]
    fn quadrature_matches_brute_force() {
        let subjects = vec![
            SubjectRecord::new(
                "a",
                vec![Visit { time: 0.0, value: 0.3 }, Visit { time: 2.0, value: 2.9 }],
                3.1,
                true,
            ),
            SubjectRecord::new("b", vec![Visit { time: 0.0, value: -0.8 }], 7.5, false),
            SubjectRecord::new("c", vec![Visit { time: 0.0, value: 1.7 }], 0.6, true),
        ];
        let c = Cohort::new(subjects, true, vec![]).unwrap();
        let theta = [0.1, 0.9, -0.2, 0.15, -0.4, -0.3, 0.4, 0.4, 2.7];
        let baseline = ParametricBaseline::Weibull {
            shape: 0.4f64.exp(),
            scale: 2.7f64.exp(),
        };
        // One visit leaves the slope posterior close to the prior, and the
        // survival term then skews it, so this needs a dense rule.
        let opts = JmOptions {
            n_quad: 40,
            legendre_nodes: 30,
            ..JmOptions::default()
        };
        for s in c.subjects() {
            let one = Cohort::new(vec![s.clone()], true, vec![]).unwrap();
            let got = jm_loglik(&one, &LmmSpec::linear(), &opts, &theta).unwrap();
            let want = brute_force(s, &theta, &baseline);
            assert!((got - want).abs() < 1e-7, "{}: {got} vs {want}", s.id);
        }
    }

    #[test]
    fn loglik_is_stable_in_node_count() {
        let c = small_cohort(40, 5);
        let p9 = JmProblem::new(&c, &LmmSpec::linear(), &JmOptions::default()).unwrap();
        let theta = theta_for(&p9);
        let a = jm_loglik(&c, &LmmSpec::linear(), &JmOptions::default(), &theta).unwrap();
        let b = jm_loglik(
            &c,
            &LmmSpec::linear(),
            &JmOptions {
                n_quad: 15,
                ..JmOptions::default()
            },
            &theta,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }

    #[test]
    fn zero_association_factorizes() {
        let c = small_cohort(150, 21);
        let spec = LmmSpec::linear();
        let jm = fit_jm(
            &c,
            &spec,
            &JmOptions {
                fixed_gamma: Some(0.0),
                tolerance: 1e-6,
                ..JmOptions::default()
            },
        )
        .unwrap();
        assert!(jm.gamma_se.is_none());
        let lmm = fit_lmm(&c, &spec).unwrap();
        for (a, b) in jm.beta.iter().zip(&lmm.beta) {
            assert!((a - b).abs() < 1e-4, "beta {a} vs {b}");
        }
        assert!((jm.sigma2 - lmm.sigma2).abs() < 1e-4 * lmm.sigma2.max(1.0));
        for (a, b) in jm.re_cov.as_slice().iter().zip(lmm.re_cov.matrix().as_slice()) {
            assert!((a - b).abs() < 1e-4, "B {a} vs {b}");
        }
        // The longitudinal part of the likelihood is the mixed-model one.
        let lmm_part = lmm_loglik(&c, &spec, &lmm.params()).unwrap();
        let surv_only = jm.loglik - lmm_part;
        let ParametricBaseline::Weibull { shape, scale } = jm.baseline else {
            unreachable!()
        };
        let direct: f64 = c
            .subjects()
            .iter()
            .map(|s| {
                let b = ParametricBaseline::Weibull { shape, scale };
                (if s.event { b.hazard(s.event_time).ln() } else { 0.0 }) - b.cumulative(s.event_time)
            })
            .sum();
        assert!((surv_only - direct).abs() < 1e-3, "{surv_only} vs {direct}");
    }

    #[test]
    fn rejects_unsupported_specs() {
        let c = small_cohort(20, 1);
        let spec = LmmSpec::linear().with_regressor("last", Regressor::LastVisit);
        assert!(matches!(
            JmProblem::new(&c, &spec, &JmOptions::default()),
            Err(EstimatorError::Argument(_))
        ));
        let spec = LmmSpec::new(
            crate::data::TimeBasis::polynomial(1),
            crate::data::TimeBasis::polynomial(0),
        );
        assert!(JmProblem::new(&c, &spec, &JmOptions::default()).is_err());
    }
}
