use super::{LmmError, LmmSpec, Regressor};
use crate::data::SubjectRecord;
use crate::numerics::Matrix;

/// Design matrices of one subject: response `y`, fixed columns `[F | G]`
/// and random columns `Z`, all row-per-visit.
#[derive(Debug, Clone)]
pub struct SubjectDesign {
    pub y: Vec<f64>,
    pub x: Matrix,
    pub z: Matrix,
    /// `ZᵀZ`, cached.
    pub ztz: Matrix,
    /// Least-squares split on the columns of `Z`: `y = Z·c_y + y_perp` and
    /// `X = Z·c_x + x_perp`, with the perpendicular parts orthogonal to
    /// `Z`. `x_perp` is `None` when every fixed column lies in that span.
    pub(crate) c_y: Vec<f64>,
    pub(crate) c_x: Matrix,
    pub(crate) y_perp: Vec<f64>,
    pub(crate) x_perp: Option<Matrix>,
    /// `XᵀZ`, cached.
    pub(crate) xtz: Matrix,
}

impl SubjectDesign {
    pub fn new(spec: &LmmSpec, s: &SubjectRecord) -> Result<Self, LmmError> {
        let n = s.visits.len();
        let pf = spec.fixed_basis.dimension();
        let pe = spec.extra_regressors.len();
        let q = spec.random_basis.dimension();
        let mut x = Matrix::zeros(n, pf + pe);
        let mut z = Matrix::zeros(n, q);
        let mut buf = vec![0.0; pf.max(q)];
        let constants = regressor_constants(spec, s)?;
        for (j, v) in s.visits.iter().enumerate() {
            spec.fixed_basis.evaluate_into(v.time, &mut buf[..pf]);
            for k in 0..pf {
                x[(j, k)] = buf[k];
            }
            for (k, (_, r)) in spec.extra_regressors.iter().enumerate() {
                x[(j, pf + k)] = match r.last_visit_flag(s) {
                    Some(on) => f64::from(u8::from(on && j + 1 == n)),
                    None => constants[k],
                };
            }
            spec.random_basis.evaluate_into(v.time, &mut buf[..q]);
            for k in 0..q {
                z[(j, k)] = buf[k];
            }
        }
        let ztz = z.transpose().matmul(&z);
        let y: Vec<f64> = s.visits.iter().map(|v| v.value).collect();
        let split = SpanSplit::new(&z);
        let (c_y, y_perp) = split.apply(&y);
        let p = x.cols();
        let mut c_x = Matrix::zeros(q, p);
        let mut x_perp = Matrix::zeros(n, p);
        let mut any_perp = false;
        for k in 0..p {
            let col: Vec<f64> = (0..n).map(|j| x[(j, k)]).collect();
            let (c, perp) = split.apply(&col);
            for a in 0..q {
                c_x[(a, k)] = c[a];
            }
            // Columns in the span of Z leave only rounding behind.
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if perp.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-10 * norm {
                any_perp = true;
                for j in 0..n {
                    x_perp[(j, k)] = perp[j];
                }
            }
        }
        let xtz = x.transpose().matmul(&z);
        Ok(SubjectDesign {
            y,
            x,
            z,
            ztz,
            c_y,
            c_x,
            y_perp,
            x_perp: any_perp.then_some(x_perp),
            xtz,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Value of each time-constant regressor for `s`. Last-visit slots hold 0.
pub(crate) fn regressor_constants(spec: &LmmSpec, s: &SubjectRecord) -> Result<Vec<f64>, LmmError> {
    spec.extra_regressors
        .iter()
        .map(|(_, r)| match r {
            Regressor::Covariate { name } => s.covariate(name).map_err(|e| LmmError::Spec(e.to_string())),
            Regressor::NelsonAalen { estimate } => Ok(estimate.eval(s.event_time)),
            Regressor::EventIndicator => Ok(f64::from(u8::from(s.event))),
            Regressor::LastVisit | Regressor::EventLastVisit => Ok(0.0),
        })
        .collect()
}

/// Pivoted Gram-Schmidt on the columns of `Z`, with one reorthogonalization
/// pass. Columns whose remainder falls below `1e-10` of their norm are
/// dropped and get a zero coefficient.
struct SpanSplit {
    /// Orthonormal basis, one vector per retained column.
    q: Vec<Vec<f64>>,
    /// `R` of the retained columns, row-major upper triangular.
    r: Vec<Vec<f64>>,
    cols: Vec<usize>,
    dim: usize,
}

impl SpanSplit {
    fn new(z: &Matrix) -> Self {
        let (n, dim) = (z.rows(), z.cols());
        let mut rest: Vec<Vec<f64>> = (0..dim).map(|k| (0..n).map(|j| z[(j, k)]).collect()).collect();
        let norms: Vec<f64> = rest.iter().map(|c| dot(c, c).sqrt()).collect();
        let mut left: Vec<usize> = (0..dim).collect();
        let (mut q, mut cols) = (Vec::new(), Vec::new());
        let mut r: Vec<Vec<f64>> = Vec::new();
        while !left.is_empty() && q.len() < n {
            let (pos, &k) = left
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    let ra = dot(&rest[*a.1], &rest[*a.1]).sqrt() / norms[*a.1].max(f64::MIN_POSITIVE);
                    let rb = dot(&rest[*b.1], &rest[*b.1]).sqrt() / norms[*b.1].max(f64::MIN_POSITIVE);
                    ra.total_cmp(&rb)
                })
                .unwrap();
            left.remove(pos);
            let nk = dot(&rest[k], &rest[k]).sqrt();
            if !(nk > 1e-10 * norms[k]) {
                break;
            }
            let e: Vec<f64> = rest[k].iter().map(|v| v / nk).collect();
            let mut row = vec![0.0; dim];
            row[k] = nk;
            for &m in &left {
                let c = dot(&e, &rest[m]);
                row[m] = c;
                for (x, y) in rest[m].iter_mut().zip(&e) {
                    *x -= c * y;
                }
            }
            q.push(e);
            r.push(row);
            cols.push(k);
        }
        SpanSplit { q, r, cols, dim }
    }

    /// Coefficients `c` with `Z·c` the projection of `u`, and `u − Z·c`.
    fn apply(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut perp = u.to_vec();
        let mut t = vec![0.0; self.q.len()];
        for _ in 0..2 {
            for (i, e) in self.q.iter().enumerate() {
                let c = dot(e, &perp);
                t[i] += c;
                for (x, y) in perp.iter_mut().zip(e) {
                    *x -= c * y;
                }
            }
        }
        let mut coef = vec![0.0; self.dim];
        for i in (0..self.q.len()).rev() {
            let k = self.cols[i];
            let s: f64 = (i + 1..self.q.len())
                .map(|j| self.r[i][self.cols[j]] * coef[self.cols[j]])
                .sum();
            coef[k] = (t[i] - s) / self.r[i][k];
        }
        (coef, perp)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
