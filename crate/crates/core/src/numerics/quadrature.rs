//! Gauss-Hermite and Gauss-Legendre rules computed by Newton iteration on
//! the three-term recurrences.

use std::f64::consts::PI;

use super::NumericsError;

pub const MAX_NODES: usize = 50;

/// Nodes and weights for `∫ f(x) e^{-x²} dx` on the real line, nodes in
/// increasing order.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    if n == 0 || n > MAX_NODES {
        return Err(NumericsError::Argument(format!(
            "Gauss-Hermite order must lie in 1..={MAX_NODES}, got {n}"
        )));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = PI.powf(-0.25);
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal Hermite recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    Ok((x, w))
}

/// Nodes and weights on `[-1, 1]`, nodes increasing.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    if n == 0 || n > 200 {
        return Err(NumericsError::Argument(format!(
            "Gauss-Legendre order must lie in 1..=200, got {n}"
        )));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// A Gauss-Legendre rule mapped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct UnitRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl UnitRule {
    pub fn legendre(n: usize) -> Result<Self, NumericsError> {
        let (x, w) = gauss_legendre(n)?;
        Ok(UnitRule {
            nodes: x.iter().map(|xi| 0.5 * (xi + 1.0)).collect(),
            weights: w.iter().map(|wi| 0.5 * wi).collect(),
        })
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        let len = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(a + len * x))
            .sum::<f64>()
            * len
    }
}

/// Tensor-product Gauss-Hermite grid in `dim` dimensions. Each point is
/// returned with its product weight and the per-dimension node indices.
pub fn hermite_grid(n: usize, dim: usize) -> Result<Vec<(Vec<f64>, f64, Vec<usize>)>, NumericsError> {
    let (x, w) = gauss_hermite(n)?;
    let total = n.pow(dim as u32);
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0; dim];
        for slot in idx.iter_mut().rev() {
            *slot = rem % n;
            rem /= n;
        }
        let point = idx.iter().map(|&i| x[i]).collect();
        let weight = idx.iter().map(|&i| w[i]).product();
        out.push((point, weight, idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ∫ x^k e^{-x²} dx = Γ((k+1)/2) for even k, 0 for odd k.
    fn hermite_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        // Γ(m + 1/2) = (2m)! / (4^m m!) √π
        let m = k / 2;
        let mut v = PI.sqrt();
        for j in 0..m {
            v *= (j as f64) + 0.5;
        }
        v
    }

    #[test]
    fn one_point_rule() {
        let (x, w) = gauss_hermite(1).unwrap();
        assert_eq!(x, vec![0.0]);
        assert!((w[0] - PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn two_point_rule_by_hand() {
        let (x, w) = gauss_hermite(2).unwrap();
        let r = 0.5f64.sqrt();
        assert!((x[0] + r).abs() < 1e-14 && (x[1] - r).abs() < 1e-14);
        assert!((w[0] - PI.sqrt() / 2.0).abs() < 1e-14);
        assert!((w[1] - PI.sqrt() / 2.0).abs() < 1e-14);
        let second: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi).sum();
        assert!((second - PI.sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn weights_sum_and_exactness_all_orders() {
        for n in 1..=MAX_NODES {
            let (x, w) = gauss_hermite(n).unwrap();
            let s: f64 = w.iter().sum();
            assert!((s - PI.sqrt()).abs() < 1e-12, "n={n} sum={s}");
            for k in 0..(2 * n as u32).min(24) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k as i32)).sum();
                let exact = hermite_moment(k);
                // Odd moments cancel; measure error against Σ w|x|^k.
                let scale: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.abs().powi(k as i32)).sum();
                assert!(
                    (q - exact).abs() <= 1e-10 * scale.max(1.0),
                    "n={n} k={k} q={q} exact={exact}"
                );
            }
        }
    }

    #[test]
    fn order_out_of_range() {
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(51).is_err());
    }

    #[test]
    fn legendre_exactness() {
        for n in 1..=30 {
            let (x, w) = gauss_legendre(n).unwrap();
            for k in 0..(2 * n as i32) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-12, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn grid_weights_multiply() {
        let g = hermite_grid(3, 2).unwrap();
        assert_eq!(g.len(), 9);
        let s: f64 = g.iter().map(|(_, w, _)| w).sum();
        assert!((s - PI).abs() < 1e-12);
    }
}
