use std::fmt;
use std::sync::Arc;

use super::basis::TimeBasis;

/// A subject's exposure as a function of time, valid on `[0, horizon]`.
#[derive(Clone)]
pub struct ExposurePath {
    shape: PathShape,
    horizon: f64,
}

#[derive(Clone)]
pub enum PathShape {
    Constant(f64),
    /// Last value carried forward: `values[j]` holds on `[times[j], times[j+1])`.
    /// Before the first time the first value applies.
    Step {
        times: Vec<f64>,
        values: Vec<f64>,
    },
    Trajectory(Trajectory),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// `F(t)ᵀ fixed + R(t)ᵀ random + offset + jump · 1{t ≥ jump_at}`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub fixed_basis: Arc<TimeBasis>,
    pub fixed_coef: Vec<f64>,
    pub random_basis: Arc<TimeBasis>,
    pub random_coef: Vec<f64>,
    pub offset: f64,
    pub jump: Option<(f64, f64)>,
}

impl Trajectory {
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let mut v = self.fixed_basis.dot(t, &self.fixed_coef) + self.offset;
        if !self.random_coef.is_empty() {
            v += self.random_basis.dot(t, &self.random_coef);
        }
        if let Some((at, size)) = self.jump {
            if t >= at {
                v += size;
            }
        }
        v
    }
}

impl ExposurePath {
    pub fn constant(value: f64, horizon: f64) -> Self {
        ExposurePath {
            shape: PathShape::Constant(value),
            horizon,
        }
    }

    /// Panics if `times` is empty or lengths differ.
    pub fn step(times: Vec<f64>, values: Vec<f64>, horizon: f64) -> Self {
        assert!(!times.is_empty() && times.len() == values.len());
        ExposurePath {
            shape: PathShape::Step { times, values },
            horizon,
        }
    }

    pub fn trajectory(trajectory: Trajectory, horizon: f64) -> Self {
        ExposurePath {
            shape: PathShape::Trajectory(trajectory),
            horizon,
        }
    }

    pub fn function<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F, horizon: f64) -> Self {
        ExposurePath {
            shape: PathShape::Function(Arc::new(f)),
            horizon,
        }
    }

    /// Polynomial-in-time path with coefficients `coef` (intercept first).
    pub fn polynomial(coef: Vec<f64>, horizon: f64) -> Self {
        let basis = Arc::new(TimeBasis::polynomial(coef.len().saturating_sub(1)));
        ExposurePath::trajectory(
            Trajectory {
                fixed_basis: basis.clone(),
                fixed_coef: coef,
                random_basis: basis,
                random_coef: Vec::new(),
                offset: 0.0,
                jump: None,
            },
            horizon,
        )
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match &self.shape {
            PathShape::Constant(v) => *v,
            PathShape::Step { times, values } => {
                // partition_point: number of knots <= t
                let k = times.partition_point(|&s| s <= t);
                values[k.saturating_sub(1)]
            }
            PathShape::Trajectory(tr) => tr.value(t),
            PathShape::Function(f) => f(t),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn shape(&self) -> &PathShape {
        &self.shape
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.shape, PathShape::Constant(_))
    }
}

impl fmt::Debug for ExposurePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.shape {
            PathShape::Constant(v) => format!("Constant({v})"),
            PathShape::Step { times, .. } => format!("Step({} knots)", times.len()),
            PathShape::Trajectory(t) => format!("Trajectory({:?})", t.fixed_coef),
            PathShape::Function(_) => "Function".to_string(),
        };
        write!(f, "ExposurePath {{ {kind}, horizon: {} }}", self.horizon)
    }
}
