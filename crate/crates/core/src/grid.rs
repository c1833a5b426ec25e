//! Uniform state grids and action grids.

use serde::Serialize;

use crate::error::{Error, Result};

const UNIFORM_REL_TOL: f64 = 1e-12;

/// `n ≥ 2` points written as convex combinations of the endpoints, which
/// hits symmetric points such as the midpoint exactly.
fn convex_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| (lo * (m - i as f64) + hi * i as f64) / m)
        .collect()
}

/// Uniformly spaced, strictly increasing state points.
///
/// A single-point grid is accepted (spacing 0) so that degenerate one-state
/// problems can be expressed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateGrid {
    points: Vec<f64>,
    lo: f64,
    hi: f64,
    spacing: f64,
}

impl StateGrid {
    /// `n` points from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("state grid needs at least one point".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite bounds [{lo}, {hi}]")));
        }
        if n == 1 {
            return Self::from_points(vec![lo]);
        }
        if hi <= lo {
            return Err(Error::InvalidGrid(format!("empty domain [{lo}, {hi}]")));
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        let points = convex_points(lo, hi, n);
        Ok(StateGrid {
            points,
            lo,
            hi,
            spacing,
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidGrid("state grid needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("non-finite state point".into()));
        }
        let lo = points[0];
        let hi = points[n - 1];
        if n == 1 {
            return Ok(StateGrid {
                points,
                lo,
                hi,
                spacing: 0.0,
            });
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        if spacing <= 0.0 {
            return Err(Error::InvalidGrid("state points must be strictly increasing".into()));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::InvalidGrid(format!(
                    "state points not strictly increasing at index {i}"
                )));
            }
            if ((w[1] - w[0]) - spacing).abs() > UNIFORM_REL_TOL * spacing.max(hi.abs().max(lo.abs())) {
                return Err(Error::InvalidGrid(format!("state points not uniform at index {i}")));
            }
        }
        Ok(StateGrid {
            points,
            lo,
            hi,
            spacing,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Index of the grid point nearest to `x`; values outside the domain
    /// snap to the boundary point.
    pub fn nearest(&self, x: f64) -> usize {
        if self.points.len() == 1 {
            return 0;
        }
        let pos = ((x - self.lo) / self.spacing).round();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.points.len() - 1)
        }
    }

    /// Segment index `k` and weight `t` such that `x = (1-t)·p[k] + t·p[k+1]`,
    /// with `x` clamped to the domain.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.points.len();
        if n == 1 {
            return (0, 0.0);
        }
        let x = x.clamp(self.lo, self.hi);
        let pos = (x - self.lo) / self.spacing;
        let k = (pos.floor() as usize).min(n - 2);
        let t = (x - self.points[k]) / self.spacing;
        (k, t.clamp(0.0, 1.0))
    }

    /// Piecewise-linear interpolation of per-state `values` at `x`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.points.len());
        let (k, t) = self.locate(x);
        if t == 0.0 || self.points.len() == 1 {
            values[k]
        } else if t == 1.0 {
            values[k + 1]
        } else {
            (1.0 - t) * values[k] + t * values[k + 1]
        }
    }

    /// Indices of the points inside `[lo, hi]` (with a tolerance of a
    /// millionth of a cell).
    pub fn indices_within(&self, lo: f64, hi: f64) -> Vec<usize> {
        let eps = 1e-6 * self.spacing.max(f64::EPSILON);
        self.points
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= lo - eps && p <= hi + eps)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Strictly increasing action points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionGrid {
    points: Vec<f64>,
}

impl ActionGrid {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        match n {
            0 => Err(Error::InvalidGrid("action grid needs at least one point".into())),
            1 => Self::from_points(vec![lo]),
            _ => {
                if hi.is_nan() || lo.is_nan() || hi <= lo {
                    return Err(Error::InvalidGrid(format!("empty action range [{lo}, {hi}]")));
                }
                Self::from_points(convex_points(lo, hi, n))
            }
        }
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("action grid needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("non-finite action point".into()));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "action points not strictly increasing at index {i}"
            )));
        }
        Ok(ActionGrid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest gap between adjacent actions (0 for a single action).
    pub fn min_spacing(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}
