//! Uniform time grids on `[t0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniform grid of `n_steps + 1` points `t0 + k·dt`, `k = 0..=n_steps`,
/// with `dt = (t_end - t0) / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::Grid {
                reason: format!("non-finite endpoints [{t0}, {t_end}]"),
            });
        }
        if !(t0 < t_end) {
            return Err(Error::Grid {
                reason: format!("need t0 < t_end, got [{t0}, {t_end}]"),
            });
        }
        if n_steps == 0 {
            return Err(Error::Grid {
                reason: "n_steps must be >= 1".into(),
            });
        }
        Ok(Self { t0, t_end, n_steps })
    }

    /// Grid over `[t0, t_end]` whose step is as close as possible to `target_dt`.
    pub fn from_step(t0: f64, t_end: f64, target_dt: f64) -> Result<Self> {
        if !(target_dt > 0.0) || !target_dt.is_finite() {
            return Err(Error::Grid {
                reason: format!("step must be positive and finite, got {target_dt}"),
            });
        }
        let n = ((t_end - t0) / target_dt).round().max(1.0) as usize;
        Self::new(t0, t_end, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// The k-th grid point, computed as exactly `t0 + k·dt`.
    pub fn point(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.point(k))
    }

    /// Linear interpolation of values tabulated on this grid, clamped at the ends.
    ///
    /// `values` must have one entry per grid point.
    pub fn lerp(&self, values: &[f64], s: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n_points());
        let u = (s - self.t0) / self.dt();
        if u <= 0.0 {
            return values[0];
        }
        let n = self.n_steps as f64;
        if u >= n {
            return values[self.n_steps];
        }
        let i = u.floor() as usize;
        let frac = u - i as f64;
        values[i] + frac * (values[i + 1] - values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_affine_in_index() {
        let g = TimeGrid::new(0.25, 1.25, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        for k in 0..=4 {
            assert_eq!(g.point(k), 0.25 + k as f64 * 0.25);
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 3).is_err());
    }

    #[test]
    fn from_step_rounds_to_nearest_count() {
        let g = TimeGrid::from_step(0.0, 1.0, 1e-2).unwrap();
        assert_eq!(g.n_steps(), 100);
        let g = TimeGrid::from_step(0.0, 0.95, 0.1).unwrap();
        assert_eq!(g.n_steps(), 10);
    }

    #[test]
    fn lerp_matches_endpoints_and_midpoints() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let vals = [1.0, 3.0, 2.0];
        assert_eq!(g.lerp(&vals, 0.0), 1.0);
        assert_eq!(g.lerp(&vals, 1.0), 2.0);
        assert_eq!(g.lerp(&vals, 0.25), 2.0);
        assert_eq!(g.lerp(&vals, 0.75), 2.5);
        // clamped outside
        assert_eq!(g.lerp(&vals, -5.0), 1.0);
        assert_eq!(g.lerp(&vals, 5.0), 2.0);
    }
}
