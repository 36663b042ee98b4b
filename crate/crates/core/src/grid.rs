use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_k = t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::validation(format!("time grid needs finite dt > 0, got {dt}")));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid over `[t0, t0 + duration]` with the largest step not exceeding `max_dt`.
    pub fn covering(t0: f64, duration: f64, max_dt: f64) -> Result<Self> {
        if !(duration >= 0.0) || !(max_dt > 0.0) {
            return Err(Error::validation(format!(
                "time grid needs duration >= 0 and max_dt > 0, got {duration}, {max_dt}"
            )));
        }
        let n = ((duration / max_dt).ceil() as usize).max(1);
        Self::new(t0, duration / n as f64, n)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.n_steps)
    }

    pub fn duration(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    /// Index of the step containing `t`, or `None` outside the grid.
    pub fn locate(&self, t: f64) -> Option<(usize, f64)> {
        let tol = 1e-9 * self.dt;
        if t < self.t0 - tol || t > self.t_end() + tol {
            return None;
        }
        let x = ((t - self.t0) / self.dt).max(0.0);
        let k = (x.floor() as usize).min(self.n_steps.saturating_sub(1));
        Some((k, (x - k as f64).clamp(0.0, 1.0)))
    }
}

/// Four-point midpoint and boundary interpolation of uniformly sampled data.
///
/// The interior midpoint rule `(-f₋₁ + 9f₀ + 9f₁ - f₂)/16` is exact for
/// cubics, which keeps RK4 at fourth order when coefficients are sampled.
pub fn interpolate(samples: &[f64], k: usize, frac: f64) -> f64 {
    let n = samples.len();
    if n == 1 {
        return samples[0];
    }
    if frac <= 0.0 {
        return samples[k];
    }
    if frac >= 1.0 {
        return samples[(k + 1).min(n - 1)];
    }
    let f0 = samples[k];
    let f1 = samples[k + 1];
    if n < 4 {
        return f0 + (f1 - f0) * frac;
    }
    // Catmull-Rom with cubic-extrapolated ghost points at the ends
    let fm = if k > 0 { samples[k - 1] } else { 4.0 * f0 - 6.0 * f1 + 4.0 * samples[2] - samples[3] };
    let f2 = if k + 2 < n { samples[k + 2] } else { 4.0 * f1 - 6.0 * f0 + 4.0 * fm - samples[k - 2] };
    let s = frac;
    let s2 = s * s;
    let s3 = s2 * s;
    0.5 * ((2.0 * f0)
        + (-fm + f1) * s
        + (2.0 * fm - 5.0 * f0 + 4.0 * f1 - f2) * s2
        + (-fm + 3.0 * f0 - 3.0 * f1 + f2) * s3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_rule_is_exact_for_cubics() {
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t - 0.3 * t * t * t;
        let samples: Vec<f64> = (0..8).map(|k| f(k as f64)).collect();
        for k in 0..7 {
            let got = interpolate(&samples, k, 0.5);
            assert!((got - f(k as f64 + 0.5)).abs() < 1e-12, "k={k}: {got}");
        }
    }

    #[test]
    fn covering_grid_hits_endpoint() {
        let g = TimeGrid::covering(1.0, 2.5, 0.3).unwrap();
        assert_eq!(g.n_steps, 9);
        assert!((g.t_end() - 3.5).abs() < 1e-14);
        assert!(g.locate(3.6).is_none());
        assert_eq!(g.locate(3.5).unwrap().0, 8);
    }
}
