//! Small dense least-squares helpers: Levenberg-Marquardt and straight-line fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative drop in the residual sum of squares is below this.
    pub tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-14,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmFit {
    pub params: Vec<f64>,
    /// Root-mean-square residual at the solution.
    pub rms: f64,
    pub iterations: usize,
    /// `(JᵀJ)⁻¹·σ²`, with σ² estimated from the residuals.
    pub covariance: Option<DMatrix<f64>>,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, p: &[f64], m: usize, scale: &[f64]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(m, p.len());
    let mut q = p.to_vec();
    for c in 0..p.len() {
        let h = 1e-6 * p[c].abs().max(scale[c]);
        q[c] = p[c] + h;
        let up = f(&q);
        q[c] = p[c] - h;
        let down = f(&q);
        q[c] = p[c];
        for r in 0..m {
            j[(r, c)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    j
}

/// Minimise `Σ r_i(p)²` from `p0`.
///
/// `scale` gives a typical magnitude per parameter, used for finite
/// differences when a parameter passes through zero.
pub fn levenberg_marquardt(
    residuals: impl Fn(&[f64]) -> Vec<f64>,
    p0: &[f64],
    scale: &[f64],
    opts: LmOptions,
) -> Result<LmFit> {
    let f: &dyn Fn(&[f64]) -> Vec<f64> = &residuals;
    let n = p0.len();
    let mut p = p0.to_vec();
    let mut r = f(&p);
    let m = r.len();
    if m < n {
        return Err(Error::validation(format!("{m} residuals cannot determine {n} parameters")));
    }
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Err(Error::NonFinite("residuals at the initial guess".into()));
    }
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let j = jacobian(f, &p, m, scale);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = f(&trial);
            let ct = sum_sq(&rt);
            if ct.is_finite() && ct <= cost {
                let drop = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if drop < opts.tolerance || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            // no downhill step at any damping: a (possibly flat) minimum
            converged = true;
        }
        if converged {
            break;
        }
    }
    let rms = (cost / m as f64).sqrt();
    if !converged {
        return Err(Error::FitFailure {
            iterations,
            residual: rms,
            reason: "no convergence within the iteration limit".into(),
        });
    }
    let covariance = if m > n {
        let j = jacobian(f, &p, m, scale);
        (j.transpose() * &j).try_inverse().map(|inv| inv * (cost / (m - n) as f64))
    } else {
        None
    };
    Ok(LmFit {
        params: p,
        rms,
        iterations,
        covariance,
    })
}

/// Ordinary least-squares line `y = a + b x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::validation("line fit needs at least two (x, y) pairs"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::validation("line fit needs distinct x values"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_recovered() {
        let t: Vec<f64> = (0..40).map(|k| k as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 * (-1.3 * t).exp() + 0.1).collect();
        let fit = levenberg_marquardt(
            |p| t.iter().zip(&y).map(|(t, y)| p[0] * (-p[1] * t).exp() + p[2] - y).collect(),
            &[1.0, 0.5, 0.0],
            &[1.0, 1.0, 1.0],
            LmOptions::default(),
        )
        .unwrap();
        assert!((fit.params[0] - 2.0).abs() < 1e-8);
        assert!((fit.params[1] - 1.3).abs() < 1e-8);
        assert!((fit.params[2] - 0.1).abs() < 1e-8);
        assert!(fit.rms < 1e-9);
    }

    #[test]
    fn underdetermined_rejected() {
        let r = levenberg_marquardt(|p| vec![p[0] + p[1]], &[0.0, 0.0], &[1.0, 1.0], LmOptions::default());
        assert!(r.unwrap_err().is_validation());
    }

    #[test]
    fn line_exact() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 2.0 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-14 && (f.intercept - 0.5).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
    }
}
