use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::CpmgPoint;
use crate::error::{Error, Result};
use crate::lsq::{fit_line, levenberg_marquardt, LmOptions};

/// `A cos(2πft) exp(-(t/T2*)²) + B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    pub a: f64,
    pub b: f64,
    /// Fringe frequency (Hz).
    pub f: f64,
    /// Infinite when the fitted envelope does not decay.
    pub t2_star: f64,
    /// RMS residual.
    pub residual: f64,
}

/// `A cos(2πft) exp(-(t/T)^p) + B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StretchedFit {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub t2: f64,
    pub p: f64,
    pub p_stderr: f64,
    pub residual: f64,
}

fn check_curve(t: &[f64], y: &[f64], min_points: usize) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::validation("times and values differ in length"));
    }
    if t.len() < min_points {
        return Err(Error::validation(format!("need at least {min_points} points, got {}", t.len())));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::validation("curve contains non-finite values"));
    }
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("times must be strictly increasing"));
    }
    Ok(())
}

/// Frequency of the strongest component of `y` on a 4× oversampled grid.
fn periodogram_peak(t: &[f64], y: &[f64]) -> f64 {
    let span = t[t.len() - 1] - t[0];
    let mut gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let nyquist = 0.5 / gaps[gaps.len() / 2];
    let df = 0.25 / span;
    let n_f = (nyquist / df).ceil() as usize;
    let power = |f: f64| {
        let (mut c, mut s) = (0.0, 0.0);
        for (ti, yi) in t.iter().zip(y) {
            let (sn, cs) = (2.0 * PI * f * ti).sin_cos();
            c += yi * cs;
            s += yi * sn;
        }
        c * c + s * s
    };
    let mut best = (0.0, power(0.0));
    for i in 1..=n_f {
        let f = i as f64 * df;
        let p = power(f);
        if p > best.1 {
            best = (f, p);
        }
    }
    best.0
}

/// Gaussian rate `1/T²` from the local maxima of `|y - b|`.
fn envelope_rate(t: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    let dev: Vec<f64> = y.iter().map(|v| (v - b).abs() / a).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 1..dev.len().saturating_sub(1) {
        let e = dev[i];
        if e >= dev[i - 1] && e >= dev[i + 1] && e > 0.05 && e < 0.99 {
            num -= t[i] * t[i] * e.ln();
            den += t[i].powi(4);
        }
    }
    let span = t[t.len() - 1] - t[0];
    if den > 0.0 && num > 0.0 {
        num / den
    } else {
        1.0 / (span * span)
    }
}

fn ramsey_start(t: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let max = y.iter().copied().fold(f64::MIN, f64::max);
    let min = y.iter().copied().fold(f64::MAX, f64::min);
    let a = 0.5 * (max - min);
    let b = 0.5 * (max + min);
    if !(a > 1e-9 * b.abs().max(1.0)) {
        return Err(Error::FitFailure {
            iterations: 0,
            residual: a,
            reason: "curve has no oscillation amplitude; T2* is unidentifiable".into(),
        });
    }
    let centred: Vec<f64> = y.iter().map(|v| v - b).collect();
    let f = periodogram_peak(t, &centred);
    Ok([a, b, f, envelope_rate(t, y, a, b)])
}

/// Least-squares fit of `A cos(2πft) exp(-(t/T2*)²) + B`.
///
/// Start values: A and B from the extrema, f from the periodogram peak and
/// T2* from the decay of the envelope maxima. The envelope is fitted through
/// the rate `1/T2*²`, which may reach zero for an undamped fringe.
pub fn fit_ramsey(t: &[f64], y: &[f64]) -> Result<RamseyFit> {
    check_curve(t, y, 20)?;
    let p0 = ramsey_start(t, y)?;
    let span = t[t.len() - 1] - t[0];
    let model = |p: &[f64], t: f64| p[0] * (2.0 * PI * p[2] * t).cos() * (-p[3] * t * t).exp() + p[1];
    let fit = levenberg_marquardt(
        |p| t.iter().zip(y).map(|(&t, &y)| model(p, t) - y).collect(),
        &p0,
        &[p0[0], 1.0, 1.0 / span, 1.0 / (span * span)],
        LmOptions::default(),
    )?;
    let p = &fit.params;
    if !(p[0].abs() > 1e-9) {
        return Err(Error::FitFailure {
            iterations: fit.iterations,
            residual: fit.rms,
            reason: "fitted amplitude vanished".into(),
        });
    }
    let t2_star = if p[3] > 0.0 { 1.0 / p[3].sqrt() } else { f64::INFINITY };
    if t2_star.is_finite() && span < 1.5 * t2_star {
        log::warn!("Ramsey window {span:.3e} s is shorter than 1.5·T2* = {:.3e} s", 1.5 * t2_star);
    }
    Ok(RamseyFit {
        a: p[0],
        b: p[1],
        f: p[2].abs(),
        t2_star,
        residual: fit.rms,
    })
}

/// Same model with a free envelope exponent `p`, restricted to `t ≤ window`.
pub fn fit_ramsey_stretched(t: &[f64], y: &[f64], window: Option<f64>) -> Result<StretchedFit> {
    let limit = window.unwrap_or(f64::INFINITY);
    let (ts, ys): (Vec<f64>, Vec<f64>) = t.iter().zip(y).filter(|(t, _)| **t <= limit).map(|(a, b)| (*a, *b)).unzip();
    check_curve(&ts, &ys, 20)?;
    let g = fit_ramsey(t, y)?;
    if !g.t2_star.is_finite() {
        return Err(Error::FitFailure {
            iterations: 0,
            residual: g.residual,
            reason: "no decay to fit an exponent to".into(),
        });
    }
    let model = |p: &[f64], t: f64| {
        p[0] * (2.0 * PI * p[2] * t).cos() * (-(t / p[3]).abs().powf(p[4])).exp() + p[1]
    };
    let span = ts[ts.len() - 1] - ts[0];
    let fit = levenberg_marquardt(
        |p| ts.iter().zip(&ys).map(|(&t, &y)| model(p, t) - y).collect(),
        &[g.a, g.b, g.f, g.t2_star, 2.0],
        &[g.a.abs(), 1.0, 1.0 / span, g.t2_star, 1.0],
        LmOptions::default(),
    )?;
    let p = &fit.params;
    let p_stderr = fit.covariance.as_ref().map(|c| c[(4, 4)].max(0.0).sqrt()).unwrap_or(f64::NAN);
    Ok(StretchedFit {
        a: p[0],
        b: p[1],
        f: p[2].abs(),
        t2: p[3].abs(),
        p: p[4],
        p_stderr,
        residual: fit.rms,
    })
}

/// Decay time from `A(t) = exp(-(t/T2)^α)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2Fit {
    pub t2: f64,
    pub alpha: f64,
    pub points_used: usize,
}

/// Regress `ln(-ln A)` on `ln t` over the points with `A ∈ (0.1, 0.95)`,
/// where both the decay and the shot noise are well resolved.
pub fn t2_from_decay(t: &[f64], a: &[f64]) -> Result<T2Fit> {
    if t.len() != a.len() {
        return Err(Error::validation("times and amplitudes differ in length"));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(a)
        .filter(|(t, a)| **t > 0.0 && **a > 0.1 && **a < 0.95)
        .map(|(t, a)| (t.ln(), (-a.ln()).ln()))
        .unzip();
    if x.len() < 2 {
        return Err(Error::validation(format!(
            "only {} echo amplitudes fall inside (0.1, 0.95); widen the wait-time range",
            x.len()
        )));
    }
    let line = fit_line(&x, &y)?;
    if !(line.slope > 0.0) {
        return Err(Error::FitFailure {
            iterations: 0,
            residual: line.slope_stderr,
            reason: "echo amplitude does not decay with wait time".into(),
        });
    }
    Ok(T2Fit {
        t2: (-line.intercept / line.slope).exp(),
        alpha: line.slope,
        points_used: x.len(),
    })
}

/// `T2 = c·n^β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub beta: f64,
    pub beta_stderr: f64,
    pub prefactor: f64,
}

pub fn fit_t2_scaling(n_pi: &[usize], t2: &[f64]) -> Result<ScalingFit> {
    if n_pi.len() != t2.len() {
        return Err(Error::validation("n_pi and T2 lists differ in length"));
    }
    let mut distinct = n_pi.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::validation(format!(
            "T2 scaling needs at least 4 distinct n_pi values, got {}",
            distinct.len()
        )));
    }
    if n_pi.contains(&0) || t2.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("n_pi and T2 must be positive"));
    }
    let x: Vec<f64> = n_pi.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = t2.iter().map(|v| v.ln()).collect();
    let line = fit_line(&x, &y)?;
    Ok(ScalingFit {
        beta: line.slope,
        beta_stderr: line.slope_stderr,
        prefactor: line.intercept.exp(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub f_hz: f64,
    pub s: f64,
    pub n_pi: usize,
    pub t_wait: f64,
}

/// `S(n/(2t)) ≈ -ln A / (2π² t)` for every point with `n_π ≥ 8`.
pub fn extract_spectrum(points: &[CpmgPoint]) -> Result<Vec<SpectrumPoint>> {
    if let Some(p) = points.iter().find(|p| p.n_pi < 8) {
        return Err(Error::validation(format!(
            "spectrum extraction needs n_pi >= 8, got a point with n_pi = {}",
            p.n_pi
        )));
    }
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        if !(p.t_wait > 0.0) {
            return Err(Error::validation("spectrum extraction needs positive wait times"));
        }
        if !(p.amplitude > 0.0) {
            log::warn!(
                "skipping n_pi = {}, t_wait = {:.3e} s: amplitude {:.3e} has no logarithm",
                p.n_pi,
                p.t_wait,
                p.amplitude
            );
            continue;
        }
        out.push(SpectrumPoint {
            f_hz: p.n_pi as f64 / (2.0 * p.t_wait),
            s: -p.amplitude.ln() / (2.0 * PI * PI * p.t_wait),
            n_pi: p.n_pi,
            t_wait: p.t_wait,
        });
    }
    Ok(out)
}
