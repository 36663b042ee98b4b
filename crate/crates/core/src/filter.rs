//! First-order filter functions for σ_z dephasing and the resulting decay.
//!
//! Convention: `R_zj(ω) = ∫ R_zj(t) e^{iωt} dt` over the sequence, evaluated
//! with the trapezoid rule on the propagator samples, and
//! `χ = (1/π)∫₀^∞ S_z(ω) F_z(ω) dω` with `S_z` the half-line cosine
//! transform of the correlation function.

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{unitary_sequence, PulseSchedule};
use crate::error::{Error, Result};
use crate::liouville::{ptm_of_unitary, Mat2c};

/// Toggling-frame rotation `R_ij = Tr(U†σ_iUσ_j)/2`, `i, j ∈ {x, y, z}`.
pub fn control_matrix(us: &[Mat2c]) -> Result<Vec<Matrix3<f64>>> {
    us.iter()
        .enumerate()
        .map(|(k, u)| {
            let defect = (u.adjoint() * u - Mat2c::identity()).norm();
            if defect > 1e-8 {
                return Err(Error::validation(format!("propagator sample {k} is not unitary ({defect:.2e})")));
            }
            Ok(ptm_of_unitary(u)?.rotation_block())
        })
        .collect()
}

/// Log-spaced angular frequencies, `per_decade` points per decade, one
/// decade beyond `[f_min, f_max]` (Hz) on each side.
pub fn omega_grid(f_min: f64, f_max: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_max > f_min) || per_decade == 0 {
        return Err(Error::validation("frequency band must satisfy 0 < f_min < f_max"));
    }
    let lo = (f_min / 10.0).log10();
    let hi = (f_max * 10.0).log10();
    let n = ((hi - lo) * per_decade as f64).round() as usize;
    Ok((0..=n)
        .map(|k| 2.0 * std::f64::consts::PI * 10f64.powf(lo + (hi - lo) * k as f64 / n as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCurve {
    /// rad/s.
    pub omega: Vec<f64>,
    /// s².
    pub fz: Vec<f64>,
    pub label: String,
}

impl FilterCurve {
    /// Curve divided by its own maximum.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.fz.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            self.fz.iter().map(|v| v / max).collect()
        } else {
            self.fz.clone()
        }
    }
}

/// `F_z(ω) = Σ_j |R_zj(ω)|²`.
///
/// Frequencies above the Nyquist limit of the coarsest time step are
/// dropped with a warning.
pub fn filter_function(times: &[f64], r: &[Matrix3<f64>], omega: &[f64], label: &str) -> Result<FilterCurve> {
    if times.len() != r.len() || times.len() < 2 {
        return Err(Error::validation("control matrix and time samples must match and hold two or more points"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("time samples must increase strictly"));
    }
    let max_dt = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let nyquist = std::f64::consts::PI / max_dt;
    let kept: Vec<f64> = omega.iter().copied().filter(|&w| w <= nyquist).collect();
    if kept.len() < omega.len() {
        log::warn!(
            "{} frequencies above the Nyquist limit {nyquist:.3e} rad/s excluded",
            omega.len() - kept.len()
        );
    }
    // trapezoid weights
    let n = times.len();
    let weights: Vec<f64> = (0..n)
        .map(|k| {
            let left = if k > 0 { times[k] - times[k - 1] } else { 0.0 };
            let right = if k + 1 < n { times[k + 1] - times[k] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect();
    let t0 = times[0];
    let fz = kept
        .iter()
        .map(|&w| {
            let mut acc = [Complex64::new(0.0, 0.0); 3];
            for k in 0..n {
                let phase = Complex64::from_polar(weights[k], w * (times[k] - t0));
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += phase * r[k][(2, j)];
                }
            }
            acc.iter().map(|a| a.norm_sqr()).sum::<f64>()
        })
        .collect();
    Ok(FilterCurve {
        omega: kept,
        fz,
        label: label.to_string(),
    })
}

/// Filter function of a noiseless run through `segments`.
pub fn sequence_filter(segments: &[PulseSchedule], omega: &[f64], label: &str) -> Result<FilterCurve> {
    let (times, us) = unitary_sequence(segments);
    filter_function(&times, &control_matrix(&us)?, omega, label)
}

/// `χ = (1/π)∫ S_z F_z dω` by the trapezoid rule on the curve's grid.
pub fn decay_rate(s_z: &[f64], curve: &FilterCurve) -> Result<f64> {
    if s_z.len() != curve.omega.len() {
        return Err(Error::validation("spectrum must be sampled on the filter grid"));
    }
    let f: Vec<f64> = s_z.iter().zip(&curve.fz).map(|(s, f)| s * f).collect();
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decay-rate integrand".into()));
    }
    let integral: f64 = curve
        .omega
        .windows(2)
        .zip(f.windows(2))
        .map(|(w, v)| 0.5 * (v[0] + v[1]) * (w[1] - w[0]))
        .sum();
    Ok(integral / std::f64::consts::PI)
}

/// `½(1 + e^{-χ})`.
pub fn avg_fidelity_from_chi(chi: f64) -> Result<f64> {
    if !(chi >= 0.0) {
        return Err(Error::validation(format!("χ = {chi} must be non-negative")));
    }
    Ok(0.5 * (1.0 + (-chi).exp()))
}

/// χ for ideal instantaneous π pulses at `(2k-1)/(2n)·t` (`n = 0` is free
/// evolution), integrating `spectrum(ω)·|∫ y e^{iωt}|²` on `omega`.
pub fn ideal_cpmg_chi(spectrum: impl Fn(f64) -> f64, n: usize, t: f64, omega: &[f64]) -> f64 {
    let mut edges = vec![0.0];
    edges.extend((1..=n).map(|k| (2 * k - 1) as f64 / (2 * n) as f64 * t));
    edges.push(t);
    let f: Vec<f64> = omega
        .iter()
        .map(|&w| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, e) in edges.windows(2).enumerate() {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                // ∫ e^{iωt} dt = (e^{iωb} - e^{iωa}) / (iω)
                let (sb, cb) = (w * e[1]).sin_cos();
                let (sa, ca) = (w * e[0]).sin_cos();
                re += sign * (sb - sa) / w;
                im += sign * (ca - cb) / w;
            }
            (re * re + im * im) * spectrum(w)
        })
        .collect();
    let integral: f64 = omega.windows(2).zip(f.windows(2)).map(|(w, v)| 0.5 * (v[0] + v[1]) * (w[1] - w[0])).sum();
    integral / std::f64::consts::PI
}

/// Idle periods and `n_pi` copies of `pi_pulse` centred at
/// `(2k-1)/(2n)·t_wait`, without the outer π/2 gates.
pub fn cpmg_block(pi_pulse: &PulseSchedule, n_pi: usize, t_wait: f64, free_dt: f64) -> Result<Vec<PulseSchedule>> {
    let tp = pi_pulse.duration();
    if n_pi == 0 || t_wait < n_pi as f64 * tp {
        return Err(Error::validation("wait time cannot hold the π pulses"));
    }
    let mut segs = Vec::with_capacity(2 * n_pi + 1);
    let mut t = 0.0;
    for k in 1..=n_pi {
        let start = (2 * k - 1) as f64 / (2 * n_pi) as f64 * t_wait - 0.5 * tp;
        if start - t > 1e-15 {
            segs.push(PulseSchedule::idle(t, start - t, free_dt, 0.0)?);
        }
        segs.push(pi_pulse.shifted(start));
        t = start + tp;
    }
    if t_wait - t > 1e-15 {
        segs.push(PulseSchedule::idle(t, t_wait - t, free_dt, 0.0)?);
    }
    Ok(segs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::su2_step;
    use crate::grid::TimeGrid;
    use std::f64::consts::PI;

    fn free(tau: f64, dt: f64) -> Vec<PulseSchedule> {
        vec![PulseSchedule::idle(0.0, tau, dt, 0.0).unwrap()]
    }

    #[test]
    fn control_matrix_examples() {
        let r = control_matrix(&[Mat2c::identity(); 3]).unwrap();
        assert!(r.iter().all(|m| *m == Matrix3::identity()));
        let (d, t) = (2e6, 0.3e-6);
        let u = su2_step(0.0, 0.0, d, t);
        let r = control_matrix(&[u]).unwrap()[0];
        let (s, c) = (d * t).sin_cos();
        assert!((r[(0, 0)] - c).abs() < 1e-12 && (r[(1, 1)] - c).abs() < 1e-12);
        assert!((r[(0, 1)].abs() - s.abs()).abs() < 1e-12 && (r[(0, 1)] + r[(1, 0)]).abs() < 1e-12);
        assert!((r[(2, 2)] - 1.0).abs() < 1e-12);
        let v = su2_step(0.3, -0.2, 0.5, 1.1);
        let (ru, rv, ruv) = (
            control_matrix(&[u]).unwrap()[0],
            control_matrix(&[v]).unwrap()[0],
            control_matrix(&[u * v]).unwrap()[0],
        );
        let composed = if (ru * rv - ruv).amax() < (rv * ru - ruv).amax() { ru * rv } else { rv * ru };
        assert!((composed - ruv).amax() < 1e-10);
        assert!(control_matrix(&[Mat2c::identity() * num_complex::Complex64::new(1.1, 0.0)]).is_err());
    }

    #[test]
    fn free_evolution_is_sinc_squared() {
        let tau = 1e-6;
        let omega = omega_grid(1e4, 1e7, 20).unwrap();
        let c = sequence_filter(&free(tau, 1e-9), &omega, "free").unwrap();
        for (w, f) in c.omega.iter().zip(&c.fz) {
            let exact = 4.0 * (w * tau / 2.0).sin().powi(2) / (w * w);
            assert!((f - exact).abs() < 1e-5 * tau * tau, "{w} {f} {exact}");
        }
        assert!(c.fz.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn white_noise_and_parseval() {
        let tau = 1e-6;
        let omega = omega_grid(1e1, 1e9, 400).unwrap();
        let c = sequence_filter(&free(tau, 0.05e-9), &omega, "free").unwrap();
        // ∫₀^∞ F dω = πτ, so white S₀ gives χ = S₀τ
        let s0 = 3e3;
        let chi = decay_rate(&vec![s0; c.omega.len()], &c).unwrap();
        assert!((chi / (s0 * tau) - 1.0).abs() < 5e-3, "{}", chi / (s0 * tau));
        assert_eq!(decay_rate(&vec![0.0; c.omega.len()], &c).unwrap(), 0.0);
    }

    #[test]
    fn beyond_nyquist_is_dropped() {
        let omega = vec![1e6, 1e12];
        let c = sequence_filter(&free(1e-6, 1e-9), &omega, "free").unwrap();
        assert_eq!(c.omega, vec![1e6]);
    }

    fn square_pi(duration: f64) -> PulseSchedule {
        let grid = TimeGrid::covering(0.0, duration, duration / 20.0).unwrap();
        let n = grid.len();
        PulseSchedule::new(grid, vec![PI / duration; n], PI / 2.0, 0.0, crate::dynamics::Interp::Hold).unwrap()
    }

    #[test]
    fn echo_sequences_suppress_low_frequencies() {
        let tau = 4e-6;
        let omega = omega_grid(1e3, 1e5, 50).unwrap();
        let free_curve = sequence_filter(&free(tau, 1e-9), &omega, "free").unwrap();
        let cpmg = sequence_filter(&cpmg_block(&square_pi(1e-9), 4, tau, 1e-9).unwrap(), &omega, "cpmg").unwrap();
        for (k, w) in cpmg.omega.iter().enumerate() {
            if *w < 0.1 * 4.0 / tau {
                assert!(cpmg.fz[k] * 10.0 <= free_curve.fz[k], "{w}");
            }
        }
        let hahn = sequence_filter(&cpmg_block(&square_pi(1e-9), 1, tau, 1e-9).unwrap(), &[1.0], "hahn").unwrap();
        assert!(hahn.fz[0] < 1e-6 * tau * tau);
    }

    #[test]
    fn decay_rate_converges_with_grid_density() {
        let modes = crate::noise::build_one_over_f(1e3, 1e7, 6, 1e8).unwrap();
        let segs = cpmg_block(&square_pi(20e-9), 4, 5e-6, 1e-9).unwrap();
        let chi = |per: usize| {
            let omega = omega_grid(1e3, 1e7, per).unwrap();
            let c = sequence_filter(&segs, &omega, "cpmg").unwrap();
            let s: Vec<f64> = c.omega.iter().map(|&w| modes.dephasing_spectrum(w)).collect();
            decay_rate(&s, &c).unwrap()
        };
        let (a, b) = (chi(200), chi(400));
        assert!(((a - b) / b).abs() < 5e-3);
        assert!(b > 0.0);
    }

    #[test]
    fn fidelity_from_chi() {
        assert_eq!(avg_fidelity_from_chi(0.0).unwrap(), 1.0);
        assert!((avg_fidelity_from_chi(0.01).unwrap() - 0.995_024_916_9).abs() < 1e-9);
        assert!((avg_fidelity_from_chi(1e3).unwrap() - 0.5).abs() < 1e-15);
        assert!(avg_fidelity_from_chi(-1.0).is_err());
    }

    #[test]
    fn ideal_cpmg_chi_is_sequence_independent_for_white_noise() {
        let omega = omega_grid(1e1, 1e10, 200).unwrap();
        for n in [0, 1, 4, 16] {
            let chi = ideal_cpmg_chi(|_| 2e3, n, 1e-6, &omega);
            assert!((chi / 2e-3 - 1.0).abs() < 5e-3, "n = {n}: {chi}");
        }
        // the echo removes a 1/f² spectrum far better than free evolution does
        let red = |w: f64| 1e12 / (w * w);
        let t = 1e-6;
        assert!(ideal_cpmg_chi(red, 8, t, &omega) < 1e-2 * ideal_cpmg_chi(red, 0, t, &omega));
    }
}
