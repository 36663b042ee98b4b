//! Non-Markovian master-equation propagation.
//!
//! The rotating-frame Hamiltonian is
//! `H_S = ½δ(t)σ_z + ½Ω(t)(cos φ σ_x + sin φ σ_y)` with `δ = δ₀ + δ_extra(t)`.
//! Memory of the quantum bath is carried by kernels obeying
//! `dK_i/dt = c0_i σ_z + (ℒ_S - θ_i)K_i`, `K_i(0) = 0`, which feed the state
//! equation through `dρ/dt = ℒ_S ρ + [Kρ, σ_z] + [σ_z, ρK†]`, `K = Σ K_i`.

mod extended;
mod master;
mod unitary;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{interpolate, TimeGrid};
use crate::liouville::{hamiltonian_ptm, Ptm};
use crate::noise::BathModeSet;

pub use extended::{
    build_extended_generator, kernels_from_state, propagate_extended, rho_block, Generator,
};
pub use master::{
    propagate_master, propagate_sequence, propagate_segment, step_kernels, KernelStep, MasterState,
    StageGenerators,
};
pub(crate) use master::{rho_stage_generators, step_kernels_unchecked};
pub use unitary::{polar_unitary, su2_step, unitary_propagator, unitary_sequence};

/// How Ω is evaluated between grid samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Piecewise constant: step `k` uses sample `k` throughout.
    Hold,
    /// Four-point cubic through neighbouring samples.
    Cubic,
}

/// Control amplitude on a uniform grid with a fixed drive phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub grid: TimeGrid,
    /// Rabi amplitude samples (rad/s), one per grid point.
    pub omega: Vec<f64>,
    /// Drive phase: 0 drives about +x, π/2 about +y.
    pub phase: f64,
    /// Static detuning δ₀ (rad/s).
    pub delta0: f64,
    pub interp: Interp,
}

impl PulseSchedule {
    pub fn new(grid: TimeGrid, omega: Vec<f64>, phase: f64, delta0: f64, interp: Interp) -> Result<Self> {
        if omega.len() != grid.len() {
            return Err(Error::validation(format!(
                "pulse has {} samples for a grid of {} points",
                omega.len(),
                grid.len()
            )));
        }
        if omega.iter().any(|w| !w.is_finite()) || !phase.is_finite() || !delta0.is_finite() {
            return Err(Error::validation("pulse samples, phase and detuning must be finite"));
        }
        Ok(Self {
            grid,
            omega,
            phase,
            delta0,
            interp,
        })
    }

    /// Free evolution (Ω = 0).
    pub fn idle(t0: f64, duration: f64, max_dt: f64, delta0: f64) -> Result<Self> {
        let grid = TimeGrid::covering(t0, duration, max_dt)?;
        Self::new(grid, vec![0.0; grid.len()], 0.0, delta0, Interp::Hold)
    }

    /// Square pulse with rotation angle `angle` about the axis at `phase`.
    pub fn square(t0: f64, duration: f64, angle: f64, phase: f64, max_dt: f64, delta0: f64) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::validation("square pulse needs a positive duration"));
        }
        let grid = TimeGrid::covering(t0, duration, max_dt)?;
        let amp = angle / duration;
        Self::new(grid, vec![amp; grid.len()], phase, delta0, Interp::Hold)
    }

    /// Truncated Gaussian `A·exp(-(t - t_c)²/(2s²))` with `s = duration·width`,
    /// amplitude fixed so the area seen by the integrator equals `angle`.
    pub fn gaussian(
        t0: f64,
        duration: f64,
        angle: f64,
        width: f64,
        phase: f64,
        max_dt: f64,
        delta0: f64,
    ) -> Result<Self> {
        if !(duration > 0.0) || !(width > 0.0) {
            return Err(Error::validation("gaussian pulse needs positive duration and width"));
        }
        let grid = TimeGrid::covering(t0, duration, max_dt)?;
        let tc = t0 + 0.5 * duration;
        let s = duration * width;
        let shape: Vec<f64> = grid
            .times()
            .iter()
            .map(|t| (-(t - tc) * (t - tc) / (2.0 * s * s)).exp())
            .collect();
        let mut pulse = Self::new(grid, shape, phase, delta0, Interp::Cubic)?;
        let area = pulse.area();
        for w in pulse.omega.iter_mut() {
            *w *= angle / area;
        }
        Ok(pulse)
    }

    pub fn duration(&self) -> f64 {
        self.grid.duration()
    }

    /// Same samples, moved to start at `t0`.
    pub fn shifted(&self, t0: f64) -> Self {
        let mut out = self.clone();
        out.grid.t0 = t0;
        out
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// Ω inside step `k` at fractional position `frac ∈ [0, 1]`.
    pub fn omega_at(&self, k: usize, frac: f64) -> f64 {
        match self.interp {
            Interp::Hold => self.omega[k],
            Interp::Cubic => interpolate(&self.omega, k, frac),
        }
    }

    /// Pulse area as integrated by RK4 (Simpson on the step stages).
    pub fn area(&self) -> f64 {
        let dt = self.grid.dt;
        (0..self.n_steps())
            .map(|k| dt / 6.0 * (self.omega_at(k, 0.0) + 4.0 * self.omega_at(k, 0.5) + self.omega_at(k, 1.0)))
            .sum()
    }

    pub fn max_abs_omega(&self) -> f64 {
        self.omega.iter().fold(0.0f64, |m, w| m.max(w.abs()))
    }

    /// Rotation-vector components `(Ω cos φ, Ω sin φ)` inside step `k`.
    pub fn drive(&self, k: usize, frac: f64) -> (f64, f64) {
        let w = self.omega_at(k, frac);
        (w * self.phase.cos(), w * self.phase.sin())
    }
}

/// Detuning beyond δ₀: classical samples on the pulse grid plus a constant.
#[derive(Clone, Copy, Debug, Default)]
pub struct Detuning<'a> {
    /// Either empty or one sample per grid point (rad/s).
    pub samples: &'a [f64],
    /// Shot-constant offset (rad/s).
    pub offset: f64,
}

impl<'a> Detuning<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(offset: f64) -> Self {
        Self { samples: &[], offset }
    }

    pub fn new(samples: &'a [f64], offset: f64) -> Self {
        Self { samples, offset }
    }

    pub(crate) fn check(&self, grid: &TimeGrid) -> Result<()> {
        if !self.samples.is_empty() && self.samples.len() != grid.len() {
            return Err(Error::validation(format!(
                "detuning trajectory has {} samples for a grid of {} points",
                self.samples.len(),
                grid.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn at(&self, k: usize, frac: f64) -> f64 {
        if self.samples.is_empty() {
            self.offset
        } else {
            self.offset + interpolate(self.samples, k, frac)
        }
    }
}

/// `ℒ_S(t)` as a 4×4 generator, with `delta_extra` added to δ₀.
pub fn hamiltonian_generator(t: f64, pulse: &PulseSchedule, delta_extra: f64) -> Result<Ptm> {
    let (k, frac) = pulse
        .grid
        .locate(t)
        .ok_or_else(|| Error::validation(format!("time {t:.6e} s lies outside the pulse grid")))?;
    let (wx, wy) = pulse.drive(k, frac);
    Ok(hamiltonian_ptm(wx, wy, pulse.delta0 + delta_extra))
}

pub(crate) fn stage_generator(pulse: &PulseSchedule, det: &Detuning, k: usize, frac: f64) -> Ptm {
    let (wx, wy) = pulse.drive(k, frac);
    hamiltonian_ptm(wx, wy, pulse.delta0 + det.at(k, frac))
}

/// Default step `min(1/(50·max(|Ω|, |δ|, θ_max)), cap)`.
pub fn default_dt(max_rate: f64, modes: &BathModeSet, cap: f64) -> f64 {
    let rate = max_rate.abs().max(modes.theta_max());
    if rate > 0.0 {
        (1.0 / (50.0 * rate)).min(cap)
    } else {
        cap
    }
}

pub(crate) fn check_stiffness(dt: f64, modes: &BathModeSet) -> Result<()> {
    for (i, m) in modes.modes.iter().enumerate() {
        let product = dt * m.theta;
        if product >= 0.1 {
            return Err(Error::TimestepTooLarge {
                mode: i,
                theta: m.theta,
                product,
            });
        }
    }
    Ok(())
}

/// Closed-form coherence `|ρ_01(t)|` for Ω = 0, starting from an equator state.
///
/// With `L_S = 0` each kernel is `(c0/θ)(1 - e^{-θt})σ_z`, and the dissipator
/// damps x and y at rate `4ΣK`, giving
/// `|ρ_01| = ½ exp(-4 Σ c0_i/θ_i² (θ_i t - 1 + e^{-θ_i t}))`.
pub fn analytic_dephasing(modes: &BathModeSet, t: f64) -> f64 {
    0.5 * (-analytic_exponent(modes, t)).exp()
}

/// Exponent `4 Σ c0_i/θ_i² (θ_i t - 1 + e^{-θ_i t})` of [`analytic_dephasing`].
pub fn analytic_exponent(modes: &BathModeSet, t: f64) -> f64 {
    4.0 * modes
        .modes
        .iter()
        .map(|m| m.c0 / (m.theta * m.theta) * ramp(m.theta * t))
        .sum::<f64>()
}

/// `x - 1 + e^{-x}` without cancellation near zero.
pub(crate) fn ramp(x: f64) -> f64 {
    if x < 1e-3 {
        let x2 = x * x;
        x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0 + x2 * x2 / 720.0)
    } else {
        x + (-x).exp_m1()
    }
}

/// Angular frequency from Hz.
pub fn hz(f: f64) -> f64 {
    2.0 * PI * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::DensityVector;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hamiltonian_generator_cases() {
        let grid = TimeGrid::new(0.0, 1e-3, 10).unwrap();
        let zero = PulseSchedule::new(grid, vec![0.0; 11], 0.0, 0.0, Interp::Hold).unwrap();
        assert_eq!(hamiltonian_generator(0.004, &zero, 0.0).unwrap(), Ptm::zero());

        let w0 = 3.0;
        let dz = PulseSchedule::new(grid, vec![0.0; 11], 0.0, w0, Interp::Hold).unwrap();
        let g = hamiltonian_generator(0.004, &dz, 0.0).unwrap();
        let r = g.apply(&DensityVector::from_bloch(0.2, 0.7, 0.1));
        assert_abs_diff_eq!(r.r[1], -w0 * 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(r.r[2], w0 * 0.2, epsilon = 1e-15);

        let dx = PulseSchedule::new(grid, vec![w0; 11], 0.0, 0.0, Interp::Hold).unwrap();
        let g = hamiltonian_generator(0.004, &dx, 0.0).unwrap();
        let r = g.apply(&DensityVector::from_bloch(0.2, 0.7, 0.1));
        assert_abs_diff_eq!(r.r[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.r[2], -w0 * 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.r[3], w0 * 0.7, epsilon = 1e-15);

        assert!(hamiltonian_generator(0.02, &dx, 0.0).unwrap_err().is_validation());
    }

    #[test]
    fn gaussian_area_is_calibrated() {
        let p = PulseSchedule::gaussian(0.0, 100e-9, PI / 2.0, 0.2, 0.0, 1e-9, 0.0).unwrap();
        assert_abs_diff_eq!(p.area(), PI / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ramp_is_smooth_across_switch() {
        for x in [1e-8f64, 1e-4, 9.99e-4, 1.001e-3, 0.5, 5.0] {
            let direct = x - 1.0 + (-x).exp();
            let rel = (ramp(x) - direct).abs() / ramp(x);
            assert!(rel < 1e-6 || x < 1e-3, "x={x}");
        }
        let a = ramp(0.999_999e-3);
        let b = ramp(1.000_001e-3);
        assert!((a - b).abs() / a < 1e-5);
    }
}
