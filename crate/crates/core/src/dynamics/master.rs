//! Two-stage integration: kernels first, then the state under the kernels.

use nalgebra::{Matrix4, Vector4};

use super::{check_stiffness, stage_generator, Detuning, PulseSchedule};
use crate::error::{Error, Result};
use crate::liouville::{dissipator_generator, DensityVector, PauliOp, Ptm, C64, Z};
use crate::noise::BathModeSet;

/// `ℒ_S` at the start, midpoint and end of one step.
#[derive(Clone, Copy, Debug)]
pub struct StageGenerators {
    pub start: Ptm,
    pub mid: Ptm,
    pub end: Ptm,
}

impl StageGenerators {
    pub fn constant(g: Ptm) -> Self {
        Self {
            start: g,
            mid: g,
            end: g,
        }
    }

    pub(crate) fn of_step(pulse: &PulseSchedule, det: &Detuning, k: usize) -> Self {
        Self {
            start: stage_generator(pulse, det, k, 0.0),
            mid: stage_generator(pulse, det, k, 0.5),
            end: stage_generator(pulse, det, k, 1.0),
        }
    }

    fn at_stage(&self, s: usize) -> &Ptm {
        match s {
            0 => &self.start,
            3 => &self.end,
            _ => &self.mid,
        }
    }
}

/// Result of one RK4 kernel step.
#[derive(Clone, Debug)]
pub struct KernelStep {
    pub next: Vec<PauliOp>,
    /// `Σ_i K_i` at the four RK4 stage inputs.
    pub stage_sums: [PauliOp; 4],
}

#[derive(Clone, Copy)]
struct KernelCoords {
    re: Vector4<f64>,
    im: Vector4<f64>,
}

impl KernelCoords {
    fn of(k: &PauliOp) -> Self {
        Self {
            re: Vector4::new(k.c[0].re, k.c[1].re, k.c[2].re, k.c[3].re),
            im: Vector4::new(k.c[0].im, k.c[1].im, k.c[2].im, k.c[3].im),
        }
    }

    fn op(&self) -> PauliOp {
        PauliOp::new([0, 1, 2, 3].map(|p| C64::new(self.re[p], self.im[p])))
    }

    fn axpy(&self, h: f64, d: &KernelCoords) -> Self {
        Self {
            re: self.re + d.re * h,
            im: self.im + d.im * h,
        }
    }
}

/// `dK/dt = c0 σ_z + (L - θ) K`, acting on real and imaginary parts alike.
fn kernel_rhs(l: &Matrix4<f64>, theta: f64, c0: f64, k: &KernelCoords) -> KernelCoords {
    let mut re = l * k.re - k.re * theta;
    re[Z] += c0;
    KernelCoords {
        re,
        im: l * k.im - k.im * theta,
    }
}

/// One classical RK4 step of every kernel.
pub fn step_kernels(
    kernels: &[PauliOp],
    dt: f64,
    gens: &StageGenerators,
    modes: &BathModeSet,
) -> Result<KernelStep> {
    if kernels.len() != modes.len() {
        return Err(Error::validation(format!(
            "{} kernels supplied for {} bath modes",
            kernels.len(),
            modes.len()
        )));
    }
    check_stiffness(dt, modes)?;
    Ok(step_kernels_unchecked(kernels, dt, gens, modes))
}

pub(crate) fn step_kernels_unchecked(
    kernels: &[PauliOp],
    dt: f64,
    gens: &StageGenerators,
    modes: &BathModeSet,
) -> KernelStep {
    let mut next = Vec::with_capacity(kernels.len());
    let mut sums = [Vector4::zeros(), Vector4::zeros(), Vector4::zeros(), Vector4::zeros()];
    let mut sums_im = sums;
    let l0 = &gens.start.m;
    let lm = &gens.mid.m;
    let l1 = &gens.end.m;
    // ℒ_S and the source are real, so kernels that start real stay real
    let real = kernels.iter().all(|k| k.c.iter().all(|c| c.im == 0.0));
    for (k, mode) in kernels.iter().zip(&modes.modes) {
        let (theta, c0) = (mode.theta, mode.c0);
        if real {
            let rhs = |l: &Matrix4<f64>, y: &Vector4<f64>| {
                let mut d = l * y - y * theta;
                d[Z] += c0;
                d
            };
            let y0 = Vector4::new(k.c[0].re, k.c[1].re, k.c[2].re, k.c[3].re);
            let k1 = rhs(l0, &y0);
            let y1 = y0 + k1 * (0.5 * dt);
            let k2 = rhs(lm, &y1);
            let y2 = y0 + k2 * (0.5 * dt);
            let k3 = rhs(lm, &y2);
            let y3 = y0 + k3 * dt;
            let k4 = rhs(l1, &y3);
            sums[0] += y0;
            sums[1] += y1;
            sums[2] += y2;
            sums[3] += y3;
            let y = y0 + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
            next.push(PauliOp::from_real([y[0], y[1], y[2], y[3]]));
            continue;
        }
        let y0 = KernelCoords::of(k);
        let k1 = kernel_rhs(l0, theta, c0, &y0);
        let y1 = y0.axpy(0.5 * dt, &k1);
        let k2 = kernel_rhs(lm, theta, c0, &y1);
        let y2 = y0.axpy(0.5 * dt, &k2);
        let k3 = kernel_rhs(lm, theta, c0, &y2);
        let y3 = y0.axpy(dt, &k3);
        let k4 = kernel_rhs(l1, theta, c0, &y3);
        for (s, y) in [y0, y1, y2, y3].iter().enumerate() {
            sums[s] += y.re;
            sums_im[s] += y.im;
        }
        let re = y0.re + (k1.re + (k2.re + k3.re) * 2.0 + k4.re) * (dt / 6.0);
        let im = y0.im + (k1.im + (k2.im + k3.im) * 2.0 + k4.im) * (dt / 6.0);
        next.push(KernelCoords { re, im }.op());
    }
    let stage_sums = [0, 1, 2, 3].map(|s| {
        KernelCoords {
            re: sums[s],
            im: sums_im[s],
        }
        .op()
    });
    KernelStep { next, stage_sums }
}

/// State plus kernels carried between steps and segments.
#[derive(Clone, Debug, PartialEq)]
pub struct MasterState {
    pub rho: DensityVector,
    pub kernels: Vec<PauliOp>,
}

impl MasterState {
    pub fn new(rho: DensityVector, n_modes: usize) -> Self {
        Self {
            rho,
            kernels: vec![PauliOp::zero(); n_modes],
        }
    }
}

/// The four ρ-block generators `ℒ_S + D(ΣK)` used by one RK4 step.
pub(crate) fn rho_stage_generators(gens: &StageGenerators, step: &KernelStep) -> [Matrix4<f64>; 4] {
    [0, 1, 2, 3].map(|s| gens.at_stage(s).m + dissipator_generator(&step.stage_sums[s]).m)
}

pub(crate) fn rk4_vector(l: &[Matrix4<f64>; 4], r: &Vector4<f64>, dt: f64) -> Vector4<f64> {
    let k1 = l[0] * r;
    let k2 = l[1] * (r + k1 * (0.5 * dt));
    let k3 = l[2] * (r + k2 * (0.5 * dt));
    let k4 = l[3] * (r + k3 * dt);
    r + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

/// Advance `state` across one pulse segment, calling `observe(k, state)` at
/// every grid point including the first.
pub fn propagate_segment(
    state: &mut MasterState,
    pulse: &PulseSchedule,
    det: &Detuning,
    modes: &BathModeSet,
    mut observe: impl FnMut(usize, &MasterState),
) -> Result<()> {
    det.check(&pulse.grid)?;
    if state.kernels.len() != modes.len() {
        return Err(Error::validation("kernel count does not match the bath"));
    }
    let dt = pulse.grid.dt;
    check_stiffness(dt, modes)?;
    observe(0, state);
    for k in 0..pulse.n_steps() {
        let gens = StageGenerators::of_step(pulse, det, k);
        let step = step_kernels_unchecked(&state.kernels, dt, &gens, modes);
        let l = rho_stage_generators(&gens, &step);
        state.rho.r = rk4_vector(&l, &state.rho.r, dt);
        state.kernels = step.next;
        observe(k + 1, state);
    }
    if state.rho.r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density vector after propagation".into()));
    }
    Ok(())
}

/// ρ on every grid point of a single pulse, starting from zero kernels.
pub fn propagate_master(
    rho0: &DensityVector,
    pulse: &PulseSchedule,
    classical: &[f64],
    quasistatic: f64,
    modes: &BathModeSet,
) -> Result<Vec<DensityVector>> {
    let mut state = MasterState::new(*rho0, modes.len());
    let mut out = Vec::with_capacity(pulse.grid.len());
    propagate_segment(&mut state, pulse, &Detuning::new(classical, quasistatic), modes, |_, s| {
        out.push(s.rho)
    })?;
    Ok(out)
}

/// Chain of consecutive segments sharing one detuning realisation.
///
/// `classical` holds one trajectory slice per segment (or is empty).
pub fn propagate_sequence(
    state: &mut MasterState,
    segments: &[PulseSchedule],
    classical: &[Vec<f64>],
    quasistatic: f64,
    modes: &BathModeSet,
) -> Result<()> {
    if !classical.is_empty() && classical.len() != segments.len() {
        return Err(Error::validation("one classical trajectory slice per segment required"));
    }
    for (i, seg) in segments.iter().enumerate() {
        let samples: &[f64] = if classical.is_empty() { &[] } else { &classical[i] };
        propagate_segment(state, seg, &Detuning::new(samples, quasistatic), modes, |_, _| {})?;
    }
    Ok(())
}
