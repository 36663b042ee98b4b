//! Noiseless propagators as products of per-step SU(2) exponentials.

use super::{Detuning, PulseSchedule};
use crate::liouville::{pauli, Mat2c, C64, X, Y, Z};

/// `exp(-i dt ½ w·σ)` in closed form.
pub fn su2_step(wx: f64, wy: f64, wz: f64, dt: f64) -> Mat2c {
    let norm = (wx * wx + wy * wy + wz * wz).sqrt();
    if norm == 0.0 {
        return Mat2c::identity();
    }
    let half = 0.5 * norm * dt;
    let (s, c) = half.sin_cos();
    let n = pauli(X) * C64::new(wx / norm, 0.0) + pauli(Y) * C64::new(wy / norm, 0.0) + pauli(Z) * C64::new(wz / norm, 0.0);
    Mat2c::identity() * C64::new(c, 0.0) - n * C64::new(0.0, s)
}

/// Nearest unitary (polar factor) of a 2×2 matrix.
pub fn polar_unitary(u: &Mat2c) -> Mat2c {
    let svd = u.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(w), Some(vt)) => w * vt,
        _ => *u,
    }
}

const RENORMALISE_EVERY: usize = 1000;

fn advance(pulse: &PulseSchedule, det: &Detuning, start: Mat2c, out: &mut Vec<Mat2c>, counter: &mut usize) {
    let mut u = start;
    let dt = pulse.grid.dt;
    for k in 0..pulse.n_steps() {
        let (wx, wy) = pulse.drive(k, 0.5);
        let wz = pulse.delta0 + det.at(k, 0.5);
        u = su2_step(wx, wy, wz, dt) * u;
        *counter += 1;
        if (*counter).is_multiple_of(RENORMALISE_EVERY) {
            u = polar_unitary(&u);
        }
        out.push(u);
    }
}

/// `U(t_k)` on every grid point, with H sampled at step midpoints.
pub fn unitary_propagator(pulse: &PulseSchedule) -> Vec<Mat2c> {
    let mut out = vec![Mat2c::identity()];
    let mut counter = 0;
    advance(pulse, &Detuning::none(), Mat2c::identity(), &mut out, &mut counter);
    out
}

/// Propagator across consecutive segments; returns times and `U(t)` with the
/// shared segment boundaries listed once.
pub fn unitary_sequence(segments: &[PulseSchedule]) -> (Vec<f64>, Vec<Mat2c>) {
    let mut times = Vec::new();
    let mut us = Vec::new();
    let mut counter = 0;
    let mut current = Mat2c::identity();
    for (i, seg) in segments.iter().enumerate() {
        let mut local = Vec::with_capacity(seg.grid.len());
        advance(seg, &Detuning::none(), current, &mut local, &mut counter);
        if i == 0 {
            times.push(seg.grid.t0);
            us.push(current);
        }
        for (k, u) in local.iter().enumerate() {
            times.push(seg.grid.t(k + 1));
            us.push(*u);
        }
        if let Some(last) = local.last() {
            current = *last;
        }
    }
    (times, us)
}
