//! Ramsey, Hahn-echo and CPMG experiments on the master-equation simulator,
//! plus the fits that turn their curves into T2*, T2 scaling and a spectrum.
//!
//! Every shot draws its own quasistatic offset and classical trajectory from
//! the stream `(seed, shot)`; the quantum bath enters through the kernels and
//! is identical for all shots.

mod fit;

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_segment, Detuning, MasterState, PulseSchedule};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::liouville::DensityVector;
use crate::noise::{build_one_over_f, classical_trajectory_multi, sample_quasistatic, BathModeSet};

pub use fit::{
    extract_spectrum, fit_ramsey, fit_ramsey_stretched, fit_t2_scaling, t2_from_decay, RamseyFit, ScalingFit,
    SpectrumPoint, StretchedFit, T2Fit,
};

/// Envelope of a single control pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum PulseShape {
    Square,
    /// Truncated Gaussian with standard deviation `width·duration`.
    Gaussian { width: f64 },
}

/// How one gate is played: shape, duration and integration step.
///
/// π/2 and π rotations share the duration; the area sets the angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub shape: PulseShape,
    /// Gate time (s).
    pub duration: f64,
    /// Largest integration step inside the pulse (s).
    pub max_dt: f64,
}

impl GateSpec {
    pub fn square(duration: f64) -> Self {
        Self {
            shape: PulseShape::Square,
            duration,
            max_dt: duration / 40.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.max_dt > 0.0) {
            return Err(Error::validation("gate duration and max_dt must be positive"));
        }
        if let PulseShape::Gaussian { width } = self.shape {
            if !(width > 0.0) {
                return Err(Error::validation("gaussian width must be positive"));
            }
        }
        Ok(())
    }

    /// Rotation by `angle` about the equatorial axis at `phase`, starting at `t0`.
    pub fn pulse(&self, t0: f64, angle: f64, phase: f64, delta0: f64) -> Result<PulseSchedule> {
        self.validate()?;
        match self.shape {
            PulseShape::Square => PulseSchedule::square(t0, self.duration, angle, phase, self.max_dt, delta0),
            PulseShape::Gaussian { width } => {
                PulseSchedule::gaussian(t0, self.duration, angle, width, phase, self.max_dt, delta0)
            }
        }
    }

    /// Peak Rabi frequency for a given angle (rad/s).
    pub fn amplitude(&self, angle: f64) -> Result<f64> {
        Ok(self.pulse(0.0, angle, 0.0, 0.0)?.max_abs_omega())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Ramsey,
    Hahn,
    Cpmg,
}

/// One point of a pulse-sequence experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    pub n_pi: usize,
    /// Total time between the two π/2 gates, refocusing pulses included (s).
    pub t_wait: f64,
    pub gate: GateSpec,
    pub shots: usize,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        match (self.kind, self.n_pi) {
            (SequenceKind::Ramsey, 0) | (SequenceKind::Hahn, 1) => {}
            (SequenceKind::Cpmg, n) if n >= 1 => {}
            (kind, n) => {
                return Err(Error::validation(format!("{kind:?} sequence cannot have {n} π pulses")));
            }
        }
        if self.shots == 0 {
            return Err(Error::validation("at least one shot is required"));
        }
        if !(self.t_wait >= 0.0) || !self.t_wait.is_finite() {
            return Err(Error::validation("wait time must be finite and non-negative"));
        }
        if self.t_wait < self.n_pi as f64 * self.gate.duration * (1.0 - 1e-12) {
            return Err(Error::validation(format!(
                "wait time {:.3e} s is shorter than the {} refocusing pulses ({:.3e} s)",
                self.t_wait,
                self.n_pi,
                self.n_pi as f64 * self.gate.duration
            )));
        }
        Ok(())
    }

    /// Centre of the k-th π pulse (k = 1..n) relative to the start of the wait.
    pub fn pi_centre(&self, k: usize) -> f64 {
        (2 * k - 1) as f64 / (2 * self.n_pi) as f64 * self.t_wait
    }
}

/// Everything that perturbs the qubit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    /// OU ensemble for the classical detuning `δ_c ν(t)`.
    pub classical: BathModeSet,
    /// Modes of the quantum bath entering the kernels.
    pub quantum: BathModeSet,
    /// Standard deviation of the shot-constant hyperfine offset (rad/s).
    pub quasistatic_std: f64,
    /// Fixed detuning δ₀ (rad/s).
    pub delta0: f64,
}

/// Band shared by both baths in the calibrated model (Hz).
pub const CALIBRATED_BAND_HZ: (f64, f64) = (1e-3, 1e7);
/// One mode per decade of the calibrated band.
pub const CALIBRATED_MODES: usize = 11;
/// Standard deviation of the classical detuning (rad/s).
pub const CALIBRATED_CLASSICAL_STD: f64 = 2e4;
/// Quantum-bath 1/f amplitude that puts the Ramsey T2* at 23 μs
/// (see `examples/calibrate.rs`).
pub const CALIBRATED_QUANTUM_AMPLITUDE: f64 = 5.183e7;

impl NoiseModel {
    /// Hybrid classical/quantum 1/f model with the calibrated strengths.
    pub fn calibrated(delta0: f64) -> Result<Self> {
        let (lo, hi) = CALIBRATED_BAND_HZ;
        Ok(Self {
            classical: build_one_over_f(lo, hi, CALIBRATED_MODES, 1.0)?.with_total_std(CALIBRATED_CLASSICAL_STD),
            quantum: build_one_over_f(lo, hi, CALIBRATED_MODES, CALIBRATED_QUANTUM_AMPLITUDE)?,
            quasistatic_std: 0.0,
            delta0,
        })
    }

    /// The calibrated model with only the quantum bath switched on.
    pub fn quantum_only(delta0: f64) -> Result<Self> {
        Ok(Self {
            classical: BathModeSet::empty(),
            ..Self::calibrated(delta0)?
        })
    }

    pub fn noiseless(delta0: f64) -> Self {
        Self {
            classical: BathModeSet::empty(),
            quantum: BathModeSet::empty(),
            quasistatic_std: 0.0,
            delta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quasistatic_std >= 0.0) || !self.delta0.is_finite() {
            return Err(Error::validation("quasistatic std must be >= 0 and δ₀ finite"));
        }
        Ok(())
    }
}

/// Integration and sampling settings shared by all protocols.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Step used between pulses (s).
    pub free_dt: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.free_dt > 0.0) {
            return Err(Error::validation("free-evolution step must be positive"));
        }
        Ok(())
    }
}

fn idle(t0: f64, duration: f64, max_dt: f64, delta0: f64) -> Result<Option<PulseSchedule>> {
    if duration <= 1e-15 {
        return Ok(None);
    }
    PulseSchedule::idle(t0, duration, max_dt, delta0).map(Some)
}

/// Gate and idle segments of a Ramsey/Hahn/CPMG sequence, in time order.
///
/// The sequence is X/2, the wait with π(Y) pulses centred at
/// `(2k-1)/(2n)·t_wait`, then a closing −X/2 so that a fully coherent
/// state ends in |↑⟩.
pub fn sequence_segments(spec: &SequenceSpec, delta0: f64, free_dt: f64) -> Result<Vec<PulseSchedule>> {
    spec.validate()?;
    let tg = spec.gate.duration;
    let mut segs = vec![spec.gate.pulse(0.0, PI / 2.0, 0.0, delta0)?];
    let start = tg;
    let mut t = start;
    for k in 1..=spec.n_pi {
        let pulse_start = start + spec.pi_centre(k) - 0.5 * tg;
        segs.extend(idle(t, pulse_start - t, free_dt, delta0)?);
        segs.push(spec.gate.pulse(pulse_start, PI, PI / 2.0, delta0)?);
        t = pulse_start + tg;
    }
    let end = start + spec.t_wait;
    segs.extend(idle(t, end - t, free_dt, delta0)?);
    segs.push(spec.gate.pulse(end, PI / 2.0, PI, delta0)?);
    Ok(segs)
}

fn classical_slices(noise: &NoiseModel, grids: &[Vec<f64>], seed: u64, shot: usize) -> Vec<Vec<f64>> {
    if noise.classical.classical.is_empty() {
        return vec![Vec::new(); grids.len()];
    }
    let lists: Vec<&[f64]> = grids.iter().map(|g| g.as_slice()).collect();
    classical_trajectory_multi(&noise.classical, &lists, seed, shot as u64)
}

fn run_segments(
    state: &mut MasterState,
    segs: &[PulseSchedule],
    slices: &[Vec<f64>],
    offset: f64,
    modes: &BathModeSet,
) -> Result<()> {
    for (seg, samples) in segs.iter().zip(slices) {
        propagate_segment(state, seg, &Detuning::new(samples, offset), modes, |_, _| {})?;
    }
    Ok(())
}

/// Final density vector of one shot of a sequence.
pub fn simulate_shot(segs: &[PulseSchedule], noise: &NoiseModel, seed: u64, shot: usize) -> Result<DensityVector> {
    let out = simulate_capture(segs, noise, seed, shot, DensityVector::up(), &[segs.len() - 1])?;
    Ok(out[0])
}

/// One shot started from `rho0` with the bath in equilibrium, returning the
/// state after each segment index listed in `after` (increasing).
pub fn simulate_capture(
    segs: &[PulseSchedule],
    noise: &NoiseModel,
    seed: u64,
    shot: usize,
    rho0: DensityVector,
    after: &[usize],
) -> Result<Vec<DensityVector>> {
    if after.windows(2).any(|w| w[1] <= w[0]) || after.last().is_some_and(|&i| i >= segs.len()) {
        return Err(Error::validation("capture indices must increase and lie inside the sequence"));
    }
    let grids: Vec<Vec<f64>> = segs.iter().map(|s| s.grid.times()).collect();
    let slices = classical_slices(noise, &grids, seed, shot);
    let offset = sample_quasistatic(noise.quasistatic_std, seed, shot as u64);
    let mut state = MasterState::new(rho0, noise.quantum.len());
    let mut out = Vec::with_capacity(after.len());
    let mut next = after.iter().peekable();
    for (i, (seg, samples)) in segs.iter().zip(&slices).enumerate() {
        if next.peek().is_none() {
            break;
        }
        run_segments(&mut state, std::slice::from_ref(seg), std::slice::from_ref(samples), offset, &noise.quantum)
            .map_err(|e| e.in_shot(shot))?;
        if next.peek() == Some(&&i) {
            out.push(state.rho);
            next.next();
        }
    }
    Ok(out)
}

fn mean_and_stderr(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Shot-averaged spin-up probability versus free-evolution time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyCurve {
    /// Free-evolution times actually simulated (s).
    pub t: Vec<f64>,
    pub p_up: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Ramsey fringe: X/2, free evolution for each `t`, −X/2, read P(↑).
///
/// Wait times are rounded to the free-evolution grid; all readouts of one
/// shot branch from a single free evolution, so they share one noise
/// realisation just as a lab shot at fixed `t` would see one.
pub fn run_ramsey(
    gate: &GateSpec,
    shots: usize,
    noise: &NoiseModel,
    wait_times: &[f64],
    sim: &SimConfig,
) -> Result<RamseyCurve> {
    gate.validate()?;
    noise.validate()?;
    sim.validate()?;
    if shots == 0 {
        return Err(Error::validation("at least one shot is required"));
    }
    if wait_times.is_empty() || wait_times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::validation("wait times must be a non-empty list of non-negative values"));
    }
    let tg = gate.duration;
    let dt = sim.free_dt;
    let steps: Vec<usize> = wait_times.iter().map(|t| (t / dt).round() as usize).collect();
    let n_free = steps.iter().copied().max().unwrap_or(0).max(1);
    let d0 = noise.delta0;
    let opening = gate.pulse(0.0, PI / 2.0, 0.0, d0)?;
    let free_grid = TimeGrid::new(tg, dt, n_free)?;
    let free = PulseSchedule::new(free_grid, vec![0.0; free_grid.len()], 0.0, d0, crate::dynamics::Interp::Hold)?;
    let readout = gate.pulse(0.0, PI / 2.0, PI, d0)?;
    let mut branch_at: Vec<Vec<usize>> = vec![Vec::new(); n_free + 1];
    for (j, &k) in steps.iter().enumerate() {
        branch_at[k].push(j);
    }
    let branches: Vec<PulseSchedule> = steps.iter().map(|&k| readout.shifted(free_grid.t(k))).collect();

    let per_shot = (0..shots)
        .into_par_iter()
        .map(|shot| -> Result<Vec<f64>> {
            let mut grids = vec![opening.grid.times(), free_grid.times()];
            grids.extend(branches.iter().map(|b| b.grid.times()));
            let slices = classical_slices(noise, &grids, sim.seed, shot);
            let offset = sample_quasistatic(noise.quasistatic_std, sim.seed, shot as u64);
            let modes = &noise.quantum;
            let mut state = MasterState::new(DensityVector::up(), modes.len());
            let mut run = || -> Result<Vec<f64>> {
                run_segments(&mut state, std::slice::from_ref(&opening), &slices[..1], offset, modes)?;
                let mut out = vec![0.0; steps.len()];
                let mut failure = None;
                propagate_segment(&mut state, &free, &Detuning::new(&slices[1], offset), modes, |k, s| {
                    for &j in &branch_at[k] {
                        let mut b = s.clone();
                        let det = Detuning::new(&slices[2 + j], offset);
                        match propagate_segment(&mut b, &branches[j], &det, modes, |_, _| {}) {
                            Ok(()) => out[j] = b.rho.p_up(),
                            Err(e) => failure = Some(e),
                        }
                    }
                })?;
                match failure {
                    Some(e) => Err(e),
                    None => Ok(out),
                }
            };
            run().map_err(|e| e.in_shot(shot))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut curve = RamseyCurve {
        t: steps.iter().map(|&k| k as f64 * dt).collect(),
        p_up: Vec::with_capacity(steps.len()),
        stderr: Vec::with_capacity(steps.len()),
    };
    for j in 0..steps.len() {
        let (m, e) = mean_and_stderr(per_shot.iter().map(|v| v[j]));
        curve.p_up.push(m);
        curve.stderr.push(e);
    }
    Ok(curve)
}

/// Wait time where the echo amplitude of an ideal `n_pi`-pulse sequence is
/// predicted to fall to ½. The quantum bath counts four times, as it dephases
/// four times as fast as its classical twin.
pub fn predicted_echo_half_time(noise: &NoiseModel, n_pi: usize) -> Result<f64> {
    let bands: Vec<(f64, f64)> = [&noise.classical, &noise.quantum]
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.band_hz)
        .collect();
    if bands.is_empty() {
        return Err(Error::validation("no bath modes: the echo does not decay"));
    }
    let lo = bands.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let hi = bands.iter().map(|b| b.1).fold(0.0, f64::max);
    let omega = crate::filter::omega_grid(lo, hi, 40)?;
    let s = |w: f64| noise.classical.dephasing_spectrum(w) + 4.0 * noise.quantum.dephasing_spectrum(w);
    let chi = |t: f64| crate::filter::ideal_cpmg_chi(s, n_pi, t, &omega);
    let (mut a, mut b): (f64, f64) = (1e-9, 10.0);
    if chi(b) < 2f64.ln() {
        return Err(Error::validation("echo decays too slowly to place wait times"));
    }
    for _ in 0..80 {
        let m = (a * b).sqrt();
        if chi(m) < 2f64.ln() {
            a = m;
        } else {
            b = m;
        }
    }
    Ok((a * b).sqrt())
}

/// Normalised echo amplitude at one `(n_π, t_wait)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpmgPoint {
    pub n_pi: usize,
    pub t_wait: f64,
    pub amplitude: f64,
    pub stderr: f64,
}

fn echo_shots(spec: &SequenceSpec, noise: &NoiseModel, sim: &SimConfig) -> Result<Vec<f64>> {
    let segs = sequence_segments(spec, noise.delta0, sim.free_dt)?;
    (0..spec.shots)
        .into_par_iter()
        .map(|shot| simulate_shot(&segs, noise, sim.seed, shot).map(|rho| rho.r[3]))
        .collect()
}

/// Echo amplitudes for several wait times at fixed `n_π`.
///
/// The amplitude is the shot-averaged `⟨σ_z⟩` after the closing −X/2,
/// divided by the same quantity for the shortest admissible wait
/// `t_wait = n_π·t_gate` (back-to-back π pulses, the `t_wait → 0` limit).
pub fn run_cpmg_curve(
    n_pi: usize,
    gate: &GateSpec,
    shots: usize,
    noise: &NoiseModel,
    wait_times: &[f64],
    sim: &SimConfig,
) -> Result<Vec<CpmgPoint>> {
    noise.validate()?;
    sim.validate()?;
    let kind = match n_pi {
        0 => return Err(Error::validation("CPMG needs at least one π pulse")),
        1 => SequenceKind::Hahn,
        _ => SequenceKind::Cpmg,
    };
    let spec = |t_wait| SequenceSpec {
        kind,
        n_pi,
        t_wait,
        gate: *gate,
        shots,
    };
    for &t in wait_times {
        spec(t).validate()?;
    }
    let reference = echo_shots(&spec(n_pi as f64 * gate.duration), noise, sim)?;
    let (z0, _) = mean_and_stderr(reference.iter().copied());
    if !(z0.abs() > 1e-12) {
        return Err(Error::NonFinite("zero-wait echo amplitude vanishes".into()));
    }
    wait_times
        .iter()
        .map(|&t| {
            let z = echo_shots(&spec(t), noise, sim)?;
            let (m, e) = mean_and_stderr(z.iter().copied());
            Ok(CpmgPoint {
                n_pi,
                t_wait: t,
                amplitude: m / z0,
                stderr: e / z0.abs(),
            })
        })
        .collect()
}

/// Normalised echo amplitude of a single Hahn/CPMG point.
pub fn run_cpmg(spec: &SequenceSpec, noise: &NoiseModel, sim: &SimConfig) -> Result<CpmgPoint> {
    spec.validate()?;
    if spec.kind == SequenceKind::Ramsey {
        return Err(Error::validation("run_cpmg needs a Hahn or CPMG sequence"));
    }
    Ok(run_cpmg_curve(spec.n_pi, &spec.gate, spec.shots, noise, &[spec.t_wait], sim)?[0])
}
