//! Krotov pulse optimisation on the extended-space propagator.
//!
//! The figure of merit is `F = (Tr(Qᵀ G_ρρ(T))/4)²`. The target `Q` lives in
//! the ρ→ρ block only, so the costate `B(t)` (which obeys `dB/dt = -BΛ`,
//! `B(T) = Q†`) keeps zero kernel and constant columns in its ρ rows and the
//! trace bracket of the update reduces exactly to
//! `Tr(B_ρρ ∂ℒ_S/∂Ω G_ρρ)`. The ρ block of Λ carries the kernels of the
//! forward run, so the reduced pair is the extended pair restricted to ρ.
//!
//! Pulses are piecewise constant: step `k` of the grid uses sample `k`.

use nalgebra::{DMatrix, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    check_stiffness, rho_stage_generators, step_kernels_unchecked, Detuning, Generator, Interp, MasterState,
    PulseSchedule, StageGenerators,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::liouville::{dissipator_generator, hamiltonian_ptm, PauliOp, Ptm};
use crate::noise::BathModeSet;

/// `(Tr(Qᵀ G)/4)²`.
pub fn process_fidelity(g: &Ptm, q: &Ptm) -> f64 {
    let overlap = (q.m.transpose() * g.m).trace() / 4.0;
    overlap * overlap
}

/// [`process_fidelity`] of the ρ block of an extended propagator.
pub fn process_fidelity_extended(g: &DMatrix<f64>, q: &Ptm) -> Result<f64> {
    let n = g.nrows();
    if n != g.ncols() || n < 5 || !(n - 5).is_multiple_of(8) {
        return Err(Error::validation(format!(
            "{}×{} is not an extended propagator shape",
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(process_fidelity(&Ptm::new(g.fixed_view::<4, 4>(0, 0).into_owned()), q))
}

/// Step-size function `1/λ(t)` of the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum StepSchedule {
    /// `factor · Ω_init(t)`.
    ConstantScaled { factor: f64 },
    /// Progressive schedule keyed to the current infidelity.
    ///
    /// Above `bins[0]` the step is `gaussian_factor · Ω_init(t)`. Below
    /// `bins[1]` it is `base·Ω₀(sin ωt + 1)/(2/(F_inf·10⁵) + 1)` with `Ω₀` the
    /// peak initial amplitude. In between the sinusoidal shape is used with
    /// an amplitude interpolated geometrically between the two regimes.
    SinusoidalProgressive {
        base: f64,
        omega: f64,
        gaussian_factor: f64,
        bins: [f64; 2],
    },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            StepSchedule::ConstantScaled { factor } => *factor >= 0.0 && factor.is_finite(),
            StepSchedule::SinusoidalProgressive {
                base,
                omega,
                gaussian_factor,
                bins,
            } => {
                *base >= 0.0
                    && *gaussian_factor >= 0.0
                    && omega.is_finite()
                    && bins[0] > bins[1]
                    && bins[1] > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid step schedule {self:?}")))
        }
    }

    /// Step size at offset `t` into the gate.
    pub fn step(&self, t: f64, omega_init: f64, omega_peak: f64, f_inf: f64) -> f64 {
        match *self {
            StepSchedule::ConstantScaled { factor } => factor * omega_init.abs(),
            StepSchedule::SinusoidalProgressive {
                base,
                omega,
                gaussian_factor,
                bins,
            } => {
                let sinus = |f: f64| base * omega_peak * ((omega * t).sin() + 1.0) / (2.0 / (f * 1e5) + 1.0);
                if f_inf > bins[0] {
                    gaussian_factor * omega_init.abs()
                } else if f_inf >= bins[1] {
                    // geometric blend of the peak step sizes at the two bin edges
                    let hi = gaussian_factor * omega_peak;
                    let lo = base * omega_peak * 2.0 / (2.0 / (bins[1] * 1e5) + 1.0);
                    let x = (f_inf / bins[1]).ln() / (bins[0] / bins[1]).ln();
                    let amp = lo * (hi / lo).powf(x);
                    amp * ((omega * t).sin() + 1.0) / 2.0
                } else {
                    sinus(f_inf)
                }
            }
        }
    }
}

/// Piecewise-constant Gaussian with the rotation angle fixed exactly.
///
/// Samples are taken at step midpoints; the last grid sample is unused.
pub fn gaussian_hold(duration: f64, n_steps: usize, angle: f64, width: f64, phase: f64, delta0: f64) -> Result<PulseSchedule> {
    if !(duration > 0.0) || !(width > 0.0) || n_steps == 0 {
        return Err(Error::validation("gaussian pulse needs positive duration, width and steps"));
    }
    let dt = duration / n_steps as f64;
    let grid = TimeGrid::new(0.0, dt, n_steps)?;
    let s = width * duration;
    let mut omega: Vec<f64> = (0..=n_steps)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt - 0.5 * duration;
            (-t * t / (2.0 * s * s)).exp()
        })
        .collect();
    omega[n_steps] = 0.0;
    let area: f64 = omega[..n_steps].iter().sum::<f64>() * dt;
    for w in omega.iter_mut() {
        *w *= angle / area;
    }
    PulseSchedule::new(grid, omega, phase, delta0, Interp::Hold)
}

/// ρ-block propagator on the grid together with the stage generators used.
#[derive(Clone, Debug)]
pub struct ForwardRun {
    /// `G_ρρ(t_k)`, one per grid point.
    pub g: Vec<Matrix4<f64>>,
    /// `ℒ_S + D(ΣK)` at the four RK4 stages of every step.
    pub stages: Vec<[Matrix4<f64>; 4]>,
    /// `ℒ_S` at the start, midpoint and end of every step.
    pub system: Vec<[Matrix4<f64>; 3]>,
}

impl ForwardRun {
    fn with_capacity(pulse: &PulseSchedule) -> Self {
        let mut run = Self {
            g: Vec::with_capacity(pulse.grid.len()),
            stages: Vec::with_capacity(pulse.n_steps()),
            system: Vec::with_capacity(pulse.n_steps()),
        };
        run.g.push(Matrix4::identity());
        run
    }

    fn push(&mut self, g: Matrix4<f64>, stages: [Matrix4<f64>; 4], gens: &StageGenerators) {
        self.g.push(g);
        self.stages.push(stages);
        self.system.push([gens.start.m, gens.mid.m, gens.end.m]);
    }
}

fn rk4_left(l: &[Matrix4<f64>; 4], g: &Matrix4<f64>, dt: f64) -> Matrix4<f64> {
    let k1 = l[0] * g;
    let k2 = l[1] * (g + k1 * (0.5 * dt));
    let k3 = l[2] * (g + k2 * (0.5 * dt));
    let k4 = l[3] * (g + k3 * dt);
    g + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

/// Mirror of [`rk4_left`] for a row costate moving backwards one step.
///
/// With the stages taken in reverse order this is the exact adjoint of the
/// forward step, so `B(t_k) G(t_k)` is conserved step by step.
fn rk4_right_back(l: &[Matrix4<f64>; 4], b: &Matrix4<f64>, dt: f64) -> Matrix4<f64> {
    let k1 = b * l[3];
    let k2 = (b + k1 * (0.5 * dt)) * l[2];
    let k3 = (b + k2 * (0.5 * dt)) * l[1];
    let k4 = (b + k3 * dt) * l[0];
    b + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

fn check_pulse(pulse: &PulseSchedule, modes: &BathModeSet) -> Result<()> {
    if pulse.interp != Interp::Hold {
        return Err(Error::validation("Krotov updates need a piecewise-constant (hold) pulse"));
    }
    check_stiffness(pulse.grid.dt, modes)
}

/// Forward pass for a fixed pulse.
pub fn forward(pulse: &PulseSchedule, modes: &BathModeSet) -> Result<ForwardRun> {
    check_pulse(pulse, modes)?;
    let dt = pulse.grid.dt;
    let det = Detuning::none();
    let mut kernels = vec![PauliOp::zero(); modes.len()];
    let mut g = Matrix4::identity();
    let mut run = ForwardRun::with_capacity(pulse);
    for k in 0..pulse.n_steps() {
        let gens = StageGenerators::of_step(pulse, &det, k);
        let step = step_kernels_unchecked(&kernels, dt, &gens, modes);
        let l = rho_stage_generators(&gens, &step);
        g = rk4_left(&l, &g, dt);
        kernels = step.next;
        run.push(g, l, &gens);
    }
    Ok(run)
}

/// Costate `B(t_k)` for every grid point from `B(T) = Qᵀ`, reduced to ρ.
pub fn backward_propagate(stages: &[[Matrix4<f64>; 4]], dt: f64, q: &Ptm) -> Vec<Matrix4<f64>> {
    let mut out = vec![Matrix4::zeros(); stages.len() + 1];
    let mut b = q.m.transpose();
    out[stages.len()] = b;
    for k in (0..stages.len()).rev() {
        b = rk4_right_back(&stages[k], &b, dt);
        out[k] = b;
    }
    out
}

/// Dense extended counterpart of [`backward_propagate`].
///
/// `generators[k]` holds Λ at the four RK4 stages of step `k`; `q_ext` is
/// the target embedded in the extended space.
pub fn backward_propagate_extended(generators: &[[Generator; 4]], dt: f64, q_ext: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    if generators.is_empty() {
        return Err(Error::validation("no generator samples supplied"));
    }
    let dim = generators[0][0].dim();
    if q_ext.nrows() != dim || q_ext.ncols() != dim {
        return Err(Error::validation(format!("target is {}×{}, expected {dim}×{dim}", q_ext.nrows(), q_ext.ncols())));
    }
    let mut out = vec![DMatrix::zeros(dim, dim); generators.len() + 1];
    let mut b = q_ext.transpose();
    out[generators.len()] = b.clone();
    for k in (0..generators.len()).rev() {
        let l = &generators[k];
        let k1 = l[3].left_apply(&b);
        let k2 = l[2].left_apply(&(&b + &k1 * (0.5 * dt)));
        let k3 = l[1].left_apply(&(&b + &k2 * (0.5 * dt)));
        let k4 = l[0].left_apply(&(&b + &k3 * dt));
        b += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
        out[k] = b.clone();
    }
    Ok(out)
}

/// Target embedded in the extended space: `Q` on the ρ block, zero elsewhere.
pub fn embed_target(q: &Ptm, n_modes: usize) -> DMatrix<f64> {
    let dim = 4 + 8 * n_modes + 1;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (4, 4)).copy_from(&q.m);
    m
}

/// `Tr(B ∂ℒ_S/∂Ω G)` for a drive at `phase`.
pub fn bracket(b: &Matrix4<f64>, g: &Matrix4<f64>, phase: f64) -> f64 {
    let d = hamiltonian_ptm(phase.cos(), phase.sin(), 0.0).m;
    (b * d * g).trace()
}

/// Which Ω-dependence enters the update bracket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gradient {
    /// Only the explicit dependence of `ℒ_S` in the ρ block.
    Explicit,
    /// Explicit term plus the response of the kernels to Ω, carried by a
    /// kernel costate. This is the full first-order variation of `F`.
    #[default]
    WithKernels,
}

/// `D_a = ∂D(K)/∂K_a` for the four real Pauli coordinates of a kernel.
fn dissipator_basis() -> [Matrix4<f64>; 4] {
    [0, 1, 2, 3].map(|a| {
        let mut e = [0.0; 4];
        e[a] = 1.0;
        dissipator_generator(&PauliOp::from_real(e)).m
    })
}

fn kernel_source(b: &Matrix4<f64>, g: &Matrix4<f64>, basis: &[Matrix4<f64>; 4]) -> Vector4<f64> {
    Vector4::from_fn(|a, _| (b * basis[a] * g).trace())
}

/// Kernel costates `μ_i(t_k)` for the objective `Tr(Qᵀ G_ρρ(T))`.
///
/// `dμ_i/dt = -(ℒ_S - θ_i)ᵀ μ_i - s`, `μ_i(T) = 0`, with
/// `s_a = Tr(B D_a G)`. The source is taken on the grid and averaged for the
/// midpoint stages.
pub fn kernel_costate(run: &ForwardRun, b: &[Matrix4<f64>], modes: &BathModeSet, dt: f64) -> Vec<Vec<Vector4<f64>>> {
    let n = run.stages.len();
    let basis = dissipator_basis();
    let src: Vec<Vector4<f64>> = (0..=n).map(|k| kernel_source(&b[k], &run.g[k], &basis)).collect();
    let mut out = vec![vec![Vector4::zeros(); modes.len()]; n + 1];
    for (i, mode) in modes.modes.iter().enumerate() {
        let mut mu = Vector4::zeros();
        for k in (0..n).rev() {
            let [l0, lm, l1] = &run.system[k];
            let smid = (src[k] + src[k + 1]) * 0.5;
            // reversed time: dμ/dτ = (ℒ - θ)ᵀ μ + s
            let f = |l: &Matrix4<f64>, s: &Vector4<f64>, y: &Vector4<f64>| l.tr_mul(y) - y * mode.theta + s;
            let k1 = f(l1, &src[k + 1], &mu);
            let k2 = f(lm, &smid, &(mu + k1 * (0.5 * dt)));
            let k3 = f(lm, &smid, &(mu + k2 * (0.5 * dt)));
            let k4 = f(l0, &src[k], &(mu + k3 * dt));
            mu += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
            out[k][i] = mu;
        }
    }
    out
}

/// Costates of one iteration.
#[derive(Clone, Debug)]
pub struct Costate {
    pub b: Vec<Matrix4<f64>>,
    /// Kernel costates per grid point; empty for [`Gradient::Explicit`].
    pub mu: Vec<Vec<Vector4<f64>>>,
}

impl Costate {
    pub fn compute(run: &ForwardRun, q: &Ptm, modes: &BathModeSet, dt: f64, gradient: Gradient) -> Self {
        let b = backward_propagate(&run.stages, dt, q);
        let mu = match gradient {
            Gradient::Explicit => Vec::new(),
            Gradient::WithKernels => kernel_costate(run, &b, modes, dt),
        };
        Self { b, mu }
    }

    /// Update bracket at grid point `k` given the current forward state.
    pub fn bracket(&self, k: usize, g: &Matrix4<f64>, kernels: &[PauliOp], phase: f64) -> f64 {
        let mut br = bracket(&self.b[k], g, phase);
        if let Some(mu) = self.mu.get(k) {
            let d = hamiltonian_ptm(phase.cos(), phase.sin(), 0.0).m;
            for (m, kern) in mu.iter().zip(kernels) {
                let kv = Vector4::new(kern.c[0].re, kern.c[1].re, kern.c[2].re, kern.c[3].re);
                br += m.dot(&(d * kv));
            }
        }
        br
    }
}

/// Everything the sequential update needs from the previous iteration.
pub struct IterationState<'a> {
    pub costate: &'a Costate,
    /// Infidelity that selects the step schedule regime.
    pub f_inf: f64,
    pub initial: &'a PulseSchedule,
}

/// One sequential Krotov sweep: at each step the bracket uses the new
/// forward propagator, the pulse sample is updated by
/// `ΔΩ_k = step_k · bracket_k / 2`, and the step is then taken with it.
/// Returns the new pulse and its forward run.
pub fn krotov_step(
    pulse: &PulseSchedule,
    modes: &BathModeSet,
    schedule: &StepSchedule,
    state: &IterationState,
) -> Result<(PulseSchedule, ForwardRun)> {
    check_pulse(pulse, modes)?;
    if state.costate.b.len() != pulse.grid.len() {
        return Err(Error::validation("costate does not cover the pulse grid"));
    }
    let dt = pulse.grid.dt;
    let det = Detuning::none();
    let peak = state.initial.max_abs_omega();
    let mut next = pulse.clone();
    let mut kernels = vec![PauliOp::zero(); modes.len()];
    let mut g = Matrix4::identity();
    let mut run = ForwardRun::with_capacity(pulse);
    for k in 0..pulse.n_steps() {
        let t = pulse.grid.t(k) - pulse.grid.t0;
        let s = schedule.step(t, state.initial.omega[k], peak, state.f_inf);
        let br = state.costate.bracket(k, &g, &kernels, pulse.phase);
        if !br.is_finite() {
            return Err(Error::NonFinite(format!("Krotov bracket at step {k}")));
        }
        next.omega[k] += 0.5 * s * br;
        let gens = StageGenerators::of_step(&next, &det, k);
        let step = step_kernels_unchecked(&kernels, dt, &gens, modes);
        let l = rho_stage_generators(&gens, &step);
        g = rk4_left(&l, &g, dt);
        kernels = step.next;
        run.push(g, l, &gens);
    }
    Ok((next, run))
}

#[derive(Clone, Debug)]
pub struct OptimizationConfig {
    pub target: Ptm,
    pub initial_pulse: PulseSchedule,
    pub schedule: StepSchedule,
    pub max_iters: usize,
    pub stop_infidelity: f64,
    /// Quantum bath seen during optimisation (classical noise is off).
    pub modes: BathModeSet,
    pub gradient: Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Stagnated,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    /// `F_inf` of the initial pulse followed by one entry per iteration.
    pub history: Vec<f64>,
    /// Pulse with the lowest infidelity seen.
    pub final_pulse: PulseSchedule,
    pub final_propagator: Ptm,
    pub best_infidelity: f64,
    pub stop: StopReason,
}

const STAGNATION_WINDOW: usize = 20;
const STAGNATION_TOLERANCE: f64 = 1e-4;
const DIVERGENCE_FACTOR: f64 = 10.0;

pub fn optimize(config: &OptimizationConfig) -> Result<OptimizationResult> {
    config.schedule.validate()?;
    if config.max_iters == 0 {
        return Err(Error::validation("max_iters must be at least 1"));
    }
    if !(config.stop_infidelity > 0.0 && config.stop_infidelity < 1.0) {
        return Err(Error::validation("stop_infidelity must lie in (0, 1)"));
    }
    let q = &config.target;
    let dt = config.initial_pulse.grid.dt;
    let modes = &config.modes;
    let mut pulse = config.initial_pulse.clone();
    let mut run = forward(&pulse, modes)?;
    let infidelity = |run: &ForwardRun| 1.0 - process_fidelity(&Ptm::new(*run.g.last().unwrap()), q);
    let mut f_inf = infidelity(&run);
    let mut history = vec![f_inf];
    let mut best = (f_inf, pulse.clone(), *run.g.last().unwrap());
    let mut stop = StopReason::MaxIterations;
    for iter in 0..config.max_iters {
        if f_inf <= config.stop_infidelity {
            stop = StopReason::Converged;
            break;
        }
        let costate = Costate::compute(&run, q, modes, dt, config.gradient);
        let state = IterationState {
            costate: &costate,
            f_inf,
            initial: &config.initial_pulse,
        };
        let (next, next_run) = krotov_step(&pulse, modes, &config.schedule, &state)?;
        pulse = next;
        run = next_run;
        f_inf = infidelity(&run);
        if !f_inf.is_finite() {
            return Err(Error::NonFinite(format!("infidelity at iteration {}", iter + 1)));
        }
        history.push(f_inf);
        log::debug!("krotov iteration {}: F_inf = {f_inf:.6e}", iter + 1);
        if f_inf < best.0 {
            best = (f_inf, pulse.clone(), *run.g.last().unwrap());
        }
        if f_inf > DIVERGENCE_FACTOR * best.0 {
            stop = StopReason::Diverged;
            break;
        }
        let n = history.len();
        if n > STAGNATION_WINDOW {
            let old = history[n - 1 - STAGNATION_WINDOW];
            if ((old - f_inf) / old).abs() < STAGNATION_TOLERANCE {
                stop = StopReason::Stagnated;
                break;
            }
        }
    }
    if best.0 <= config.stop_infidelity {
        stop = StopReason::Converged;
    }
    Ok(OptimizationResult {
        history,
        final_pulse: best.1,
        final_propagator: Ptm::new(best.2),
        best_infidelity: best.0,
        stop,
    })
}

/// Extended-space generators at the RK4 stages of a forward run, for the
/// dense cross-check of the reduced costate.
pub fn extended_stage_generators(pulse: &PulseSchedule, modes: &BathModeSet) -> Result<Vec<[Generator; 4]>> {
    check_pulse(pulse, modes)?;
    let dt = pulse.grid.dt;
    let det = Detuning::none();
    let mut state = MasterState::new(crate::liouville::DensityVector::up(), modes.len());
    let mut out = Vec::with_capacity(pulse.n_steps());
    for k in 0..pulse.n_steps() {
        let gens = StageGenerators::of_step(pulse, &det, k);
        let step = step_kernels_unchecked(&state.kernels, dt, &gens, modes);
        let systems = [gens.start, gens.mid, gens.mid, gens.end];
        out.push([0, 1, 2, 3].map(|s| Generator::new(&systems[s], &[step.stage_sums[s]], modes)));
        state.kernels = step.next;
    }
    Ok(out)
}
