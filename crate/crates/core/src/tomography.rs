//! Channel estimation, H+S error budgets and the germ-repeat probe for
//! non-Markovian model violation.
//!
//! Elementary generators follow `H_P[ρ] = -i[P, ρ]` and `S_P[ρ] = PρP - ρ`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix4, Matrix6, Vector4, Vector6};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{su2_step, PulseSchedule};
use crate::error::{Error, Result};
use crate::liouville::{pauli, ptm_exp, ptm_log, ptm_of_map, ptm_of_unitary, DensityVector, Mat2c, Ptm, C64};
use crate::noise::stream_rng;
use crate::protocols::{simulate_capture, GateSpec, NoiseModel, SimConfig};

/// Linear-inversion PTM of a black-box channel.
///
/// The inputs are the maximally mixed state and the six Pauli eigenstates,
/// so the channel only ever sees physical states; the mixed state doubles
/// as the superposition check `C(½(ρ₊+ρ₋)) = ½(C(ρ₊)+C(ρ₋))`.
pub fn process_tomography(mut channel: impl FnMut(&DensityVector) -> Result<DensityVector>) -> Result<Ptm> {
    let mixed = channel(&DensityVector::maximally_mixed())?.r;
    let mut m = Matrix4::zeros();
    m.set_column(0, &mixed);
    for j in 1..4 {
        let mut plus = Vector4::new(1.0, 0.0, 0.0, 0.0);
        plus[j] = 1.0;
        let mut minus = plus;
        minus[j] = -1.0;
        let a = channel(&DensityVector::new(plus))?.r;
        let b = channel(&DensityVector::new(minus))?.r;
        let defect = ((a + b) * 0.5 - mixed).amax();
        if !defect.is_finite() {
            return Err(Error::NonFinite("channel output".into()));
        }
        if defect > 1e-8 {
            return Err(Error::Nonlinear(defect));
        }
        m.set_column(j, &((a - b) * 0.5));
    }
    Ok(Ptm::new(m))
}

/// `𝕃 = log(G_est G_ideal⁻¹)`.
pub fn error_generator(g_est: &Ptm, g_ideal: &Ptm) -> Result<Ptm> {
    let inv = g_ideal
        .m
        .try_inverse()
        .ok_or_else(|| Error::validation("ideal gate PTM is singular"))?;
    ptm_log(&Ptm::new(g_est.m * inv))
}

/// PTMs of `H_X, H_Y, H_Z` followed by `S_X, S_Y, S_Z`.
pub fn hs_basis() -> &'static [Ptm; 6] {
    static BASIS: OnceLock<[Ptm; 6]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let minus_i = C64::new(0.0, -1.0);
        [0, 1, 2, 3, 4, 5].map(|b| {
            let p = pauli(b % 3 + 1);
            if b < 3 {
                ptm_of_map(|rho: &Mat2c| (p * rho - rho * p) * minus_i)
            } else {
                ptm_of_map(|rho: &Mat2c| p * rho * p - rho)
            }
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliTriple {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "Z")]
    pub z: f64,
}

impl PauliTriple {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub h: PauliTriple,
    pub s: PauliTriple,
    /// Frobenius norm of what the H+S span cannot express.
    pub residual_norm: f64,
}

impl ErrorBudget {
    pub fn reconstruct(&self) -> Ptm {
        let basis = hs_basis();
        let coeffs = [self.h.as_array(), self.s.as_array()].concat();
        Ptm::new(coeffs.iter().zip(basis).map(|(c, b)| b.m * *c).sum())
    }
}

/// Least-squares projection of `𝕃` onto the span of the H and S generators.
pub fn project_hs(l: &Ptm) -> ErrorBudget {
    let basis = hs_basis();
    let gram = Matrix6::from_fn(|i, j| basis[i].m.dot(&basis[j].m));
    let rhs = Vector6::from_fn(|i, _| basis[i].m.dot(&l.m));
    let c = gram.lu().solve(&rhs).expect("H+S generators are linearly independent");
    let mut budget = ErrorBudget {
        h: PauliTriple::new(c[0], c[1], c[2]),
        s: PauliTriple::new(c[3], c[4], c[5]),
        residual_norm: 0.0,
    };
    budget.residual_norm = (l.m - budget.reconstruct().m).norm();
    budget
}

/// `Σ s_P + Σ h_P²`.
pub fn entanglement_infidelity(b: &ErrorBudget) -> f64 {
    b.s.as_array().iter().sum::<f64>() + b.h.as_array().iter().map(|h| h * h).sum::<f64>()
}

/// `(d F_ent + 1)/(d + 1)`.
pub fn avg_gate_fidelity(f_ent: f64, d: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&f_ent) || d < 2 {
        return Err(Error::validation(format!("F_ent = {f_ent} (d = {d}) is out of range")));
    }
    let d = d as f64;
    Ok((d * f_ent + 1.0) / (d + 1.0))
}

/// `(2(log L_max − log L) − k)/(2√k)`, with the denominator as printed in
/// the source; a `χ²_k`-normalised score would use `√(2k)`.
pub fn model_violation(logl_max: f64, logl: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("model violation needs k ≥ 1"));
    }
    let k = k as f64;
    Ok((2.0 * (logl_max - logl) - k) / (2.0 * k.sqrt()))
}

/// `π/2` gates of the probe gate set; `I` idles for one gate time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateLabel {
    #[serde(rename = "I/2")]
    I,
    #[serde(rename = "X/2")]
    X,
    #[serde(rename = "Y/2")]
    Y,
}

impl GateLabel {
    pub const ALL: [GateLabel; 3] = [GateLabel::I, GateLabel::X, GateLabel::Y];

    pub fn name(&self) -> &'static str {
        match self {
            GateLabel::I => "I/2",
            GateLabel::X => "X/2",
            GateLabel::Y => "Y/2",
        }
    }

    pub fn ideal(&self) -> Ptm {
        let (wx, wy) = match self {
            GateLabel::I => (0.0, 0.0),
            GateLabel::X => (1.0, 0.0),
            GateLabel::Y => (0.0, 1.0),
        };
        ptm_of_unitary(&su2_step(wx, wy, 0.0, PI / 2.0)).expect("SU(2) step is unitary")
    }

    /// Drive segment starting at `t0`. Gates are driven on resonance; the
    /// idle uses the coarser free-evolution step.
    pub fn pulse(&self, gate: &GateSpec, t0: f64, free_dt: f64) -> Result<PulseSchedule> {
        match self {
            GateLabel::I => PulseSchedule::idle(t0, gate.duration, free_dt.min(gate.duration), 0.0),
            GateLabel::X => gate.pulse(t0, PI / 2.0, 0.0, 0.0),
            GateLabel::Y => gate.pulse(t0, PI / 2.0, PI / 2.0, 0.0),
        }
    }
}

/// Shot-averaged PTM of one gate under the noise model.
///
/// Every input state sees the same noise draws, so the averaged map is
/// exactly linear.
pub fn gate_channel(label: GateLabel, gate: &GateSpec, noise: &NoiseModel, shots: usize, sim: &SimConfig) -> Result<Ptm> {
    gate.validate()?;
    noise.validate()?;
    sim.validate()?;
    if shots == 0 {
        return Err(Error::validation("at least one shot is required"));
    }
    let segs = [label.pulse(gate, 0.0, sim.free_dt)?];
    process_tomography(|rho| {
        let outs: Vec<Vector4<f64>> = (0..shots)
            .into_par_iter()
            .map(|shot| simulate_capture(&segs, noise, sim.seed, shot, *rho, &[0]).map(|v| v[0].r))
            .collect::<Result<_>>()?;
        Ok(DensityVector::new(outs.iter().sum::<Vector4<f64>>() / shots as f64))
    })
}

/// H+S breakdown of one simulated gate, in the serialised report form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub gate: GateLabel,
    pub h: PauliTriple,
    pub s: PauliTriple,
    pub residual: f64,
    #[serde(rename = "F_inf")]
    pub f_inf: f64,
    #[serde(rename = "F_avg")]
    pub f_avg: f64,
}

pub fn gate_report(label: GateLabel, g_est: &Ptm) -> Result<GateReport> {
    let budget = project_hs(&error_generator(g_est, &label.ideal())?);
    let f_inf = entanglement_infidelity(&budget);
    Ok(GateReport {
        gate: label,
        h: budget.h,
        s: budget.s,
        residual: budget.residual_norm,
        f_inf,
        f_avg: avg_gate_fidelity((1.0 - f_inf).clamp(0.0, 1.0), 2)?,
    })
}

/// Where the probe outcomes come from.
#[derive(Clone, Debug)]
pub enum ProbeSource<'a> {
    /// Full noise model: the bath keeps its memory across the sequence.
    Simulated { noise: &'a NoiseModel, gate: &'a GateSpec, sim: &'a SimConfig },
    /// A fixed channel per germ, applied independently at each repetition.
    Markovian { germ_channel: Ptm },
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub germ: Vec<GateLabel>,
    /// Germ repetition counts, strictly increasing.
    pub reps: Vec<usize>,
    /// Shots per (preparation, measurement, reps) combination.
    pub shots: usize,
    pub seed: u64,
}

/// N_σ after including every repetition count up to `reps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub reps: usize,
    pub two_delta_logl: f64,
    pub k: usize,
    /// `None` when the block has no degrees of freedom left.
    pub n_sigma: Option<f64>,
}

/// Counts of the `+` outcome for the 6 preparations × 3 measurement axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub reps: Vec<usize>,
    /// `counts[r][prep][axis]`.
    pub counts: Vec<[[u64; 3]; 6]>,
    pub shots: usize,
}

const PREPS: [(usize, f64); 6] = [(1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0), (3, 1.0), (3, -1.0)];
/// Stream offset separating readout draws from the noise streams.
const READOUT_CHANNEL: u64 = 1 << 20;

fn prep_state(p: usize) -> DensityVector {
    let mut r = Vector4::new(1.0, 0.0, 0.0, 0.0);
    r[PREPS[p].0] = PREPS[p].1;
    DensityVector::new(r)
}

fn validate_probe(config: &ProbeConfig) -> Result<()> {
    if config.germ.is_empty() {
        return Err(Error::validation("germ must contain at least one gate"));
    }
    if config.reps.is_empty() || config.reps[0] == 0 || config.reps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("reps must be positive and strictly increasing"));
    }
    if config.shots < 1000 {
        return Err(Error::validation(format!("probe needs at least 1000 shots, got {}", config.shots)));
    }
    Ok(())
}

/// Simulated or synthetic outcome counts for the probe sequences.
///
/// Each shot draws its own noise realisation and one outcome per
/// measurement axis. Within a shot the readouts after different repetition
/// counts branch from one run, as in the Ramsey fringe.
pub fn probe_data(config: &ProbeConfig, source: &ProbeSource) -> Result<ProbeData> {
    validate_probe(config)?;
    let n_rep = config.reps.len();
    let r_max = *config.reps.last().unwrap();
    let per_shot: Vec<Vec<[[bool; 3]; 6]>> = match source {
        ProbeSource::Simulated { noise, gate, sim } => {
            gate.validate()?;
            noise.validate()?;
            sim.validate()?;
            let glen = config.germ.len();
            let mut segs = Vec::with_capacity(glen * r_max);
            let mut t = 0.0;
            for _ in 0..r_max {
                for label in &config.germ {
                    segs.push(label.pulse(gate, t, sim.free_dt)?);
                    t += gate.duration;
                }
            }
            let after: Vec<usize> = config.reps.iter().map(|r| r * glen - 1).collect();
            (0..config.shots)
                .into_par_iter()
                .map(|shot| {
                    let mut outcome = vec![[[false; 3]; 6]; n_rep];
                    for p in 0..6 {
                        let traj = shot * 6 + p;
                        let states = simulate_capture(&segs, noise, config.seed, traj, prep_state(p), &after)?;
                        let mut rng = stream_rng(config.seed, traj as u64, READOUT_CHANNEL);
                        for (r, st) in states.iter().enumerate() {
                            for a in 0..3 {
                                outcome[r][p][a] = rng.random::<f64>() < 0.5 * (1.0 + st.r[a + 1]);
                            }
                        }
                    }
                    Ok(outcome)
                })
                .collect::<Result<_>>()?
        }
        ProbeSource::Markovian { germ_channel } => {
            let probs = predict(&germ_channel.m, &config.reps);
            (0..config.shots)
                .map(|shot| {
                    let mut rng = stream_rng(config.seed, shot as u64, READOUT_CHANNEL);
                    (0..n_rep)
                        .map(|r| {
                            let mut o = [[false; 3]; 6];
                            for p in 0..6 {
                                for a in 0..3 {
                                    o[p][a] = rng.random::<f64>() < probs[r][p][a];
                                }
                            }
                            o
                        })
                        .collect()
                })
                .collect()
        }
    };
    let mut counts = vec![[[0u64; 3]; 6]; n_rep];
    for shot in &per_shot {
        for (r, o) in shot.iter().enumerate() {
            for p in 0..6 {
                for a in 0..3 {
                    counts[r][p][a] += o[p][a] as u64;
                }
            }
        }
    }
    Ok(ProbeData {
        reps: config.reps.clone(),
        counts,
        shots: config.shots,
    })
}

/// `+` probabilities for every repetition count under a Markovian germ.
fn predict(g: &Matrix4<f64>, reps: &[usize]) -> Vec<[[f64; 3]; 6]> {
    let mut out = Vec::with_capacity(reps.len());
    let mut power = Matrix4::identity();
    let mut done = 0;
    for &r in reps {
        for _ in done..r {
            power = g * power;
        }
        done = r;
        let mut block = [[0.0; 3]; 6];
        for (p, row) in block.iter_mut().enumerate() {
            let out = power * prep_state(p).r;
            for a in 0..3 {
                row[a] = (0.5 * (1.0 + out[a + 1])).clamp(0.0, 1.0);
            }
        }
        out.push(block);
    }
    out
}

fn log_lik(n: u64, shots: usize, p: f64) -> f64 {
    let eps = 0.5 / shots as f64;
    let p = p.clamp(eps, 1.0 - eps);
    let n = n as f64;
    n * p.ln() + (shots as f64 - n) * (1.0 - p).ln()
}

fn ptm_from_params(x: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m[(0, 0)] = 1.0;
    for i in 0..3 {
        for j in 0..4 {
            m[(i + 1, j)] = x[4 * i + j];
        }
    }
    m
}

const MARKOV_PARAMS: usize = 12;

/// `2(log L_max − log L)` of the first `blocks` repetition counts under a
/// Markovian germ channel.
pub fn two_delta_logl(data: &ProbeData, g: &Ptm, blocks: usize) -> f64 {
    deviance_residuals(data, &g.m, blocks).iter().map(|r| r * r).sum()
}

fn deviance_residuals(data: &ProbeData, g: &Matrix4<f64>, blocks: usize) -> Vec<f64> {
    let shots = data.shots;
    let probs = predict(g, &data.reps[..blocks]);
    let mut out = Vec::with_capacity(18 * blocks);
    for (r, block) in probs.iter().enumerate() {
        for p in 0..6 {
            for a in 0..3 {
                let n = data.counts[r][p][a];
                let f = n as f64 / shots as f64;
                let d = 2.0 * (log_lik(n, shots, f) - log_lik(n, shots, block[p][a]));
                out.push((f - block[p][a]).signum() * d.max(0.0).sqrt());
            }
        }
    }
    out
}

/// Best trace-preserving Markovian germ channel for the first `blocks`
/// repetition counts, fitted by maximum likelihood.
///
/// Least squares runs on signed deviance residuals, whose sum of squares
/// is `2(log L_max − log L)`, so the least-squares optimum is the MLE.
pub fn fit_markovian(data: &ProbeData, blocks: usize, start: Option<&Ptm>) -> Result<(Ptm, f64)> {
    if blocks == 0 || blocks > data.reps.len() {
        return Err(Error::validation(format!("{blocks} blocks requested from {} available", data.reps.len())));
    }
    let mut starts: Vec<Vec<f64>> = (0..blocks).filter_map(|b| block_root(data, b)).collect();
    if starts.is_empty() {
        starts.push(linear_inversion(data));
    }
    if let Some(g) = start {
        starts.push((0..MARKOV_PARAMS).map(|i| g.m[(i / 4 + 1, i % 4)]).collect());
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for x0 in starts {
        let fit = fisher_scoring(data, blocks, x0);
        if best.as_ref().is_none_or(|b| fit.1 < b.1) {
            best = Some(fit);
        }
    }
    let (x, two_delta) = best.expect("at least one start");
    Ok((Ptm::new(ptm_from_params(&x)), two_delta))
}

/// Damped Fisher scoring on the binomial likelihood.
///
/// Outcome frequencies of exactly 0 or 1 put the likelihood maximum on the
/// boundary, where deviance residuals behave like a square root; scoring
/// works on the likelihood itself and avoids that.
fn fisher_scoring(data: &ProbeData, blocks: usize, mut x: Vec<f64>) -> (Vec<f64>, f64) {
    let shots = data.shots as f64;
    let eps = 0.5 / shots;
    let flat = |x: &[f64]| -> Vec<f64> {
        predict(&ptm_from_params(x), &data.reps[..blocks])
            .iter()
            .flat_map(|b| b.iter().flatten().copied().collect::<Vec<_>>())
            .collect()
    };
    let counts: Vec<f64> = data.counts[..blocks].iter().flat_map(|b| b.iter().flatten().map(|&n| n as f64)).collect();
    let cost = |x: &[f64]| two_delta_logl(data, &Ptm::new(ptm_from_params(x)), blocks);
    let mut c = cost(&x);
    let mut mu = 1e-3;
    let mut stalls = 0;
    for iteration in 0..500 {
        let p = flat(&x);
        let mut jac = DMatrix::zeros(p.len(), MARKOV_PARAMS);
        for j in 0..MARKOV_PARAMS {
            let h = 1e-6;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[j] += h;
            down[j] -= h;
            let (pu, pd) = (flat(&up), flat(&down));
            for i in 0..p.len() {
                jac[(i, j)] = (pu[i] - pd[i]) / (2.0 * h);
            }
        }
        let mut grad = DVector::zeros(MARKOV_PARAMS);
        let mut fisher = DMatrix::zeros(MARKOV_PARAMS, MARKOV_PARAMS);
        for i in 0..p.len() {
            let pc = p[i].clamp(eps, 1.0 - eps);
            let w = shots / (pc * (1.0 - pc));
            let row = jac.row(i).transpose();
            // past the clip the likelihood is flat
            if pc == p[i] {
                grad += &row * ((counts[i] - shots * pc) / (pc * (1.0 - pc)));
            }
            fisher += &row * row.transpose() * w;
        }
        // expected decrease of 2ΔlogL from a full scoring step
        let decrement = fisher.clone().lu().solve(&grad).map(|d| d.dot(&grad)).unwrap_or(f64::INFINITY);
        if decrement < 1e-9 {
            log::debug!("Markovian fit settled after {iteration} iterations at 2ΔlogL = {c:.4}");
            return (x, c);
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut a = fisher.clone();
            for d in 0..MARKOV_PARAMS {
                a[(d, d)] += mu * fisher[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&grad) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let ct = cost(&trial);
            if ct.is_finite() && ct <= c {
                stalls = if c - ct < 1e-12 * c { stalls + 1 } else { 0 };
                x = trial;
                c = ct;
                mu = (mu / 3.0).max(1e-12);
                improved = stalls < 5;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            log::debug!("Markovian fit stalled after {iteration} iterations at 2ΔlogL = {c:.4}");
            return (x, c);
        }
    }
    log::debug!("Markovian fit stopped at the iteration limit with 2ΔlogL = {c:.4}");
    (x, c)
}

/// Germ estimate from block `b`: linear inversion of `G^r`, shrunk slightly
/// towards the maximally mixed output, then the principal `r`-th root.
fn block_root(data: &ProbeData, b: usize) -> Option<Vec<f64>> {
    let freq = |p: usize, a: usize| data.counts[b][p][a] as f64 / data.shots as f64;
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a + 1, 0)] = 0.98 * (0..6).map(|p| 2.0 * freq(p, a) - 1.0).sum::<f64>() / 6.0;
        for j in 0..3 {
            m[(a + 1, j + 1)] = 0.98 * (freq(2 * j, a) - freq(2 * j + 1, a));
        }
    }
    let log = ptm_log(&Ptm::new(m)).ok()?;
    let g = ptm_exp(&Ptm::new(log.m / data.reps[b] as f64));
    let x: Vec<f64> = (0..MARKOV_PARAMS).map(|i| g.m[(i / 4 + 1, i % 4)]).collect();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Germ estimate from the shortest sequence, pulled slightly towards the
/// maximally mixed output so every predicted probability starts inside
/// (0, 1), where the likelihood has a gradient.
fn linear_inversion(data: &ProbeData) -> Vec<f64> {
    let freq = |p: usize, a: usize| data.counts[0][p][a] as f64 / data.shots as f64;
    let root = 1.0 / data.reps[0] as f64;
    let mut x0 = vec![0.0; MARKOV_PARAMS];
    for a in 0..3 {
        x0[4 * a] = 0.98 * (0..6).map(|p| 2.0 * freq(p, a) - 1.0).sum::<f64>() / 6.0;
        for j in 0..3 {
            let e = freq(2 * j, a) - freq(2 * j + 1, a);
            x0[4 * a + j + 1] = 0.98 * e.signum() * e.abs().powf(root);
        }
    }
    x0
}

/// N_σ per cumulative repetition block.
///
/// `k` counts outcome frequencies strictly inside (0, 1) minus the 12
/// Markovian parameters: a frequency of exactly 0 or 1 is clipped to
/// `1/(2·shots)` from the edge and carries no χ² degree of freedom.
pub fn probe_statistics(data: &ProbeData) -> Result<Vec<ProbePoint>> {
    let degenerate = data
        .counts
        .iter()
        .flat_map(|b| b.iter().flatten())
        .filter(|&&n| n == 0 || n == data.shots as u64)
        .count();
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate outcome frequencies clipped to [1/(2N), 1 - 1/(2N)]");
    }
    let mut out = Vec::with_capacity(data.reps.len());
    let mut informative = 0;
    let mut previous = None;
    for blocks in 1..=data.reps.len() {
        informative += data.counts[blocks - 1]
            .iter()
            .flatten()
            .filter(|&&n| n > 0 && n < data.shots as u64)
            .count();
        let (g, two_delta) = fit_markovian(data, blocks, previous.as_ref())?;
        previous = Some(g);
        let k = informative.saturating_sub(MARKOV_PARAMS);
        let n_sigma = if k > 0 { Some(model_violation(two_delta / 2.0, 0.0, k)?) } else { None };
        out.push(ProbePoint {
            reps: data.reps[blocks - 1],
            two_delta_logl: two_delta,
            k,
            n_sigma,
        });
    }
    Ok(out)
}

pub fn germ_repeat_probe(config: &ProbeConfig, source: &ProbeSource) -> Result<Vec<ProbePoint>> {
    probe_statistics(&probe_data(config, source)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{ptm_exp, X, Y, Z};
    use crate::noise::{build_one_over_f, BathModeSet};

    fn gen(b: usize) -> Matrix4<f64> {
        hs_basis()[b].m
    }

    #[test]
    fn basis_matches_explicit_actions() {
        // H_Z generates dr/dt = 2 ẑ × r and S_Z halves nothing on z but
        // damps x, y at rate 2
        let hz = gen(2);
        assert_eq!(hz[(X, Y)], -2.0);
        assert_eq!(hz[(Y, X)], 2.0);
        let sz = gen(5);
        assert_eq!(sz[(X, X)], -2.0);
        assert_eq!(sz[(Y, Y)], -2.0);
        assert_eq!(sz[(Z, Z)], 0.0);
        assert_eq!(sz[(0, 0)], 0.0);
    }

    #[test]
    fn tomography_of_known_channels() {
        let g = process_tomography(|r| Ok(*r)).unwrap();
        assert_eq!(g.m, Matrix4::identity());
        let x = GateLabel::X.ideal();
        let est = process_tomography(|r| Ok(x.apply(r))).unwrap();
        assert!((est.m - x.m).amax() < 1e-12);
        let err = process_tomography(|r| Ok(DensityVector::new(r.r.map(|v| v * v)))).unwrap_err();
        assert!(matches!(err, Error::Nonlinear(_)));
    }

    #[test]
    fn injection_round_trips() {
        let ideal = GateLabel::Y.ideal();
        for (b, c) in [(5, 1e-4), (0, 1e-3), (1, -7e-4), (3, 3e-4)] {
            let g = Ptm::new(ptm_exp(&Ptm::new(gen(b) * c)).m * ideal.m);
            let budget = project_hs(&error_generator(&g, &ideal).unwrap());
            let got = [budget.h.as_array(), budget.s.as_array()].concat();
            for (i, v) in got.iter().enumerate() {
                let want = if i == b { c } else { 0.0 };
                assert!((v - want).abs() < 1e-9, "{b} {i} {v}");
            }
            assert!(budget.residual_norm < 1e-9);
        }
        assert_eq!(error_generator(&ideal, &ideal).unwrap().m.amax(), 0.0);
    }

    #[test]
    fn off_span_component_goes_to_the_residual() {
        // correlated X-Y stochastic generator: ρ ↦ XρY + YρX - ½{XY + YX, ρ}
        let (x, y) = (pauli(X), pauli(Y));
        let c = ptm_of_map(|rho: &Mat2c| x * rho * y + y * rho * x - (x * y + y * x) * rho * C64::new(0.5, 0.0) - rho * (x * y + y * x) * C64::new(0.5, 0.0));
        assert!(c.m.amax() > 0.1);
        let l = Ptm::new(c.m * 0.01 + gen(1) * 0.3);
        let b = project_hs(&l);
        assert!((b.h.y - 0.3).abs() < 1e-12);
        assert!(b.s.as_array().iter().chain(&[b.h.x, b.h.z]).all(|v| v.abs() < 1e-12));
        assert!((b.residual_norm - (c.m * 0.01).norm()).abs() < 1e-12);
    }

    #[test]
    fn budget_formula_matches_process_infidelity() {
        let ideal = GateLabel::X.ideal();
        let coeffs = [4e-4, -1e-3, 2e-4, 1e-3, 5e-4, 1e-3];
        let l: Matrix4<f64> = coeffs.iter().enumerate().map(|(b, c)| gen(b) * *c).sum();
        let g = ptm_exp(&Ptm::new(l)).m * ideal.m;
        // process infidelity from the PTM overlap: F_ent = Tr(G_idealᵀ G)/4
        let direct = 1.0 - (ideal.m.transpose() * g).trace() / 4.0;
        let budget = project_hs(&error_generator(&Ptm::new(g), &ideal).unwrap());
        let eq = entanglement_infidelity(&budget);
        // the formula is first order; the gap is second order in the coefficients
        assert!((eq - direct).abs() < 1e-5, "{eq} {direct}");
        assert!((eq - direct).abs() > 1e-8);
    }

    #[test]
    fn fidelity_formulas() {
        assert_eq!(avg_gate_fidelity(1.0, 2).unwrap(), 1.0);
        assert!((avg_gate_fidelity(0.999, 2).unwrap() - 2.998 / 3.0).abs() < 1e-15);
        assert!(avg_gate_fidelity(1.2, 2).is_err());
        let b = ErrorBudget {
            h: PauliTriple::new(0.0, 0.0, 1e-2),
            s: PauliTriple::new(0.0, 0.0, 0.0),
            residual_norm: 0.0,
        };
        assert!((entanglement_infidelity(&b) - 1e-4).abs() < 1e-18);
        assert_eq!(model_violation(50.0, 0.0, 100).unwrap(), 0.0);
        assert_eq!(model_violation(70.0, 0.0, 100).unwrap(), 2.0);
        assert!(model_violation(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn noisy_gate_channel_is_physical() {
        let modes = build_one_over_f(1e3, 1e7, 4, 3e8).unwrap();
        let noise = NoiseModel {
            classical: modes.with_total_std(2e5),
            quantum: modes,
            quasistatic_std: 0.0,
            delta0: 0.0,
        };
        let sim = SimConfig { free_dt: 1e-9, seed: 3 };
        let g = gate_channel(GateLabel::X, &GateSpec::square(15e-9), &noise, 16, &sim).unwrap();
        assert!(g.is_trace_preserving(1e-12));
        assert!(g.max_singular_value() <= 1.0 + 1e-9);
        let r = gate_report(GateLabel::X, &g).unwrap();
        assert!(r.f_inf > 0.0 && r.f_avg < 1.0);
        let ideal = gate_channel(GateLabel::I, &GateSpec::square(15e-9), &NoiseModel::noiseless(0.0), 1, &sim).unwrap();
        assert!((ideal.m - Matrix4::identity()).amax() < 1e-12);
        let _ = BathModeSet::empty();
    }

    #[test]
    fn markovian_null_stays_flat() {
        let l = gen(5) * 2e-3 + gen(3) * 5e-4 + gen(2) * 1e-3;
        let germ_channel = ptm_exp(&Ptm::new(l));
        let config = ProbeConfig {
            germ: vec![GateLabel::I],
            reps: vec![1, 2, 4, 8, 16, 32, 64],
            shots: 2000,
            seed: 11,
        };
        let pts = germ_repeat_probe(&config, &ProbeSource::Markovian { germ_channel }).unwrap();
        for p in &pts {
            let n = p.n_sigma.unwrap_or(0.0);
            assert!(n <= 2.0, "{pts:?}");
        }
    }

    #[test]
    fn probe_validation() {
        let bad = ProbeConfig {
            germ: vec![GateLabel::I],
            reps: vec![2, 2],
            shots: 2000,
            seed: 0,
        };
        let src = ProbeSource::Markovian { germ_channel: Ptm::identity() };
        assert!(germ_repeat_probe(&bad, &src).unwrap_err().is_validation());
        let few = ProbeConfig { reps: vec![1, 2], shots: 10, ..bad };
        assert!(germ_repeat_probe(&few, &src).unwrap_err().is_validation());
    }

    #[test]
    fn noiseless_probe_shows_no_violation() {
        let config = ProbeConfig {
            germ: vec![GateLabel::X],
            reps: vec![1, 2, 3, 4],
            shots: 1000,
            seed: 5,
        };
        let noise = NoiseModel::noiseless(0.0);
        let gate = GateSpec::square(15e-9);
        let sim = SimConfig { free_dt: 1e-9, seed: 5 };
        let pts = germ_repeat_probe(&config, &ProbeSource::Simulated { noise: &noise, gate: &gate, sim: &sim }).unwrap();
        for p in &pts {
            if let Some(n) = p.n_sigma {
                assert!(n.abs() < 3.0, "{pts:?}");
            }
        }
    }
}
