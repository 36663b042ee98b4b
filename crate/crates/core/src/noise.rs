//! 1/f noise as a sum of Lorentzian modes.
//!
//! Each mode is an exponential correlation `c0·e^{-θ|τ|}`. The quantum bath
//! uses `(θ_i, c0_i)` directly in the kernel equations; the classical twin is
//! an Ornstein-Uhlenbeck process `dx = -γx dt + σ dW` per mode, weighted and
//! summed into a detuning trajectory in rad/s.
//!
//! Spectra are one-sided in ordinary frequency:
//! `S(f) = Σ 4 c0 θ / (θ² + (2πf)²)` in (rad/s)²/Hz, so `∫₀^∞ S df = Σ c0`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Parameters of one Ornstein-Uhlenbeck mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// Mean-reversion rate (1/s).
    pub gamma: f64,
    /// Volatility (rad·s^-3/2).
    pub sigma: f64,
    /// Dimensionless multiplier from the 1/γ rate distribution.
    pub weight: f64,
}

impl OuParams {
    pub fn new(gamma: f64, sigma: f64, weight: f64) -> Result<Self> {
        if !(gamma > 0.0) || !(sigma >= 0.0) || !weight.is_finite() {
            return Err(Error::validation(format!(
                "OU parameters need gamma > 0, sigma >= 0 (got {gamma}, {sigma}, {weight})"
            )));
        }
        Ok(Self { gamma, sigma, weight })
    }

    /// Stationary variance of the unweighted process, σ²/(2γ).
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.gamma)
    }

    /// Stationary variance of `weight · x`.
    pub fn weighted_variance(&self) -> f64 {
        self.weight * self.weight * self.stationary_variance()
    }
}

/// One exponential correlation component `c0·e^{-θ|τ|}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathMode {
    /// Decay rate (1/s).
    pub theta: f64,
    /// Zero-lag correlation ((rad/s)²).
    pub c0: f64,
}

/// Mode list plus the matching classical OU twins.
#[derive(Clone, Debug, PartialEq)]
pub struct BathModeSet {
    pub modes: Vec<BathMode>,
    pub classical: Vec<OuParams>,
    pub band_hz: (f64, f64),
    /// Target `A` in `S(f) = A/f`, (rad/s)².
    pub amplitude: f64,
}

impl BathModeSet {
    pub fn empty() -> Self {
        Self {
            modes: Vec::new(),
            classical: Vec::new(),
            band_hz: (0.0, 0.0),
            amplitude: 0.0,
        }
    }

    /// Mode set from OU twins, with `θ = γ` and `c0 = w²σ²/(2γ)`.
    pub fn from_classical(classical: Vec<OuParams>, band_hz: (f64, f64), amplitude: f64) -> Result<Self> {
        let mut sorted = classical;
        sorted.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
        for w in sorted.windows(2) {
            if w[1].gamma <= w[0].gamma {
                return Err(Error::validation("bath mode rates must be distinct"));
            }
        }
        let modes = sorted
            .iter()
            .map(|p| BathMode {
                theta: p.gamma,
                c0: p.weighted_variance(),
            })
            .collect();
        Ok(Self {
            modes,
            classical: sorted,
            band_hz,
            amplitude,
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn theta_max(&self) -> f64 {
        self.modes.iter().map(|m| m.theta).fold(0.0, f64::max)
    }

    /// `C(0) = Σ c0_i`.
    pub fn total_variance(&self) -> f64 {
        self.modes.iter().map(|m| m.c0).sum()
    }

    pub fn correlation(&self, tau: f64) -> f64 {
        correlation(self, tau)
    }

    /// One-sided spectrum in (rad/s)²/Hz.
    pub fn spectrum_hz(&self, f: f64) -> f64 {
        let w = 2.0 * PI * f;
        self.modes
            .iter()
            .map(|m| 4.0 * m.c0 * m.theta / (m.theta * m.theta + w * w))
            .sum()
    }

    /// Half-line cosine transform `∫₀^∞ C(τ) cos(ωτ) dτ`, the spectrum for
    /// which `χ = (1/π)∫ S F dω` equals the Gaussian phase-decay exponent.
    pub fn dephasing_spectrum(&self, omega: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.c0 * m.theta / (m.theta * m.theta + omega * omega))
            .sum()
    }

    /// Copy with every variance multiplied by `factor` (σ scales by √factor).
    pub fn scaled(&self, factor: f64) -> Self {
        let root = factor.sqrt();
        Self {
            modes: self
                .modes
                .iter()
                .map(|m| BathMode {
                    theta: m.theta,
                    c0: m.c0 * factor,
                })
                .collect(),
            classical: self
                .classical
                .iter()
                .map(|p| OuParams {
                    sigma: p.sigma * root,
                    ..*p
                })
                .collect(),
            band_hz: self.band_hz,
            amplitude: self.amplitude * factor,
        }
    }

    /// Copy rescaled so that the summed trajectory has standard deviation `std`.
    pub fn with_total_std(&self, std: f64) -> Self {
        let var = self.total_variance();
        if var <= 0.0 {
            return self.clone();
        }
        self.scaled(std * std / var)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let modes: Vec<_> = self
            .classical
            .iter()
            .map(|p| {
                serde_json::json!({
                    "gamma_hz": p.gamma / (2.0 * PI),
                    "sigma": p.sigma,
                    "weight": p.weight,
                })
            })
            .collect();
        serde_json::json!({
            "modes": modes,
            "band_hz": [self.band_hz.0, self.band_hz.1],
            "amplitude": self.amplitude,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ModeJson {
            gamma_hz: f64,
            sigma: f64,
            weight: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct SetJson {
            modes: Vec<ModeJson>,
            band_hz: [f64; 2],
            amplitude: f64,
        }
        let parsed: SetJson = serde_json::from_value(value.clone())
            .map_err(|e| Error::validation(format!("mode set JSON: {e}")))?;
        let classical = parsed
            .modes
            .iter()
            .map(|m| OuParams::new(2.0 * PI * m.gamma_hz, m.sigma, m.weight))
            .collect::<Result<Vec<_>>>()?;
        Self::from_classical(classical, (parsed.band_hz[0], parsed.band_hz[1]), parsed.amplitude)
    }
}

/// Log-spaced Lorentzian modes approximating `S(f) = A/f` on `[f_min, f_max]`.
///
/// Rates span `[2πf_min, 2πf_max]` inclusive, weights fall as `1/γ`, and every
/// mode carries the same variance. The common variance is fixed so that the
/// summed spectrum equals `A/f` exactly at the geometric band centre.
pub fn build_one_over_f(f_min: f64, f_max: f64, n_modes: usize, amplitude: f64) -> Result<BathModeSet> {
    if !(f_min > 0.0) || !(f_max > f_min) || !f_max.is_finite() {
        return Err(Error::validation(format!(
            "1/f band needs 0 < f_min < f_max, got [{f_min}, {f_max}]"
        )));
    }
    if n_modes == 0 {
        return Err(Error::validation("1/f construction needs at least one mode"));
    }
    if !(amplitude >= 0.0) {
        return Err(Error::validation(format!("1/f amplitude must be >= 0, got {amplitude}")));
    }
    if f_max / f_min < 10.0 && n_modes > 4 {
        log::warn!(
            "{n_modes} modes over less than a decade [{f_min}, {f_max}] Hz over-resolve the band"
        );
    }
    let (g_lo, g_hi) = (2.0 * PI * f_min, 2.0 * PI * f_max);
    let gammas: Vec<f64> = if n_modes == 1 {
        vec![(g_lo * g_hi).sqrt()]
    } else {
        let ratio = (g_hi / g_lo).ln() / (n_modes - 1) as f64;
        (0..n_modes).map(|i| g_lo * (ratio * i as f64).exp()).collect()
    };
    let f_c = (f_min * f_max).sqrt();
    let w_c = 2.0 * PI * f_c;
    let unit: f64 = gammas.iter().map(|g| 4.0 * g / (g * g + w_c * w_c)).sum();
    let variance = amplitude / f_c / unit;
    let classical = gammas
        .iter()
        .map(|&g| {
            let weight = gammas[0] / g;
            let sigma = (2.0 * g * variance).sqrt() / weight;
            OuParams::new(g, sigma, weight)
        })
        .collect::<Result<Vec<_>>>()?;
    BathModeSet::from_classical(classical, (f_min, f_max), amplitude)
}

/// `C(τ) = Σ c0_i e^{-θ_i|τ|}`.
pub fn correlation(set: &BathModeSet, tau: f64) -> f64 {
    set.modes.iter().map(|m| m.c0 * (-m.theta * tau.abs()).exp()).sum()
}

/// Dedicated random streams.
///
/// Every (trajectory, channel) pair reads its own region of a ChaCha stream
/// keyed by the root seed, so draws do not depend on execution order.
pub fn stream_rng(seed: u64, trajectory: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory);
    rng.set_word_pos((channel as u128) << 40);
    rng
}

/// Channel reserved for the quasistatic offset; OU mode `i` uses `i + 1`.
pub const QUASISTATIC_CHANNEL: u64 = 0;

/// Exact OU discretisation at arbitrary increasing times, starting from the
/// stationary distribution.
pub fn sample_ou_at<R: Rng>(params: &OuParams, times: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    if times.is_empty() {
        return out;
    }
    let g = params.gamma;
    let std0 = params.stationary_variance().sqrt();
    let mut x = std0 * rng.sample::<f64, _>(StandardNormal);
    out.push(x);
    let mut cache = (f64::NAN, 0.0, 0.0);
    for w in times.windows(2) {
        let h = w[1] - w[0];
        if h != cache.0 {
            let decay = (-g * h).exp();
            let kick = params.sigma * ((-(-2.0 * g * h).exp_m1()) / (2.0 * g)).sqrt();
            cache = (h, decay, kick);
        }
        x = x * cache.1 + cache.2 * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
    }
    out
}

/// Single OU trajectory on a uniform grid.
pub fn sample_ou(params: &OuParams, grid: &TimeGrid, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0, 1);
    sample_ou_at(params, &grid.times(), &mut rng)
}

/// Weighted sum of the classical twins, in rad/s, at the given times.
pub fn classical_trajectory_at(set: &BathModeSet, times: &[f64], seed: u64, trajectory: u64) -> Vec<f64> {
    let mut total = vec![0.0; times.len()];
    for (i, p) in set.classical.iter().enumerate() {
        if p.sigma == 0.0 {
            continue;
        }
        let mut rng = stream_rng(seed, trajectory, i as u64 + 1);
        for (acc, x) in total.iter_mut().zip(sample_ou_at(p, times, &mut rng)) {
            *acc += p.weight * x;
        }
    }
    total
}

/// One classical realisation evaluated on several time lists at once.
///
/// The lists may interleave (a readout pulse branching off a free-evolution
/// grid, say); they are merged into a single increasing set of times so that
/// every list sees the same underlying trajectory.
pub fn classical_trajectory_multi(set: &BathModeSet, lists: &[&[f64]], seed: u64, trajectory: u64) -> Vec<Vec<f64>> {
    let mut tagged: Vec<(f64, usize, usize)> = Vec::with_capacity(lists.iter().map(|l| l.len()).sum());
    for (li, list) in lists.iter().enumerate() {
        tagged.extend(list.iter().enumerate().map(|(k, &t)| (t, li, k)));
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut unique: Vec<f64> = Vec::with_capacity(tagged.len());
    let mut slot = Vec::with_capacity(tagged.len());
    for &(t, _, _) in &tagged {
        match unique.last() {
            Some(&last) if t - last <= MERGE_TOLERANCE * t.abs().max(1e-9) => {}
            _ => unique.push(t),
        }
        slot.push(unique.len() - 1);
    }
    let values = classical_trajectory_at(set, &unique, seed, trajectory);
    let mut out: Vec<Vec<f64>> = lists.iter().map(|l| vec![0.0; l.len()]).collect();
    for (&(_, li, k), &u) in tagged.iter().zip(&slot) {
        out[li][k] = values[u];
    }
    out
}

/// Relative gap below which two sample times count as the same instant.
const MERGE_TOLERANCE: f64 = 1e-12;

pub fn classical_trajectory(set: &BathModeSet, grid: &TimeGrid, seed: u64) -> Vec<f64> {
    classical_trajectory_at(set, &grid.times(), seed, 0)
}

/// Shot-constant hyperfine offset drawn from N(0, σ_q²).
pub fn sample_quasistatic(sigma_q: f64, seed: u64, shot: u64) -> f64 {
    if sigma_q == 0.0 {
        return 0.0;
    }
    let mut rng = stream_rng(seed, shot, QUASISTATIC_CHANNEL);
    sigma_q * rng.sample::<f64, _>(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn spectrum_matches_target_at_centre_and_band() {
        let a = 3.7e7;
        let set = build_one_over_f(1e3, 1e7, 6, a).unwrap();
        let fc = (1e3f64 * 1e7).sqrt();
        assert_relative_eq!(set.spectrum_hz(fc), a / fc, max_relative = 1e-12);
        for i in 0..=80 {
            let f = 1e3 * 10f64.powf(4.0 * i as f64 / 80.0);
            let ratio = set.spectrum_hz(f) * f / a;
            assert!((0.8..=1.2).contains(&ratio), "f={f}: ratio {ratio}");
        }
        let fs: Vec<f64> = (0..=40).map(|i| 1e4 * 10f64.powf(2.0 * i as f64 / 40.0)).collect();
        let lx: Vec<f64> = fs.iter().map(|f| f.ln()).collect();
        let ly: Vec<f64> = fs.iter().map(|&f| set.spectrum_hz(f).ln()).collect();
        assert!((slope(&lx, &ly) + 1.0).abs() < 0.15);
    }

    #[test]
    fn single_mode_is_lorentzian() {
        let set = build_one_over_f(10.0, 1e3, 1, 1.0).unwrap();
        let g = set.modes[0].theta;
        let s0 = set.spectrum_hz(0.0);
        for f in [1.0, 50.0, 300.0, 5e3] {
            let w = 2.0 * PI * f;
            assert_relative_eq!(set.spectrum_hz(f) / s0, g * g / (g * g + w * w), max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_noise() {
        let set = build_one_over_f(1e3, 1e7, 6, 0.0).unwrap();
        assert!(set.classical.iter().all(|p| p.sigma == 0.0));
        assert_eq!(set.total_variance(), 0.0);
        let grid = TimeGrid::new(0.0, 1e-6, 100).unwrap();
        assert!(classical_trajectory(&set, &grid, 5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_band_is_rejected() {
        assert!(build_one_over_f(0.0, 1e3, 6, 1.0).unwrap_err().is_validation());
        assert!(build_one_over_f(1e4, 1e3, 6, 1.0).unwrap_err().is_validation());
    }

    #[test]
    fn mode_set_invariants() {
        let set = build_one_over_f(1e2, 1e6, 6, 5.0).unwrap();
        for w in set.modes.windows(2) {
            assert!(w[1].theta > w[0].theta);
        }
        for (m, p) in set.modes.iter().zip(&set.classical) {
            assert_eq!(m.theta, p.gamma);
            assert_relative_eq!(m.c0, p.weight * p.weight * p.sigma * p.sigma / (2.0 * p.gamma), max_relative = 1e-14);
            assert!(m.c0 > 0.0);
        }
        assert_relative_eq!(set.correlation(0.0), set.total_variance(), max_relative = 1e-14);
    }

    #[test]
    fn correlation_limits() {
        let set = build_one_over_f(1e2, 1e6, 6, 5.0).unwrap();
        let gmin = set.modes[0].theta;
        assert!(set.correlation(50.0 / gmin) < (-50f64).exp() * set.correlation(0.0));
        let one = BathModeSet::from_classical(vec![OuParams::new(3.0, 2.0, 1.0).unwrap()], (0.1, 1.0), 0.0).unwrap();
        assert_relative_eq!(one.correlation(1.0 / 3.0), one.correlation(0.0) / std::f64::consts::E, max_relative = 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let set = build_one_over_f(1e3, 1e7, 6, 2.0).unwrap();
        let back = BathModeSet::from_json(&set.to_json()).unwrap();
        for (a, b) in set.modes.iter().zip(&back.modes) {
            assert_relative_eq!(a.theta, b.theta, max_relative = 1e-14);
            assert_relative_eq!(a.c0, b.c0, max_relative = 1e-14);
        }
        let mut bad = set.to_json();
        bad["modes"][0]["gama_hz"] = serde_json::json!(1.0);
        assert!(BathModeSet::from_json(&bad).is_err());
    }

    #[test]
    fn zero_sigma_trajectory_is_zero() {
        let p = OuParams::new(10.0, 0.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 50).unwrap();
        assert!(sample_ou(&p, &grid, 1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = OuParams::new(10.0, 3.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 500).unwrap();
        assert_eq!(sample_ou(&p, &grid, 42), sample_ou(&p, &grid, 42));
        assert_ne!(sample_ou(&p, &grid, 42), sample_ou(&p, &grid, 43));
        assert_eq!(sample_quasistatic(2.0, 9, 3), sample_quasistatic(2.0, 9, 3));
        assert_eq!(sample_quasistatic(0.0, 9, 3), 0.0);
    }

    #[test]
    fn quasistatic_ensemble_std() {
        let sigma = 2.0 * PI * 5e4;
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|s| sample_quasistatic(sigma, 17, s)).collect();
        let var = draws.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.03);
    }

    #[test]
    fn streams_are_independent_of_order() {
        let set = build_one_over_f(1e3, 1e6, 4, 1e9).unwrap();
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 1e-6).collect();
        let a5 = classical_trajectory_at(&set, &times, 7, 5);
        let _a4 = classical_trajectory_at(&set, &times, 7, 4);
        assert_eq!(a5, classical_trajectory_at(&set, &times, 7, 5));
    }

    #[test]
    fn interleaved_lists_share_one_realisation() {
        let set = build_one_over_f(1e3, 1e6, 4, 1e9).unwrap();
        let a: Vec<f64> = (0..50).map(|k| k as f64 * 1e-6).collect();
        let b: Vec<f64> = (0..20).map(|k| 10.5e-6 + k as f64 * 0.25e-6).collect();
        let mut union: Vec<f64> = a.iter().chain(&b).copied().collect();
        union.sort_by(f64::total_cmp);
        union.dedup();
        let joint = classical_trajectory_at(&set, &union, 3, 1);
        let split = classical_trajectory_multi(&set, &[&a, &b], 3, 1);
        for (list, out) in [&a, &b].iter().zip(&split) {
            for (t, v) in list.iter().zip(out) {
                let i = union.iter().position(|u| u == t).unwrap();
                assert_eq!(*v, joint[i]);
            }
        }
    }
}
