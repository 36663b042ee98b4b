//! Extended-space propagator `dG/dt = Λ(t) G`, `G(0) = 1`.
//!
//! Coordinates: ρ (4 reals), then for each kernel its real and imaginary
//! Pauli parts (8 reals), then a constant slot fixed at 1 that turns the
//! kernel source `c0 σ_z` into a linear term. The dissipator makes the ρ rows
//! depend on the kernels themselves; the kernels are read off the constant
//! column of the propagator, which is exactly the physical kernel trajectory.

use nalgebra::{DMatrix, Matrix4, Vector4};

use super::master::StageGenerators;
use super::{check_stiffness, hamiltonian_generator, Detuning, PulseSchedule};
use crate::error::Result;
use crate::liouville::{dissipator_generator, PauliOp, Ptm, C64, Z};
use crate::noise::BathModeSet;

/// Structured form of Λ(t).
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    /// `ℒ_S + D(Σ K_i)` acting on ρ.
    pub rho_block: Matrix4<f64>,
    /// `ℒ_S`, shared by every kernel block.
    pub system: Matrix4<f64>,
    pub thetas: Vec<f64>,
    /// Source strengths `c0_i` against the constant slot.
    pub sources: Vec<f64>,
}

impl Generator {
    pub fn new(system: &Ptm, kernels: &[PauliOp], modes: &BathModeSet) -> Self {
        let total = kernels.iter().fold(PauliOp::zero(), |acc, k| acc + *k);
        Self {
            rho_block: system.m + dissipator_generator(&total).m,
            system: system.m,
            thetas: modes.modes.iter().map(|m| m.theta).collect(),
            sources: modes.modes.iter().map(|m| m.c0).collect(),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        extended_dim(self.n_modes())
    }

    pub fn const_index(&self) -> usize {
        self.dim() - 1
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (4, 4)).copy_from(&self.rho_block);
        for (i, (&theta, &c0)) in self.thetas.iter().zip(&self.sources).enumerate() {
            let block = self.system - Matrix4::identity() * theta;
            let re = 4 + 8 * i;
            m.view_mut((re, re), (4, 4)).copy_from(&block);
            m.view_mut((re + 4, re + 4), (4, 4)).copy_from(&block);
            m[(re + Z, n - 1)] = c0;
        }
        m
    }

    /// `Λ G` without forming Λ densely.
    pub fn apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let c = n - 1;
        let mut out = DMatrix::zeros(n, g.ncols());
        for col in 0..g.ncols() {
            let v = |r: usize| Vector4::new(g[(r, col)], g[(r + 1, col)], g[(r + 2, col)], g[(r + 3, col)]);
            let rho = self.rho_block * v(0);
            for p in 0..4 {
                out[(p, col)] = rho[p];
            }
            let cval = g[(c, col)];
            for (i, (&theta, &c0)) in self.thetas.iter().zip(&self.sources).enumerate() {
                for part in 0..2 {
                    let base = 4 + 8 * i + 4 * part;
                    let x = v(base);
                    let mut y = self.system * x - x * theta;
                    if part == 0 {
                        y[Z] += c0 * cval;
                    }
                    for p in 0..4 {
                        out[(base + p, col)] = y[p];
                    }
                }
            }
        }
        out
    }

    /// `B Λ` without forming Λ densely.
    pub fn left_apply(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let c = n - 1;
        let mut out = DMatrix::zeros(b.nrows(), n);
        for row in 0..b.nrows() {
            let v = |s: usize| Vector4::new(b[(row, s)], b[(row, s + 1)], b[(row, s + 2)], b[(row, s + 3)]);
            let rho = self.rho_block.tr_mul(&v(0));
            for p in 0..4 {
                out[(row, p)] = rho[p];
            }
            let mut cval = 0.0;
            for (i, (&theta, &c0)) in self.thetas.iter().zip(&self.sources).enumerate() {
                for part in 0..2 {
                    let base = 4 + 8 * i + 4 * part;
                    let x = v(base);
                    let y = self.system.tr_mul(&x) - x * theta;
                    for p in 0..4 {
                        out[(row, base + p)] = y[p];
                    }
                }
                cval += b[(row, 4 + 8 * i + Z)] * c0;
            }
            out[(row, c)] = cval;
        }
        out
    }
}

pub(crate) fn extended_dim(n_modes: usize) -> usize {
    4 + 8 * n_modes + 1
}

/// Λ(t) with `current_kernels` folded into the ρ block.
pub fn build_extended_generator(
    t: f64,
    pulse: &PulseSchedule,
    delta_extra: f64,
    modes: &BathModeSet,
    current_kernels: &[PauliOp],
) -> Result<Generator> {
    let system = hamiltonian_generator(t, pulse, delta_extra)?;
    Ok(Generator::new(&system, current_kernels, modes))
}

/// Kernels stored in the constant column of an extended propagator.
pub fn kernels_from_state(g: &DMatrix<f64>, n_modes: usize) -> Vec<PauliOp> {
    let c = extended_dim(n_modes) - 1;
    (0..n_modes)
        .map(|i| {
            let re = 4 + 8 * i;
            PauliOp::new([0, 1, 2, 3].map(|p| C64::new(g[(re + p, c)], g[(re + 4 + p, c)])))
        })
        .collect()
}

/// The ρ→ρ block of an extended propagator.
pub fn rho_block(g: &DMatrix<f64>) -> Ptm {
    Ptm::new(g.fixed_view::<4, 4>(0, 0).into_owned())
}

/// Extended propagator on every grid point.
pub fn propagate_extended(pulse: &PulseSchedule, det: &Detuning, modes: &BathModeSet) -> Result<Vec<DMatrix<f64>>> {
    det.check(&pulse.grid)?;
    let dt = pulse.grid.dt;
    check_stiffness(dt, modes)?;
    let n = modes.len();
    let dim = extended_dim(n);
    let mut g = DMatrix::<f64>::identity(dim, dim);
    let mut out = Vec::with_capacity(pulse.grid.len());
    out.push(g.clone());
    for k in 0..pulse.n_steps() {
        let gens = StageGenerators::of_step(pulse, det, k);
        let lam = |l: &Ptm, state: &DMatrix<f64>| Generator::new(l, &kernels_from_state(state, n), modes);
        let k1 = lam(&gens.start, &g).apply(&g);
        let g2 = &g + &k1 * (0.5 * dt);
        let k2 = lam(&gens.mid, &g2).apply(&g2);
        let g3 = &g + &k2 * (0.5 * dt);
        let k3 = lam(&gens.mid, &g3).apply(&g3);
        let g4 = &g + &k3 * dt;
        let k4 = lam(&gens.end, &g4).apply(&g4);
        g += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
        out.push(g.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{propagate_master, Interp};
    use crate::grid::TimeGrid;
    use crate::liouville::{hamiltonian_ptm, ptm_of_unitary, DensityVector, Mat2c};
    use crate::noise::build_one_over_f;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn random_kernels(n: usize) -> Vec<PauliOp> {
        (0..n)
            .map(|i| {
                let a = i as f64 + 1.0;
                PauliOp::new([
                    C64::new(0.0, 0.0),
                    C64::new(0.3 * a, -0.1),
                    C64::new(-0.2, 0.05 * a),
                    C64::new(1.5 / a, 0.2),
                ])
            })
            .collect()
    }

    #[test]
    fn structured_products_match_dense() {
        let modes = build_one_over_f(1e3, 1e6, 3, 1e9).unwrap();
        let gen = Generator::new(&hamiltonian_ptm(1e6, -2e5, 3e5), &random_kernels(3), &modes);
        let dense = gen.to_dense();
        let n = gen.dim();
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let scale = (&dense * &g).amax();
        assert!((gen.apply(&g) - &dense * &g).amax() < 1e-13 * scale);
        assert!((gen.left_apply(&g) - &g * &dense).amax() < 1e-13 * scale);
    }

    #[test]
    fn constant_row_and_trace_row_vanish() {
        let modes = build_one_over_f(1e3, 1e6, 4, 1e9).unwrap();
        let gen = Generator::new(&hamiltonian_ptm(2e6, 1e6, -4e5), &random_kernels(4), &modes);
        let dense = gen.to_dense();
        let c = gen.const_index();
        assert!(dense.row(c).iter().all(|&v| v == 0.0));
        assert!(dense.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_pulse_zero_noise_is_block_diagonal() {
        let modes = build_one_over_f(1e3, 1e6, 2, 0.0).unwrap();
        let grid = TimeGrid::new(0.0, 1e-8, 10).unwrap();
        let pulse = PulseSchedule::new(grid, vec![0.0; 11], 0.0, 0.0, Interp::Hold).unwrap();
        let gen = build_extended_generator(5e-8, &pulse, 0.0, &modes, &[PauliOp::zero(); 2]).unwrap();
        let dense = gen.to_dense();
        assert!(dense.view((0, 0), (4, 4)).iter().all(|&v| v == 0.0));
        for i in 0..2 {
            let re = 4 + 8 * i;
            for p in 0..8 {
                assert_eq!(dense[(re + p, re + p)], -modes.modes[i].theta);
            }
        }
        let series = propagate_extended(&pulse, &Detuning::none(), &BathModeSet::empty()).unwrap();
        for g in series {
            assert_eq!(g, DMatrix::identity(5, 5));
        }
    }

    #[test]
    fn noiseless_x_half_matches_unitary() {
        let pulse = PulseSchedule::square(0.0, 15e-9, PI / 2.0, 0.0, 1e-11, 0.0).unwrap();
        let g = propagate_extended(&pulse, &Detuning::none(), &BathModeSet::empty()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = Mat2c::new(C64::new(h, 0.0), C64::new(0.0, -h), C64::new(0.0, -h), C64::new(h, 0.0));
        assert_abs_diff_eq!(rho_block(g.last().unwrap()).m, ptm_of_unitary(&u).unwrap().m, epsilon = 1e-8);
    }

    #[test]
    fn extended_matches_two_stage() {
        let modes = build_one_over_f(1e4, 1e7, 6, 3e7).unwrap();
        let dt = 0.02 / modes.theta_max();
        let pulse = PulseSchedule::gaussian(0.0, 400.0 * dt, PI / 2.0, 0.2, 0.3, dt, 2e6).unwrap();
        let classical: Vec<f64> = pulse.grid.times().iter().map(|t| 4e5 * (3e6 * t).sin()).collect();
        let det = Detuning::new(&classical, 1e5);
        let series = propagate_extended(&pulse, &det, &modes).unwrap();
        let rho0 = DensityVector::from_bloch(0.6, -0.0, 0.8);
        let two_stage = propagate_master(&rho0, &pulse, &classical, 1e5, &modes).unwrap();
        let mut worst: f64 = 0.0;
        for (g, r) in series.iter().zip(&two_stage) {
            let ext = rho_block(g).apply(&rho0);
            worst = worst.max((ext.r - r.r).amax());
        }
        assert!(worst < 1e-9, "max deviation {worst:e}");
    }

    #[test]
    fn noisy_block_is_contractive() {
        let modes = build_one_over_f(1e4, 1e7, 6, 3e7).unwrap();
        let dt = 0.02 / modes.theta_max();
        let pulse = PulseSchedule::square(0.0, 600.0 * dt, PI, 0.0, dt, 0.0).unwrap();
        let series = propagate_extended(&pulse, &Detuning::none(), &modes).unwrap();
        for g in series.iter().step_by(50) {
            let b = rho_block(g);
            assert!(b.is_trace_preserving(1e-14));
            assert!(b.max_singular_value() <= 1.0 + 1e-9);
        }
    }
}
