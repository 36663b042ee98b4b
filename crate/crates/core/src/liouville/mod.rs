//! Single-qubit Pauli-basis algebra.
//!
//! States are stored as `r_i = Tr(σ_i ρ)` with index order (I, X, Y, Z), so
//! `ρ = ½ Σ r_i σ_i` and a pure state has `r_0 = 1` and a unit Bloch vector.
//! Channels and generators act on these 4-vectors as real 4×4 matrices.

mod matfun;

use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector4};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub use matfun::{expm, ptm_exp, ptm_log};

pub type C64 = Complex64;
pub type Mat2c = Matrix2<C64>;

pub const I: usize = 0;
pub const X: usize = 1;
pub const Y: usize = 2;
pub const Z: usize = 3;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const IM: C64 = C64::new(0.0, 1.0);

/// 2×2 matrix of σ_I, σ_X, σ_Y or σ_Z.
pub fn pauli(index: usize) -> Mat2c {
    match index {
        I => Mat2c::new(ONE, ZERO, ZERO, ONE),
        X => Mat2c::new(ZERO, ONE, ONE, ZERO),
        Y => Mat2c::new(ZERO, -IM, IM, ZERO),
        Z => Mat2c::new(ONE, ZERO, ZERO, -ONE),
        _ => panic!("pauli index {index} out of range"),
    }
}

/// σ_a σ_b = phase · σ_c, returned as (phase, c).
fn pauli_product(a: usize, b: usize) -> (C64, usize) {
    if a == I {
        return (ONE, b);
    }
    if b == I {
        return (ONE, a);
    }
    if a == b {
        return (ONE, I);
    }
    // a, b distinct in {X, Y, Z}: σ_a σ_b = i ε_abc σ_c
    let c = 6 - a - b;
    let cyclic = (a, b) == (X, Y) || (a, b) == (Y, Z) || (a, b) == (Z, X);
    (if cyclic { IM } else { -IM }, c)
}

/// Operator `Σ c_P σ_P` with complex coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PauliOp {
    pub c: [C64; 4],
}

impl Default for PauliOp {
    fn default() -> Self {
        Self::zero()
    }
}

impl PauliOp {
    pub fn zero() -> Self {
        Self { c: [ZERO; 4] }
    }

    pub fn new(c: [C64; 4]) -> Self {
        Self { c }
    }

    pub fn from_real(c: [f64; 4]) -> Self {
        Self {
            c: c.map(|v| C64::new(v, 0.0)),
        }
    }

    /// `scale · σ_index`
    pub fn sigma(index: usize, scale: f64) -> Self {
        let mut op = Self::zero();
        op.c[index] = C64::new(scale, 0.0);
        op
    }

    pub fn to_matrix(&self) -> Mat2c {
        let mut m = Mat2c::zeros();
        for (p, &c) in self.c.iter().enumerate() {
            m += pauli(p) * c;
        }
        m
    }

    /// Coefficients `c_P = ½ Tr(σ_P m)` of an arbitrary 2×2 matrix.
    pub fn from_matrix(m: &Mat2c) -> Self {
        let mut c = [ZERO; 4];
        for (p, cp) in c.iter_mut().enumerate() {
            *cp = (pauli(p) * m).trace() * 0.5;
        }
        Self { c }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            c: self.c.map(|v| v.conj()),
        }
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.c.iter().all(|v| v.im.abs() <= tol)
    }

    pub fn norm(&self) -> f64 {
        self.c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl Add for PauliOp {
    type Output = PauliOp;
    fn add(self, rhs: PauliOp) -> PauliOp {
        let mut out = self;
        out += rhs;
        out
    }
}

impl AddAssign for PauliOp {
    fn add_assign(&mut self, rhs: PauliOp) {
        for (a, b) in self.c.iter_mut().zip(rhs.c) {
            *a += b;
        }
    }
}

impl Sub for PauliOp {
    type Output = PauliOp;
    fn sub(self, rhs: PauliOp) -> PauliOp {
        self + rhs * -1.0
    }
}

impl Mul<f64> for PauliOp {
    type Output = PauliOp;
    fn mul(self, rhs: f64) -> PauliOp {
        Self {
            c: self.c.map(|v| v * rhs),
        }
    }
}

/// Qubit state in Pauli coordinates `(Tr ρ, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityVector {
    pub r: Vector4<f64>,
}

impl DensityVector {
    pub fn new(r: Vector4<f64>) -> Self {
        Self { r }
    }

    pub fn from_bloch(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector4::new(1.0, x, y, z))
    }

    /// Spin-up, |0⟩.
    pub fn up() -> Self {
        Self::from_bloch(0.0, 0.0, 1.0)
    }

    pub fn maximally_mixed() -> Self {
        Self::from_bloch(0.0, 0.0, 0.0)
    }

    pub fn bloch(&self) -> [f64; 3] {
        [self.r[1], self.r[2], self.r[3]]
    }

    pub fn bloch_norm(&self) -> f64 {
        (self.r[1] * self.r[1] + self.r[2] * self.r[2] + self.r[3] * self.r[3]).sqrt()
    }

    pub fn is_physical(&self, tol: f64) -> bool {
        (self.r[0] - 1.0).abs() <= tol && self.bloch_norm() <= 1.0 + tol
    }

    /// |ρ_01| = ½ √(x² + y²).
    pub fn coherence(&self) -> f64 {
        0.5 * self.r[1].hypot(self.r[2])
    }

    /// Probability of measuring spin-up, `(Tr ρ + z)/2`.
    pub fn p_up(&self) -> f64 {
        0.5 * (self.r[0] + self.r[3])
    }
}

/// `r_i = Tr(σ_i ρ)` for a Hermitian 2×2 matrix.
pub fn vectorize(rho: &Mat2c) -> Result<DensityVector> {
    let scale = rho.norm().max(1.0);
    let herm = (rho - rho.adjoint()).norm();
    if herm > 1e-12 * scale {
        return Err(Error::validation(format!(
            "vectorize: matrix is not Hermitian (|ρ - ρ†| = {herm:.3e})"
        )));
    }
    let mut r = Vector4::zeros();
    for i in 0..4 {
        r[i] = (pauli(i) * rho).trace().re;
    }
    Ok(DensityVector::new(r))
}

/// `ρ = ½ Σ r_i σ_i`
pub fn devectorize(v: &DensityVector) -> Mat2c {
    PauliOp::from_real([v.r[0], v.r[1], v.r[2], v.r[3]]).to_matrix() * C64::new(0.5, 0.0)
}

/// Real 4×4 Pauli transfer matrix of a channel or generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ptm {
    pub m: Matrix4<f64>,
}

impl Ptm {
    pub fn new(m: Matrix4<f64>) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        Self::new(Matrix4::identity())
    }

    pub fn zero() -> Self {
        Self::new(Matrix4::zeros())
    }

    pub fn apply(&self, v: &DensityVector) -> DensityVector {
        DensityVector::new(self.m * v.r)
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.m.transpose())
    }

    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(1, 1).into_owned()
    }

    /// First row equal to (1, 0, 0, 0).
    pub fn is_trace_preserving(&self, tol: f64) -> bool {
        (self.m[(0, 0)] - 1.0).abs() <= tol && (1..4).all(|j| self.m[(0, j)].abs() <= tol)
    }

    pub fn frobenius_distance(&self, other: &Ptm) -> f64 {
        (self.m - other.m).norm()
    }

    pub fn max_singular_value(&self) -> f64 {
        self.m
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }
}

impl Mul for Ptm {
    type Output = Ptm;
    fn mul(self, rhs: Ptm) -> Ptm {
        Ptm::new(self.m * rhs.m)
    }
}

impl Add for Ptm {
    type Output = Ptm;
    fn add(self, rhs: Ptm) -> Ptm {
        Ptm::new(self.m + rhs.m)
    }
}

impl Mul<f64> for Ptm {
    type Output = Ptm;
    fn mul(self, rhs: f64) -> Ptm {
        Ptm::new(self.m * rhs)
    }
}

/// PTM of an arbitrary Hermiticity-preserving linear map on 2×2 matrices.
pub fn ptm_of_map(map: impl Fn(&Mat2c) -> Mat2c) -> Ptm {
    let mut m = Matrix4::zeros();
    for j in 0..4 {
        let out = map(&pauli(j));
        for i in 0..4 {
            m[(i, j)] = 0.5 * (pauli(i) * out).trace().re;
        }
    }
    Ptm::new(m)
}

/// `R_ij = Tr(U† σ_i U σ_j) / 2`.
pub fn ptm_of_unitary(u: &Mat2c) -> Result<Ptm> {
    let defect = (u.adjoint() * u - Mat2c::identity()).norm();
    if defect > 1e-10 {
        return Err(Error::validation(format!(
            "ptm_of_unitary: matrix is not unitary (|U†U - 1| = {defect:.3e})"
        )));
    }
    Ok(ptm_of_unitary_unchecked(u))
}

pub(crate) fn ptm_of_unitary_unchecked(u: &Mat2c) -> Ptm {
    let ud = u.adjoint();
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        let conj = ud * pauli(i) * u;
        for j in 0..4 {
            m[(i, j)] = 0.5 * (conj * pauli(j)).trace().re;
        }
    }
    Ptm::new(m)
}

/// Generator of `ρ ↦ -i[H, ρ]` for `H = ½(w_x σ_x + w_y σ_y + w_z σ_z)`.
///
/// On the Bloch vector this is `dr/dt = w × r`.
pub fn hamiltonian_ptm(wx: f64, wy: f64, wz: f64) -> Ptm {
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, -wz, wy,
        0.0, wz, 0.0, -wx,
        0.0, -wy, wx, 0.0,
    );
    Ptm::new(m)
}

/// Generator of `ρ ↦ [Kρ, σ_z] + [σ_z, ρK†]`.
///
/// Writing the map as `A + A†` with `A = [Kρ, σ_z]` gives
/// `D_ij = Re Tr([σ_z, σ_i] K σ_j)`, so only the X and Y rows survive.
pub fn dissipator_generator(k: &PauliOp) -> Ptm {
    let mut m = Matrix4::zeros();
    // [σ_z, σ_x] = 2i σ_y and [σ_z, σ_y] = -2i σ_x
    let rows = [(X, Y, C64::new(0.0, 2.0)), (Y, X, C64::new(0.0, -2.0))];
    for (row, s, pref) in rows {
        for j in 0..4 {
            let mut acc = ZERO;
            for (p, &kp) in k.c.iter().enumerate() {
                let (phase, c) = pauli_product(p, j);
                // Tr(σ_s σ_c) = 2 δ_sc
                if c == s {
                    acc += kp * phase * 2.0;
                }
            }
            m[(row, j)] = (pref * acc).re;
        }
    }
    Ptm::new(m)
}
