//! Matrix exponential and principal logarithm for 4×4 real matrices.

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;

use super::Ptm;
use crate::error::{Error, Result};

type Mat4c = Matrix4<Complex64>;

/// Scaling-and-squaring Taylor exponential.
pub fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = a.norm();
    let mut squarings = 0;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as i32;
    }
    let scaled = a / 2f64.powi(squarings);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..=20 {
        term = term * scaled / k as f64;
        sum += term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

pub fn ptm_exp(g: &Ptm) -> Ptm {
    Ptm::new(expm(&g.m))
}

/// Principal logarithm of a PTM.
///
/// Eigenvalues on the closed negative real axis (including zero) have no
/// real principal logarithm and are reported as a log-branch error.
pub fn ptm_log(g: &Ptm) -> Result<Ptm> {
    let eig = g.m.complex_eigenvalues();
    let scale = g.m.norm().max(1.0);
    for lam in eig.iter() {
        if lam.norm() <= 1e-13 * scale || (lam.re <= 0.0 && lam.im.abs() <= 1e-9 * scale) {
            return Err(Error::LogBranch {
                re: lam.re,
                im: lam.im,
            });
        }
    }
    if let Some(l) = log_by_eigen(&g.m, &eig) {
        if (expm(&l) - g.m).norm() <= 1e-11 * scale {
            return Ok(Ptm::new(l));
        }
    }
    log_by_inverse_scaling(&g.m).map(Ptm::new)
}

fn log_by_eigen(a: &Matrix4<f64>, eig: &Vector4<Complex64>) -> Option<Matrix4<f64>> {
    let mut min_gap = f64::INFINITY;
    for i in 0..4 {
        for j in (i + 1)..4 {
            min_gap = min_gap.min((eig[i] - eig[j]).norm());
        }
    }
    if min_gap < 1e-6 {
        return None;
    }
    let ac: Mat4c = a.map(|v| Complex64::new(v, 0.0));
    let mut v = Mat4c::zeros();
    for (k, lam) in eig.iter().enumerate() {
        let shifted = ac - Mat4c::identity() * *lam;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))?;
        for r in 0..4 {
            v[(r, k)] = vt[(imin, r)].conj();
        }
    }
    let sv = v.svd(false, false).singular_values;
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if smin <= 0.0 || smax / smin > 1e8 {
        return None;
    }
    let vinv = v.try_inverse()?;
    let logs = Mat4c::from_diagonal(&eig.map(|l| l.ln()));
    let l = v * logs * vinv;
    let imag = l.map(|z| z.im).norm();
    if imag > 1e-8 * l.norm().max(1e-300) && imag > 1e-14 {
        return None;
    }
    Some(l.map(|z| z.re))
}

/// Denman-Beavers square roots until close to identity, then an atanh series.
fn log_by_inverse_scaling(a: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let id = Matrix4::<f64>::identity();
    let mut m = *a;
    let mut roots = 0;
    while (m - id).norm() > 0.25 {
        m = sqrtm(&m)?;
        roots += 1;
        if roots > 64 {
            return Err(Error::NonFinite(
                "matrix logarithm: square-root iteration failed to approach identity".into(),
            ));
        }
    }
    // log(M) = 2 atanh(Z), Z = (M - I)(M + I)^-1
    let z = (m - id)
        * (m + id)
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("matrix logarithm: singular M + I".into()))?;
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    for k in 1..60 {
        term *= z2;
        let add = term / (2 * k + 1) as f64;
        sum += add;
        if add.norm() < 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    Ok(sum * 2.0 * 2f64.powi(roots))
}

fn sqrtm(a: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let mut y = *a;
    let mut z = Matrix4::identity();
    for _ in 0..100 {
        let yi = y
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("matrix square root: singular iterate".into()))?;
        let zi = z
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("matrix square root: singular iterate".into()))?;
        let y_next = (y + zi) * 0.5;
        let z_next = (z + yi) * 0.5;
        let change = (y_next - y).norm();
        y = y_next;
        z = z_next;
        if change <= 1e-15 * y.norm() {
            return Ok(y);
        }
    }
    if y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::NonFinite("matrix square root diverged".into()))
    }
}
