//! Solve for the quantum-bath amplitude that puts the Ramsey T2* at 23 μs.
//!
//! The free-evolution envelope is `exp(-χ_c(t) - χ_q(t))`: `χ_c` is the
//! classical Gaussian phase exponent from the filter function and `χ_q` the
//! closed-form quantum dephasing exponent. T2* is where the sum reaches 1.

use chargenoise::dynamics::analytic_exponent;
use chargenoise::filter::{decay_rate, omega_grid, sequence_filter};
use chargenoise::dynamics::PulseSchedule;
use chargenoise::noise::build_one_over_f;
use chargenoise::protocols::{CALIBRATED_BAND_HZ, CALIBRATED_CLASSICAL_STD, CALIBRATED_MODES};

fn main() -> chargenoise::error::Result<()> {
    let target = 23e-6;
    let (lo, hi) = CALIBRATED_BAND_HZ;
    let classical = build_one_over_f(lo, hi, CALIBRATED_MODES, 1.0)?.with_total_std(CALIBRATED_CLASSICAL_STD);
    let omega = omega_grid(lo, hi, 400)?;
    let free = PulseSchedule::idle(0.0, target, 1.25e-9, 0.0)?;
    let curve = sequence_filter(&[free], &omega, "free")?;
    let s: Vec<f64> = curve.omega.iter().map(|&w| classical.dephasing_spectrum(w)).collect();
    let chi_c = decay_rate(&s, &curve)?;
    println!("classical exponent at {target:e} s: {chi_c:.4}");

    let chi_q = |a: f64| -> chargenoise::error::Result<f64> {
        Ok(analytic_exponent(&build_one_over_f(lo, hi, CALIBRATED_MODES, a)?, target))
    };
    // χ_q is linear in the amplitude
    let per_unit = chi_q(1.0)?;
    let amplitude = (1.0 - chi_c) / per_unit;
    println!("quantum amplitude: {amplitude:.4e}");
    println!("check: total exponent {:.6}", chi_c + chi_q(amplitude)?);
    Ok(())
}
