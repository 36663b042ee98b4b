use std::f64::consts::PI;
use std::path::Path;

use chargenoise::dynamics::{su2_step, Interp, PulseSchedule};
use chargenoise::filter::{avg_fidelity_from_chi, cpmg_block, decay_rate, omega_grid, sequence_filter, FilterCurve};
use chargenoise::grid::TimeGrid;
use chargenoise::krotov::{gaussian_hold, optimize, Gradient, OptimizationConfig};
use chargenoise::liouville::{ptm_of_unitary, Ptm};
use chargenoise::lsq::fit_line;
use chargenoise::protocols::{
    extract_spectrum, fit_ramsey, fit_ramsey_stretched, fit_t2_scaling, predicted_echo_half_time, run_cpmg_curve,
    run_ramsey, t2_from_decay, CpmgPoint, NoiseModel,
};
use chargenoise::tomography::{gate_channel, gate_report, germ_repeat_probe, GateLabel, ProbeConfig, ProbeSource};
use serde_json::json;

use crate::config::{InitialPulse, RunConfig};
use crate::output::{finite, num, OutputDir};
use crate::CliError;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn ramsey(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let block = &config.ramsey;
    if block.wait_points < 2 || !(block.wait_max_s > 0.0) {
        return Err(invalid("ramsey needs wait_points >= 2 and wait_max_s > 0"));
    }
    let noise = config.noise(block.detuning_hz)?;
    let waits: Vec<f64> =
        (0..block.wait_points).map(|k| k as f64 * block.wait_max_s / (block.wait_points - 1) as f64).collect();
    let curve = run_ramsey(&config.gate()?, block.shots, &noise, &waits, &config.sim())?;
    out.csv(
        "ramsey.csv",
        &["t_s", "P_up", "stderr"],
        (0..curve.t.len()).map(|k| [num(curve.t[k]), num(curve.p_up[k]), num(curve.stderr[k])]),
    )?;

    let fit = fit_ramsey(&curve.t, &curve.p_up)?;
    // the stretch exponent is only defined once the envelope decays
    let stretched = if fit.t2_star.is_finite() {
        let window = 1.5 * fit.t2_star;
        match fit_ramsey_stretched(&curve.t, &curve.p_up, Some(window)) {
            Ok(s) => Some(json!({"p": s.p, "p_stderr": s.p_stderr, "T_s": s.t2, "window_s": window})),
            Err(e) => {
                log::warn!("stretched fit failed: {e}");
                None
            }
        }
    } else {
        None
    };
    out.json(
        "ramsey_fit.json",
        &json!({
            "T2_star_s": finite(fit.t2_star),
            "f_hz": fit.f,
            "A": fit.a,
            "B": fit.b,
            "rms_residual": fit.residual,
            "stretched": stretched,
        }),
    )
}

fn cpmg_points(config: &RunConfig, noise: &NoiseModel) -> Result<(Vec<CpmgPoint>, serde_json::Value), CliError> {
    let block = &config.cpmg;
    if block.n_pi.is_empty() || block.n_pi.contains(&0) {
        return Err(invalid("cpmg.n_pi must list positive pulse counts"));
    }
    let gate = config.gate()?;
    let mut points = Vec::new();
    let mut per_n = Vec::new();
    let (mut ns, mut t2s) = (Vec::new(), Vec::new());
    for &n in &block.n_pi {
        let waits = match &block.waits_s {
            Some(w) => w.clone(),
            None => {
                let half = predicted_echo_half_time(noise, n)?;
                block.wait_factors.iter().map(|f| f * half).collect()
            }
        };
        let curve = run_cpmg_curve(n, &gate, block.shots, noise, &waits, &config.sim())?;
        let t: Vec<f64> = curve.iter().map(|p| p.t_wait).collect();
        let a: Vec<f64> = curve.iter().map(|p| p.amplitude).collect();
        match t2_from_decay(&t, &a) {
            Ok(fit) => {
                ns.push(n);
                t2s.push(fit.t2);
                per_n.push(json!({"n_pi": n, "T2_s": fit.t2, "alpha": fit.alpha, "points_used": fit.points_used}));
            }
            Err(e) => {
                log::warn!("n_pi = {n}: {e}");
                per_n.push(json!({"n_pi": n, "T2_s": null, "alpha": null, "points_used": 0}));
            }
        }
        points.extend(curve);
    }
    let scaling = match fit_t2_scaling(&ns, &t2s) {
        Ok(s) => json!({"beta": s.beta, "beta_stderr": s.beta_stderr, "prefactor_s": s.prefactor}),
        Err(e) => {
            log::warn!("T2 scaling not fitted: {e}");
            serde_json::Value::Null
        }
    };
    Ok((points, json!({"curves": per_n, "scaling": scaling})))
}

fn write_cpmg(out: &mut OutputDir, points: &[CpmgPoint]) -> Result<(), CliError> {
    out.csv(
        "cpmg.csv",
        &["n_pi", "t_wait_s", "A", "stderr"],
        points.iter().map(|p| [p.n_pi.to_string(), num(p.t_wait), num(p.amplitude), num(p.stderr)]),
    )
}

pub fn cpmg(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let noise = config.noise(0.0)?;
    let (points, summary) = cpmg_points(config, &noise)?;
    write_cpmg(out, &points)?;
    out.json("cpmg_fit.json", &summary)
}

fn noise_band(noise: &NoiseModel) -> Option<(f64, f64)> {
    [&noise.classical, &noise.quantum]
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.band_hz)
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
}

pub fn spectrum(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    if !config.cpmg.n_pi.iter().any(|&n| n >= 8) {
        return Err(invalid("spectrum extraction needs at least one cpmg.n_pi >= 8"));
    }
    let noise = config.noise(0.0)?;
    let (points, _) = cpmg_points(config, &noise)?;
    write_cpmg(out, &points)?;
    let eligible: Vec<CpmgPoint> = points.into_iter().filter(|p| p.n_pi >= 8).collect();
    let spectrum = extract_spectrum(&eligible)?;
    out.csv(
        "spectrum.csv",
        &["f_hz", "S_rad2_s2_per_hz"],
        spectrum.iter().map(|p| [num(p.f_hz), num(p.s)]),
    )?;
    let band = noise_band(&noise).unwrap_or((0.0, f64::INFINITY));
    let inside: Vec<_> = spectrum.iter().filter(|p| p.f_hz >= band.0 && p.f_hz <= band.1).collect();
    let x: Vec<f64> = inside.iter().map(|p| p.f_hz.ln()).collect();
    let y: Vec<f64> = inside.iter().map(|p| p.s.ln()).collect();
    let slope = fit_line(&x, &y).ok();
    out.json(
        "spectrum_fit.json",
        &json!({
            "points": spectrum.len(),
            "points_in_band": inside.len(),
            "band_hz": [band.0, finite(band.1)],
            "loglog_slope": slope.as_ref().map(|l| l.slope),
            "loglog_slope_stderr": slope.as_ref().map(|l| l.slope_stderr),
        }),
    )
}

/// Reads a pulse written by the `krotov` subcommand.
pub fn read_pulse(path: &Path, phase: f64) -> Result<PulseSchedule, CliError> {
    let bad = |msg: String| invalid(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t_s", "omega_rad_s"] {
        return Err(bad(format!("expected header t_s,omega_rad_s, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let (mut t, mut omega) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let parse = |i: usize| -> Result<f64, CliError> {
            record[i].trim().parse::<f64>().map_err(|e| bad(format!("{:?}: {e}", &record[i])))
        };
        t.push(parse(0)?);
        omega.push(parse(1)?);
    }
    if t.len() < 2 {
        return Err(bad("a pulse needs at least two samples".into()));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) || t.iter().enumerate().any(|(k, v)| (v - (t[0] + k as f64 * dt)).abs() > 1e-6 * dt) {
        return Err(bad("sample times must be uniformly spaced and increasing".into()));
    }
    let grid = TimeGrid::new(t[0], dt, t.len() - 1)?;
    Ok(PulseSchedule::new(grid, omega, phase, 0.0, Interp::Hold)?.shifted(0.0))
}

fn write_pulse(out: &mut OutputDir, name: &str, pulse: &PulseSchedule) -> Result<(), CliError> {
    let t = pulse.grid.times();
    out.csv(name, &["t_s", "omega_rad_s"], t.iter().zip(&pulse.omega).map(|(t, w)| [num(*t), num(*w)]))
}

fn target(angle: f64, phase: f64) -> Result<Ptm, CliError> {
    let (wx, wy) = (phase.cos(), phase.sin());
    Ok(ptm_of_unitary(&su2_step(wx * angle, wy * angle, 0.0, 1.0))?)
}

pub fn krotov(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let block = &config.krotov;
    let (angle, phase) = block.target.rotation();
    let initial = match &block.initial {
        InitialPulse::Gaussian { width } => {
            gaussian_hold(block.duration_s, block.steps, angle, *width, phase, 0.0)?
        }
        InitialPulse::File { path } => read_pulse(path, phase)?,
    };
    // classical noise is off during optimization; only the quantum bath enters
    let noise = config.noise(0.0)?;
    let result = optimize(&OptimizationConfig {
        target: target(angle, phase)?,
        initial_pulse: initial,
        schedule: block.schedule.clone(),
        max_iters: block.max_iters,
        stop_infidelity: block.stop_infidelity,
        modes: noise.quantum,
        gradient: block.gradient,
    })?;
    out.csv(
        "krotov_history.csv",
        &["iter", "F_inf"],
        result.history.iter().enumerate().map(|(k, f)| [k.to_string(), num(*f)]),
    )?;
    write_pulse(out, "krotov_pulse.csv", &result.final_pulse)?;
    out.json(
        "krotov.json",
        &json!({
            "target": block.target,
            "initial_F_inf": result.history[0],
            "best_F_inf": result.best_infidelity,
            "reduction": result.history[0] / result.best_infidelity,
            "iterations": result.history.len() - 1,
            "stop": result.stop,
        }),
    )
}

pub fn tomo(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let noise = config.noise(0.0)?;
    let gate = config.gate()?;
    let sim = config.sim();
    let mut reports = Vec::new();
    for label in GateLabel::ALL {
        let g = gate_channel(label, &gate, &noise, config.tomo.shots, &sim)?;
        reports.push(gate_report(label, &g)?);
    }
    out.json("budgets.json", &reports)?;
    if let Some(probe) = &config.tomo.probe {
        let points = germ_repeat_probe(
            &ProbeConfig {
                germ: probe.germ.clone(),
                reps: probe.reps.clone(),
                shots: probe.shots,
                seed: config.seed,
            },
            &ProbeSource::Simulated {
                noise: &noise,
                gate: &gate,
                sim: &sim,
            },
        )?;
        out.csv(
            "probe.csv",
            &["reps", "two_delta_logl", "k", "N_sigma"],
            points.iter().map(|p| {
                [
                    p.reps.to_string(),
                    num(p.two_delta_logl),
                    p.k.to_string(),
                    p.n_sigma.map(num).unwrap_or_default(),
                ]
            }),
        )?;
    }
    Ok(())
}

pub fn filter(config: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let block = &config.filter;
    let noise = config.noise(0.0)?;
    let (lo, hi) = noise_band(&noise).ok_or_else(|| invalid("filter needs a noise band: configure a bath"))?;
    let phase = PI / 2.0;
    let gaussian = gaussian_hold(block.pi_duration_s, block.pi_steps, PI, block.pi_width, phase, 0.0)?;
    let (optimized, optimization) = match &block.optimized_pulse {
        Some(path) => (read_pulse(path, phase)?, serde_json::Value::Null),
        None => {
            let r = optimize(&OptimizationConfig {
                target: target(PI, phase)?,
                initial_pulse: gaussian.clone(),
                schedule: block.schedule.clone(),
                max_iters: block.max_iters,
                stop_infidelity: 1e-9,
                modes: noise.quantum.clone(),
                gradient: Gradient::WithKernels,
            })?;
            let summary = json!({"initial_F_inf": r.history[0], "best_F_inf": r.best_infidelity, "stop": r.stop});
            (r.final_pulse, summary)
        }
    };
    let omega = omega_grid(lo, hi, block.points_per_decade)?;
    let free_dt = config.sim.free_dt_s;
    let curve = |pulse: &PulseSchedule, label: &str| -> Result<FilterCurve, CliError> {
        Ok(sequence_filter(&cpmg_block(pulse, block.n_pi, block.t_wait_s, free_dt)?, &omega, label)?)
    };
    let curves = [curve(&gaussian, "gaussian")?, curve(&optimized, "optimized")?];
    let mut rows = Vec::new();
    for c in &curves {
        let norm = c.normalized();
        for ((w, f), n) in c.omega.iter().zip(&c.fz).zip(&norm) {
            rows.push([num(*w), num(*f), num(*n), c.label.clone()]);
        }
    }
    out.csv("filter.csv", &["omega_rad_s", "Fz_raw_s2", "Fz_normalized", "label"], rows)?;

    let mut chis = serde_json::Map::new();
    for c in &curves {
        // quantum modes dephase four times as fast as classical twins
        let classical: Vec<f64> = c.omega.iter().map(|&w| noise.classical.dephasing_spectrum(w)).collect();
        let total: Vec<f64> = c
            .omega
            .iter()
            .map(|&w| noise.classical.dephasing_spectrum(w) + 4.0 * noise.quantum.dephasing_spectrum(w))
            .collect();
        let chi_c = decay_rate(&classical, c)?;
        let chi_t = decay_rate(&total, c)?;
        chis.insert(
            c.label.clone(),
            json!({
                "chi_classical": chi_c,
                "F_avg_classical": avg_fidelity_from_chi(chi_c)?,
                "chi_total": chi_t,
                "F_avg_total": avg_fidelity_from_chi(chi_t)?,
            }),
        );
    }
    out.json(
        "filter.json",
        &json!({
            "n_pi": block.n_pi,
            "t_wait_s": block.t_wait_s,
            "curves": chis,
            "optimization": optimization,
        }),
    )
}
