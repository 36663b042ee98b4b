use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn reference() -> Value {
    serde_json::from_str(include_str!("../../../configs/reference.json")).unwrap()
}

fn zero_noise() -> Value {
    serde_json::from_str(include_str!("../../../configs/zero-noise.json")).unwrap()
}

struct Run {
    dir: TempDir,
    output: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.output.status.code().unwrap()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn file(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap_or_else(|e| panic!("{name}: {e}; stderr: {}", self.stderr()))
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.file(name)).unwrap()
    }

    /// Rows of a CSV as numbers, after checking the header.
    fn table(&self, name: &str, header: &str) -> Vec<Vec<f64>> {
        let text = self.file(name);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
    }
}

fn run_with(config: &str, args: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, config).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_chargenoise"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    Run { dir, output }
}

fn run(config: &Value, args: &[&str]) -> Run {
    run_with(&config.to_string(), args)
}

fn small_ramsey() -> Value {
    let mut c = reference();
    c["ramsey"] = json!({"shots": 6, "wait_max_s": 10e-6, "wait_points": 21, "detuning_hz": 0.2e6});
    c
}

#[test]
fn zero_noise_ramsey_is_an_undamped_cosine() {
    let r = run(&zero_noise(), &["ramsey"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.table("ramsey.csv", "t_s,P_up,stderr");
    assert_eq!(rows.len(), 101);
    // 0.1 μs spacing puts one 5 μs detuning period every 50 rows; without
    // noise the fringe repeats exactly and keeps its full contrast
    for k in 0..rows.len() - 50 {
        assert!((rows[k][1] - rows[k + 50][1]).abs() < 1e-9, "row {k}");
    }
    let (lo, hi) = rows.iter().fold((1.0f64, 0.0f64), |(lo, hi), r| (lo.min(r[1]), hi.max(r[1])));
    assert!(lo < 1e-3 && hi > 1.0 - 1e-3, "contrast {lo}..{hi}");
    assert!(rows.iter().all(|r| r[2] == 0.0));
    let fit = r.json("ramsey_fit.json");
    assert!(fit["T2_star_s"].is_null());
    assert!((fit["f_hz"].as_f64().unwrap() / 0.2e6 - 1.0).abs() < 0.01);
    let manifest = r.json("manifest.json");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["subcommand"], "ramsey");
    assert_eq!(manifest["outputs"], json!(["ramsey.csv", "ramsey_fit.json"]));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn outputs_do_not_depend_on_threads() {
    let config = small_ramsey();
    let a = run(&config, &["ramsey", "--threads", "1"]);
    let b = run(&config, &["ramsey", "--threads", "3"]);
    assert_eq!(a.code(), 0, "{}", a.stderr());
    assert_eq!(b.code(), 0, "{}", b.stderr());
    assert_eq!(a.file("ramsey.csv"), b.file("ramsey.csv"));
    assert_eq!(a.file("ramsey_fit.json"), b.file("ramsey_fit.json"));
    assert_eq!(a.json("manifest.json")["threads"], 1);
    assert_eq!(b.json("manifest.json")["threads"], 3);
    // with noise on, shots differ and the spread is reported
    let rows = a.table("ramsey.csv", "t_s,P_up,stderr");
    assert!(rows[1..].iter().all(|r| r[2] > 0.0));
}

#[test]
fn seed_override_is_applied_and_recorded() {
    let config = small_ramsey();
    let base = run(&config, &["ramsey"]);
    let over = run(&config, &["ramsey", "--seed", "99"]);
    assert_ne!(base.file("ramsey.csv"), over.file("ramsey.csv"));
    let m = over.json("manifest.json");
    assert_eq!((m["seed"].as_u64(), m["seed_overridden"].as_bool()), (Some(99), Some(true)));
    let mut direct = config.clone();
    direct["seed"] = json!(99);
    assert_eq!(run(&direct, &["ramsey"]).file("ramsey.csv"), over.file("ramsey.csv"));
}

#[test]
fn validation_errors_exit_with_2() {
    let mut typo = zero_noise();
    typo["ramsey"]["shot"] = json!(3);
    let r = run(&typo, &["ramsey"]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("shot"), "{}", r.stderr());
    assert!(!r.out().join("manifest.json").exists());

    let mut no_seed = zero_noise();
    no_seed.as_object_mut().unwrap().remove("seed");
    assert_eq!(run(&no_seed, &["ramsey"]).code(), 2);

    assert_eq!(run_with("{not json", &["ramsey"]).code(), 2);

    let mut negative = zero_noise();
    negative["noise"]["quasistatic_hz"] = json!(-1.0);
    assert_eq!(run(&negative, &["ramsey"]).code(), 2);

    let mut few = zero_noise();
    few["cpmg"] = json!({"n_pi": [2, 4]});
    assert_eq!(run(&few, &["spectrum"]).code(), 2);

    let missing = Command::new(env!("CARGO_BIN_EXE_chargenoise"))
        .args(["ramsey", "--config", "/nonexistent/config.json", "--out"])
        .arg(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_3() {
    // a 1 GHz bath mode is far too fast for the free-evolution step
    let mut c = zero_noise();
    c["noise"]["quantum"] = json!({"amplitude": 1e6, "band_hz": [1e3, 1e9], "n_modes": 4});
    let r = run(&c, &["ramsey"]);
    assert_eq!(r.code(), 3, "{}", r.stderr());
    assert!(r.stderr().contains("timestep"), "{}", r.stderr());
}

#[test]
fn zero_noise_tomography_is_ideal() {
    let r = run(&zero_noise(), &["tomo"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let budgets = r.json("budgets.json");
    let gates: Vec<&str> = budgets.as_array().unwrap().iter().map(|b| b["gate"].as_str().unwrap()).collect();
    assert_eq!(gates, ["I/2", "X/2", "Y/2"]);
    for b in budgets.as_array().unwrap() {
        assert!((b["F_avg"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{b}");
        for p in ["X", "Y", "Z"] {
            assert!(b["s"][p].as_f64().unwrap().abs() < 1e-9 && b["h"][p].as_f64().unwrap().abs() < 1e-6, "{b}");
        }
    }
    assert!(!r.out().join("probe.csv").exists());
}

#[test]
fn cpmg_and_spectrum_outputs() {
    let mut c = reference();
    c["cpmg"] = json!({"n_pi": [8], "shots": 2, "waits_s": [1e-5, 2e-5]});
    let r = run(&c, &["spectrum"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let cpmg = r.table("cpmg.csv", "n_pi,t_wait_s,A,stderr");
    assert_eq!(cpmg.len(), 2);
    let spectrum = r.table("spectrum.csv", "f_hz,S_rad2_s2_per_hz");
    // S(n/2t) = -ln A / (2π²t)
    for (p, s) in cpmg.iter().zip(&spectrum) {
        assert_eq!(s[0], 8.0 / (2.0 * p[1]));
        assert!((s[1] - (-p[2].ln() / (2.0 * PI * PI * p[1]))).abs() <= 1e-12 * s[1].abs());
    }
    assert_eq!(r.json("manifest.json")["outputs"], json!(["cpmg.csv", "spectrum.csv", "spectrum_fit.json"]));
}

#[test]
fn krotov_pulse_feeds_the_filter_comparison() {
    let mut c = reference();
    c["krotov"] = json!({
        "target": "Y", "duration_s": 100e-9, "steps": 100,
        "schedule": {"variant": "ConstantScaled", "factor": 1.0}, "max_iters": 2
    });
    let k = run(&c, &["krotov"]);
    assert_eq!(k.code(), 0, "{}", k.stderr());
    let history = k.table("krotov_history.csv", "iter,F_inf");
    assert!(history.len() >= 2 && history.iter().all(|r| r[1] > 0.0 && r[1] < 1.0));
    let pulse = k.table("krotov_pulse.csv", "t_s,omega_rad_s");
    assert_eq!(pulse.len(), 101);
    let summary = k.json("krotov.json");
    assert_eq!(summary["target"], "Y");
    assert_eq!(summary["initial_F_inf"].as_f64(), Some(history[0][1]));

    let pulse_path = k.out().join("krotov_pulse.csv");
    c["filter"] = json!({
        "n_pi": 4, "t_wait_s": 2e-6, "points_per_decade": 10,
        "pi_duration_s": 100e-9, "pi_steps": 100, "optimized_pulse": pulse_path
    });
    let f = run(&c, &["filter"]);
    assert_eq!(f.code(), 0, "{}", f.stderr());
    let text = f.file("filter.csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("omega_rad_s,Fz_raw_s2,Fz_normalized,label"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let count = |label: &str| rows.iter().filter(|r| r[3] == label).count();
    assert!(count("gaussian") > 0 && count("gaussian") == count("optimized"));
    for r in &rows {
        let (raw, norm): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(raw >= 0.0 && (0.0..=1.0).contains(&norm));
    }
    let summary = f.json("filter.json");
    for label in ["gaussian", "optimized"] {
        let chi = summary["curves"][label]["chi_classical"].as_f64().unwrap();
        let fav = summary["curves"][label]["F_avg_classical"].as_f64().unwrap();
        assert!(chi > 0.0 && (fav - 0.5 * (1.0 + (-chi).exp())).abs() < 1e-15);
    }
    assert!(summary["optimization"].is_null());
}

#[test]
fn malformed_pulse_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t,omega\n0,1\n1,2\n").unwrap();
    let mut c = reference();
    c["krotov"] = json!({"initial": {"source": "file", "path": bad}, "steps": 10, "max_iters": 1});
    assert_eq!(run(&c, &["krotov"]).code(), 2);
    let uneven = dir.path().join("uneven.csv");
    fs::write(&uneven, "t_s,omega_rad_s\n0,1\n1e-9,2\n3e-9,0\n").unwrap();
    c["krotov"]["initial"]["path"] = json!(uneven);
    let r = run(&c, &["krotov"]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("uniformly"), "{}", r.stderr());
}
