//! Run configuration. Every block rejects unknown keys; experiment blocks
//! that are left out take the defaults below, which reproduce the
//! acceptance-suite settings.

use std::f64::consts::PI;
use std::path::PathBuf;

use chargenoise::dynamics::hz;
use chargenoise::krotov::{Gradient, StepSchedule};
use chargenoise::noise::{build_one_over_f, BathModeSet};
use chargenoise::protocols::{GateSpec, NoiseModel, PulseShape, SimConfig};
use chargenoise::tomography::GateLabel;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: Threads,
    pub noise: NoiseBlock,
    pub pulse: PulseBlock,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub ramsey: RamseyBlock,
    #[serde(default)]
    pub cpmg: CpmgBlock,
    #[serde(default)]
    pub krotov: KrotovBlock,
    #[serde(default)]
    pub tomo: TomoBlock,
    #[serde(default)]
    pub filter: FilterBlock,
}

/// Worker count, or "auto" for one per core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawThreads", into = "RawThreads")]
pub enum Threads {
    #[default]
    Auto,
    Count(usize),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawThreads {
    Count(usize),
    Name(String),
}

impl TryFrom<RawThreads> for Threads {
    type Error = String;

    fn try_from(raw: RawThreads) -> Result<Self, String> {
        match raw {
            RawThreads::Count(n) => Ok(Threads::Count(n)),
            RawThreads::Name(s) if s == "auto" => Ok(Threads::Auto),
            RawThreads::Name(s) => Err(format!("threads must be a count or \"auto\", got {s:?}")),
        }
    }
}

impl From<Threads> for RawThreads {
    fn from(t: Threads) -> Self {
        match t {
            Threads::Auto => RawThreads::Name("auto".into()),
            Threads::Count(n) => RawThreads::Count(n),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub classical: Option<ClassicalBath>,
    pub quantum: Option<QuantumBath>,
    /// Standard deviation of the shot-constant offset (Hz).
    #[serde(default)]
    pub quasistatic_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalBath {
    /// Total standard deviation of the classical detuning (rad/s).
    pub delta_c_rad_s: f64,
    pub band_hz: [f64; 2],
    pub n_modes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumBath {
    /// `A` in `S(f) = A/f`, (rad/s)².
    pub amplitude: f64,
    pub band_hz: [f64; 2],
    pub n_modes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseBlock {
    pub shape: Shape,
    /// Gate time shared by π/2 and π rotations (s).
    pub t_pi2_s: f64,
    /// Gaussian σ as a fraction of the gate time.
    pub width: Option<f64>,
    /// Integration step inside pulses (s); defaults to t_pi2_s/40.
    pub max_dt_s: Option<f64>,
    /// Optional cross-check of the π/2 peak Rabi frequency (rad/s).
    pub amplitude_rad_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub free_dt_s: f64,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self { free_dt_s: 1.25e-9 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RamseyBlock {
    pub shots: usize,
    pub wait_max_s: f64,
    pub wait_points: usize,
    /// Fixed drive detuning δ₀ (Hz).
    pub detuning_hz: f64,
}

impl Default for RamseyBlock {
    fn default() -> Self {
        Self {
            shots: 200,
            wait_max_s: 50e-6,
            wait_points: 201,
            detuning_hz: 0.2e6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpmgBlock {
    pub n_pi: Vec<usize>,
    pub shots: usize,
    /// Waits as multiples of the predicted half-decay time of each n_π.
    pub wait_factors: Vec<f64>,
    /// Explicit waits shared by every n_π (s); replaces wait_factors.
    pub waits_s: Option<Vec<f64>>,
}

impl Default for CpmgBlock {
    fn default() -> Self {
        Self {
            n_pi: vec![2, 4, 8, 16, 32],
            shots: 64,
            wait_factors: vec![0.4, 0.55, 0.75, 1.0, 1.3, 1.7],
            waits_s: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KrotovTarget {
    #[serde(rename = "X/2")]
    X2,
    #[serde(rename = "Y/2")]
    Y2,
    X,
    Y,
}

impl KrotovTarget {
    /// (rotation angle, drive phase)
    pub fn rotation(self) -> (f64, f64) {
        match self {
            KrotovTarget::X2 => (PI / 2.0, 0.0),
            KrotovTarget::Y2 => (PI / 2.0, PI / 2.0),
            KrotovTarget::X => (PI, 0.0),
            KrotovTarget::Y => (PI, PI / 2.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialPulse {
    /// Piecewise-constant Gaussian, σ = width·duration.
    Gaussian { width: f64 },
    /// CSV with a `t_s,omega_rad_s` header on a uniform grid.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrotovBlock {
    pub target: KrotovTarget,
    pub duration_s: f64,
    pub steps: usize,
    pub initial: InitialPulse,
    pub schedule: StepSchedule,
    pub max_iters: usize,
    pub stop_infidelity: f64,
    pub gradient: Gradient,
}

impl Default for KrotovBlock {
    fn default() -> Self {
        Self {
            target: KrotovTarget::Y2,
            duration_s: 335e-9,
            steps: 335,
            initial: InitialPulse::Gaussian { width: 0.2 },
            schedule: StepSchedule::ConstantScaled { factor: 0.02 },
            max_iters: 2000,
            stop_infidelity: 1e-9,
            gradient: Gradient::WithKernels,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomoBlock {
    pub shots: usize,
    pub probe: Option<ProbeBlock>,
}

impl Default for TomoBlock {
    fn default() -> Self {
        Self { shots: 500, probe: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    pub germ: Vec<GateLabel>,
    pub reps: Vec<usize>,
    pub shots: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterBlock {
    pub n_pi: usize,
    pub t_wait_s: f64,
    pub points_per_decade: usize,
    /// The reference and optimized π pulses are built like the Krotov
    /// block's pulse with target Y and these settings.
    pub pi_duration_s: f64,
    pub pi_steps: usize,
    pub pi_width: f64,
    /// Use a stored optimized π pulse instead of optimizing one.
    pub optimized_pulse: Option<PathBuf>,
    pub schedule: StepSchedule,
    pub max_iters: usize,
}

impl Default for FilterBlock {
    fn default() -> Self {
        Self {
            n_pi: 8,
            t_wait_s: 20e-6,
            points_per_decade: 400,
            pi_duration_s: 335e-9,
            pi_steps: 335,
            pi_width: 0.2,
            optimized_pulse: None,
            schedule: StepSchedule::ConstantScaled { factor: 60.0 },
            max_iters: 2000,
        }
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(msg.into()))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), CliError> {
    check(v >= 0.0 && v.is_finite(), format!("{name} must be finite and non-negative, got {v}"))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    check(v > 0.0 && v.is_finite(), format!("{name} must be finite and positive, got {v}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Threads::Count(n) = self.threads {
            check(n > 0, "threads must be at least 1")?;
        }
        non_negative("noise.quasistatic_hz", self.noise.quasistatic_hz)?;
        if let Some(c) = &self.noise.classical {
            non_negative("noise.classical.delta_c_rad_s", c.delta_c_rad_s)?;
        }
        if let Some(q) = &self.noise.quantum {
            non_negative("noise.quantum.amplitude", q.amplitude)?;
        }
        positive("pulse.t_pi2_s", self.pulse.t_pi2_s)?;
        match (self.pulse.shape, self.pulse.width) {
            (Shape::Gaussian, Some(w)) => positive("pulse.width", w)?,
            (Shape::Gaussian, None) => return Err(CliError::Validation("gaussian pulse needs pulse.width".into())),
            (Shape::Square, Some(_)) => {
                return Err(CliError::Validation("pulse.width only applies to gaussian pulses".into()))
            }
            (Shape::Square, None) => {}
        }
        if let Some(dt) = self.pulse.max_dt_s {
            positive("pulse.max_dt_s", dt)?;
        }
        positive("sim.free_dt_s", self.sim.free_dt_s)?;
        Ok(())
    }

    pub fn gate(&self) -> Result<GateSpec, CliError> {
        let p = &self.pulse;
        let shape = match p.shape {
            Shape::Square => PulseShape::Square,
            Shape::Gaussian => PulseShape::Gaussian { width: p.width.unwrap_or_default() },
        };
        let gate = GateSpec {
            shape,
            duration: p.t_pi2_s,
            max_dt: p.max_dt_s.unwrap_or(p.t_pi2_s / 40.0),
        };
        if let Some(expected) = p.amplitude_rad_s {
            let actual = gate.amplitude(PI / 2.0)?;
            check(
                (actual - expected).abs() <= 1e-3 * actual,
                format!("pulse.amplitude_rad_s = {expected:.6e} disagrees with the π/2 area, which needs {actual:.6e}"),
            )?;
        }
        Ok(gate)
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            free_dt: self.sim.free_dt_s,
            seed: self.seed,
        }
    }

    pub fn noise(&self, detuning_hz: f64) -> Result<NoiseModel, CliError> {
        let classical = match &self.noise.classical {
            Some(c) if c.delta_c_rad_s > 0.0 => {
                build_one_over_f(c.band_hz[0], c.band_hz[1], c.n_modes, 1.0)?.with_total_std(c.delta_c_rad_s)
            }
            _ => BathModeSet::empty(),
        };
        let quantum = match &self.noise.quantum {
            Some(q) if q.amplitude > 0.0 => build_one_over_f(q.band_hz[0], q.band_hz[1], q.n_modes, q.amplitude)?,
            _ => BathModeSet::empty(),
        };
        Ok(NoiseModel {
            classical,
            quantum,
            quasistatic_std: hz(self.noise.quasistatic_hz),
            delta0: hz(detuning_hz),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"seed": 3, "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}}"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.threads, Threads::Auto);
        assert_eq!(c.cpmg.n_pi, vec![2, 4, 8, 16, 32]);
        let noise = c.noise(0.0).unwrap();
        assert!(noise.classical.is_empty() && noise.quantum.is_empty());
        assert!((c.gate().unwrap().max_dt - 1.5e-8 / 40.0).abs() < 1e-20);
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        for text in [
            r#"{"seed": 3, "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}, "ramsy": {}}"#,
            r#"{"seed": 3, "noise": {"quasistatic": 1.0}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}}"#,
            r#"{"seed": 3, "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}, "ramsey": {"shot": 3}}"#,
            r#"{"seed": 3, "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}, "krotov": {"schedule": {"variant": "ConstantScaled", "factr": 1}}}"#,
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let text = r#"{"noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}}"#;
        assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))));
    }

    #[test]
    fn physical_parameters_are_checked() {
        let text = r#"{"seed": 1, "noise": {"quasistatic_hz": -1}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}}"#;
        assert!(RunConfig::parse(text).is_err());
        let text = r#"{"seed": 1, "noise": {}, "pulse": {"shape": "gaussian", "t_pi2_s": 1.5e-8}}"#;
        assert!(RunConfig::parse(text).is_err());
        let text = r#"{"seed": 1, "threads": "many", "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8}}"#;
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn amplitude_cross_check() {
        // a 15 ns square π/2 pulse needs Ω = π/(2·15 ns)
        let good = format!(
            r#"{{"seed": 1, "noise": {{}}, "pulse": {{"shape": "square", "t_pi2_s": 1.5e-8, "amplitude_rad_s": {}}}}}"#,
            PI / 2.0 / 1.5e-8
        );
        assert!(RunConfig::parse(&good).unwrap().gate().is_ok());
        let bad = r#"{"seed": 1, "noise": {}, "pulse": {"shape": "square", "t_pi2_s": 1.5e-8, "amplitude_rad_s": 1e6}}"#;
        assert!(RunConfig::parse(bad).unwrap().gate().is_err());
    }

    #[test]
    fn threads_round_trip() {
        let c: Threads = serde_json::from_str("4").unwrap();
        assert_eq!(c, Threads::Count(4));
        assert_eq!(serde_json::to_string(&Threads::Auto).unwrap(), "\"auto\"");
    }

    /// Every key the config types emit must be declared in the schema at the
    /// same place, and every declared key must exist in the types.
    fn same_keys(value: &serde_json::Value, schema: &serde_json::Value, defs: &serde_json::Value, path: &str) {
        let schema = match schema.get("$ref").and_then(|r| r.as_str()) {
            Some(r) => &defs[r.trim_start_matches("#/$defs/")],
            None => schema,
        };
        let Some(obj) = value.as_object() else { return };
        let variants: Vec<&serde_json::Value> = match schema.get("oneOf") {
            Some(list) => list.as_array().unwrap().iter().filter(|v| v.get("properties").is_some()).collect(),
            None => vec![schema],
        };
        let variant = variants
            .iter()
            .find(|v| obj.keys().all(|k| v["properties"].get(k).is_some()))
            .unwrap_or_else(|| panic!("{path}: keys {:?} not declared in the schema", obj.keys().collect::<Vec<_>>()));
        let props = variant["properties"].as_object().unwrap();
        for key in props.keys() {
            assert!(obj.contains_key(key), "{path}.{key} is in the schema but not in the config types");
        }
        for (key, v) in obj {
            same_keys(v, &props[key], defs, &format!("{path}.{key}"));
        }
    }

    #[test]
    fn shipped_configs_match_the_schema() {
        let schema: serde_json::Value =
            serde_json::from_str(include_str!("../../../schemas/run_config.schema.json")).unwrap();
        for text in [include_str!("../../../configs/reference.json"), include_str!("../../../configs/zero-noise.json")] {
            let config = RunConfig::parse(text).unwrap();
            config.gate().unwrap();
            config.noise(0.0).unwrap();
            let full = serde_json::to_value(&config).unwrap();
            same_keys(&full, &schema, &schema["$defs"], "$");
        }
        let reference = RunConfig::parse(include_str!("../../../configs/reference.json")).unwrap();
        let file = serde_json::json!({"source": "file", "path": "p.csv"});
        let mut v = serde_json::to_value(&reference).unwrap();
        v["krotov"]["initial"] = file;
        v["krotov"]["schedule"] = serde_json::to_value(StepSchedule::SinusoidalProgressive {
            base: 1e-3,
            omega: 3e7,
            gaussian_factor: 0.02,
            bins: [1e-2, 1e-4],
        })
        .unwrap();
        same_keys(&v, &schema, &schema["$defs"], "$");
    }

    #[test]
    fn reference_config_is_the_calibrated_model() {
        use chargenoise::protocols::{CALIBRATED_BAND_HZ, CALIBRATED_CLASSICAL_STD, CALIBRATED_MODES};
        let config = RunConfig::parse(include_str!("../../../configs/reference.json")).unwrap();
        let from_config = config.noise(0.0).unwrap();
        let reference = NoiseModel::calibrated(0.0).unwrap();
        assert_eq!(from_config, reference);
        let c = config.noise.classical.as_ref().unwrap();
        assert_eq!((c.band_hz[0], c.band_hz[1]), CALIBRATED_BAND_HZ);
        assert_eq!(c.n_modes, CALIBRATED_MODES);
        assert_eq!(c.delta_c_rad_s, CALIBRATED_CLASSICAL_STD);
    }
}
