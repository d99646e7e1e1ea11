//! Declarative experiment configuration.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment.
//! Keys are dotted paths into [`ExperimentConfig`] (`mppi.num_rollouts`,
//! `init.net_steps`, ...). Values are JSON literals (`3`, `0.5`, `true`,
//! `[0.3, 0.3]`); anything that does not parse as JSON is taken as a
//! string. Command-line `--set key=value` overrides use the same syntax and
//! are applied after the file.
//!
//! `lwpr2 show-config` prints every key with its default.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

use lwpr2_core::mppi::MppiConfig;
use lwpr2_core::sim::{RegimeSpec, TrackSpec};
use lwpr2_core::trainer::{InitConfig, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    /// Semi-axis along x, m.
    pub a: f64,
    /// Semi-axis along y, m.
    pub b: f64,
    pub width: f64,
    pub waypoints: usize,
}

impl TrackConfig {
    pub fn spec(&self) -> TrackSpec {
        TrackSpec::ellipse(self.a, self.b, self.waypoints, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidConfig {
    pub regime: String,
    /// Laps in each direction at each speed.
    pub laps: usize,
    pub speeds: Vec<f64>,
    /// Circle maneuvers at a fixed radius, one set per direction.
    pub skidpad_radius: f64,
    pub skidpad_speed: f64,
    pub skidpad_laps: usize,
    pub excitation: f64,
    /// Laps per direction driven by the controller planning with the
    /// simulator's own model of the identification regime.
    pub closed_loop_laps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    /// Regime of the clockwise adaptation stream.
    pub regime: String,
    /// Regime of the counter-clockwise retention laps.
    pub validation_regime: String,
    pub laps: usize,
    pub speed: f64,
    pub excitation: f64,
    /// Counter-clockwise laps used to measure retention.
    pub validation_laps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub regime: String,
    /// Regime of the contrast run with the same driving.
    pub control_regime: String,
    pub laps: usize,
    pub speed: f64,
    pub excitation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveConfig {
    /// Regime the models are initialized in.
    pub sysid_regime: String,
    /// Regime the vehicle actually drives in.
    pub drive_regime: String,
    pub trials: usize,
    pub laps: usize,
    /// Simulator steps per controller update.
    pub control_every: usize,
    pub start_speed: f64,
    /// A lap slower than this ends the trial.
    pub max_lap_time: f64,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoakConfig {
    pub minutes: f64,
    /// Regimes alternate every this many minutes.
    pub segment_minutes: f64,
    pub regimes: Vec<String>,
    pub checkpoints: usize,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dt: f64,
    pub noise_frac: f64,
    pub track: TrackConfig,
    pub sysid: SysidConfig,
    pub stream: StreamConfig,
    pub shift: ShiftConfig,
    pub active: ActiveConfig,
    pub soak: SoakConfig,
    pub init: InitConfig,
    pub trainer: TrainerConfig,
    pub mppi: MppiConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 0.02,
            noise_frac: 0.002,
            track: TrackConfig { a: 12.0, b: 7.0, width: 3.0, waypoints: 400 },
            sysid: SysidConfig {
                regime: "nominal".into(),
                laps: 10,
                speeds: vec![3.0, 5.0],
                skidpad_radius: 5.0,
                skidpad_speed: 4.0,
                skidpad_laps: 3,
                excitation: 0.15,
                closed_loop_laps: 5,
            },
            stream: StreamConfig {
                regime: "custom:0.85:1".into(),
                validation_regime: "nominal".into(),
                laps: 50,
                speed: 4.0,
                excitation: 0.05,
                validation_laps: 5,
            },
            shift: ShiftConfig {
                regime: "mud".into(),
                control_regime: "nominal".into(),
                laps: 10,
                speed: 4.0,
                excitation: 0.05,
            },
            active: ActiveConfig {
                sysid_regime: "nominal".into(),
                drive_regime: "custom:1:1:0.5".into(),
                trials: 5,
                laps: 10,
                control_every: 2,
                start_speed: 3.0,
                max_lap_time: 60.0,
                methods: vec!["base".into(), "sgd".into(), "lwpr2".into()],
            },
            soak: SoakConfig {
                minutes: 20.0,
                segment_minutes: 5.0,
                regimes: vec!["nominal".into(), "mud".into()],
                checkpoints: 3,
                speed: 4.0,
            },
            init: InitConfig { k_max: 12, gmm_max_points: 4000, ..InitConfig::default() },
            trainer: TrainerConfig::default(),
            mppi: MppiConfig {
                num_rollouts: 128,
                horizon: 40,
                dt: 0.04,
                temperature: 5.0,
                noise_std: [0.15, 0.3],
                target_speed: 6.0,
                ..MppiConfig::default()
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> =
            node.as_object_mut().ok_or_else(|| anyhow!("'{key}' descends into a non-table value"))?;
        if !map.contains_key(*part) {
            bail!("unknown config key '{key}'");
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Apply `key=value` assignments in order.
    pub fn with_overrides<'a>(self, assignments: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut root = serde_json::to_value(&self)?;
        for a in assignments {
            let (k, v) = a.split_once('=').ok_or_else(|| anyhow!("expected key=value, got '{a}'"))?;
            set_path(&mut root, k.trim(), parse_value(v))?;
        }
        let cfg: Self = serde_json::from_value(root).context("config value has the wrong type")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.split_once('#').map_or(l, |(before, _)| before).trim())
            .filter(|l| !l.is_empty())
            .collect();
        Self::default().with_overrides(lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_kv_string(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut pairs);
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for r in [
            &self.sysid.regime,
            &self.stream.regime,
            &self.stream.validation_regime,
            &self.shift.regime,
            &self.shift.control_regime,
            &self.active.sysid_regime,
            &self.active.drive_regime,
        ]
        .into_iter()
        .chain(&self.soak.regimes)
        {
            RegimeSpec::parse(r)?;
        }
        for m in &self.active.methods {
            lwpr2_core::trainer::Method::parse(m)?;
        }
        if self.sysid.speeds.is_empty() || self.sysid.laps == 0 {
            bail!("sysid needs at least one speed and one lap");
        }
        if self.soak.regimes.is_empty() || !(self.soak.segment_minutes > 0.0) {
            bail!("soak needs regimes and a positive segment length");
        }
        if self.active.control_every == 0 {
            bail!("active.control_every must be at least 1");
        }
        self.trainer.validate()?;
        self.mppi.validate()?;
        if !(self.dt > 0.0 && self.dt <= lwpr2_core::sim::MAX_DT) {
            bail!("dt must lie in (0, {}]", lwpr2_core::sim::MAX_DT);
        }
        Ok(())
    }

    pub fn regime(name: &str) -> RegimeSpec {
        RegimeSpec::parse(name).expect("validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_kv_string();
        assert!(text.contains("mppi.num_rollouts = 128\n"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# desk run\nseed = 7\nmppi.noise_std = [0.2, 0.1]  # tighter\nstream.regime = mud\ntrainer.method = sgd\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mppi.noise_std, [0.2, 0.1]);
        assert_eq!(cfg.stream.regime, "mud");
        assert_eq!(cfg.trainer.method, lwpr2_core::trainer::Method::Sgd);
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        assert!(ExperimentConfig::parse("nope = 1").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
        assert!(ExperimentConfig::parse("seed = \"x\"").is_err());
        assert!(ExperimentConfig::parse("stream.regime = lava").is_err());
        assert!(ExperimentConfig::parse("trainer.ring_capacity = 10").is_err());
    }
}
