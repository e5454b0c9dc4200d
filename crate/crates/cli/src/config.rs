use std::path::Path;

use nkm::analysis::{DescentConfig, ImportanceConfig};
use nkm::dataset::SynthConfig;
use nkm::edmd::EdmdConfig;
use nkm::model::{AblationFlags, ArchConfig};
use nkm::numerics::optim::OptimConfig;
use nkm::training::{FitConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub folds: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub tau_max: usize,
    /// Visits per subject of the synthetic sequences rolled out by
    /// `verify-bound`.
    pub sequence_visits: usize,
    pub descent_windows: usize,
    /// Step size of the no-backtracking negative control.
    pub control_step: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            tau_max: 20,
            sequence_visits: 25,
            descent_windows: 32,
            control_step: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub rollout_steps: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self { rollout_steps: 5 }
    }
}

/// Every setting a command may read.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub flags: AblationFlags,
    pub synth: SynthConfig,
    pub edmd: EdmdConfig,
    pub cv: CvSection,
    pub importance: ImportanceConfig,
    pub descent: DescentConfig,
    pub verify: VerifySection,
    pub latents: LatentSection,
}

impl RunConfig {
    pub fn for_preset(preset: &str) -> Result<Self, CliError> {
        let fit = FitConfig::preset(preset)?;
        Ok(Self {
            preset: preset.into(),
            model: fit.model,
            train: fit.train,
            optim: fit.optim,
            loss: fit.loss,
            ..Self::default()
        })
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            optim: self.optim.clone(),
            loss: self.loss.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.fit().validate()?;
        self.flags.validate()?;
        self.synth.validate()?;
        self.edmd.validate()?;
        if self.cv.folds < 2 {
            return Err(CliError::Runtime("cv.folds must be ≥ 2".into()));
        }
        if self.importance.window != self.model.window {
            return Err(CliError::Runtime(
                "importance.window must equal model.window".into(),
            ));
        }
        Ok(())
    }
}

/// Leaves of a nested JSON object as `(dotted.key, value)`. Keys that
/// already contain dots are kept as written.
fn leaves(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Set `root[a][b]… = value` for the dotted `key`.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed config key `{key}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let map = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(CliError::Runtime(format!(
                    "config key `{key}`: `{}` is not a section",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Parse a `--set` value as JSON, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), parse_value(v))),
        _ => Err(CliError::Usage(format!(
            "--set expects key=value, got `{s}`"
        ))),
    }
}

/// Preset defaults, then the config file, then `--set` overrides, then the
/// explicit `--seed`.
pub fn resolve(
    preset: Option<&str>,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Runtime(format!("cannot read config `{}`: {e}", p.display()))
            })?;
            let v: Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Runtime(format!("invalid JSON in `{}`: {e}", p.display()))
            })?;
            if !v.is_object() {
                return Err(CliError::Runtime(format!(
                    "config `{}` must be a JSON object",
                    p.display()
                )));
            }
            Some(v)
        }
        None => None,
    };
    let mut pairs = Vec::new();
    if let Some(v) = &file_value {
        leaves("", v, &mut pairs);
    }
    for o in overrides {
        pairs.push(parse_override(o)?);
    }
    // The preset chooses the base, so it is resolved before anything else.
    let mut preset_name = preset.unwrap_or("desk").to_string();
    if preset.is_none() {
        if let Some((_, Value::String(p))) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            preset_name = p.clone();
        }
    }
    let mut root = serde_json::to_value(RunConfig::for_preset(&preset_name)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (k, v) in pairs {
        set_path(&mut root, &k, v)?;
    }
    if let Some(s) = seed {
        set_path(&mut root, "seed", Value::from(s))?;
    }
    set_path(&mut root, "preset", Value::String(preset_name))?;
    let cfg: RunConfig =
        serde_json::from_value(root).map_err(|e| CliError::Runtime(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
