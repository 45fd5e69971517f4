//! Run configuration: defaults, a `key = value` file, then `--set` overrides.
//!
//! Keys are dotted paths into [`RunConfig`] (`model.variant`,
//! `train.stage1.lr`, `model.mae.image_size`, ...). A key must name an
//! existing leaf; anything else is rejected before compute starts.

use std::path::Path;

use dmmv_core::data::{preset, SplitSpec};
use dmmv_core::eval::DEFAULT_SEGMENT_LENGTHS;
use dmmv_core::model::ModelConfig;
use dmmv_core::train::TrainConfig;
use dmmv_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; empty when `synth.kind` provides the data.
    pub path: String,
    /// Dataset or frequency name whose period and look-back become defaults.
    pub preset: String,
    /// `ett` (60/20/20) or `standard` (70/10/20).
    pub split: String,
    /// Report metrics in original units instead of standardised ones.
    pub raw_metrics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// `none`, `decaying_sine` or `trend_sine`.
    pub kind: String,
    pub len: usize,
    pub period: usize,
    pub a_start: f64,
    pub a_end: f64,
    pub slope: f64,
    pub amp: f64,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup: bool,
    pub stage2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Mode letters or names, e.g. `c,d,e,f,g`.
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: String,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: "runs/latest".into(),
            data: DataConfig {
                path: String::new(),
                preset: String::new(),
                split: "ett".into(),
                raw_metrics: false,
            },
            synth: SynthConfig {
                kind: "none".into(),
                len: 2400,
                period: 24,
                a_start: 1.0,
                a_end: 0.2,
                slope: 0.005,
                amp: 1.0,
                noise_std: 0.1,
                seed: 0,
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig {
                warmup: true,
                stage2: true,
            },
            sweep: SweepConfig {
                lengths: DEFAULT_SEGMENT_LENGTHS.to_vec(),
                seeds: vec![0, 1, 2],
            },
            ablate: AblateConfig {
                modes: ["c", "d", "e", "f", "g"].map(String::from).to_vec(),
                seeds: vec![0, 1, 2],
            },
        }
    }
}

impl RunConfig {
    pub fn split_spec(&self) -> Result<SplitSpec> {
        match self.data.split.as_str() {
            "ett" => Ok(SplitSpec::ETT),
            "standard" => Ok(SplitSpec::STANDARD),
            other => Err(Error::Config(format!("data.split must be 'ett' or 'standard', got '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec()?;
        self.model.validate()?;
        self.train.validate()?;
        if !["none", "decaying_sine", "trend_sine"].contains(&self.synth.kind.as_str()) {
            return Err(Error::Config(format!("unknown synth.kind '{}'", self.synth.kind)));
        }
        Ok(())
    }

    /// Dataset source is needed by every command except `synth`.
    pub fn require_data(&self) -> Result<()> {
        match (self.data.path.is_empty(), self.synth.kind == "none") {
            (true, true) => Err(Error::Config("no dataset: set data.path or synth.kind".into())),
            (false, false) => Err(Error::Config("data.path and synth.kind are mutually exclusive".into())),
            _ => Ok(()),
        }
    }

    /// Every leaf as `key = value`, one per line, in a form [`parse_assignments`] reads back.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serialises");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(render).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        leaf => out.push((prefix.to_string(), render(leaf))),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(split_assignment(line).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn split_assignment(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key = value, got '{s}'"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in '{s}'"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_assignments(&text, &path.display().to_string())
}

fn parse_leaf(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got '{raw}'"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(match raw.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => true,
            "false" | "no" | "0" | "off" => false,
            _ => return Err(bad("a boolean")),
        }),
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(f).ok_or_else(|| bad("a finite number"))?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::Number(0.into()));
            let parts = raw.split(',').map(str::trim).filter(|p| !p.is_empty());
            Value::Array(parts.map(|p| parse_leaf(key, &template, p)).collect::<Result<_>>()?)
        }
        Value::Null | Value::Object(_) => return Err(Error::Config(format!("{key} is a section, not a value"))),
    })
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown configuration key '{key}'")))?;
    }
    let value = parse_leaf(key, node, raw)?;
    *node = value;
    Ok(())
}

/// Applies assignments in order to the defaults. A `data.preset` among them
/// first sets the model's period and look-back, which later keys may override.
pub fn build(assignments: &[(String, String)]) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some((_, name)) = assignments.iter().rev().find(|(k, _)| k == "data.preset") {
        if !name.is_empty() {
            let p = preset(name).ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
            base.model.period = p.period;
            base.model.lookback = p.lookback;
        }
    }
    let mut tree = serde_json::to_value(&base).map_err(Error::Json)?;
    for (k, v) in assignments {
        set_path(&mut tree, k, v)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

/// Keys that change the model assembly.
pub fn touches_model(assignments: &[(String, String)]) -> bool {
    assignments.iter().any(|(k, _)| k.starts_with("model.") || k == "data.preset")
}
