//! Layered TOML configuration.
//!
//! Layers, lowest first: built-in defaults, a named preset, the config file,
//! then command-line values. Tables merge key by key, so a layer only needs
//! the keys it changes. Schema:
//!
//! ```toml
//! preset = "default"         # or "desk"
//!
//! [run]
//! pool = "pool.msal"
//! target_class = 11
//! policy = "misical"          # random | entropy | bald | coreset | misical
//! policies = ["misical", "random"]   # compare only
//! seeds = [0, 1, 2, 3, 4]
//! out = "out"
//! record_wall_time = false
//!
//! [budget]
//! initial_frac = 0.025
//! total_frac = 0.05
//! # initial_count = 250     # overrides initial_frac
//!
//! [agent]                     # see AgentParams
//! [iou]                       # simulate, seed, h_min
//! [synth]                     # see SynthConfig
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::{Table, Value};

use crate::agent::AgentParams;
use crate::engine::{EngineConfig, PolicyKind};
use crate::error::{config, Result};
use crate::pool::Budget;
use crate::synth::{IouModel, SynthConfig, DEFAULT_TARGET};

pub const PRESETS: [&str; 2] = ["default", "desk"];

const DESK: &str = r#"
[agent]
candidates = 1280
select = 64
buffer_capacity = 6400
epsilon_schedule = "linear"
epsilon = 1.0
epsilon_end = 0.1
epsilon_steps = 500

[budget]
initial_count = 250
"#;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub pool: Option<PathBuf>,
    pub target_class: usize,
    pub policy: PolicyKind,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            pool: None,
            target_class: DEFAULT_TARGET,
            policy: PolicyKind::Misical,
            policies: vec![PolicyKind::Misical, PolicyKind::Random],
            seeds: (0..5).collect(),
            out: None,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub initial_frac: f64,
    pub total_frac: f64,
    pub initial_count: Option<usize>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            initial_frac: 0.025,
            total_frac: 0.05,
            initial_count: None,
        }
    }
}

impl BudgetSection {
    pub fn budget(&self) -> Budget {
        Budget {
            initial_fraction: self.initial_frac,
            total_fraction: self.total_frac,
            initial_count: self.initial_count,
        }
    }
}

/// Simulated IoU tracking from labelled pixel counts.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IouSection {
    pub simulate: bool,
    /// Seed of the per-class slopes.
    pub seed: u64,
    pub h_min: f64,
}

impl Default for IouSection {
    fn default() -> Self {
        Self {
            simulate: true,
            seed: 0,
            h_min: IouModel::DEFAULT_H_MIN,
        }
    }
}

impl IouSection {
    pub fn model(&self, classes: usize) -> Option<IouModel> {
        self.simulate.then(|| {
            let mut m = IouModel::random(classes, self.seed);
            m.h_min = self.h_min;
            m
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub run: RunSection,
    pub budget: BudgetSection,
    pub agent: AgentParams,
    pub iou: IouSection,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.budget.budget().validate()?;
        self.synth.validate()?;
        if self.run.seeds.is_empty() {
            return Err(config("run.seeds is empty"));
        }
        if !(self.iou.h_min > 0.0 && self.iou.h_min.is_finite()) {
            return Err(config("iou.h_min must be positive"));
        }
        Ok(())
    }

    pub fn engine(&self, policy: PolicyKind, classes: usize) -> EngineConfig {
        EngineConfig {
            policy,
            target_class: self.run.target_class,
            budget: self.budget.budget(),
            agent: self.agent.clone(),
            iou: self.iou.model(classes),
            record_wall_time: self.run.record_wall_time,
        }
    }
}

/// The keys a preset changes relative to the defaults.
pub fn preset_table(name: &str) -> Result<Table> {
    match name {
        "default" => Ok(Table::new()),
        "desk" => Ok(DESK.parse().expect("built-in preset parses")),
        other => Err(config(format!(
            "unknown preset '{other}' ({})",
            PRESETS.join(", ")
        ))),
    }
}

/// Merges `upper` into `lower`, recursing into tables.
///
/// A `budget` table that sets `initial_frac` without `initial_count` drops any
/// lower `initial_count`, so a fraction given on a higher layer is not
/// shadowed by a preset's absolute count.
pub fn merge(lower: &mut Table, upper: &Table) {
    for (key, value) in upper {
        if key == "budget" {
            if let (Some(Value::Table(up)), Some(Value::Table(low))) =
                (Some(value), lower.get_mut("budget"))
            {
                if up.contains_key("initial_frac") && !up.contains_key("initial_count") {
                    low.remove("initial_count");
                }
            }
        }
        match (lower.get_mut(key), value) {
            (Some(Value::Table(low)), Value::Table(up)) => merge(low, up),
            _ => {
                lower.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Parses one `section.key=value` assignment into a nested table. The value
/// is read as a TOML literal, falling back to a bare string.
pub fn parse_assignment(assignment: &str) -> Result<Table> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config(format!("expected section.key=value, got '{assignment}'")))?;
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config(format!("bad key path '{path}'")));
    }
    let mut table = Table::new();
    table.insert(keys[keys.len() - 1].to_string(), value);
    for key in keys[..keys.len() - 1].iter().rev() {
        let mut outer = Table::new();
        outer.insert(key.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

/// Sets `section.key` in a table, creating the section.
pub fn set_key(table: &mut Table, section: &str, key: &str, value: Value) {
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = entry {
        t.insert(key.to_string(), value);
    }
}

pub fn read_file_layer(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| config(format!("{}: {e}", path.display())))
}

/// Resolves a configuration from an optional file layer and a CLI layer.
/// The preset is taken from the highest layer that names one.
pub fn resolve(file: Option<&Table>, cli: &Table) -> Result<RunConfig> {
    let preset = [Some(cli), file]
        .into_iter()
        .flatten()
        .find_map(|t| t.get("preset"))
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| config("preset must be a string"))
        })
        .transpose()?
        .unwrap_or_else(|| "default".to_string());
    let mut merged = preset_table(&preset)?;
    if let Some(f) = file {
        merge(&mut merged, f);
    }
    merge(&mut merged, cli);
    merged.insert("preset".into(), Value::String(preset));
    let cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a seed list: `3`, `0,1,2` or `0..5`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || config(format!("bad seed list '{spec}' (e.g. 0,1,2 or 0..5)"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ScheduleKind;

    fn table(s: &str) -> Table {
        s.parse().unwrap()
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let cfg = resolve(None, &Table::new()).unwrap();
        assert_eq!(cfg.agent, AgentParams::default());
        assert_eq!(cfg.budget, BudgetSection::default());
        assert_eq!(cfg.preset.as_deref(), Some("default"));
    }

    #[test]
    fn desk_preset() {
        let cfg = resolve(None, &table("preset = 'desk'")).unwrap();
        assert_eq!(cfg.agent.candidates, 1280);
        assert_eq!(cfg.agent.select, 64);
        assert_eq!(cfg.agent.buffer_capacity, 6400);
        assert_eq!(cfg.agent.epsilon_schedule, ScheduleKind::Linear);
        assert_eq!(cfg.budget.initial_count, Some(250));
        assert_eq!(cfg.agent.batch_size, 256);
    }

    #[test]
    fn three_layers() {
        let file = table("[agent]\nselect = 32\ngamma = 0.5\n");
        let cli = parse_assignment("agent.gamma=0.9").unwrap();
        let cfg = resolve(Some(&file), &cli).unwrap();
        assert_eq!(cfg.agent.gamma, 0.9);
        assert_eq!(cfg.agent.select, 32);
        assert_eq!(cfg.agent.candidates, 2000);
    }

    #[test]
    fn fraction_clears_preset_count() {
        let file = table("preset = 'desk'\n[budget]\ninitial_frac = 0.01\n");
        let cfg = resolve(Some(&file), &Table::new()).unwrap();
        assert_eq!(cfg.budget.initial_count, None);
        assert_eq!(cfg.budget.initial_frac, 0.01);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = resolve(None, &table("[agent]\ngamme = 0.5\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("gamme"), "{err}");
        let err = resolve(None, &table("preset = 'nope'")).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        for bad in [
            "[agent]\ngamma = 1.5",
            "[budget]\ntotal_frac = 0.0",
            "[run]\nseeds = []",
        ] {
            assert_eq!(
                resolve(None, &table(bad)).unwrap_err().exit_code(),
                2,
                "{bad}"
            );
        }
    }

    #[test]
    fn assignments() {
        let t = parse_assignment("run.policy=random").unwrap();
        assert_eq!(t["run"]["policy"].as_str(), Some("random"));
        let t = parse_assignment("agent.epsilon_steps = 500").unwrap();
        assert_eq!(t["agent"]["epsilon_steps"].as_integer(), Some(500));
        let t = parse_assignment("run.seeds=[1, 2]").unwrap();
        assert_eq!(t["run"]["seeds"].as_array().unwrap().len(), 2);
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment(".x=1").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 7").unwrap(), vec![4, 7]);
        assert_eq!(parse_seeds("9").unwrap(), vec![9]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
