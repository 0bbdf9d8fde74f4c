//! Run configuration: TOML sections `[model]`, `[hw]`, `[map]`, `[run]` and
//! `[memory]`. A section may name a shipped `preset`; any other keys in the
//! section override the preset's values.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::address_map::{AddressMap, DramGeometry, Field, MapError};
use crate::cost::{CostProfile, HardwareSpec, ScenarioKind};
use crate::layout::PlacementPolicy;
use crate::memory::{CacheConfig, PrefetchMode};
use crate::model::ModelSpec;

const MODEL_PRESETS: &[(&str, &str)] = &[
    ("llama3.2-1b", include_str!("../presets/model/llama3.2-1b.toml")),
    ("llama3.2-3b", include_str!("../presets/model/llama3.2-3b.toml")),
    ("toy-64", include_str!("../presets/model/toy-64.toml")),
];

const HW_PRESETS: &[(&str, &str)] = &[("s24plus", include_str!("../presets/hw/s24plus.toml"))];

const MAP_PRESETS: &[(&str, &str)] = &[
    ("s24plus", include_str!("../presets/map/s24plus.toml")),
    ("desk", include_str!("../presets/map/desk.toml")),
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{section}: {message}")]
    Field { section: &'static str, message: String },
    #[error("{section}.preset: unknown preset `{name}` (known: {known})")]
    UnknownPreset { section: &'static str, name: String, known: String },
    #[error("unknown section `{0}` (expected model, hw, map, run, memory)")]
    UnknownSection(String),
}

fn field(section: &'static str, message: impl ToString) -> ConfigError {
    ConfigError::Field { section, message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub geometry: DramGeometry,
    /// Address fields above the burst offset, least significant first.
    pub fields: Vec<Field>,
    /// Banks and channels used for PIM; all of them when absent.
    #[serde(default)]
    pub policy: Option<PlacementPolicy>,
}

impl MapConfig {
    pub fn address_map(&self) -> Result<AddressMap, MapError> {
        AddressMap::new(self.geometry, &self.fields)
    }

    pub fn policy(&self) -> PlacementPolicy {
        self.policy.unwrap_or_else(|| PlacementPolicy::all_of(&self.geometry))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_scenario")]
    pub scenario: ScenarioKind,
    #[serde(default = "default_len")]
    pub in_len: u64,
    #[serde(default = "default_len")]
    pub out_len: u64,
    #[serde(default)]
    pub mode: CostProfile,
    #[serde(default)]
    pub seed: u64,
}

fn default_scenario() -> ScenarioKind {
    ScenarioKind::SDdb
}

fn default_len() -> u64 {
    64
}

impl Default for RunSection {
    fn default() -> Self {
        Self { scenario: default_scenario(), in_len: 64, out_len: 64, mode: CostProfile::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub prefetch: PrefetchMode,
}

/// Fully resolved configuration; embedded verbatim in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub hw: HardwareSpec,
    pub map: MapConfig,
    pub run: RunSection,
    pub memory: MemorySection,
}

pub fn model_preset_names() -> Vec<&'static str> {
    MODEL_PRESETS.iter().map(|(n, _)| *n).collect()
}

fn preset_table(section: &'static str, presets: &[(&str, &str)], name: &str) -> Result<Table, ConfigError> {
    let text = presets.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| ConfigError::UnknownPreset {
        section,
        name: name.to_string(),
        known: presets.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
    })?;
    text.parse::<Table>().map_err(|e| field(section, e))
}

fn overlay(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_section<T: DeserializeOwned>(
    section: &'static str,
    doc: &mut Table,
    presets: &[(&str, &str)],
    default_preset: Option<&str>,
) -> Result<T, ConfigError> {
    let mut user = match doc.remove(section) {
        Some(Value::Table(t)) => t,
        Some(_) => return Err(field(section, "must be a table")),
        None => Table::new(),
    };
    let preset = match user.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(field(section, "preset must be a string")),
        None => default_preset.map(str::to_string),
    };
    let mut merged = match &preset {
        Some(name) => preset_table(section, presets, name)?,
        None => Table::new(),
    };
    overlay(&mut merged, user);
    T::deserialize(Value::Table(merged)).map_err(|e| field(section, e.to_string().trim_end()))
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        if doc.get("model").is_none() {
            return Err(field("model", "section is required (set model.preset or the full shape)"));
        }
        let model: ModelSpec = resolve_section("model", &mut doc, MODEL_PRESETS, None)?;
        let hw: HardwareSpec = resolve_section("hw", &mut doc, HW_PRESETS, Some("s24plus"))?;
        let map: MapConfig = resolve_section("map", &mut doc, MAP_PRESETS, Some("s24plus"))?;
        let run: RunSection = resolve_section("run", &mut doc, &[], None)?;
        let memory: MemorySection = resolve_section("memory", &mut doc, &[], None)?;
        if let Some(extra) = doc.keys().next() {
            return Err(ConfigError::UnknownSection(extra.clone()));
        }
        let cfg = Self { model, hw, map, run, memory };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| field("model", e))?;
        self.hw.validate().map_err(|e| field("hw", e))?;
        self.map.address_map().map_err(|e| field("map", e))?;
        self.map.policy().validate(&self.map.geometry).map_err(|e| field("map.policy", e))?;
        self.memory.cache.validate().map_err(|e| field("memory.cache", e))?;
        if self.run.in_len == 0 {
            return Err(field("run", "in_len must be >= 1"));
        }
        if self.run.mode == CostProfile::Analytical && self.hw.table_flop_per_byte == 0 {
            return Err(field("hw", "table_flop_per_byte must be >= 1"));
        }
        Ok(())
    }

    pub fn preset_model(name: &str) -> Result<ModelSpec, ConfigError> {
        let t = preset_table("model", MODEL_PRESETS, name)?;
        ModelSpec::deserialize(Value::Table(t)).map_err(|e| field("model", e))
    }

    pub fn preset_map(name: &str) -> Result<MapConfig, ConfigError> {
        let t = preset_table("map", MAP_PRESETS, name)?;
        MapConfig::deserialize(Value::Table(t)).map_err(|e| field("map", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
