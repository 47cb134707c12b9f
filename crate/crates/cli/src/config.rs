//! Experiment configuration: one JSON document, patched by `--set` overrides.

use std::path::Path;

use anyhow::{bail, Context as _, Result};
use eae_core::corpus::{CorpusOptions, WorldOptions};
use eae_core::modelzoo::{ModelConfig, Variant};
use eae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub collision_rate: f64,
    pub long_alias_rate: f64,
}

impl WorldSpec {
    pub fn options(&self) -> WorldOptions {
        WorldOptions {
            collision_rate: self.collision_rate,
            long_alias_rate: self.long_alias_rate,
        }
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_entities: 1000,
            n_relations: 4,
            seed: 0,
            collision_rate: WorldOptions::default().collision_rate,
            long_alias_rate: WorldOptions::default().long_alias_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_contexts: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub unlinked_fraction: f64,
    pub max_len: usize,
    pub max_facts: usize,
}

impl CorpusSpec {
    pub fn options(&self) -> CorpusOptions {
        CorpusOptions {
            unlinked_fraction: self.unlinked_fraction,
            max_len: self.max_len,
            max_facts: self.max_facts,
        }
    }
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_contexts: 50_000,
            test_fraction: 0.02,
            seed: 1,
            unlinked_fraction: CorpusOptions::default().unlinked_fraction,
            max_len: CorpusOptions::default().max_len,
            max_facts: CorpusOptions::default().max_facts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaSpec {
    pub train_questions: usize,
    pub eval_questions: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for QaSpec {
    fn default() -> Self {
        Self {
            train_questions: 2000,
            eval_questions: 500,
            seed: 2,
            train: TrainConfig::qa(),
        }
    }
}

/// Retrieval width for sweeps: a row count or the dense readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    K(usize),
    Full(FullTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullTag {
    Full,
}

impl KSpec {
    pub fn width(self) -> Option<usize> {
        match self {
            KSpec::K(k) => Some(k),
            KSpec::Full(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub world: WorldSpec,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub qa: QaSpec,
    /// Widths for `topk-sweep`.
    pub ks: Vec<KSpec>,
    /// Variants trained by `ablate`.
    pub variants: Vec<Variant>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            qa: QaSpec::default(),
            ks: vec![KSpec::K(1), KSpec::K(10), KSpec::K(100), KSpec::Full(FullTag::Full)],
            variants: vec![Variant::Eae, Variant::NoEae, Variant::EaeUnsup],
        }
    }
}

/// Reads `path` (or the defaults) and applies `key.path=value` overrides in order.
/// Values parse as JSON and fall back to plain strings.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Experiment> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::to_value(Experiment::default())?,
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let exp: Experiment = serde_json::from_value(doc).context("invalid configuration")?;
    Ok(exp)
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override key `{key}` has an empty component");
        }
        let Value::Object(map) = node else {
            bail!("override key `{key}`: `{}` is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}
