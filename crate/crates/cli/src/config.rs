//! Run configuration: a TOML file describing one evaluation grid, merged
//! with command-line overrides before any command runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use factgauntlet_core::defense::DefenseConfig;
use factgauntlet_core::experiment::{
    parse_attack, BackendConfig, EmbedderConfig, ExperimentConfig, MAX_POISON_RATE,
};
use factgauntlet_core::victim::VictimKind;

fn default_k() -> usize {
    5
}

fn default_max_questions() -> usize {
    10
}

fn default_concurrency() -> usize {
    4
}

fn default_trials() -> usize {
    1
}

fn default_resamples() -> usize {
    10_000
}

/// One evaluation grid: every listed attack crossed with every poison rate,
/// sharing a victim, defense, backend, and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub victim: VictimKind,
    pub attacks: Vec<String>,
    pub rates: Vec<f64>,
    /// Attack name the report marks significance against.
    #[serde(default)]
    pub compare_with: Option<String>,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_questions")]
    pub max_questions: usize,
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            bail!("config lists no attacks");
        }
        for name in &self.attacks {
            parse_attack(name).with_context(|| format!("attack {name:?}"))?;
        }
        if self.attacks.iter().collect::<std::collections::BTreeSet<_>>().len() != self.attacks.len() {
            bail!("config lists an attack twice");
        }
        if self.rates.is_empty() {
            bail!("config lists no poison rates");
        }
        for &rate in &self.rates {
            if !(rate > 0.0 && rate <= MAX_POISON_RATE) {
                bail!("poison rate must be in (0, {MAX_POISON_RATE}], got {rate}");
            }
        }
        if let Some(baseline) = &self.compare_with {
            if !self.attacks.contains(baseline) {
                bail!("compare_with attack {baseline:?} is not in the attacks list");
            }
        }
        if self.bootstrap_resamples < 1000 {
            bail!("bootstrap_resamples must be at least 1000");
        }
        // the remaining fields share the per-cell validation
        self.cell(&self.attacks[0], self.rates[0]).validate()?;
        Ok(())
    }

    /// The experiment cell for one (attack, rate) pair of the grid.
    pub fn cell(&self, attack: &str, rate: f64) -> ExperimentConfig {
        ExperimentConfig {
            dataset_path: self.dataset.clone(),
            victim: self.victim,
            attack: attack.to_string(),
            defense: self.defense.clone(),
            poison_rate: rate,
            k: self.k,
            max_questions: self.max_questions,
            backend: self.backend.clone(),
            embedder: self.embedder.clone(),
            rng_seed: self.rng_seed,
            concurrency: self.concurrency,
            trials: self.trials,
        }
    }

    pub fn cells(&self) -> Vec<ExperimentConfig> {
        self.attacks
            .iter()
            .flat_map(|attack| self.rates.iter().map(|&rate| self.cell(attack, rate)))
            .collect()
    }
}

/// Parse an override value with TOML literal syntax, falling back to a bare
/// string so `--set backend.model=gpt-4o-mini` needs no quoting.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(value) = table.get("v") {
            return value.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("override {key:?} descends into a non-table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("override {key:?} descends into a non-table"))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

/// Load the config file, apply `--set key=value` overrides in order, then an
/// optional `--seed`. Flag values win over file values.
pub fn load_run_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    let mut value = toml::Value::Table(table);
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .with_context(|| format!("override {entry:?} is not key=value"))?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }
    if let Some(seed) = seed {
        apply_override(&mut value, "rng_seed", &seed.to_string())?;
    }
    let config: RunConfig = value
        .try_into()
        .with_context(|| format!("config {} does not match the expected schema", path.display()))?;
    config.validate()?;
    Ok(config)
}
