//! Run configuration: one TOML file, overridable key by key from the command line.

use rwre_core::env_model::{calibrate_boundary, Family, OffspringLaw};
use rwre_core::env_tree::{RestrictionParams, SetId};
use rwre_core::experiments::{LocalTimeConfig, ProfileConfig, RangeConfig, ScanConfig, WmConfig};
use rwre_core::limit_constants::ConstantsConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub law: LawConfig,
    pub walk: WalkSection,
    pub restriction: RestrictionSection,
    pub quenched: QuenchedSection,
    pub constants: ConstantsConfig,
    pub appendix: AppendixSection,
    pub experiments: ExperimentsSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            workers: 0,
            law: LawConfig::default(),
            walk: WalkSection::default(),
            restriction: RestrictionSection::default(),
            quenched: QuenchedSection::default(),
            constants: ConstantsConfig::default(),
            appendix: AppendixSection::default(),
            experiments: ExperimentsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LawConfig {
    pub template: Family,
    pub theta: f64,
    /// Move the template's free parameters onto ψ(1) = ψ'(1) = 0.
    pub calibrate: bool,
}

impl Default for LawConfig {
    fn default() -> Self {
        LawConfig { template: Family::GaussianBinary { mu: 1.0, s2: 1.0 }, theta: 0.5, calibrate: true }
    }
}

impl LawConfig {
    pub fn build(&self) -> rwre_core::Result<OffspringLaw> {
        if self.calibrate {
            calibrate_boundary(self.template.clone(), self.theta)
        } else {
            OffspringLaw::new(self.template.clone(), self.theta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalkModeName {
    FixedSteps,
    Excursions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    pub mode: WalkModeName,
    pub n: u64,
    pub replicas: usize,
    /// One quenched tree for every replica; a fresh tree per replica when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_seed: Option<u64>,
    pub track_sets: Vec<SetId>,
    pub full_front: bool,
    pub record_returns: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for WalkSection {
    fn default() -> Self {
        WalkSection {
            mode: WalkModeName::Excursions,
            n: 1000,
            replicas: 10,
            tree_seed: None,
            track_sets: Vec::new(),
            full_front: false,
            record_returns: false,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestrictionSection {
    pub alpha: f64,
    pub delta: f64,
    pub a0: f64,
    pub a1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_of_n: Option<f64>,
}

impl Default for RestrictionSection {
    fn default() -> Self {
        let p = RestrictionParams::new(10.0);
        RestrictionSection { alpha: p.alpha, delta: p.delta, a0: p.a0, a1: p.a1, g_of_n: None }
    }
}

impl RestrictionSection {
    pub fn params(&self, n: f64) -> RestrictionParams {
        RestrictionParams { n, alpha: self.alpha, delta: self.delta, a0: self.a0, a1: self.a1, g_of_n: self.g_of_n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuenchedSection {
    pub trees: usize,
    /// Depth at which the frozen trees are cut.
    pub depth: u32,
    pub generation: u32,
    pub n: f64,
    pub set: SetId,
    pub a: f64,
    pub b: f64,
    pub max_nodes: usize,
}

impl Default for QuenchedSection {
    fn default() -> Self {
        QuenchedSection {
            trees: 4,
            depth: 6,
            generation: 4,
            n: 100.0,
            set: SetId::All,
            a: 1.0,
            b: 1.0,
            max_nodes: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixSection {
    /// Fact names; empty runs all of them.
    pub facts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<u64>>,
    pub replicas: usize,
    /// Replicas for the split estimator, which is far more expensive per path.
    pub split_replicas: usize,
    pub renewal_replicas: usize,
    pub ladder_pool: usize,
}

impl Default for AppendixSection {
    fn default() -> Self {
        AppendixSection {
            facts: Vec::new(),
            grid: None,
            replicas: 100_000,
            split_replicas: 4000,
            renewal_replicas: 200_000,
            ladder_pool: 1 << 18,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionSource {
    None,
    Quick,
    /// The `[constants]` section.
    Config,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsSection {
    pub predictions: PredictionSource,
    pub scan: ScanConfig,
    pub local_time: LocalTimeConfig,
    pub range: RangeConfig,
    pub profile: ProfileConfig,
    pub wm: WmConfig,
}

impl Default for ExperimentsSection {
    fn default() -> Self {
        ExperimentsSection {
            predictions: PredictionSource::Quick,
            scan: ScanConfig::default(),
            local_time: LocalTimeConfig::default(),
            range: RangeConfig::default(),
            profile: ProfileConfig::default(),
            wm: WmConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses `text`, applies `key.path=value` overrides, and deserialises with the
/// offending key path in every error.
pub fn load(text: &str, overrides: &[String]) -> Result<Config, ConfigError> {
    let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    from_table(value)
}

fn from_table(t: toml::Table) -> Result<Config, ConfigError> {
    let v = toml::Value::Table(t);
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        ConfigError(format!("at `{path}`: {}", e.into_inner()))
    })
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("bad key `{key}`")));
    }
    // Values parse as TOML; anything that doesn't is taken as a bare string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("`{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
