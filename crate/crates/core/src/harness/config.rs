//! Experiment configuration: TOML sections, dotted overrides and a stable hash.

use super::data::DatasetSpec;
use crate::network::{Activation, LossKind};
use crate::optim::{Accumulation, DampingSpec, FactorMode, OptimizerSpec};
use crate::param::{parse_exp, Exp, Family, FamilyExps, ParamError, Scheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("TOML: {0}")]
    Toml(String),
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("override key `{0}` does not name a config field")]
    OverrideKey(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

fn default_width() -> usize {
    256
}
fn default_depth() -> usize {
    3
}
fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig { width: default_width(), depth: default_depth(), activation: default_activation(), bias: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    #[default]
    None,
    Ema,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "one")]
    pub e_a: String,
    #[serde(default = "one")]
    pub e_b: String,
    #[serde(default = "half")]
    pub e: String,
    #[serde(default)]
    pub accumulation: AccumulationMode,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub factor_mode: FactorMode,
}

fn default_family() -> Family {
    Family::Kfac
}
fn one() -> String {
    "1".into()
}
fn half() -> String {
    "1/2".into()
}
fn zero() -> String {
    "0".into()
}
fn default_xi() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            family: default_family(),
            e_a: one(),
            e_b: one(),
            e: half(),
            accumulation: AccumulationMode::None,
            xi: default_xi(),
            momentum: 0.0,
            factor_mode: FactorMode::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterizationConfig {
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// σ′.
    #[serde(default = "default_one_f")]
    pub base_init_std: f64,
    /// η′.
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    /// Overrides the output-layer `b`; `inf` means an exactly zero output layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_last: Option<String>,
    /// Constant shift `k` applied to every layer's `(a, b, c)`.
    #[serde(default = "zero")]
    pub shift: String,
}

fn default_scheme() -> Scheme {
    Scheme::Mup
}
fn default_one_f() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.125
}

impl Default for ParameterizationConfig {
    fn default() -> Self {
        ParameterizationConfig { scheme: default_scheme(), base_init_std: 1.0, base_lr: default_lr(), b_last: None, shift: zero() }
    }
}

/// Output-layer `b` override.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BLast {
    Finite(Exp),
    Infinite,
}

impl BLast {
    pub fn parse(s: &str) -> Result<Self, ParamError> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(BLast::Infinite),
            other => Ok(BLast::Finite(parse_exp(other)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub zero_init_last: bool,
    /// Steps at which `coord(Δh)` and weight distance are probed.
    #[serde(default = "default_probes")]
    pub probe_steps: Vec<usize>,
    /// Steps whose optimizer reports are recorded; defaults to step 1, the
    /// probe steps and the last step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_steps: Option<Vec<usize>>,
    #[serde(default)]
    pub precision: Precision,
}

fn default_steps() -> usize {
    10
}
fn default_loss() -> LossKind {
    LossKind::Mse
}
fn default_probes() -> Vec<usize> {
    vec![10]
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            steps: default_steps(),
            batch_size: None,
            seed: 0,
            loss: default_loss(),
            zero_init_last: false,
            probe_steps: default_probes(),
            report_steps: None,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Final training loss, lower is better.
    #[default]
    Loss,
    /// Final training accuracy, higher is better.
    Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Learning rates `η′ = 2^z`.
    #[serde(default)]
    pub lr_exps: Vec<i32>,
    /// Damping constants `ρ′ = 2^z`.
    #[serde(default)]
    pub rho_exps: Vec<i32>,
    #[serde(default)]
    pub b_last: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub families: Vec<Family>,
    #[serde(default)]
    pub metric: SweepMetric,
}

/// A full experiment description. Without a `[sweep]` section it describes
/// exactly one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub parameterization: ParameterizationConfig,
    #[serde(default)]
    pub damping: DampingSpec,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Every accepted key, for help output.
pub const CONFIG_KEYS: &[&str] = &[
    "architecture.width",
    "architecture.depth",
    "architecture.activation",
    "architecture.bias",
    "optimizer.family",
    "optimizer.e_a",
    "optimizer.e_b",
    "optimizer.e",
    "optimizer.accumulation",
    "optimizer.xi",
    "optimizer.momentum",
    "optimizer.factor_mode",
    "parameterization.scheme",
    "parameterization.base_init_std",
    "parameterization.base_lr",
    "parameterization.b_last",
    "parameterization.shift",
    "damping.strategy",
    "damping.rho_prime",
    "damping.normalized",
    "run.steps",
    "run.batch_size",
    "run.seed",
    "run.loss",
    "run.zero_init_last",
    "run.probe_steps",
    "run.report_steps",
    "run.precision",
    "dataset.source",
    "dataset.n_train",
    "dataset.n_probe",
    "dataset.d_in",
    "dataset.classes",
    "dataset.teacher_seed",
    "dataset.target",
    "dataset.images",
    "dataset.labels",
    "sweep.widths",
    "sweep.lr_exps",
    "sweep.rho_exps",
    "sweep.b_last",
    "sweep.seeds",
    "sweep.families",
    "sweep.metric",
];

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(assignment.into()))?;
    let key = key.trim();
    if !CONFIG_KEYS.contains(&key) {
        return Err(ConfigError::OverrideKey(key.into()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::OverrideKey(key.into()))?;
    }
    let mut value = parse_override_value(raw.trim());
    // Exponent-like fields are strings; accept bare numbers for them too.
    if matches!(*parts.last().expect("nonempty"), "e_a" | "e_b" | "e" | "b_last" | "shift") && !value.is_array() {
        value = toml::Value::String(match value {
            toml::Value::String(s) => s,
            other => other.to_string(),
        });
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn family_exps(&self) -> Result<FamilyExps, ParamError> {
        Ok(FamilyExps {
            e_a: parse_exp(&self.optimizer.e_a)?,
            e_b: parse_exp(&self.optimizer.e_b)?,
            e: parse_exp(&self.optimizer.e)?,
        })
    }

    pub fn shift(&self) -> Result<Exp, ParamError> {
        parse_exp(&self.parameterization.shift)
    }

    pub fn b_last(&self) -> Result<Option<BLast>, ParamError> {
        self.parameterization.b_last.as_deref().map(BLast::parse).transpose()
    }

    pub fn optimizer_spec(&self) -> Result<OptimizerSpec, ConfigError> {
        let o = &self.optimizer;
        let spec = OptimizerSpec {
            family: o.family,
            exps: self.family_exps()?,
            accumulation: match o.accumulation {
                AccumulationMode::None => Accumulation::None,
                AccumulationMode::Ema => Accumulation::Ema { xi: o.xi },
                AccumulationMode::Sum => Accumulation::Sum,
            },
            momentum: o.momentum,
            damping: self.damping,
            factor_mode: o.factor_mode,
        };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.optimizer_spec()?;
        self.shift()?;
        self.b_last()?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.architecture.depth < 2 {
            return bad("architecture.depth must be at least 2");
        }
        if self.architecture.width == 0 {
            return bad("architecture.width must be positive");
        }
        if !(self.parameterization.base_lr >= 0.0 && self.parameterization.base_lr.is_finite()) {
            return bad("parameterization.base_lr must be finite and non-negative");
        }
        if !(self.damping.rho_prime > 0.0 && self.damping.rho_prime.is_finite()) {
            return bad("damping.rho_prime must be positive");
        }
        if let Some(b) = self.run.batch_size {
            if b == 0 || b > self.dataset.n_train {
                return bad("run.batch_size must lie in 1..=dataset.n_train");
            }
        }
        if self.dataset.n_probe == 0 && !self.run.probe_steps.is_empty() {
            return bad("probing needs dataset.n_probe > 0 (or an empty run.probe_steps)");
        }
        if self.optimizer.family == Family::GaussNewton && self.run.loss != LossKind::Mse {
            return bad("gauss-newton requires run.loss = \"mse\"");
        }
        if let Some(s) = &self.sweep {
            for b in &s.b_last {
                BLast::parse(b)?;
            }
        }
        Ok(())
    }

    /// The single-run view: no sweep section.
    pub fn cell(&self) -> Config {
        Config { sweep: None, ..self.clone() }
    }

    /// SHA-256 over the canonical JSON of the single-run view (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.cell()).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// `log₂ η′` when `η′` is an exact power of two.
    pub fn lr_exp(&self) -> Option<i32> {
        exact_log2(self.parameterization.base_lr)
    }

    pub fn b_last_label(&self) -> String {
        self.parameterization.b_last.clone().unwrap_or_default()
    }
}

pub fn exact_log2(x: f64) -> Option<i32> {
    if x <= 0.0 || !x.is_finite() {
        return None;
    }
    let z = x.log2().round() as i32;
    (2f64.powi(z) == x).then_some(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::DampingStrategy;
    use crate::param::exp;

    const SAMPLE: &str = r#"
[architecture]
width = 64
depth = 3
activation = "relu"

[optimizer]
family = "shampoo"
e = "1/2"

[damping]
strategy = "fixed_exponent"
rho_prime = 0.001

[dataset]
n_train = 32
n_probe = 8
"#;

    #[test]
    fn parses_and_overrides() {
        let c = Config::from_toml_str(SAMPLE, &[]).unwrap();
        assert_eq!(c.optimizer.family, Family::Shampoo);
        assert_eq!(c.damping.strategy, DampingStrategy::FixedExponent);
        let o = Config::from_toml_str(
            SAMPLE,
            &["optimizer.family=kfac".into(), "damping.strategy=rescaled_trace".into(), "optimizer.e_a=0.5".into(), "run.probe_steps=[1,2]".into()],
        )
        .unwrap();
        assert_eq!(o.optimizer.family, Family::Kfac);
        assert_eq!(o.family_exps().unwrap().e_a, exp(1, 2));
        assert_eq!(o.run.probe_steps, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Config::from_toml_str(SAMPLE, &["nope".into()]), Err(ConfigError::OverrideSyntax(_))));
        assert!(matches!(Config::from_toml_str(SAMPLE, &["optimizer.colour=1".into()]), Err(ConfigError::OverrideKey(_))));
        assert!(matches!(Config::from_toml_str("[optimizer]\nfamily = \"adam\"", &[]), Err(ConfigError::Toml(_))));
        assert!(matches!(Config::from_toml_str("[architecture]\nwdth = 3", &[]), Err(ConfigError::Toml(_))));
        assert!(Config::from_toml_str(SAMPLE, &["damping.strategy=rescaled_trace".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::from_toml_str(SAMPLE, &[]).unwrap();
        let b = Config::from_toml_str(&a.to_toml_string(), &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::from_toml_str(SAMPLE, &["run.seed=1".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
        let swept = Config { sweep: Some(SweepConfig { widths: vec![1], ..Default::default() }), ..a.clone() };
        assert_eq!(a.hash(), swept.hash());
    }

    #[test]
    fn lr_exponent_only_for_powers_of_two() {
        assert_eq!(exact_log2(0.125), Some(-3));
        assert_eq!(exact_log2(0.1), None);
        assert_eq!(BLast::parse("inf").unwrap(), BLast::Infinite);
        assert_eq!(BLast::parse("1/2").unwrap(), BLast::Finite(exp(1, 2)));
    }
}
