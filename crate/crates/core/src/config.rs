//! Run configuration (TOML) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{NegativePolicy, PositivePolicy};
use crate::data::{CorruptionSpec, SynthSpec};
use crate::density::{ScorerKind, DEFAULT_EPSILON};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Environment variable that replaces the dataset and training seeds.
pub const SEED_ENV: &str = "COFTAD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// k normal training images; test set from the folder's own labels.
    FewShot,
    /// k clean training images; every corrupted copy of the clean test
    /// images is an anomaly.
    Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Folder with `normal/` and optional `abnormal/`. Relative paths resolve
    /// against the config file's directory.
    pub root: Option<PathBuf>,
    /// Render a synthetic dataset instead of reading `root`.
    pub synth: Option<SynthSpec>,
    pub protocol: Protocol,
    pub k: usize,
    pub seed: u64,
    /// `[n_normal, n_abnormal]` test images to reserve; all remaining when
    /// absent.
    pub reserve: Option<(usize, usize)>,
    /// Keep only this many test anomalies.
    pub subsample_anomalies: Option<usize>,
    pub corruption: CorruptionSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: None,
            synth: None,
            protocol: Protocol::FewShot,
            k: 5,
            seed: 0,
            reserve: None,
            subsample_anomalies: None,
            corruption: CorruptionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub positive: PositivePolicy,
    pub negative: NegativePolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            positive: PositivePolicy::industrial(),
            negative: NegativePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    /// Augmented copies per few-shot image.
    pub n_a: usize,
    pub epsilon: f64,
    pub scorer: ScorerKind,
    pub k_nn: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            n_a: 10,
            epsilon: DEFAULT_EPSILON,
            scorer: ScorerKind::Gaussian,
            k_nn: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub histogram_bins: usize,
    pub export_embeddings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 30,
            export_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub density: DensityConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Diagnostic {
    UnknownKey { key: String, suggestion: Option<String> },
    Range { field: String, message: String },
    MissingPath { field: String, path: PathBuf },
    Invalid { message: String },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::UnknownKey { key, suggestion: Some(s) } => {
                write!(f, "unknown key `{key}` (did you mean `{s}`?)")
            }
            Diagnostic::UnknownKey { key, suggestion: None } => write!(f, "unknown key `{key}`"),
            Diagnostic::Range { field, message } => write!(f, "`{field}`: {message}"),
            Diagnostic::MissingPath { field, path } => {
                write!(f, "`{field}`: path {} does not exist", path.display())
            }
            Diagnostic::Invalid { message } => f.write_str(message),
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "dataset.root",
    "dataset.synth",
    "dataset.reserve",
    "dataset.subsample_anomalies",
    "encoder.pretrained_checkpoint",
];

/// Subtrees whose shape depends on a `kind` tag; checked by deserialization.
const OPAQUE: &[&str] = &["augment.positive", "augment.negative"];

fn known_schema() -> toml::Table {
    let mut defaults = RunConfig::default();
    defaults.dataset.synth = Some(SynthSpec::default());
    toml::Table::try_from(&defaults).expect("defaults serialize")
}

fn suggest(key: &str, candidates: &[String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone())
}

fn unknown_keys(user: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<Diagnostic>) {
    let mut names: Vec<String> = schema.keys().cloned().collect();
    names.extend(
        OPTIONAL_KEYS
            .iter()
            .filter_map(|k| k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.').or((prefix.is_empty()).then_some(r))))
            .filter(|r| !r.contains('.'))
            .map(str::to_string),
    );
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        if OPAQUE.contains(&path.as_str()) {
            continue;
        }
        if !names.contains(key) {
            out.push(Diagnostic::UnknownKey {
                suggestion: suggest(key, &names).map(|s| if prefix.is_empty() { s } else { format!("{prefix}.{s}") }),
                key: path,
            });
            continue;
        }
        if let (toml::Value::Table(u), Some(toml::Value::Table(s))) = (value, schema.get(key)) {
            unknown_keys(u, s, &path, out);
        }
    }
}

fn range(field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic::Range {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses TOML text. Syntax and type errors carry their location.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.apply_seed_override()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = &mut self.dataset.root {
            fix(r);
        }
        if let Some(c) = &mut self.encoder.pretrained_checkpoint {
            fix(c);
        }
    }

    /// Replaces `dataset.seed` and `train.seed` with `COFTAD_SEED` when set.
    pub fn apply_seed_override(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
            self.dataset.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    /// Range and path checks on a parsed config.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let d = &self.dataset;
        if d.k == 0 {
            out.push(range("dataset.k", "must be at least 1"));
        }
        match (&d.root, &d.synth) {
            (None, None) => out.push(range("dataset", "set either `root` or `synth`")),
            (Some(_), Some(_)) => out.push(range("dataset", "`root` and `synth` are mutually exclusive")),
            (Some(r), None) if !r.is_dir() => out.push(Diagnostic::MissingPath {
                field: "dataset.root".into(),
                path: r.clone(),
            }),
            _ => {}
        }
        if let Some(s) = &d.synth {
            if let Err(e) = s.validate() {
                out.push(range("dataset.synth", e.to_string()));
            }
        }
        if d.protocol == Protocol::Corruption {
            if let Err(e) = d.corruption.validate() {
                out.push(range("dataset.corruption", e.to_string()));
            }
        }
        if d.subsample_anomalies == Some(0) {
            out.push(range("dataset.subsample_anomalies", "must be at least 1"));
        }
        if let Err(e) = self.encoder.validate() {
            out.push(range("encoder", e.to_string()));
        }
        if let Some(p) = &self.encoder.pretrained_checkpoint {
            if !p.exists() {
                out.push(Diagnostic::MissingPath {
                    field: "encoder.pretrained_checkpoint".into(),
                    path: p.clone(),
                });
            }
        }
        let t = &self.train;
        for (name, v) in [("train.weights.lambda_pp", t.weights.lambda_pp), ("train.weights.lambda_np", t.weights.lambda_np)] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(range(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            out.push(range("train.lr", format!("must be finite and >= 0, got {}", t.lr)));
        }
        for (name, v) in [("train.adam_beta1", t.adam_beta1), ("train.adam_beta2", t.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(range(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if t.adam_eps.is_nan() || t.adam_eps <= 0.0 {
            out.push(range("train.adam_eps", format!("must be positive, got {}", t.adam_eps)));
        }
        if t.batch_size == 0 {
            out.push(range("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&t.ema_beta) {
            out.push(range("train.ema_beta", format!("must lie in [0, 1], got {}", t.ema_beta)));
        }
        if let Err(e) = self.augment.positive.validate() {
            out.push(range("augment.positive", e.to_string()));
        }
        if let Err(e) = self.augment.negative.validate() {
            out.push(range("augment.negative", e.to_string()));
        }
        let dn = &self.density;
        if dn.n_a == 0 {
            out.push(range("density.n_a", "must be at least 1"));
        }
        if !(dn.epsilon > 0.0 && dn.epsilon.is_finite()) {
            out.push(range("density.epsilon", format!("must be positive, got {}", dn.epsilon)));
        }
        if dn.k_nn == 0 {
            out.push(range("density.k_nn", "must be at least 1"));
        }
        if self.eval.histogram_bins == 0 {
            out.push(range("eval.histogram_bins", "must be at least 1"));
        }
        out
    }

    /// Fails with the first diagnostic, if any.
    pub fn validate(&self) -> Result<()> {
        match self.diagnostics().into_iter().next() {
            Some(d) => Err(Error::Config(d.to_string())),
            None => Ok(()),
        }
    }
}

/// All diagnostics for the TOML text: unknown keys first, then range and
/// path problems. Relative paths resolve against `base`. Unparseable text is
/// an error.
pub fn validate_toml(text: &str, base: &Path) -> Result<Vec<Diagnostic>> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    unknown_keys(&user, &known_schema(), "", &mut out);
    // Strip unknown keys so the typed parse can still report ranges.
    let mut cleaned = user.clone();
    for d in &out {
        if let Diagnostic::UnknownKey { key, .. } = d {
            remove_key(&mut cleaned, key);
        }
    }
    match toml::Value::Table(cleaned).try_into::<RunConfig>() {
        Ok(mut cfg) => {
            cfg.resolve_paths(base);
            out.extend(cfg.diagnostics());
        }
        Err(e) => out.push(Diagnostic::Invalid { message: e.to_string() }),
    }
    Ok(out)
}

fn remove_key(table: &mut toml::Table, dotted: &str) {
    match dotted.split_once('.') {
        None => {
            table.remove(dotted);
        }
        Some((head, rest)) => {
            if let Some(toml::Value::Table(t)) = table.get_mut(head) {
                remove_key(t, rest);
            }
        }
    }
}

/// [`validate_toml`] on a file.
pub fn validate_config(path: &Path) -> Result<Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    validate_toml(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests;
