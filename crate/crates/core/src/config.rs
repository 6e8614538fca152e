//! Experiment configuration: one TOML document with a section per stage.
//!
//! Any key can be overridden from the environment as
//! `MOSDISTILL_SECTION__KEY=value` (top-level keys: `MOSDISTILL_SEED`).
//! Values are parsed as TOML literals, falling back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{mix_seed, CorpusConfig};
use crate::error::{Error, Result};
use crate::model::StudentConfig;
use crate::presets;
use crate::train::{TrainConfig, TrainMode, DEFAULT_SAMPLING_CAP};

pub const ENV_PREFIX: &str = "MOSDISTILL_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Oracle,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub backend: TeacherKind,
    /// Rater noise of the oracle backend, in MOS units.
    pub noise_std: f64,
    /// Checkpoint for the model backend, relative to the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            backend: TeacherKind::Oracle,
            noise_std: 0.1,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<u8>,
    /// Explicit architecture; takes precedence over `variant_id`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<StudentConfig>,
}

impl StudentSection {
    pub fn resolve(&self) -> Result<StudentConfig> {
        match (&self.architecture, self.variant_id) {
            (Some(a), _) => Ok(a.clone()),
            (None, Some(v)) => presets::variant(v),
            (None, None) => Err(Error::Config("student: set variant_id or architecture".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub total_steps: usize,
    pub validate_every: usize,
    pub sampling_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::labeled();
        TrainSection {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            validate_every: t.validate_every,
            sampling_cap: t.sampling_cap,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::LabeledOnly,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            validate_every: self.validate_every,
            sampling_cap: self.sampling_cap,
            seed,
            ..TrainConfig::labeled()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub total_steps: usize,
    pub validate_every: usize,
    pub sampling_cap: usize,
    pub mix_in_p: f64,
    pub max_skip_rate: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let t = TrainConfig::distill();
        DistillSection {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            validate_every: t.validate_every,
            sampling_cap: t.sampling_cap,
            mix_in_p: t.mix_in_p,
            max_skip_rate: t.max_skip_rate,
        }
    }
}

impl DistillSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Distill,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            validate_every: self.validate_every,
            mix_in_p: self.mix_in_p,
            sampling_cap: self.sampling_cap,
            max_skip_rate: self.max_skip_rate,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Taylor,
    Magnitude,
}

impl PruneMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::Taylor => "taylor",
            PruneMethod::Magnitude => "magnitude",
        }
    }
}

/// Which trained checkpoint the pruning stage starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneSource {
    Baseline,
    Distilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub methods: Vec<PruneMethod>,
    pub source: PruneSource,
    /// Remaining effective-size fractions at which checkpoints are kept.
    pub schedule: Vec<f64>,
    pub step_rate: f64,
    pub smoothing: f64,
    pub fine_tune_steps: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub sampling_cap: usize,
    /// Score importance on teacher pseudo-labels instead of ground truth.
    pub use_unlabeled: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            methods: vec![PruneMethod::Taylor, PruneMethod::Magnitude],
            source: PruneSource::Distilled,
            schedule: vec![0.75, 0.5, 0.29],
            step_rate: 0.005,
            smoothing: 0.9,
            fine_tune_steps: 30,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            batch_size: 20,
            sampling_cap: DEFAULT_SAMPLING_CAP,
            use_unlabeled: false,
        }
    }
}

impl PruneSection {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("prune.{m}")));
        if self.methods.is_empty() {
            return bad("methods is empty");
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("schedule entries must lie in (0, 1)");
        }
        if !(self.step_rate > 0.0 && self.step_rate < 1.0) {
            return bad("step_rate must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1)");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Universal,
    PerDataset,
}

/// An extra checkpoint to include in the size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepInput {
    pub id: String,
    pub method: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bias_mode: BiasMode,
    pub include_teacher: bool,
    pub extra: Vec<SweepInput>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bias_mode: BiasMode::PerDataset,
            include_teacher: true,
            extra: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// Stage tags for deriving independent seeds from the global one.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Corpus,
    Teacher,
    Init,
    Train,
    Distill,
    Prune,
}

impl ExperimentConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        mix_seed(self.seed, stage as u64 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.student.resolve()?.validate()?;
        self.train.to_config(0).validate().map_err(|e| section("train", e))?;
        self.distill.to_config(0).validate().map_err(|e| section("distill", e))?;
        self.prune.validate()?;
        if !(self.teacher.noise_std >= 0.0) {
            return Err(Error::Config("teacher.noise_std must be >= 0".into()));
        }
        if self.teacher.backend == TeacherKind::Model && self.teacher.checkpoint.is_none() {
            return Err(Error::Config("teacher.checkpoint is required for backend = model".into()));
        }
        Ok(())
    }

    /// Same document with every default written out and the student
    /// architecture spelled in full.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        c.student.architecture = Some(self.student.resolve()?);
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn section(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{name}.{m}")),
        other => other,
    }
}

/// Parse a config document, applying `overrides` (`SECTION__KEY`, value)
/// before validation.
pub fn parse<I, K, V>(text: &str, overrides: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k.as_ref(), v.as_ref())?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Environment variables carrying the override prefix, prefix stripped.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
        .collect();
    out.sort();
    out
}

fn literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.clone(), literal(raw));
    Ok(())
}

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, overrides.iter().map(|(k, v)| (k, v)))
}
