//! Experiment configuration.
//!
//! Files are flat `key = value` lines under `[section]` headers; `#` starts
//! a comment. Keys are unique across sections, so the same names work as
//! environment variables (`CASGRAPH_` + upper snake case) and as
//! `--kebab-case` flags. Layers apply in the order defaults, file,
//! environment, flags.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::augment::{AugmentParams, StrengthMode, Strategy};
use crate::encoder::{EncoderConfig, FeatureMode, HeadDesign, NodeFeatureSpec};
use crate::graph::ObservationWindow;
use crate::ingest::{DatasetConfig, GeneratorParams};
use crate::train::{ContrastiveParams, DataPool, DistillParams, FinetuneParams, StudentInit};

pub const ENV_PREFIX: &str = "CASGRAPH_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?} belongs in [{expected}], found in [{found}]")]
    WrongSection {
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("invalid value {value:?} for {key}: {msg}")]
    InvalidValue { key: String, value: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Popularity,
    Outbreak,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Popularity => "popularity",
            Task::Outbreak => "outbreak",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Distill,
    Eval,
}

impl Phase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Phase::Pretrain),
            "finetune" => Some(Phase::Finetune),
            "distill" => Some(Phase::Distill),
            "eval" => Some(Phase::Eval),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Distill => "distill",
            Phase::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentSize {
    /// Self-distillation from the teacher's weights.
    Same,
    /// Fresh model with half the teacher's widths.
    Half,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub input: Option<PathBuf>,
    /// Extra cascades used only for pre-training.
    pub transfer_input: Option<PathBuf>,
    pub synthetic_count: usize,
    pub data_seed: u64,
    pub observation_time: f64,
    pub prediction_time: f64,
    /// Filters, splits and end time; its window is rebuilt by `validate`.
    pub dataset: DatasetConfig,
    pub generator: GeneratorParams,
    pub label_fraction: f64,

    pub augment: AugmentParams,
    /// `None` fits the rate on the dataset.
    pub lambda: Option<f64>,

    pub embedding_dim: usize,
    pub model_size: usize,
    /// `None` picks the design tuned for the label fraction.
    pub projection_head: Option<HeadDesign>,
    pub features: NodeFeatureSpec,

    pub batch_size: usize,
    pub temperature: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub distill_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub freeze: bool,
    pub pretrain_unlabeled: bool,
    pub distill_pool: DataPool,
    pub student: StudentSize,

    pub task: Task,
    pub phases: Vec<Phase>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input: None,
            transfer_input: None,
            synthetic_count: 2000,
            data_seed: 0,
            observation_time: 1.0,
            prediction_time: 24.0,
            dataset: DatasetConfig {
                dataset_end_time: 120.0,
                ..DatasetConfig::default()
            },
            generator: GeneratorParams::default(),
            label_fraction: 0.1,
            augment: AugmentParams::default(),
            lambda: None,
            embedding_dim: 64,
            model_size: 4,
            projection_head: None,
            features: NodeFeatureSpec::default(),
            batch_size: 64,
            temperature: 0.1,
            pretrain_epochs: 30,
            finetune_epochs: 100,
            distill_epochs: 50,
            patience: 20,
            learning_rate: 5e-4,
            freeze: false,
            pretrain_unlabeled: true,
            distill_pool: DataPool::LabelUnlabel,
            student: StudentSize::Same,
            task: Task::Popularity,
            phases: vec![Phase::Pretrain, Phase::Finetune, Phase::Distill, Phase::Eval],
            seeds: vec![0],
        }
    }
}

/// `(section, key)` for every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "input"),
    ("data", "transfer-input"),
    ("data", "synthetic-count"),
    ("data", "data-seed"),
    ("data", "observation-time"),
    ("data", "prediction-time"),
    ("data", "dataset-end-time"),
    ("data", "min-observed-nodes"),
    ("data", "max-observed-nodes"),
    ("data", "label-fraction"),
    ("data", "branching-mean"),
    ("data", "time-rate"),
    ("data", "max-size"),
    ("data", "tail-index"),
    ("augment", "aug-strategy"),
    ("augment", "aug-strength"),
    ("augment", "strength-mode"),
    ("augment", "theta-t"),
    ("augment", "lambda"),
    ("augment", "restart-prob"),
    ("augment", "rwr-steps"),
    ("model", "embedding-dim"),
    ("model", "model-size"),
    ("model", "projection-head"),
    ("model", "features"),
    ("model", "wavelet-scale"),
    ("model", "wavelet-samples"),
    ("model", "wavelet-t-max"),
    ("train", "batch-size"),
    ("train", "temperature"),
    ("train", "pretrain-epochs"),
    ("train", "finetune-epochs"),
    ("train", "distill-epochs"),
    ("train", "patience"),
    ("train", "learning-rate"),
    ("train", "freeze"),
    ("train", "pretrain-unlabeled"),
    ("train", "distill-pool"),
    ("train", "student"),
    ("run", "task"),
    ("run", "phases"),
    ("run", "seeds"),
];

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

/// `batch-size` → `CASGRAPH_BATCH_SIZE`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('-', "_"))
}

fn invalid(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| invalid(key, v, e.to_string()))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, v, "expected true or false")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        match key {
            "input" => self.input = opt_path(v),
            "transfer-input" => self.transfer_input = opt_path(v),
            "synthetic-count" => self.synthetic_count = num(key, v)?,
            "data-seed" => self.data_seed = num(key, v)?,
            "observation-time" => self.observation_time = num(key, v)?,
            "prediction-time" => self.prediction_time = num(key, v)?,
            "dataset-end-time" => self.dataset.dataset_end_time = num(key, v)?,
            "min-observed-nodes" => self.dataset.min_observed_nodes = num(key, v)?,
            "max-observed-nodes" => self.dataset.max_observed_nodes = num(key, v)?,
            "label-fraction" => self.label_fraction = num(key, v)?,
            "branching-mean" => self.generator.branching_mean = num(key, v)?,
            "time-rate" => self.generator.time_rate = num(key, v)?,
            "max-size" => self.generator.max_size = num(key, v)?,
            "tail-index" => self.generator.tail_index = num(key, v)?,
            "aug-strategy" => {
                self.augment.strategy = Strategy::parse(v).ok_or_else(|| invalid(key, v, "augsim, augrwr or augsim+augrwr"))?
            }
            "aug-strength" => self.augment.sim.eta = num(key, v)?,
            "strength-mode" => {
                self.augment.sim.strength_mode = match v {
                    "absolute" => StrengthMode::Absolute,
                    "per_node" | "per-node" => StrengthMode::PerNode,
                    _ => return Err(invalid(key, v, "absolute or per_node")),
                }
            }
            "theta-t" => self.augment.sim.theta_t = num(key, v)?,
            "lambda" => self.lambda = if v == "auto" { None } else { Some(num(key, v)?) },
            "restart-prob" => self.augment.rwr.restart_prob = num(key, v)?,
            "rwr-steps" => self.augment.rwr.walk_budget_factor = num(key, v)?,
            "embedding-dim" => self.embedding_dim = num(key, v)?,
            "model-size" => self.model_size = num(key, v)?,
            "projection-head" => {
                self.projection_head = if v == "auto" {
                    None
                } else {
                    Some(HeadDesign::parse(v).map_err(|e| invalid(key, v, e.to_string()))?)
                }
            }
            "features" => self.features.mode = FeatureMode::parse(v).ok_or_else(|| invalid(key, v, "structural or wavelet"))?,
            "wavelet-scale" => self.features.scale = num(key, v)?,
            "wavelet-samples" => self.features.samples = num(key, v)?,
            "wavelet-t-max" => self.features.t_max = num(key, v)?,
            "batch-size" => self.batch_size = num(key, v)?,
            "temperature" => self.temperature = num(key, v)?,
            "pretrain-epochs" => self.pretrain_epochs = num(key, v)?,
            "finetune-epochs" => self.finetune_epochs = num(key, v)?,
            "distill-epochs" => self.distill_epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "learning-rate" => self.learning_rate = num(key, v)?,
            "freeze" => self.freeze = boolean(key, v)?,
            "pretrain-unlabeled" => self.pretrain_unlabeled = boolean(key, v)?,
            "distill-pool" => self.distill_pool = DataPool::parse(v).ok_or_else(|| invalid(key, v, "label, unlabel or label+unlabel"))?,
            "student" => {
                self.student = match v {
                    "same" => StudentSize::Same,
                    "half" => StudentSize::Half,
                    _ => return Err(invalid(key, v, "same or half")),
                }
            }
            "task" => {
                self.task = match v {
                    "popularity" => Task::Popularity,
                    "outbreak" => Task::Outbreak,
                    _ => return Err(invalid(key, v, "popularity or outbreak")),
                }
            }
            "phases" => {
                self.phases = v
                    .split(',')
                    .map(|p| Phase::parse(p.trim()).ok_or_else(|| invalid(key, v, format!("unknown phase {p:?}"))))
                    .collect::<Result<_, _>>()?
            }
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| num::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let d = &self.dataset;
        let a = &self.augment;
        Some(match key {
            "input" => path(&self.input),
            "transfer-input" => path(&self.transfer_input),
            "synthetic-count" => self.synthetic_count.to_string(),
            "data-seed" => self.data_seed.to_string(),
            "observation-time" => self.observation_time.to_string(),
            "prediction-time" => self.prediction_time.to_string(),
            "dataset-end-time" => d.dataset_end_time.to_string(),
            "min-observed-nodes" => d.min_observed_nodes.to_string(),
            "max-observed-nodes" => d.max_observed_nodes.to_string(),
            "label-fraction" => self.label_fraction.to_string(),
            "branching-mean" => self.generator.branching_mean.to_string(),
            "time-rate" => self.generator.time_rate.to_string(),
            "max-size" => self.generator.max_size.to_string(),
            "tail-index" => self.generator.tail_index.to_string(),
            "aug-strategy" => a.strategy.as_str().to_string(),
            "aug-strength" => a.sim.eta.to_string(),
            "strength-mode" => match a.sim.strength_mode {
                StrengthMode::Absolute => "absolute".into(),
                StrengthMode::PerNode => "per_node".into(),
            },
            "theta-t" => a.sim.theta_t.to_string(),
            "lambda" => self.lambda.map_or("auto".into(), |l| l.to_string()),
            "restart-prob" => a.rwr.restart_prob.to_string(),
            "rwr-steps" => a.rwr.walk_budget_factor.to_string(),
            "embedding-dim" => self.embedding_dim.to_string(),
            "model-size" => self.model_size.to_string(),
            "projection-head" => self.projection_head.map_or("auto".into(), |h| h.to_string()),
            "features" => self.features.mode.as_str().to_string(),
            "wavelet-scale" => self.features.scale.to_string(),
            "wavelet-samples" => self.features.samples.to_string(),
            "wavelet-t-max" => self.features.t_max.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "temperature" => self.temperature.to_string(),
            "pretrain-epochs" => self.pretrain_epochs.to_string(),
            "finetune-epochs" => self.finetune_epochs.to_string(),
            "distill-epochs" => self.distill_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "learning-rate" => self.learning_rate.to_string(),
            "freeze" => self.freeze.to_string(),
            "pretrain-unlabeled" => self.pretrain_unlabeled.to_string(),
            "distill-pool" => self.distill_pool.as_str().to_string(),
            "student" => match self.student {
                StudentSize::Same => "same".into(),
                StudentSize::Half => "half".into(),
            },
            "task" => self.task.as_str().to_string(),
            "phases" => self.phases.iter().map(Phase::as_str).collect::<Vec<_>>().join(","),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            _ => return None,
        })
    }

    /// Applies a config file's assignments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !KEYS.iter().any(|(s, _)| *s == section) {
                    return Err(ConfigError::Parse {
                        line: n + 1,
                        msg: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: n + 1,
                msg: "expected key = value".into(),
            })?;
            let k = k.trim();
            let expected = section_of(k).ok_or_else(|| ConfigError::UnknownKey(k.into()))?;
            if expected != section {
                return Err(ConfigError::WrongSection {
                    key: k.into(),
                    expected,
                    found: section.clone(),
                });
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `CASGRAPH_*` variables from `vars`; unknown names are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut found: Vec<(&str, String)> = Vec::new();
        for (k, v) in vars {
            if let Some(&(_, key)) = KEYS.iter().find(|(_, key)| env_name(key) == k.as_ref()) {
                found.push((key, v.as_ref().to_string()));
            }
        }
        // Key order, not environment order, so the result is stable.
        found.sort_by_key(|(k, _)| KEYS.iter().position(|(_, key)| key == k));
        for (k, v) in found {
            self.set(k, &v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `env`, then `flags`.
    pub fn layered<I, K, V>(file: Option<&str>, env: I, flags: &[(String, String)]) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut cfg = ExperimentConfig::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full configuration in file syntax; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k) in KEYS {
            if *s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&mut self) -> Result<(), ConfigError> {
        let (t_o, t_p) = (self.observation_time, self.prediction_time);
        self.dataset.window = ObservationWindow::new(t_o, t_p)
            .ok_or_else(|| ConfigError::Invalid(format!("need 0 < observation-time {t_o} < prediction-time {t_p}")))?;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.dataset.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.phases.is_empty() {
            return bad("phases must be non-empty".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label-fraction {} outside (0, 1]", self.label_fraction));
        }
        if self.batch_size < 2 {
            return bad(format!("batch-size {} must be at least 2", self.batch_size));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning-rate {}", self.learning_rate));
        }
        if self.model_size == 0 {
            return bad("model-size must be positive".into());
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("lambda {l}"));
            }
        }
        if self.input.is_none() && !(self.generator.tail_index > 1.0 && self.generator.time_rate > 0.0) {
            return bad("generator needs tail-index > 1 and time-rate > 0".into());
        }
        if self.task == Task::Outbreak && self.phases.contains(&Phase::Distill) {
            return bad("distillation is defined for the popularity task only".into());
        }
        self.augment.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.rwr.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.encoder_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn head_design(&self) -> HeadDesign {
        self.projection_head
            .unwrap_or_else(|| HeadDesign::for_label_fraction(self.label_fraction))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut c = EncoderConfig::sized(self.embedding_dim, self.model_size, self.head_design());
        c.features = self.features;
        c
    }

    pub fn contrastive_params(&self) -> ContrastiveParams {
        let mut augment = self.augment.clone();
        if let Some(l) = self.lambda {
            augment.sim.lambda = l;
        }
        ContrastiveParams {
            batch_size: self.batch_size,
            temperature: self.temperature,
            epochs: self.pretrain_epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            augment,
            fit_lambda: self.lambda.is_none(),
            include_unlabeled: self.pretrain_unlabeled,
        }
    }

    pub fn finetune_params(&self) -> FinetuneParams {
        FinetuneParams {
            batch_size: self.batch_size,
            epochs: self.finetune_epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            freeze: self.freeze,
        }
    }

    pub fn distill_params(&self) -> DistillParams {
        let student = match self.student {
            StudentSize::Same => StudentInit::SelfDistill,
            StudentSize::Half => {
                let mut c = self.encoder_config();
                c.d_emb = (c.d_emb / 2).max(1);
                c.d_h = ((c.d_h / 2).max(2) + 1) / 2 * 2;
                c.d_z = c.d_h;
                c.d_down = (c.d_h / 2).max(1);
                StudentInit::Fresh(c)
            }
        };
        DistillParams {
            pool: self.distill_pool,
            student,
            train: FinetuneParams {
                epochs: self.distill_epochs,
                freeze: false,
                ..self.finetune_params()
            },
        }
    }

    /// Augmentation parameters with the configured rate, or `fitted` when
    /// the config leaves it to the data.
    pub fn augment_params(&self, fitted: f64) -> AugmentParams {
        let mut a = self.augment.clone();
        a.sim.lambda = self.lambda.unwrap_or(fitted);
        a
    }
}
