//! Downstream evaluation and the experiment runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::augment::AugmentError;
use crate::config::{ConfigError, ExperimentConfig, Phase, Task};
use crate::encoder::{EncoderError, EncoderModel};
use crate::graph::CascadeGraph;
use crate::ingest::{generate_synthetic, load_dataset, CascadeDataset, IngestError, LabeledCascade, Split};
use crate::seed;
use crate::train::{
    distill, finetune, finetune_sets, predict_set, pretrain_on, MetricsSink, Objective, SupervisedSet, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the test split is empty")]
    EmptyTestSplit,
    #[error("{split} split has {count} outbreak positives, need at least 2")]
    TooFewPositives { split: &'static str, count: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<EncoderError> for EvalError {
    fn from(e: EncoderError) -> Self {
        EvalError::Train(e.into())
    }
}

/// Per-seed scores with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub metric: String,
    pub per_seed: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedScore {
    pub seed: u64,
    pub value: f64,
}

impl MetricsReport {
    pub fn new(metric: &str, per_seed: Vec<SeedScore>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().map(|s| s.value).sum::<f64>() / n;
        let var = per_seed.iter().map(|s| (s.value - mean).powi(2)).sum::<f64>() / n;
        MetricsReport {
            metric: metric.into(),
            per_seed,
            mean,
            std: var.sqrt(),
            meta: BTreeMap::new(),
        }
    }

    /// `mean±std` with the given number of decimals.
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}±{:.*}", decimals, self.mean, decimals, self.std)
    }
}

fn split_or_empty<'a>(ds: &'a CascadeDataset, split: Split) -> Result<Vec<&'a LabeledCascade>, EvalError> {
    let items: Vec<_> = ds.split(split).collect();
    if split == Split::Test && items.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    Ok(items)
}

/// Test-split MSLE (log base 2).
pub fn evaluate_popularity(model: &EncoderModel, ds: &CascadeDataset) -> Result<f64, EvalError> {
    let test = split_or_empty(ds, Split::Test)?;
    let set = SupervisedSet::popularity(model, test, ds.config.t_o())?;
    let preds = predict_set(model, &set)?;
    Ok(preds
        .iter()
        .zip(&set.targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Balanced binary items of one split; `targets[k]` is 1 for outbreaks.
#[derive(Debug, Clone, PartialEq)]
pub struct OutbreakSplit {
    pub graphs: Vec<CascadeGraph>,
    pub targets: Vec<f64>,
    /// Labels strictly above this count as outbreaks.
    pub threshold: usize,
}

impl OutbreakSplit {
    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|&&t| t == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.targets.len() - self.positives()
    }

    pub fn to_set(&self, model: &EncoderModel, t_o: f64) -> Result<SupervisedSet, EvalError> {
        let refs: Vec<&CascadeGraph> = self.graphs.iter().collect();
        Ok(SupervisedSet::from_graphs(model, &refs, self.targets.clone(), t_o)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutbreakDataset {
    pub train: OutbreakSplit,
    pub val: OutbreakSplit,
    pub test: OutbreakSplit,
}

/// Top-decile outbreak labels per split, with negatives undersampled to
/// the positive count.
pub fn build_outbreak_dataset(ds: &CascadeDataset, run_seed: u64) -> Result<OutbreakDataset, EvalError> {
    let one = |split: Split| -> Result<OutbreakSplit, EvalError> {
        let items: Vec<&LabeledCascade> = ds.split(split).collect();
        let mut labels: Vec<usize> = items.iter().map(|c| c.label).collect();
        labels.sort_unstable_by(|a, b| b.cmp(a));
        let k = (0.1 * items.len() as f64).round() as usize;
        let threshold = labels.get(k).copied().unwrap_or(0);
        let pos: Vec<&LabeledCascade> = items.iter().copied().filter(|c| c.label > threshold).collect();
        if pos.len() < 2 {
            return Err(EvalError::TooFewPositives {
                split: split.as_str(),
                count: pos.len(),
            });
        }
        let mut neg: Vec<&LabeledCascade> = items.iter().copied().filter(|c| c.label <= threshold).collect();
        let s = seed::derive(run_seed, &[seed::fnv1a("outbreak"), seed::fnv1a(split.as_str())]);
        neg.shuffle(&mut seed::rng(s));
        neg.truncate(pos.len());
        let mut graphs = Vec::with_capacity(2 * pos.len());
        let mut targets = Vec::with_capacity(2 * pos.len());
        for c in &pos {
            graphs.push(c.graph.clone());
            targets.push(1.0);
        }
        for c in &neg {
            graphs.push(c.graph.clone());
            targets.push(0.0);
        }
        Ok(OutbreakSplit {
            graphs,
            targets,
            threshold,
        })
    };
    Ok(OutbreakDataset {
        train: one(Split::Train)?,
        val: one(Split::Val)?,
        test: one(Split::Test)?,
    })
}

/// Fraction of logits on the correct side of zero (probability 0.5).
pub fn accuracy(logits: &[f64], targets: &[f64]) -> f64 {
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(&x, &y)| (x > 0.0) == (y == 1.0))
        .count();
    hits as f64 / logits.len().max(1) as f64
}

/// Accuracy on the balanced test split.
pub fn evaluate_outbreak(model: &EncoderModel, data: &OutbreakDataset, t_o: f64) -> Result<f64, EvalError> {
    if data.test.graphs.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let set = data.test.to_set(model, t_o)?;
    Ok(accuracy(&predict_set(model, &set)?, &set.targets))
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Ingest(#[from] IngestError),
    #[error("evaluation: {0}")]
    Eval(EvalError),
    #[error("training: {0}")]
    Train(TrainError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        RunError::Train(e)
    }
}

impl From<EncoderError> for RunError {
    fn from(e: EncoderError) -> Self {
        RunError::Train(e.into())
    }
}

impl From<AugmentError> for RunError {
    fn from(e: AugmentError) -> Self {
        RunError::Train(e.into())
    }
}

impl From<EvalError> for RunError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => RunError::Train(t),
            other => RunError::Eval(other),
        }
    }
}

impl RunError {
    /// 2 config, 3 data, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Ingest(IngestError::InvalidConfig(_) | IngestError::FractionOutOfRange(_)) => 2,
            RunError::Ingest(_) | RunError::Eval(_) => 3,
            RunError::Train(t) if t.is_numeric() => 4,
            RunError::Train(
                TrainError::InvalidParams(_)
                | TrainError::Encoder(EncoderError::InvalidConfig(_))
                | TrainError::Augment(AugmentError::InvalidParams(_)),
            ) => 2,
            RunError::Train(TrainError::Io(_) | TrainError::Encoder(EncoderError::Io(_))) => 1,
            RunError::Train(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

/// The configured dataset: the input file, or the synthetic generator.
pub fn load_config_dataset(cfg: &ExperimentConfig) -> Result<CascadeDataset, RunError> {
    let mut dc = cfg.dataset.clone();
    dc.seed = cfg.data_seed;
    Ok(match &cfg.input {
        Some(p) => load_dataset(p, dc)?,
        None => generate_synthetic(cfg.synthetic_count, dc, &cfg.generator, cfg.data_seed)?,
    })
}

fn load_transfer(cfg: &ExperimentConfig) -> Result<Option<CascadeDataset>, RunError> {
    let Some(p) = &cfg.transfer_input else { return Ok(None) };
    let mut dc = cfg.dataset.clone();
    dc.seed = cfg.data_seed;
    Ok(Some(load_dataset(p, dc)?))
}

/// Pre-training pool: the target's training split (and unlabeled pool
/// when enabled) plus every cascade of the transfer source.
pub fn pretrain_pool<'a>(
    cfg: &ExperimentConfig,
    ds: &'a CascadeDataset,
    transfer: Option<&'a CascadeDataset>,
) -> Vec<&'a CascadeGraph> {
    let mut pool = ds.pretrain_pool(cfg.pretrain_unlabeled);
    if let Some(t) = transfer {
        pool.extend(t.all_graphs());
    }
    pool
}

pub fn init_model(cfg: &ExperimentConfig, run_seed: u64) -> Result<EncoderModel, RunError> {
    let mut rng = seed::rng(seed::derive(run_seed, &[seed::fnv1a("init")]));
    Ok(EncoderModel::new(cfg.encoder_config(), &mut rng)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub task: String,
    pub phases: Vec<String>,
    pub report: MetricsReport,
    pub complete: bool,
}

/// Runs the configured phase plan once per seed and writes artifacts
/// under `out_dir`: per-seed metrics JSONL and checkpoints, the resolved
/// config, a manifest and `summary.json`. An `INCOMPLETE` marker remains
/// if the run fails.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RunError> {
    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join("INCOMPLETE");
    fs::write(&marker, "run did not finish\n")?;

    let full = load_config_dataset(cfg)?;
    let ds = full.label_fraction(cfg.label_fraction, cfg.data_seed)?;
    let transfer = load_transfer(cfg)?;
    fs::write(out_dir.join("config.ini"), cfg.to_text())?;
    fs::write(out_dir.join("manifest.txt"), manifest(cfg, &ds, transfer.as_ref()))?;

    let metric = match cfg.task {
        Task::Popularity => "test_msle",
        Task::Outbreak => "accuracy",
    };
    let mut scores = Vec::new();
    for &s in &cfg.seeds {
        let dir = out_dir.join(format!("seed-{s}"));
        fs::create_dir_all(&dir)?;
        let value = run_seed(cfg, &ds, transfer.as_ref(), s, &dir)?;
        scores.push(SeedScore { seed: s, value });
    }
    let mut report = MetricsReport::new(metric, scores);
    report.meta.insert("label_fraction".into(), cfg.label_fraction.to_string());
    report.meta.insert("head".into(), cfg.head_design().to_string());
    report.meta.insert("labeled".into(), ds.labeled.len().to_string());
    report.meta.insert("unlabeled".into(), ds.unlabeled.len().to_string());
    let summary = RunSummary {
        task: cfg.task.as_str().into(),
        phases: cfg.phases.iter().map(|p| p.as_str().to_string()).collect(),
        report,
        complete: true,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(std::io::Error::other)?;
    fs::write(out_dir.join("summary.json"), json + "\n")?;
    fs::remove_file(marker)?;
    Ok(summary)
}

fn manifest(cfg: &ExperimentConfig, ds: &CascadeDataset, transfer: Option<&CascadeDataset>) -> String {
    let source = cfg
        .input
        .as_ref()
        .map_or_else(|| format!("synthetic:{}", cfg.synthetic_count), |p| p.display().to_string());
    let mut m = format!("tool=casgraph {}\n", env!("CARGO_PKG_VERSION"));
    m.push_str(&ds.manifest(&source));
    if let (Some(t), Some(p)) = (transfer, &cfg.transfer_input) {
        m.push_str(&format!("transfer_source={}\ntransfer_cascades={}\n", p.display(), t.all_graphs().count()));
    }
    m.push_str(&format!(
        "seeds={}\nrerun=casgraph run --config config.ini\n",
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    ));
    m
}

fn run_seed(
    cfg: &ExperimentConfig,
    ds: &CascadeDataset,
    transfer: Option<&CascadeDataset>,
    s: u64,
    dir: &Path,
) -> Result<f64, RunError> {
    let mut sink = MetricsSink::to_file(&dir.join("metrics.jsonl"))?;
    let mut model = init_model(cfg, s)?;
    let has = |p: Phase| cfg.phases.contains(&p);
    let t_o = ds.config.t_o();

    if has(Phase::Pretrain) {
        let pool = pretrain_pool(cfg, ds, transfer);
        pretrain_on(&pool, ds, &mut model, &cfg.contrastive_params(), s, &mut sink)?;
        model.save(&dir.join("pretrained.ckpt"))?;
    }

    match cfg.task {
        Task::Popularity => {
            if has(Phase::Finetune) {
                finetune(ds, &mut model, &cfg.finetune_params(), s, &mut sink)?;
                model.save(&dir.join("finetuned.ckpt"))?;
            }
            if has(Phase::Distill) {
                let (student, _) = distill(&model, ds, &cfg.distill_params(), s, &mut sink)?;
                student.save(&dir.join("student.ckpt"))?;
                model = student;
            }
            Ok(evaluate_popularity(&model, ds)?)
        }
        Task::Outbreak => {
            let data = build_outbreak_dataset(ds, s)?;
            if has(Phase::Finetune) {
                let train = data.train.to_set(&model, t_o)?;
                let val = data.val.to_set(&model, t_o)?;
                finetune_sets(
                    &mut model,
                    &train,
                    &val,
                    Objective::Classification,
                    &cfg.finetune_params(),
                    s,
                    &mut sink,
                )?;
                model.save(&dir.join("finetuned.ckpt"))?;
            }
            Ok(evaluate_outbreak(&model, &data, t_o)?)
        }
    }
}
