//! Losses, early stopping and the three training regimes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::augment::{fit_global_rate, make_views, AugmentError, AugmentParams};
use crate::autodiff::{Adam, AutodiffError, Graph, ParamId, Tensor, Var};
use crate::encoder::{EncoderConfig, EncoderError, EncoderModel};
use crate::graph::CascadeGraph;
use crate::ingest::{CascadeDataset, LabeledCascade, Split};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("need at least {need} cascades, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("no labeled training cascades")]
    NoLabeledData,
    #[error("loss over an empty set")]
    EmptySet,
    #[error("popularity label {0} is not positive")]
    NonPositiveLabel(f64),
    #[error("{0} prediction and target counts differ")]
    LengthMismatch(&'static str),
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite loss in {phase} epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
    #[error("metrics: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Encoder(EncoderError::Autodiff(e))
    }
}

impl TrainError {
    /// True for failures caused by numerics rather than data or config.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Encoder(EncoderError::Autodiff(
                    AutodiffError::NonFinite(_) | AutodiffError::ZeroVector(_)
                ))
                | TrainError::Encoder(EncoderError::EigenFailure(_))
        )
    }
}

/// Mean NT-Xent loss over all `2B` anchors. Rows `2k` and `2k+1` of `z`
/// are the two views of cascade `k`.
pub fn nt_xent_loss(tape: &mut Graph, z: Var, tau: f64) -> Result<Var, TrainError> {
    let n = tape.value(z).rows();
    if n < 2 || n % 2 != 0 {
        return Err(TrainError::InvalidParams(format!("{n} rows do not form view pairs")));
    }
    if !(tau > 0.0) {
        return Err(TrainError::InvalidParams(format!("temperature {tau}")));
    }
    let zn = tape.normalize_rows(z)?;
    let zt = tape.transpose(zn);
    let sim = tape.matmul(zn, zt)?;
    let s = tape.scale(sim, 1.0 / tau);
    let mut include = vec![true; n * n];
    for i in 0..n {
        include[i * n + i] = false;
    }
    let lse = tape.logsumexp_rows(s, include)?;
    let pos = tape.pick_rows(s, (0..n).map(|i| i ^ 1).collect())?;
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Mean squared error between `pred` (log₂ scale) and `log₂ labels`.
pub fn msle_loss(tape: &mut Graph, pred: Var, labels: &[f64]) -> Result<Var, TrainError> {
    let targets = log2_labels(labels)?;
    squared_error(tape, pred, &targets, "msle")
}

pub fn msle_value(pred_log2: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    let targets = log2_labels(labels)?;
    mean_squared(pred_log2, &targets, "msle")
}

/// Mean squared gap between teacher and student log₂ predictions.
pub fn distill_loss(tape: &mut Graph, student: Var, teacher: &[f64]) -> Result<Var, TrainError> {
    squared_error(tape, student, teacher, "distill")
}

pub fn distill_value(teacher: &[f64], student: &[f64]) -> Result<f64, TrainError> {
    mean_squared(student, teacher, "distill")
}

/// Mean logistic loss `softplus(x) − y·x` of logits `x` against 0/1 targets.
pub fn logistic_loss(tape: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var, TrainError> {
    check_len(tape.value(logits).len(), targets.len(), "logistic")?;
    let sp = tape.softplus(logits);
    let y = tape.constant(Tensor::column(targets));
    let yx = tape.mul(y, logits)?;
    let per = tape.sub(sp, yx)?;
    Ok(tape.mean(per))
}

pub fn logistic_value(logits: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    check_len(logits.len(), targets.len(), "logistic")?;
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) + (-x.abs()).exp().ln_1p() - y * x)
        .sum();
    Ok(total / logits.len() as f64)
}

fn check_len(a: usize, b: usize, what: &'static str) -> Result<(), TrainError> {
    if a == 0 || b == 0 {
        return Err(TrainError::EmptySet);
    }
    if a != b {
        return Err(TrainError::LengthMismatch(what));
    }
    Ok(())
}

fn log2_labels(labels: &[f64]) -> Result<Vec<f64>, TrainError> {
    labels
        .iter()
        .map(|&p| if p > 0.0 { Ok(p.log2()) } else { Err(TrainError::NonPositiveLabel(p)) })
        .collect()
}

fn squared_error(tape: &mut Graph, pred: Var, targets: &[f64], what: &'static str) -> Result<Var, TrainError> {
    check_len(tape.value(pred).len(), targets.len(), what)?;
    let t = tape.constant(Tensor::column(targets));
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

fn mean_squared(pred: &[f64], targets: &[f64], what: &'static str) -> Result<f64, TrainError> {
    check_len(pred.len(), targets.len(), what)?;
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Patience-based stopping on a monitored loss. Epochs are 1-based and an
/// improvement means strictly lower than the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            since_best: 0,
        }
    }

    /// Seeds the best value with an epoch-0 measurement.
    pub fn with_initial(patience: usize, loss: f64) -> Self {
        let mut s = Self::new(patience);
        s.best = loss;
        s
    }

    /// Records the next epoch; true if it is a new best.
    pub fn record(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 0 when nothing beat the initial value.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }
}

/// Replays a loss history; returns the stop epoch (if any) and the best epoch.
pub fn early_stop(history: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut es = EarlyStopping::new(patience);
    for (k, &l) in history.iter().enumerate() {
        es.record(l);
        if es.should_stop() {
            return (Some(k + 1), es.best_epoch());
        }
    }
    (None, es.best_epoch())
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_msle: Option<f64>,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Collects epoch records and optionally streams them as JSON lines.
#[derive(Default)]
pub struct MetricsSink {
    records: Vec<EpochRecord>,
    out: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self, TrainError> {
        Ok(MetricsSink {
            records: Vec::new(),
            out: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, r: EpochRecord) -> Result<(), TrainError> {
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(&r).map_err(std::io::Error::other)?;
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Clock(Instant::now())
    }

    fn ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveParams {
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub augment: AugmentParams,
    /// Replace `augment.sim.lambda` with the rate fitted on the dataset.
    pub fit_lambda: bool,
    /// Draw from the unlabeled pool as well as the labeled training split.
    pub include_unlabeled: bool,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            batch_size: 64,
            temperature: 0.1,
            epochs: 30,
            patience: 20,
            learning_rate: 5e-4,
            augment: AugmentParams::default(),
            fit_lambda: true,
            include_unlabeled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Monitored loss per epoch (1-based epochs map to index + 1).
    pub history: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
    pub test_msle: Option<f64>,
}

fn finite_or(loss: f64, phase: &'static str, epoch: usize) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFiniteLoss { phase, epoch })
    }
}

/// Contrastive pre-training of the encoder and projection head. The best
/// parameters by training loss are restored before returning.
pub fn pretrain(
    ds: &CascadeDataset,
    model: &mut EncoderModel,
    params: &ContrastiveParams,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<TrainReport, TrainError> {
    let pool = ds.pretrain_pool(params.include_unlabeled);
    pretrain_on(&pool, ds, model, params, run_seed, sink)
}

/// Pre-training over an explicit graph pool; `ds` supplies the window and
/// the rate fit.
pub fn pretrain_on(
    pool: &[&CascadeGraph],
    ds: &CascadeDataset,
    model: &mut EncoderModel,
    params: &ContrastiveParams,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<TrainReport, TrainError> {
    let b = params.batch_size;
    if b < 2 {
        return Err(TrainError::InvalidParams(format!("batch size {b}")));
    }
    if pool.len() < b {
        return Err(TrainError::InsufficientData {
            need: b,
            have: pool.len(),
        });
    }
    let mut aug = params.augment.clone();
    if params.fit_lambda {
        aug.sim.lambda = fit_global_rate(ds)?;
    }
    aug.sim.validate()?;
    aug.rwr.validate()?;
    let t_o = ds.config.t_o();
    let trainable = model.pretrain_ids();
    let mut adam = Adam::new(params.learning_rate);
    let mut stop = EarlyStopping::new(params.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let clock = Clock::start();
    let mut order: Vec<usize> = (0..pool.len()).collect();

    for epoch in 1..=params.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(run_seed, &[1, epoch as u64])));
        let mut total = 0.0;
        let batches = pool.len() / b;
        for batch in 0..batches {
            let mut feats = Vec::with_capacity(2 * b);
            for &k in &order[batch * b..(batch + 1) * b] {
                let g = pool[k];
                let s = seed::derive(run_seed, &[2, epoch as u64, batch as u64, seed::fnv1a(g.id())]);
                let views = make_views(g, &aug, t_o, &mut seed::rng(s))?;
                feats.push(model.features(&views.view1, t_o)?);
                feats.push(model.features(&views.view2, t_o)?);
            }
            model.params.zero_grad();
            let mut tape = Graph::new();
            let h = model.encode_batch(&mut tape, &feats)?;
            let z = model.project(&mut tape, h)?;
            let loss = nt_xent_loss(&mut tape, z, params.temperature)?;
            let lv = finite_or(tape.value(loss).item(), "pretrain", epoch)?;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, &trainable)?;
            total += lv;
        }
        let epoch_loss = total / batches as f64;
        history.push(epoch_loss);
        if stop.record(epoch_loss) {
            best = model.params.clone();
        }
        sink.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            loss: epoch_loss,
            val_loss: None,
            test_msle: None,
            seed: run_seed,
            wall_ms: clock.ms(),
        })?;
        if stop.should_stop() {
            break;
        }
    }
    model.params.load_values(&best);
    Ok(TrainReport {
        stopped_early: history.len() < params.epochs,
        history,
        best_epoch: stop.best_epoch(),
        best_loss: stop.best(),
        test_msle: None,
    })
}

/// What the supervised head is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// log₂ popularity under squared error.
    Regression,
    /// A logit under logistic loss.
    Classification,
}

/// Precomputed node features with per-item targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSet {
    pub feats: Vec<Tensor>,
    pub targets: Vec<f64>,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Targets are log₂ popularity.
    pub fn popularity<'a>(
        model: &EncoderModel,
        items: impl IntoIterator<Item = &'a LabeledCascade>,
        t_o: f64,
    ) -> Result<Self, TrainError> {
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for c in items {
            feats.push(model.features(&c.graph, t_o)?);
            targets.push(log2_labels(&[c.label as f64])?[0]);
        }
        Ok(SupervisedSet { feats, targets })
    }

    pub fn from_graphs(
        model: &EncoderModel,
        graphs: &[&CascadeGraph],
        targets: Vec<f64>,
        t_o: f64,
    ) -> Result<Self, TrainError> {
        let feats = graphs
            .iter()
            .map(|g| model.features(g, t_o))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SupervisedSet { feats, targets })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Train only the regression head.
    pub freeze: bool,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            batch_size: 64,
            epochs: 100,
            patience: 20,
            learning_rate: 5e-4,
            freeze: false,
        }
    }
}

/// Mean model loss over a set, evaluated in chunks without gradients.
pub fn evaluate_set(model: &EncoderModel, set: &SupervisedSet, objective: Objective) -> Result<f64, TrainError> {
    let preds = predict_set(model, set)?;
    match objective {
        Objective::Regression => mean_squared(&preds, &set.targets, "msle"),
        Objective::Classification => logistic_value(&preds, &set.targets),
    }
}

pub fn predict_set(model: &EncoderModel, set: &SupervisedSet) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.feats.chunks(128) {
        out.extend(model.predict_features(chunk)?);
    }
    Ok(out)
}

fn batch_loss(
    tape: &mut Graph,
    pred: Var,
    targets: &[f64],
    objective: Objective,
) -> Result<Var, TrainError> {
    match objective {
        Objective::Regression => squared_error(tape, pred, targets, "msle"),
        Objective::Classification => logistic_loss(tape, pred, targets),
    }
}

/// Shared loop for fine-tuning and distillation: minibatch Adam on
/// `train`, early stopping on `val` (or on the training loss when `val` is
/// empty). Restores the best parameters.
#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut EncoderModel,
    trainable: &[ParamId],
    train: &SupervisedSet,
    val: &SupervisedSet,
    val_objective: Objective,
    train_objective: Objective,
    params: &FinetuneParams,
    phase: &'static str,
    initial_best: bool,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoLabeledData);
    }
    if params.batch_size == 0 {
        return Err(TrainError::InvalidParams("batch size 0".into()));
    }
    let monitor = |m: &EncoderModel, train_loss: f64| -> Result<f64, TrainError> {
        if val.is_empty() {
            Ok(train_loss)
        } else {
            evaluate_set(m, val, val_objective)
        }
    };
    let clock = Clock::start();
    let mut stop = if initial_best {
        let v0 = monitor(model, evaluate_set(model, train, train_objective)?)?;
        EarlyStopping::with_initial(params.patience, finite_or(v0, phase, 0)?)
    } else {
        EarlyStopping::new(params.patience)
    };
    let mut best = model.params.clone();
    let mut adam = Adam::new(params.learning_rate);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let phase_tag = seed::fnv1a(phase);

    for epoch in 1..=params.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(run_seed, &[phase_tag, epoch as u64])));
        let mut total = 0.0;
        for idx in order.chunks(params.batch_size) {
            let feats: Vec<Tensor> = idx.iter().map(|&k| train.feats[k].clone()).collect();
            let targets: Vec<f64> = idx.iter().map(|&k| train.targets[k]).collect();
            model.params.zero_grad();
            let mut tape = Graph::new();
            let h = model.encode_batch(&mut tape, &feats)?;
            let y = model.predict(&mut tape, h)?;
            let loss = batch_loss(&mut tape, y, &targets, train_objective)?;
            let lv = finite_or(tape.value(loss).item(), phase, epoch)?;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, trainable)?;
            total += lv * idx.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let monitored = finite_or(monitor(model, train_loss)?, phase, epoch)?;
        history.push(monitored);
        if stop.record(monitored) {
            best = model.params.clone();
        }
        sink.push(EpochRecord {
            phase: phase.into(),
            epoch,
            loss: train_loss,
            val_loss: (!val.is_empty()).then_some(monitored),
            test_msle: None,
            seed: run_seed,
            wall_ms: clock.ms(),
        })?;
        if stop.should_stop() {
            break;
        }
    }
    model.params.load_values(&best);
    Ok(TrainReport {
        stopped_early: history.len() < params.epochs,
        history,
        best_epoch: stop.best_epoch(),
        best_loss: stop.best(),
        test_msle: None,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn record_test(
    sink: &mut MetricsSink,
    phase: &str,
    report: &TrainReport,
    test: f64,
    run_seed: u64,
) -> Result<(), TrainError> {
    sink.push(EpochRecord {
        phase: format!("{phase}_test"),
        epoch: report.best_epoch,
        loss: test,
        val_loss: Some(report.best_loss),
        test_msle: Some(test),
        seed: run_seed,
        wall_ms: 0,
    })
}

/// Supervised fine-tuning on the labeled training split with early
/// stopping on validation MSLE; test MSLE is measured once at the end.
pub fn finetune(
    ds: &CascadeDataset,
    model: &mut EncoderModel,
    params: &FinetuneParams,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<TrainReport, TrainError> {
    let t_o = ds.config.t_o();
    let train = SupervisedSet::popularity(model, ds.split(Split::Train), t_o)?;
    let val = SupervisedSet::popularity(model, ds.split(Split::Val), t_o)?;
    let mut report = finetune_sets(model, &train, &val, Objective::Regression, params, run_seed, sink)?;
    let test = SupervisedSet::popularity(model, ds.split(Split::Test), t_o)?;
    if !test.is_empty() {
        let t = evaluate_set(model, &test, Objective::Regression)?;
        report.test_msle = Some(t);
        record_test(sink, "finetune", &report, t, run_seed)?;
    }
    Ok(report)
}

/// Fine-tuning on explicit sets; the output bias starts at the mean
/// training target (its logit for classification).
pub fn finetune_sets(
    model: &mut EncoderModel,
    train: &SupervisedSet,
    val: &SupervisedSet,
    objective: Objective,
    params: &FinetuneParams,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoLabeledData);
    }
    let m = mean(&train.targets);
    let bias = match objective {
        Objective::Regression => m,
        Objective::Classification => {
            let p = m.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    };
    model.set_output_bias(bias);
    let trainable = model.finetune_ids(params.freeze);
    fit(
        model, &trainable, train, val, objective, objective, params, "finetune", false, run_seed, sink,
    )
}

/// Which cascades the teacher labels for the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPool {
    Label,
    Unlabel,
    LabelUnlabel,
}

impl DataPool {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "label" => Some(DataPool::Label),
            "unlabel" => Some(DataPool::Unlabel),
            "label+unlabel" => Some(DataPool::LabelUnlabel),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DataPool::Label => "label",
            DataPool::Unlabel => "unlabel",
            DataPool::LabelUnlabel => "label+unlabel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudentInit {
    /// Same architecture, starting from the teacher's weights.
    SelfDistill,
    /// Freshly initialised model with its own architecture.
    Fresh(EncoderConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillParams {
    pub pool: DataPool,
    pub student: StudentInit,
    pub train: FinetuneParams,
}

impl Default for DistillParams {
    fn default() -> Self {
        DistillParams {
            pool: DataPool::LabelUnlabel,
            student: StudentInit::SelfDistill,
            train: FinetuneParams {
                epochs: 50,
                ..FinetuneParams::default()
            },
        }
    }
}

/// A student with the requested architecture; `Fresh` students get the
/// mean pseudo-label as output bias.
pub fn init_student(teacher: &EncoderModel, init: StudentInit, run_seed: u64) -> Result<EncoderModel, TrainError> {
    Ok(match init {
        StudentInit::SelfDistill => teacher.clone(),
        StudentInit::Fresh(cfg) => {
            EncoderModel::new(cfg, &mut seed::rng(seed::derive(run_seed, &[seed::fnv1a("student")])))?
        }
    })
}

/// Teacher-student distillation on teacher pseudo-labels. Validation MSLE
/// drives early stopping, with the untrained student as epoch 0.
pub fn distill(
    teacher: &EncoderModel,
    ds: &CascadeDataset,
    params: &DistillParams,
    run_seed: u64,
    sink: &mut MetricsSink,
) -> Result<(EncoderModel, TrainReport), TrainError> {
    let t_o = ds.config.t_o();
    let mut graphs: Vec<&CascadeGraph> = Vec::new();
    if matches!(params.pool, DataPool::Label | DataPool::LabelUnlabel) {
        graphs.extend(ds.split(Split::Train).map(|c| &c.graph));
    }
    if matches!(params.pool, DataPool::Unlabel | DataPool::LabelUnlabel) {
        graphs.extend(ds.unlabeled.iter());
    }
    if graphs.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let teacher_set = SupervisedSet::from_graphs(teacher, &graphs, Vec::new(), t_o)?;
    let pseudo = predict_set(teacher, &teacher_set)?;

    let mut student = init_student(teacher, params.student, run_seed)?;
    if matches!(params.student, StudentInit::Fresh(_)) {
        student.set_output_bias(mean(&pseudo));
    }
    let train = SupervisedSet::from_graphs(&student, &graphs, pseudo, t_o)?;
    let val = SupervisedSet::popularity(&student, ds.split(Split::Val), t_o)?;
    let trainable = student.finetune_ids(false);
    let mut report = fit(
        &mut student,
        &trainable,
        &train,
        &val,
        Objective::Regression,
        Objective::Regression,
        &params.train,
        "distill",
        true,
        run_seed,
        sink,
    )?;
    let test = SupervisedSet::popularity(&student, ds.split(Split::Test), t_o)?;
    if !test.is_empty() {
        let t = evaluate_set(&student, &test, Objective::Regression)?;
        report.test_msle = Some(t);
        record_test(sink, "distill", &report, t, run_seed)?;
    }
    Ok((student, report))
}
