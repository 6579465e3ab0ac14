//! Optimisation: Adam with decoupled weight decay, a warmup-then-linear-decay
//! schedule, masked-token pretraining and windowed fine-tuning over repeated
//! random splits.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{PatientRecord, SentinelCodes};
use crate::error::{Error, Result};
use crate::metrics::{self, Calibrator, Confusion, PrecisionCounts, PrecisionRule, ScoredLabels, Summary};
use crate::model::{self, Checkpoint, Model, ModelConfig, ParamKind, Weights};
use crate::rng::{self, epoch_index, Purpose};
use crate::sequencer::{
    apply_mlm_mask, batchify, build_sequence, eligibility_filter, pretraining_sequence, select_window, Batch,
    TokenSequence, WindowSpec, FINETUNE_BATCH_SIZE, PRETRAIN_BATCH_SIZE,
};
use crate::tensor::{Graph, Tensor};
use crate::vocab::Vocabulary;

/// Batch size used for gradient-free evaluation passes.
const EVAL_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Held-out evaluation interval in optimiser steps (pretraining).
    pub eval_every: usize,
    pub seed: u64,
    /// Train, validation and test fractions (fine-tuning).
    pub split_fractions: [f64; 3],
    pub n_splits: usize,
    /// Share of pretraining sequences held out for evaluation.
    pub heldout_fraction: f64,
    /// Replaces the starting model's dropout rate (fine-tuning).
    pub dropout: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_proportion: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            batch_size: PRETRAIN_BATCH_SIZE,
            epochs: 100,
            eval_every: 20,
            seed: 0,
            split_fractions: [0.7, 0.1, 0.2],
            n_splits: 10,
            heldout_fraction: 0.1,
            dropout: None,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            batch_size: FINETUNE_BATCH_SIZE,
            epochs: 50,
            ..Self::pretrain_default()
        }
    }

    /// Settings sized for a laptop run on the synthetic cohorts.
    pub fn desk_pretrain() -> Self {
        Self {
            peak_lr: 5e-3,
            batch_size: 32,
            epochs: 30,
            ..Self::pretrain_default()
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            peak_lr: 2e-3,
            batch_size: 8,
            epochs: 25,
            dropout: Some(0.2),
            ..Self::finetune_default()
        }
    }

    /// `paper` or `desk` settings for the `pretrain` or `finetune` stage.
    pub fn preset(name: &str, finetune: bool) -> Result<Self> {
        match (name, finetune) {
            ("paper", false) => Ok(Self::pretrain_default()),
            ("paper", true) => Ok(Self::finetune_default()),
            ("desk", false) => Ok(Self::desk_pretrain()),
            ("desk", true) => Ok(Self::desk_finetune()),
            _ => Err(Error::Config(format!("unknown training preset {name:?}; expected paper or desk"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion must lie in [0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.n_splits == 0 {
            return bad("batch_size, eval_every and n_splits must be positive");
        }
        if self.split_fractions.iter().any(|&f| f <= 0.0) || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split fractions must be positive and sum to 1");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak over `ceil(warmup_proportion · total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule of {total_steps}")));
    }
    let warmup = (cfg.warmup_proportion * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(cfg.peak_lr * (step as f64 / warmup as f64));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(cfg.peak_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
}

/// Adam moment buffers laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Weights<Tensor>,
    pub v: Weights<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Weights<Tensor>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat buffer at step `t` (1-based),
/// after multiplying the parameter by `1 − lr · decay`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    decay: f64,
    cfg: &TrainConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = 1.0 - lr * decay;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        param[i] = param[i] * shrink - lr * step;
    }
}

/// Applies one optimiser step to every trainable tensor. Weight matrices and
/// embedding tables are decayed; biases and layer-norm parameters are not;
/// fixed tensors are untouched. Gradients are checked before anything moves.
pub fn adam_step(
    params: &mut Weights<Tensor>,
    grads: &Weights<Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut flat: Vec<(&Tensor, ParamKind)> = Vec::new();
    let mut bad = None;
    grads.visit(&mut |name, kind, g| {
        if kind != ParamKind::Fixed && bad.is_none() && g.data().iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
        flat.push((g, kind));
    });
    if let Some(tensor) = bad {
        return Err(Error::NonFinite { tensor });
    }
    let mut ms: Vec<&mut Tensor> = Vec::new();
    state.m.visit_mut(&mut |_, _, t| ms.push(t));
    let mut vs: Vec<&mut Tensor> = Vec::new();
    state.v.visit_mut(&mut |_, _, t| vs.push(t));
    if ms.len() != flat.len() || vs.len() != flat.len() {
        return Err(Error::Contract("optimiser state does not match the parameters".into()));
    }
    state.t += 1;
    let t = state.t;
    let mut i = 0;
    let mut mismatch = false;
    params.visit_mut(&mut |_, kind, p| {
        let (g, gkind) = flat[i];
        if gkind != kind || g.shape() != p.shape() || ms[i].shape() != p.shape() {
            mismatch = true;
        } else if kind != ParamKind::Fixed {
            let decay = if kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            adam_update(p.data_mut(), g.data(), ms[i].data_mut(), vs[i].data_mut(), t, lr, decay, cfg);
        }
        i += 1;
    });
    if mismatch {
        return Err(Error::Contract("gradient layout does not match the parameters".into()));
    }
    Ok(())
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub split: Option<usize>,
    pub epoch: usize,
    pub step: usize,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricLog) {
        self.rows.extend(other.rows);
    }

    /// Rows matching a metric name.
    pub fn metric<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.metric_name == name)
    }

    /// CSV with header `stage,split,epoch,step,lr,loss,metric_name,value`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Validation(format!("metric log: {e}")))?;
        }
        let mut out = w.into_inner().map_err(|e| Error::Validation(format!("metric log: {e}")))?;
        if self.rows.is_empty() {
            out.extend_from_slice(b"stage,split,epoch,step,lr,loss,metric_name,value\n");
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_csv()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Runs one optimiser step on a batch; returns the loss before the update.
fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    batch: &Batch,
    lr: f64,
    dropout_seed: (u64, u64),
    classification: bool,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let w = model.weights.register(&mut g, true);
    let mut rng = rng::stream(dropout_seed.0, Purpose::Dropout, dropout_seed.1);
    let mut dropout = Some(&mut rng);
    let loss = if classification {
        model::classification_loss(&mut g, &w, &model.config, batch, &mut dropout)?
    } else {
        model::mlm_loss(&mut g, &w, &model.config, batch, &mut dropout)?
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    g.backward(loss)?;
    let grads = w.grads(&g);
    adam_step(&mut model.weights, &grads, state, lr, cfg)?;
    Ok(value)
}

/// Held-out masked-token evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmScore {
    pub loss: f64,
    pub precision: Option<f64>,
    pub counts: PrecisionCounts,
}

/// Pooled loss and masked precision over pre-masked sequences.
pub fn evaluate_mlm(model: &Model, masked: &[TokenSequence], rule: PrecisionRule) -> Result<MlmScore> {
    let mut total = 0.0;
    let mut positions = 0usize;
    let mut counts = PrecisionCounts::default();
    for batch in batchify(masked, EVAL_BATCH_SIZE)? {
        let e = model.evaluate_mlm(&batch)?;
        total += e.loss * e.targets.len() as f64;
        positions += e.targets.len();
        counts.merge(metrics::masked_precision_counts(&e.logits, &e.targets, 0.5, rule)?);
    }
    Ok(MlmScore {
        loss: total / positions as f64,
        precision: counts.precision(),
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Weights with the lowest held-out loss.
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_step: usize,
    pub best_heldout_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Indices (into the input records) of the held-out slice.
    pub heldout: Vec<usize>,
    pub log: MetricLog,
}

/// Splits `0..n` by a seeded permutation into a held-out slice and the rest.
fn heldout_partition(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, u64::MAX));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut held = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (held, train)
}

/// Masked-token pretraining on full pre-onset histories.
pub fn pretrain(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<PretrainResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} differs from vocabulary of {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let seqs: Vec<(usize, TokenSequence)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| pretraining_sequence(r, vocab, model_cfg.max_len).map(|s| (i, s)))
        .collect();
    if seqs.len() < 2 {
        return Err(Error::Config("pretraining needs at least two usable records".into()));
    }
    let (held_idx, train_idx) = heldout_partition(seqs.len(), cfg.heldout_fraction, cfg.seed);
    let heldout: Vec<TokenSequence> = held_idx
        .iter()
        .map(|&i| apply_mlm_mask(&seqs[i].1, vocab.len(), &mut rng::stream(cfg.seed, Purpose::EvalMasking, i as u64)))
        .collect::<Result<_>>()?;

    let mut model = Model::init(model_cfg.clone(), cfg.seed, false)?;
    let mut state = AdamState::new(&model.weights);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = MetricLog::default();
    let mut best = (f64::INFINITY, model.clone(), 0, 0);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let row = |epoch, step, lr, loss, name: &str, value| LogRow {
        stage: "pretrain".into(),
        split: None,
        epoch,
        step,
        lr,
        loss,
        metric_name: name.into(),
        value,
    };

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let masked: Vec<TokenSequence> = order
            .iter()
            .map(|&i| {
                let mut r = rng::stream(cfg.seed, Purpose::Masking, epoch_index(epoch, i));
                apply_mlm_mask(&seqs[i].1, vocab.len(), &mut r)
            })
            .collect::<Result<_>>()?;
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for batch in batchify(&masked, cfg.batch_size)? {
            let lr = lr_at(step, total, cfg)?;
            let loss = train_step(&mut model, &mut state, &batch, lr, (cfg.seed, step as u64), false, cfg)?;
            losses.push(loss);
            log.push(row(epoch, step, Some(lr), Some(loss), "train_loss", loss));
            step += 1;
            let epoch_end = losses.len() == steps_per_epoch;
            if step % cfg.eval_every == 0 || epoch_end {
                let score = evaluate_mlm(&model, &heldout, PrecisionRule::MaxProbability)?;
                log.push(row(epoch, step, None, Some(score.loss), "heldout_loss", score.loss));
                if let Some(p) = score.precision {
                    log.push(row(epoch, step, None, Some(score.loss), "masked_precision", p));
                }
                if score.loss < best.0 {
                    best = (score.loss, model.clone(), epoch, step);
                }
            }
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(row(epoch, step, None, Some(mean), "epoch_loss", mean));
        epoch_losses.push(mean);
    }
    if cfg.epochs == 0 {
        let score = evaluate_mlm(&model, &heldout, PrecisionRule::MaxProbability)?;
        best.0 = score.loss;
    }
    Ok(PretrainResult {
        best: best.1,
        last: model,
        best_epoch: best.2,
        best_step: best.3,
        best_heldout_loss: best.0,
        epoch_losses,
        heldout: held_idx.iter().map(|&i| seqs[i].0).collect(),
        log,
    })
}

/// Starting point for fine-tuning.
#[derive(Debug, Clone)]
pub enum FinetuneInit {
    Pretrained(Box<Checkpoint>),
    Scratch(ModelConfig),
}

/// Train / validation / test indices of one seeded split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `0..n` by the configured fractions.
pub fn make_split(n: usize, split: usize, cfg: &TrainConfig) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, Purpose::Split, split as u64));
    let n_train = (n as f64 * cfg.split_fractions[0]).round() as usize;
    let n_val = (n as f64 * cfg.split_fractions[1]).round() as usize;
    let n_val = n_val.min(n - n_train);
    Split {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Labelled fine-tuning sequences for one window over a fixed cohort.
pub fn window_sequences(
    cohort: &[PatientRecord],
    vocab: &Vocabulary,
    spec: &WindowSpec,
    sentinels: &SentinelCodes,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    cohort
        .iter()
        .map(|r| {
            let w = select_window(r, spec, sentinels, true).ok_or_else(|| {
                Error::Contract(format!("record {} has no data in the {} window", r.id, spec.label()))
            })?;
            build_sequence(&w, vocab, max_len)
        })
        .collect()
}

/// Probability of the positive class for each sequence.
pub fn predict(model: &Model, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for batch in batchify(seqs, EVAL_BATCH_SIZE)? {
        out.extend(model.predict_batch(&batch)?);
    }
    Ok(out)
}

fn labels_of(seqs: &[TokenSequence]) -> Vec<u8> {
    seqs.iter().map(|s| s.class_label.unwrap_or(0)).collect()
}

/// First epoch with the highest validation PR AUC. Sees validation scores
/// only.
pub fn select_epoch(validation_pr_auc: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in validation_pr_auc.iter().enumerate() {
        if v > validation_pr_auc[best] {
            best = i;
        }
    }
    best
}

/// Result of fine-tuning and testing on one split.
#[derive(Debug, Clone, Serialize)]
pub struct SplitOutcome {
    pub split: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Validation PR AUC after each epoch; entry 0 is the starting model.
    pub validation_pr_auc: Vec<f64>,
    pub selected_epoch: usize,
    pub test_roc_auc: f64,
    pub test_pr_auc: f64,
    /// At 0.5 on raw probabilities.
    pub confusion: Confusion,
    /// At 0.5 after isotonic calibration fit on validation.
    pub calibrated_confusion: Confusion,
    pub calibrator: Calibrator,
}

/// Fine-tuning results for one prediction window.
#[derive(Debug, Clone, Serialize)]
pub struct WindowOutcome {
    pub window: String,
    pub n_patients: usize,
    pub positives: usize,
    pub splits: Vec<SplitOutcome>,
    pub roc_auc: Summary,
    pub pr_auc: Summary,
    /// Selected model of split 0.
    #[serde(skip)]
    pub model: Option<Model>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub windows: Vec<WindowOutcome>,
    pub log: MetricLog,
}

/// Validation and test evaluation of a trained model on one split; also used
/// to score a saved model without training.
#[derive(Debug, Clone)]
pub struct SplitScores {
    pub validation_pr_auc: f64,
    pub test_roc_auc: f64,
    pub test_pr_auc: f64,
    pub confusion: Confusion,
    pub calibrated_confusion: Confusion,
    pub calibrator: Calibrator,
}

fn subset(seqs: &[TokenSequence], idx: &[usize]) -> Vec<TokenSequence> {
    idx.iter().map(|&i| seqs[i].clone()).collect()
}

fn check_classes(split: usize, part: &str, labels: &[u8], need_negative: bool) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || (need_negative && pos == labels.len()) {
        return Err(Error::Split {
            split,
            message: format!("{part} labels are single-class; try another seed or a larger cohort"),
        });
    }
    Ok(())
}

/// Scores `model` on a split's validation and test parts, calibrating on
/// validation.
pub fn score_split(model: &Model, seqs: &[TokenSequence], split: usize, parts: &Split) -> Result<SplitScores> {
    let val = subset(seqs, &parts.validation);
    let test = subset(seqs, &parts.test);
    let (val_y, test_y) = (labels_of(&val), labels_of(&test));
    check_classes(split, "validation", &val_y, false)?;
    check_classes(split, "test", &test_y, true)?;
    let val_sl = ScoredLabels::new(predict(model, &val)?, val_y)?;
    let test_sl = ScoredLabels::new(predict(model, &test)?, test_y.clone())?;
    let calibrator = metrics::isotonic_fit(&val_sl)?;
    let calibrated = ScoredLabels::new(calibrator.apply(&test_sl.scores), test_y)?;
    Ok(SplitScores {
        validation_pr_auc: metrics::pr_auc(&val_sl)?,
        test_roc_auc: metrics::roc_auc(&test_sl)?,
        test_pr_auc: metrics::pr_auc(&test_sl)?,
        confusion: metrics::confusion(&test_sl, 0.5),
        calibrated_confusion: metrics::confusion(&calibrated, 0.5),
        calibrator,
    })
}

fn validation_pr_auc(model: &Model, val: &[TokenSequence]) -> Result<f64> {
    metrics::pr_auc(&ScoredLabels::new(predict(model, val)?, labels_of(val))?)
}

fn starting_model(init: &FinetuneInit, vocab: &Vocabulary, head_seed: u64, cfg: &TrainConfig) -> Result<Model> {
    let mut model = match init {
        FinetuneInit::Pretrained(ck) => {
            ck.check_vocab(vocab)?;
            ck.clone().into_finetune_model(head_seed)
        }
        FinetuneInit::Scratch(config) => {
            if config.vocab_size != vocab.len() {
                return Err(Error::Incompatible(format!(
                    "model vocabulary size {} differs from vocabulary of {}",
                    config.vocab_size,
                    vocab.len()
                )));
            }
            let mut m = Model::init(config.clone(), cfg.seed, false)?;
            m.weights.classifier = Some(model::init_classifier(config.hidden_size, head_seed));
            m
        }
    };
    if let Some(rate) = cfg.dropout {
        model.config.dropout = rate;
        model.config.validate()?;
    }
    Ok(model)
}

/// Fine-tunes on one split; returns the outcome and the selected model.
fn run_split(
    init: &FinetuneInit,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    split: usize,
    stage: &str,
    cfg: &TrainConfig,
    log: &mut MetricLog,
) -> Result<(SplitOutcome, Model)> {
    let parts = make_split(seqs.len(), split, cfg);
    let train = subset(seqs, &parts.train);
    let val = subset(seqs, &parts.validation);
    check_classes(split, "training", &labels_of(&train), true)?;
    check_classes(split, "validation", &labels_of(&val), false)?;

    let run_seed = rng::child_seed(cfg.seed, split as u64);
    let mut model = starting_model(init, vocab, run_seed, cfg)?;
    let mut state = AdamState::new(&model.weights);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let row = |epoch, step, lr, loss, name: &str, value| LogRow {
        stage: stage.to_string(),
        split: Some(split),
        epoch,
        step,
        lr,
        loss,
        metric_name: name.into(),
        value,
    };

    let initial = validation_pr_auc(&model, &val)?;
    log.push(row(0, 0, None, None, "val_pr_auc", initial));
    let mut curve = vec![initial];
    let mut best_model = model.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(run_seed, Purpose::Shuffle, epoch as u64));
        let shuffled = subset(&train, &order);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for batch in batchify(&shuffled, cfg.batch_size)? {
            let lr = lr_at(step, total, cfg)?;
            let loss = train_step(&mut model, &mut state, &batch, lr, (run_seed, step as u64), true, cfg)?;
            log.push(row(epoch, step, Some(lr), Some(loss), "train_loss", loss));
            losses.push(loss);
            step += 1;
        }
        let v = validation_pr_auc(&model, &val)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(row(epoch, step, None, Some(mean), "val_pr_auc", v));
        curve.push(v);
        // Selection over trained epochs only; epoch 0 stands when none ran.
        if select_epoch(&curve[1..]) + 1 == epoch {
            best_model = model.clone();
        }
    }
    let selected = if cfg.epochs == 0 { 0 } else { select_epoch(&curve[1..]) + 1 };
    let scores = score_split(&best_model, seqs, split, &parts)?;
    log.push(row(selected, step, None, None, "selected_epoch", selected as f64));
    log.push(row(selected, step, None, None, "test_roc_auc", scores.test_roc_auc));
    log.push(row(selected, step, None, None, "test_pr_auc", scores.test_pr_auc));
    Ok((
        SplitOutcome {
            split,
            n_train: parts.train.len(),
            n_validation: parts.validation.len(),
            n_test: parts.test.len(),
            validation_pr_auc: curve,
            selected_epoch: selected,
            test_roc_auc: scores.test_roc_auc,
            test_pr_auc: scores.test_pr_auc,
            confusion: scores.confusion,
            calibrated_confusion: scores.calibrated_confusion,
            calibrator: scores.calibrator,
        },
        best_model,
    ))
}

/// Patients usable under every window in `specs`.
pub fn finetune_cohort(records: &[PatientRecord], specs: &[WindowSpec], sentinels: &SentinelCodes) -> Vec<PatientRecord> {
    eligibility_filter(records, specs, sentinels)
}

/// Fine-tunes and tests over `n_splits` seeded splits for each window. The
/// cohort is restricted to patients eligible under all given windows, so the
/// windows are compared on the same people and the same splits.
pub fn finetune(
    init: &FinetuneInit,
    records: &[PatientRecord],
    vocab: &Vocabulary,
    specs: &[WindowSpec],
    sentinels: &SentinelCodes,
    cfg: &TrainConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("no prediction window given".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let max_len = match init {
        FinetuneInit::Pretrained(ck) => ck.config.max_len,
        FinetuneInit::Scratch(c) => c.max_len,
    };
    let cohort = finetune_cohort(records, specs, sentinels);
    if cohort.len() < 10 {
        return Err(Error::Config(format!("only {} eligible patients", cohort.len())));
    }
    let mut log = MetricLog::default();
    let mut windows = Vec::with_capacity(specs.len());
    for spec in specs {
        let seqs = window_sequences(&cohort, vocab, spec, sentinels, max_len)?;
        let stage = format!("finetune-{}", spec.label());
        let mut splits = Vec::with_capacity(cfg.n_splits);
        let mut kept = None;
        for split in 0..cfg.n_splits {
            let (outcome, model) = run_split(init, vocab, &seqs, split, &stage, cfg, &mut log)?;
            if split == 0 {
                kept = Some(model);
            }
            splits.push(outcome);
        }
        let roc: Vec<f64> = splits.iter().map(|s| s.test_roc_auc).collect();
        let pr: Vec<f64> = splits.iter().map(|s| s.test_pr_auc).collect();
        windows.push(WindowOutcome {
            window: spec.label(),
            n_patients: seqs.len(),
            positives: labels_of(&seqs).iter().filter(|&&y| y == 1).count(),
            splits,
            roc_auc: Summary::of(&roc),
            pr_auc: Summary::of(&pr),
            model: kept,
        });
    }
    Ok(FinetuneResult { windows, log })
}

#[cfg(test)]
mod tests;
