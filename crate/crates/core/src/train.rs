//! Optimization protocol: composite objectives, Adam, early stopping, and the
//! pretrain-text / pretrain-timeseries / freeze-and-fuse pipeline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EpisodeRecord;
use crate::eval::{auc, EvalError};
use crate::interp::{init_interp_params, reconstruction_loss_on_tape};
use crate::models::{
    bce_loss, forward_prob, init_pred_params, init_text_params, Modality, ModelSpec,
};
use crate::params::Binding;
use crate::{NumericError, Op, ParameterStore, Real, Tape, Tensor};

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training split is empty or contains a single class")]
    DegenerateTrainSplit,
    #[error("validation split is empty")]
    EmptyValidationSplit,
}

/// One training case: the episode record plus its pre-extracted text features
/// (absent for the ts-only modality).
#[derive(Debug, Clone)]
pub struct Example {
    pub record: EpisodeRecord,
    pub text: Option<Tensor>,
}

impl Example {
    pub fn label(&self) -> Real {
        self.record.label as Real
    }
}

fn default_lr() -> Real {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: Real,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub delta_r: Real,
    #[serde(default)]
    pub delta_f: Real,
    #[serde(default)]
    pub delta_g: Real,
    #[serde(default)]
    pub seed: u64,
    /// Re-initialize all stage-3 parameters instead of reusing the pretrained
    /// GRU with a fresh head.
    #[serde(default)]
    pub reinit_stage3: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            delta_r: 0.0,
            delta_f: 0.0,
            delta_g: 0.0,
            seed: 0,
            reinit_stage3: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if self.delta_r < 0.0 || self.delta_f < 0.0 || self.delta_g < 0.0 {
            return Err(NumericError::Invalid("delta hyperparameters must be >= 0".into()));
        }
        if self.patience < 1 {
            return Err(NumericError::Invalid("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NumericError::Invalid("batch size and max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter Adam moment estimates.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently accumulated in the store;
/// frozen entries are skipped and the step counter advances once per call.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    lr: Real,
) -> Result<(), NumericError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        if store.is_frozen(&name) {
            continue;
        }
        let g = store.grad(&name)?.clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        *m = m.zip_map(&g, |mi, gi| ADAM_BETA1 * mi + (1.0 - ADAM_BETA1) * gi)?;
        let m = m.clone();
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        *v = v.zip_map(&g, |vi, gi| ADAM_BETA2 * vi + (1.0 - ADAM_BETA2) * gi * gi)?;
        let v = v.clone();
        let mut value = store.value(&name)?.clone();
        for i in 0..value.len() {
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        store.set_value(&name, value)?;
    }
    Ok(())
}

/// Which terms of the composite objective apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Stage-1 supervised text pretraining: prediction loss only.
    TextPretrain,
    /// Full objective: prediction loss, reconstruction term and L2 penalties.
    Full,
}

/// L2 penalty `delta * ||params with prefix||^2` built on the tape so its
/// gradient flows; frozen entries contribute nothing trainable.
fn l2_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    store: &ParameterStore,
    prefix: &str,
    delta: Real,
) -> Result<Option<crate::NodeId>, NumericError> {
    if delta == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<crate::NodeId> = None;
    for name in store.names() {
        if !name.starts_with(prefix) || store.is_frozen(name) {
            continue;
        }
        let id = binding.id(name)?;
        let sq = tape.apply(Op::Square, &[id])?;
        let s = tape.apply(Op::Sum, &[sq])?;
        acc = Some(match acc {
            Some(a) => tape.apply(Op::Add, &[a, s])?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(Some(tape.apply(Op::Scale(delta), &[a])?)),
        None => Ok(None),
    }
}

/// Mean-reduced composite objective over a batch:
/// `mean BCE + delta_r * mean l_I + delta_f ||theta||^2 + delta_g ||omega||^2`.
pub fn composite_loss_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    store: &ParameterStore,
    spec: &ModelSpec,
    batch: &[Example],
    config: &TrainConfig,
    mode: LossMode,
) -> Result<crate::NodeId, NumericError> {
    if batch.is_empty() {
        return Err(NumericError::Invalid("empty batch".into()));
    }
    let mut pred_sum: Option<crate::NodeId> = None;
    for ex in batch {
        let p = forward_prob(tape, binding, spec, &ex.record, ex.text.as_ref())?;
        let l = bce_loss(tape, p, ex.label())?;
        pred_sum = Some(match pred_sum {
            Some(a) => tape.apply(Op::Add, &[a, l])?,
            None => l,
        });
    }
    let mut total = tape.apply(Op::Scale(1.0 / batch.len() as Real), &[pred_sum.unwrap()])?;
    if mode == LossMode::Full {
        if config.delta_r > 0.0 && spec.modality.uses_timeseries() {
            let interp = spec.interp.as_ref().unwrap();
            let mut recon_sum: Option<crate::NodeId> = None;
            for ex in batch {
                if ex.record.observation_count() == 0 {
                    continue;
                }
                let r = reconstruction_loss_on_tape(tape, binding, interp, &ex.record)?;
                recon_sum = Some(match recon_sum {
                    Some(a) => tape.apply(Op::Add, &[a, r])?,
                    None => r,
                });
            }
            if let Some(r) = recon_sum {
                let mean = tape.apply(Op::Scale(config.delta_r / batch.len() as Real), &[r])?;
                total = tape.apply(Op::Add, &[total, mean])?;
            }
        }
        if let Some(p) = l2_on_tape(tape, binding, store, "interp.", config.delta_f)? {
            total = tape.apply(Op::Add, &[total, p])?;
        }
        if let Some(p) = l2_on_tape(tape, binding, store, "pred.", config.delta_g)? {
            total = tape.apply(Op::Add, &[total, p])?;
        }
    }
    Ok(total)
}

/// Forward-only probabilities for a set of examples.
pub fn predict_scores(
    spec: &ModelSpec,
    store: &ParameterStore,
    examples: &[Example],
) -> Result<Vec<Real>, NumericError> {
    examples
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let p = forward_prob(&mut tape, &binding, spec, &ex.record, ex.text.as_ref())?;
            Ok(tape.value(p).item())
        })
        .collect()
}

/// Test AUC of a model over labeled examples.
pub fn evaluate_auc(
    spec: &ModelSpec,
    store: &ParameterStore,
    examples: &[Example],
) -> Result<Real, TrainError> {
    let scores = predict_scores(spec, store, examples)?;
    let labels: Vec<u8> = examples.iter().map(|ex| ex.record.label).collect();
    Ok(auc(&scores, &labels)?)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Real,
    pub val_auc: Real,
}

/// Parameters at the best validation epoch plus the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub store: ParameterStore,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: Real,
}

impl TrainedModel {
    /// Training history as `epoch,train_loss,val_auc` CSV.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc\n");
        for row in &self.history {
            out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.val_auc));
        }
        out
    }
}

fn has_both_classes(examples: &[Example]) -> bool {
    let mut seen = [false, false];
    for ex in examples {
        seen[ex.record.label as usize] = true;
    }
    seen[0] && seen[1]
}

/// Mini-batch training loop with seeded shuffling and early stopping on
/// validation AUC; returns the snapshot from the best validation epoch.
pub fn fit(
    spec: &ModelSpec,
    mut store: ParameterStore,
    train: &[Example],
    validation: &[Example],
    config: &TrainConfig,
    mode: LossMode,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    spec.validate()?;
    if train.is_empty() || !has_both_classes(train) {
        return Err(TrainError::DegenerateTrainSplit);
    }
    if validation.is_empty() {
        return Err(TrainError::EmptyValidationSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut best_store = store.clone();
    let mut best_auc = Real::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since_improve = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            store.zero_grads();
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let loss =
                composite_loss_on_tape(&mut tape, &binding, &store, spec, &batch, config, mode)?;
            let grads = tape.backward(loss)?;
            store.accumulate_from(&tape, &binding, &grads)?;
            adam_step(&mut store, &mut adam, config.learning_rate)?;
            loss_sum += tape.value(loss).item() * batch.len() as Real;
        }
        let train_loss = loss_sum / train.len() as Real;
        let val_auc = evaluate_auc(spec, &store, validation)?;
        history.push(EpochStats { epoch, train_loss, val_auc });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_store = store.clone();
            best_epoch = epoch;
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= config.patience {
                break;
            }
        }
    }
    Ok(TrainedModel { store: best_store, history, best_epoch, best_val_auc: best_auc })
}

/// Outcome of the multi-stage pipeline: the final model, the spec it should be
/// evaluated with, and the best validation AUC per stage.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub model: TrainedModel,
    pub spec: ModelSpec,
    pub stage_val_auc: Vec<(String, Real)>,
}

fn stage_spec(base: &ModelSpec, modality: Modality) -> ModelSpec {
    let mut s = base.clone();
    s.modality = modality;
    if !modality.uses_text() {
        s.text = None;
    }
    if !modality.uses_timeseries() {
        s.interp = None;
        s.grid = None;
    }
    s
}

/// Three-stage protocol: supervised text pretraining, interpolation-prediction
/// pretraining, then fusion training with the text encoder frozen. Text-only
/// and ts-only specs reduce to their single pretraining stage.
pub fn pipeline(
    spec: &ModelSpec,
    train: &[Example],
    validation: &[Example],
    config: &TrainConfig,
) -> Result<PipelineResult, TrainError> {
    spec.validate()?;
    let mut stage_val_auc = Vec::new();

    // stage 1: text encoder pretrained with a throwaway prediction head
    let text_model = if spec.modality.uses_text() {
        let text_spec = stage_spec(spec, Modality::TextOnly);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7e87));
        init_text_params(text_spec.text.as_ref().unwrap(), &mut store, &mut rng);
        init_pred_params(&text_spec, &mut store, &mut rng);
        let trained = fit(&text_spec, store, train, validation, config, LossMode::TextPretrain)?;
        stage_val_auc.push(("text".to_string(), trained.best_val_auc));
        if spec.modality == Modality::TextOnly {
            return Ok(PipelineResult { model: trained, spec: text_spec, stage_val_auc });
        }
        Some(trained)
    } else {
        None
    };

    // stage 2: interpolation-prediction network in isolation
    let ts_spec = stage_spec(spec, Modality::TsOnly);
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x75));
    init_interp_params(ts_spec.interp.as_ref().unwrap(), ts_spec.grid.as_ref().unwrap(), &mut store);
    init_pred_params(&ts_spec, &mut store, &mut rng);
    let ts_model = fit(&ts_spec, store, train, validation, config, LossMode::Full)?;
    stage_val_auc.push(("ts".to_string(), ts_model.best_val_auc));
    if spec.modality == Modality::TsOnly {
        return Ok(PipelineResult { model: ts_model, spec: ts_spec, stage_val_auc });
    }

    // stage 3: fuse with frozen text encoder; the pretrained GRU is reused and
    // the head (whose input width changes) is freshly initialized
    let text_model = text_model.expect("fusion requires the text stage");
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xf3));
    if config.reinit_stage3 {
        init_interp_params(spec.interp.as_ref().unwrap(), spec.grid.as_ref().unwrap(), &mut store);
        init_pred_params(spec, &mut store, &mut rng);
    } else {
        for name in ts_model.store.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("interp.") || name.starts_with("pred.gru") {
                store.insert(name.clone(), ts_model.store.value(&name)?.clone());
            }
        }
        init_pred_params(spec, &mut store, &mut rng);
        // init_pred_params also wrote fresh GRU weights; restore the
        // pretrained ones
        for name in ts_model.store.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("pred.gru") {
                store.set_value(&name, ts_model.store.value(&name)?.clone())?;
            }
        }
    }
    for name in text_model.store.names().map(String::from).collect::<Vec<_>>() {
        if name.starts_with("text.") {
            store.insert(name.clone(), text_model.store.value(&name)?.clone());
        }
    }
    store.freeze_prefix("text.");
    let fused = fit(spec, store, train, validation, config, LossMode::Full)?;
    stage_val_auc.push(("fusion".to_string(), fused.best_val_auc));
    Ok(PipelineResult { model: fused, spec: spec.clone(), stage_val_auc })
}
