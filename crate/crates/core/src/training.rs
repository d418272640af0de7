//! Dual-encoder training.
//!
//! Fine-tuning minimizes the full-softmax retrieval loss over every item
//! in the target catalog (no negative sampling), backpropagating through
//! both towers. Optimization is LAMB — Adam moments with a per-tensor
//! trust ratio and decoupled weight decay — under a cosine learning-rate
//! schedule with linear warmup. Masked-token pretraining of the user
//! encoder uses a tied-embedding prediction head that is discarded
//! afterwards.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeError, EncoderConfig, ItemTower, UserEncoderParams};
use crate::matrix::{axpy, dot, Matrix};
use crate::tokenizer::{TokenSequence, MASK_ID, SPECIAL_TOKENS};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-6;
const MLM_MASK_PROB: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adam,
}

/// Training hyperparameters shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Update only the item tower; used to sanity-check the two towers
    /// separately.
    #[serde(default)]
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 128,
            lr: 5e-4,
            weight_decay: 5e-4,
            warmup_epochs: 1,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Lamb,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            return Err("lr must be positive".to_string());
        }
        if self.warmup_epochs >= self.epochs {
            return Err("warmup_epochs must be smaller than epochs".to_string());
        }
        Ok(())
    }
}

/// One fine-tuning example: a user's serialized MeKB and a positive
/// target-domain item. The sequence must have at least one masked-in
/// token (the non-empty-MeKB eligibility rule).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub user_id: String,
    pub seq: TokenSequence,
    pub positive: String,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("user {0:?} has an empty MeKB sequence and is not eligible for training")]
    Ineligible(String),
    #[error("positive item {0:?} is not registered in the item tower")]
    UnknownItem(String),
    #[error("non-finite loss at optimization step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Numerically stable full-softmax cross entropy of the positive index
/// against all scores: `-score[pos] + logsumexp(scores)`.
pub fn softmax_loss(scores: &[f64], positive: usize) -> f64 {
    debug_assert!(positive < scores.len());
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    max + z.ln() - scores[positive]
}

/// Mean full-softmax loss of a batch against every item in the tower.
pub fn batch_loss(
    batch: &[TrainingExample],
    params: &UserEncoderParams,
    tower: &ItemTower,
    cfg: &EncoderConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for ex in batch {
        let user = params.encode(cfg, &ex.seq)?;
        let pos = tower
            .index_of(&ex.positive)
            .ok_or_else(|| TrainError::UnknownItem(ex.positive.clone()))?;
        let scores: Vec<f64> = (0..tower.len()).map(|j| dot(&user, tower.embedding(j))).collect();
        total += softmax_loss(&scores, pos);
    }
    Ok(total / batch.len() as f64)
}

/// Loss plus exact analytic gradients for every parameter of both
/// towers. The tower gradient is dense: the full softmax touches every
/// item row.
pub fn batch_loss_and_grads(
    batch: &[TrainingExample],
    params: &UserEncoderParams,
    tower: &ItemTower,
    cfg: &EncoderConfig,
) -> Result<(f64, UserEncoderParams, Matrix), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut enc_grads = UserEncoderParams::zeros(cfg);
    let mut tower_grads = tower.grad_buffer();
    let inv_batch = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    for ex in batch {
        let (user, cache) = params.encode_cached(cfg, &ex.seq)?;
        let pos = tower
            .index_of(&ex.positive)
            .ok_or_else(|| TrainError::UnknownItem(ex.positive.clone()))?;
        let scores: Vec<f64> = (0..tower.len()).map(|j| dot(&user, tower.embedding(j))).collect();
        total += softmax_loss(&scores, pos);

        let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
        let mut d_user = vec![0.0; cfg.k_dim];
        for (j, &s) in scores.iter().enumerate() {
            let mut ds = (s - max).exp() / z;
            if j == pos {
                ds -= 1.0;
            }
            ds *= inv_batch;
            if ds != 0.0 {
                axpy(ds, tower.embedding(j), &mut d_user);
                axpy(ds, &user, tower_grads.row_mut(j));
            }
        }
        params.encode_backward(cfg, &cache, &d_user, &mut enc_grads);
    }
    Ok((total * inv_batch, enc_grads, tower_grads))
}

/// Cosine schedule with linear warmup: ramps 0 → `base_lr` over
/// `warmup_steps`, then decays to 0 along `0.5 * (1 + cos(pi * t))`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step beyond schedule");
    assert!(warmup_steps < total_steps, "warmup must be shorter than the schedule");
    if step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam first/second moments for one tensor.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentState {
    pub fn zeros(len: usize) -> Self {
        MomentState { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One LAMB update on a single tensor.
///
/// Adam moments (β1 = 0.9, β2 = 0.999, ε = 1e-6) with bias correction,
/// decoupled weight decay added into the update, then the whole update
/// scaled by the trust ratio `‖param‖ / ‖update‖` (taken as 1 when either
/// norm is zero). With `use_trust_ratio = false` this is exactly AdamW.
pub fn lamb_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut MomentState,
    step: u64,
    lr: f64,
    weight_decay: f64,
    use_trust_ratio: bool,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert!(step >= 1, "step count is 1-based");
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let mut update = vec![0.0; param.len()];
    for i in 0..param.len() {
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * grad[i];
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        update[i] = m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * param[i];
    }
    let scale = if use_trust_ratio {
        let p_norm = param.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u_norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p_norm == 0.0 || u_norm == 0.0 {
            1.0
        } else {
            p_norm / u_norm
        }
    } else {
        1.0
    };
    for (p, u) in param.iter_mut().zip(&update) {
        *p -= lr * scale * u;
    }
}

/// Optimizer over named tensors; moments are keyed by tensor name.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    state: BTreeMap<String, MomentState>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer { kind, weight_decay, state: BTreeMap::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every binding `(name, param, grad, decay)`.
    pub fn step(&mut self, lr: f64, bindings: Vec<(String, &mut [f64], &[f64], bool)>) {
        self.step_count += 1;
        let use_trust = matches!(self.kind, OptimizerKind::Lamb);
        for (name, param, grad, decay) in bindings {
            let state = self
                .state
                .entry(name)
                .or_insert_with(|| MomentState::zeros(param.len()));
            let wd = if decay { self.weight_decay } else { 0.0 };
            lamb_step(param, grad, state, self.step_count, lr, wd, use_trust);
        }
    }
}

fn encoder_bindings<'a>(
    params: &'a mut UserEncoderParams,
    grads: &'a UserEncoderParams,
) -> Vec<(String, &'a mut [f64], &'a [f64], bool)> {
    params
        .named_tensors_mut()
        .into_iter()
        .zip(grads.named_tensors())
        .map(|((name, p, decay), (gname, g, _))| {
            debug_assert_eq!(name, gname);
            (name, p, g, decay)
        })
        .collect()
}

/// Fine-tuning output: trained parameters and the per-epoch mean loss.
pub struct TrainOutcome {
    pub params: UserEncoderParams,
    pub tower: ItemTower,
    pub epoch_losses: Vec<f64>,
}

/// Runs the dual-encoder fine-tuning loop: seeded shuffling, full-softmax
/// loss, LAMB updates under the cosine schedule. Both towers train unless
/// `freeze_encoder` is set. A non-finite loss aborts with the step index.
pub fn train_dual_encoder(
    examples: &[TrainingExample],
    params: UserEncoderParams,
    tower: ItemTower,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().expect("invalid train config");
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for ex in examples {
        if ex.seq.is_all_padding() {
            return Err(TrainError::Ineligible(ex.user_id.clone()));
        }
        if tower.index_of(&ex.positive).is_none() {
            return Err(TrainError::UnknownItem(ex.positive.clone()));
        }
    }

    let mut params = params;
    let mut tower = tower;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_batches = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let warmup_steps = cfg.warmup_epochs * n_batches;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, enc_grads, tower_grads) =
                batch_loss_and_grads(&batch, &params, &tower, enc_cfg)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step: global_step });
            }
            let lr = lr_at(global_step, total_steps, warmup_steps, cfg.lr);
            let mut bindings = if cfg.freeze_encoder {
                Vec::new()
            } else {
                encoder_bindings(&mut params, &enc_grads)
            };
            bindings.push((
                "item_tower.embeddings".to_string(),
                tower.embeddings_mut().data_mut(),
                tower_grads.data(),
                true,
            ));
            optimizer.step(lr, bindings);
            if !params.all_finite() || !tower.embeddings().all_finite() {
                return Err(TrainError::NonFinite { step: global_step });
            }
            epoch_loss += loss;
            global_step += 1;
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }
    Ok(TrainOutcome { params, tower, epoch_losses })
}

/// Deterministic BERT-style corruption of one sequence: each masked-in
/// position is selected with probability 0.15; a selected position
/// becomes `[MASK]` (80%), a random non-special token (10%), or stays
/// unchanged (10%). Returns the corrupted ids and `(position, original)`
/// prediction targets.
pub fn mlm_corrupt(
    seq: &TokenSequence,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut ids = seq.ids.clone();
    let mut targets = Vec::new();
    let first_regular = SPECIAL_TOKENS.len() as u32;
    for (t, &m) in seq.attention_mask.iter().enumerate() {
        if m != 1 {
            continue;
        }
        if rng.gen::<f64>() >= MLM_MASK_PROB {
            continue;
        }
        targets.push((t, ids[t]));
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            ids[t] = MASK_ID;
        } else if roll < 0.9 && vocab_size > first_regular as usize {
            ids[t] = rng.gen_range(first_regular..vocab_size as u32);
        } // else: keep the original token
    }
    (ids, targets)
}

/// One corrupted sequence ready for masked-token prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatchItem {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// `(position, original token)` prediction targets.
    pub targets: Vec<(usize, u32)>,
}

/// Mean masked-token cross entropy of a corrupted batch, with exact
/// gradients for the encoder and the prediction-head bias. Logits tie to
/// the token embedding matrix, so `tok_emb` receives gradient from both
/// the head and the input path. Returns `None` when the batch has no
/// targets.
pub fn mlm_loss_and_grads(
    items: &[MlmBatchItem],
    params: &UserEncoderParams,
    head_bias: &[f64],
    cfg: &EncoderConfig,
) -> Option<(f64, UserEncoderParams, Vec<f64>)> {
    let vocab = cfg.vocab_size;
    debug_assert_eq!(head_bias.len(), vocab);
    let n_targets: usize = items.iter().map(|i| i.targets.len()).sum();
    if n_targets == 0 {
        return None;
    }
    let mut enc_grads = UserEncoderParams::zeros(cfg);
    let mut d_bias = vec![0.0; vocab];
    let mut loss_sum = 0.0;

    for item in items {
        if item.targets.is_empty() {
            continue;
        }
        let (states, cache) = params.forward_states(cfg, &item.ids, &item.mask);
        let mut d_states = Matrix::zeros(cfg.n_max, cfg.d_model);
        for &(t, original) in &item.targets {
            let h = states.row(t);
            let mut logits = vec![0.0; vocab];
            for (v, logit) in logits.iter_mut().enumerate() {
                *logit = dot(h, params.tok_emb.row(v)) + head_bias[v];
            }
            loss_sum += softmax_loss(&logits, original as usize);

            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = logits.iter().map(|&s| (s - max).exp()).sum();
            for (v, &logit) in logits.iter().enumerate() {
                let mut dl = (logit - max).exp() / z;
                if v == original as usize {
                    dl -= 1.0;
                }
                if dl != 0.0 {
                    d_bias[v] += dl;
                    // tied head: the embedding matrix receives gradient
                    // here and through the input path
                    axpy(dl, h, enc_grads.tok_emb.row_mut(v));
                    axpy(dl, params.tok_emb.row(v), d_states.row_mut(t));
                }
            }
        }
        params.backward_states(cfg, &cache, &d_states, &mut enc_grads);
    }

    let inv = 1.0 / n_targets as f64;
    for (_, g, _) in enc_grads.named_tensors_mut() {
        for v in g {
            *v *= inv;
        }
    }
    for v in &mut d_bias {
        *v *= inv;
    }
    Some((loss_sum * inv, enc_grads, d_bias))
}

/// Pretraining output: encoder parameters (prediction head discarded)
/// and the per-step mean masked-token loss.
pub struct PretrainOutcome {
    pub params: UserEncoderParams,
    pub step_losses: Vec<f64>,
}

/// Masked-token pretraining with a tied-embedding head: position logits
/// are `H[t] · tok_embᵀ + b`, trained with cross entropy on corrupted
/// positions. The output bias is dropped from the returned parameters.
pub fn pretrain_mlm(
    sequences: &[TokenSequence],
    params: UserEncoderParams,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate().expect("invalid train config");
    let eligible: Vec<&TokenSequence> = sequences.iter().filter(|s| !s.is_all_padding()).collect();
    if eligible.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    let mut params = params;
    let vocab = enc_cfg.vocab_size;
    let mut head_bias = vec![0.0; vocab];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_batches = eligible.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let warmup_steps = cfg.warmup_epochs * n_batches;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut indices: Vec<usize> = (0..eligible.len()).collect();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut global_step = 0usize;

    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<MlmBatchItem> = chunk
                .iter()
                .map(|&idx| {
                    let seq = eligible[idx];
                    let (ids, targets) = mlm_corrupt(seq, vocab, &mut rng);
                    MlmBatchItem { ids, mask: seq.attention_mask.clone(), targets }
                })
                .collect();
            let Some((loss, enc_grads, d_bias)) =
                mlm_loss_and_grads(&batch, &params, &head_bias, enc_cfg)
            else {
                // nothing was selected in this batch; no update
                global_step += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step: global_step });
            }
            let lr = lr_at(global_step, total_steps, warmup_steps, cfg.lr);
            let mut bindings = encoder_bindings(&mut params, &enc_grads);
            bindings.push(("mlm.bias".to_string(), &mut head_bias, &d_bias, true));
            optimizer.step(lr, bindings);
            if !params.all_finite() {
                return Err(TrainError::NonFinite { step: global_step });
            }
            step_losses.push(loss);
            global_step += 1;
        }
    }
    Ok(PretrainOutcome { params, step_losses })
}
