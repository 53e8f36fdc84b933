//! Training protocol: teacher-forced cross entropy, Adam, seeded epoch loop,
//! ROUGE-L early stopping with best-epoch restoration, and checkpointing.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "MSCK" (4 bytes), version u8 = 1
//! header length u32, then that many bytes of JSON
//!   {"config": ModelConfig, "vocab": [tokens], "adam": {...} | null}
//! per trainable tensor, in ModelParams::trainable order:
//!   rows u32, cols u32, rows*cols f64 values
//! if adam state is present: the same tensor blob layout for every first
//!   moment, then every second moment, in the same order
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::fusion::fuse_raw;
use crate::layers::{Dropout, Mode};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Mean over non-pad positions of `-ln probs[target]`, with the log clamped
/// at 1e-12. Pad positions contribute exactly zero to the value and the
/// gradient, so trailing padding never changes the loss.
pub fn cross_entropy_loss(
    tape: &Tape,
    probs_seq: &[Tensor],
    target_ids: &[usize],
    pad_id: usize,
) -> Result<Tensor> {
    if probs_seq.len() != target_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            lhs: (probs_seq.len(), 0),
            rhs: (target_ids.len(), 0),
        });
    }
    let mut acc: Option<Tensor> = None;
    let mut active = 0usize;
    for (probs, &target) in probs_seq.iter().zip(target_ids.iter()) {
        if target == pad_id {
            continue;
        }
        active += 1;
        let lp = tape.log_pick(probs, target)?;
        acc = Some(match acc {
            None => lp,
            Some(prev) => tape.add(&prev, &lp)?,
        });
    }
    match acc {
        None => Err(Error::AllPadTargets),
        Some(total) => Ok(tape.scale(&total, -1.0 / active as f64)),
    }
}

/// Adam with bias correction, holding handles to the parameters it updates.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

struct Slot {
    name: String,
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)], lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: params
                .iter()
                .map(|(name, p)| Slot {
                    name: name.clone(),
                    param: p.clone(),
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held by the parameters.
    /// Gradients are left untouched; the caller zeroes them.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let grads = slot.param.grad_vec();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}[{bad}]", slot.name),
                });
            }
            let mut values = slot.param.to_vec();
            for i in 0..values.len() {
                let g = grads[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            slot.param.set_values(&values)?;
        }
        Ok(())
    }
}

/// Epoch-loop settings. The published protocol uses batch size 64, learning
/// rate 1e-4 and patience 8; `max_epochs` has no published value and must be
/// set explicitly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            patience: 8,
            max_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".to_string()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "max_epochs must be set (the protocol has no default stop rule besides patience)"
                    .to_string(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".to_string()));
        }
        Ok(())
    }
}

/// One teacher-forcing sample: an image's raw concatenated features and one
/// encoded caption.
#[derive(Clone)]
pub struct TrainSample {
    pub image_id: String,
    /// Concatenated encoder features, already widened to f64.
    pub features: Vec<f64>,
    /// Encoded caption: start, tokens, end, padding.
    pub tokens: Vec<usize>,
}

fn sample_loss(
    params: &ModelParams,
    sample: &TrainSample,
    mode: Mode,
) -> Result<(Tape, Tensor)> {
    let tape = Tape::new();
    let fused = fuse_raw(&tape, &sample.features, &params.l1, mode, &sample.image_id)?;
    let inputs = &sample.tokens[..sample.tokens.len() - 1];
    let targets = &sample.tokens[1..];
    let probs = params.forward_sequence(&tape, &fused.projected, inputs, mode)?;
    let loss = cross_entropy_loss(&tape, &probs, targets, PAD_ID)?;
    Ok((tape, loss))
}

/// Teacher-forced loss of one sample without recording gradients.
pub fn eval_sample_loss(params: &ModelParams, sample: &TrainSample) -> Result<f64> {
    let (_tape, loss) = sample_loss(params, sample, Mode::Eval)?;
    Ok(loss.item())
}

/// One pass over the shuffled data. The batch gradient is the mean of the
/// per-sample gradients; returns the mean batch loss.
pub fn train_epoch(
    params: &ModelParams,
    adam: &mut AdamState,
    data: &[TrainSample],
    batch_size: usize,
    dropout: &Dropout,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("train_epoch data"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(shuffle_rng);

    let mut batch_losses = Vec::new();
    for (batch_index, batch) in order.chunks(batch_size).enumerate() {
        params.zero_grads();
        let mut batch_loss = 0.0;
        for &i in batch {
            let (tape, loss) = sample_loss(params, &data[i], Mode::Train(dropout))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss in batch {batch_index}"),
                });
            }
            batch_loss += value;
            tape.backward(&loss)?;
        }
        let scale = 1.0 / batch.len() as f64;
        for (_, p) in params.trainable() {
            p.scale_grad(scale);
        }
        adam.step()?;
        params.zero_grads();
        batch_losses.push(batch_loss * scale);
    }
    Ok(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_score: f64,
}

/// Early-stopping bookkeeping: strict improvement resets the counter.
pub struct EarlyStopState {
    pub best_score: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
}

impl EarlyStopState {
    pub fn new() -> EarlyStopState {
        EarlyStopState {
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
        }
    }

    /// Returns true when `score` strictly improves on the best so far.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            true
        } else {
            self.epochs_since_improve += 1;
            false
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        EarlyStopState::new()
    }
}

/// Full training loop. After every epoch `score_fn` grades the current
/// parameters on the validation data (the command-line driver plugs in
/// greedy decoding plus corpus ROUGE-L); training stops after `patience`
/// epochs without strict improvement or at `max_epochs`, and the parameters
/// from the best epoch are returned.
pub fn fit(
    params: &ModelParams,
    train: &[TrainSample],
    cfg: &TrainConfig,
    score_fn: &mut dyn FnMut(&ModelParams) -> Result<f64>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("fit train split"));
    }
    // distinct fixed offsets keep the dropout and shuffle streams independent
    let dropout = Dropout::new(params.cfg.dropout_rate, cfg.seed ^ 0x5eed_d40b)?;
    let mut shuffle_rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(cfg.seed ^ 0x0dd5_ea5e);
    let mut adam = AdamState::new(&params.trainable(), cfg.learning_rate);

    let mut stop = EarlyStopState::new();
    let mut best_params = params.deep_clone();
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(
            params,
            &mut adam,
            train,
            cfg.batch_size,
            &dropout,
            &mut shuffle_rng,
        )?;
        let val_score = score_fn(params)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_score,
        });
        if stop.observe(epoch, val_score) {
            best_params = params.deep_clone();
        }
        if stop.epochs_since_improve >= cfg.patience {
            break;
        }
    }
    let history = TrainHistory {
        epochs,
        best_epoch: stop.best_epoch,
        best_val_score: stop.best_score,
    };
    Ok((best_params, history))
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab: Vocabulary,
    adam: Option<AdamHeader>,
}

/// Everything restored from a checkpoint.
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub adam: Option<AdamState>,
}

fn push_tensor(bytes: &mut Vec<u8>, t: &Tensor) {
    let (rows, cols) = t.shape();
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in t.to_vec() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_moments(bytes: &mut Vec<u8>, values: &[f64]) {
    bytes.extend_from_slice(&(1u32).to_le_bytes());
    bytes.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    adam: Option<&AdamState>,
    vocab: &Vocabulary,
) -> Result<()> {
    let header = CheckpointHeader {
        config: params.cfg.clone(),
        vocab: vocab.clone(),
        adam: adam.map(|a| AdamHeader {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.push(CHECKPOINT_VERSION);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in params.trainable() {
        push_tensor(&mut bytes, &t);
    }
    if let Some(a) = adam {
        for slot in &a.slots {
            push_moments(&mut bytes, &slot.m);
        }
        for slot in &a.slots {
            push_moments(&mut bytes, &slot.v);
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                what: "truncated checkpoint",
                offset: self.offset,
                detail: format!("needed {n} bytes for {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn values(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn tensor_blob(&mut self, what: &'static str) -> Result<(usize, usize, Vec<f64>)> {
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let values = self.values(rows * cols, what)?;
        Ok((rows, cols, values))
    }
}

/// The checksum is verified over the whole file before anything is parsed,
/// so a corrupted checkpoint never produces a partial load.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 13 {
        return Err(Error::Format {
            what: "truncated checkpoint",
            offset: bytes.len(),
            detail: "smaller than the fixed prelude".to_string(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = BlobReader { bytes: body, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            what: "checkpoint magic mismatch",
            offset: 0,
            detail: format!("found {magic:?}"),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)?;

    let params = init_params(&header.config, 0)?;
    for (name, t) in params.trainable() {
        let (rows, cols, values) = r.tensor_blob("tensor blob")?;
        if (rows, cols) != t.shape() {
            return Err(Error::Format {
                what: "tensor shape mismatch",
                offset: r.offset,
                detail: format!(
                    "{name}: checkpoint has {rows}x{cols}, model expects {}x{}",
                    t.shape().0,
                    t.shape().1
                ),
            });
        }
        t.set_values(&values)?;
    }
    let adam = match header.adam {
        None => None,
        Some(h) => {
            let mut state = AdamState::new(&params.trainable(), h.lr);
            state.beta1 = h.beta1;
            state.beta2 = h.beta2;
            state.eps = h.eps;
            state.t = h.t;
            for slot in &mut state.slots {
                let (_, _, values) = r.tensor_blob("adam first moment")?;
                if values.len() != slot.m.len() {
                    return Err(Error::Format {
                        what: "adam moment size mismatch",
                        offset: r.offset,
                        detail: slot.name.clone(),
                    });
                }
                slot.m = values;
            }
            for slot in &mut state.slots {
                let (_, _, values) = r.tensor_blob("adam second moment")?;
                slot.v = values;
            }
            Some(state)
        }
    };
    if r.offset != body.len() {
        return Err(Error::Format {
            what: "trailing bytes in checkpoint",
            offset: r.offset,
            detail: format!("{} extra bytes", body.len() - r.offset),
        });
    }
    Ok(Checkpoint {
        params,
        vocab: header.vocab,
        adam,
    })
}
