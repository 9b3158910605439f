//! SGD training with linear learning-rate decay and optional MixDA.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::EncoderModel;
use super::vocab::Vocab;
use super::{EncoderConfig, EncoderError};
use crate::augment::MixDaConfig;
use crate::entry::{Label, TokenSeq};
use crate::pipeline::EvalReport;

pub const CHECKPOINT_FORMAT: &str = "emkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const STREAM_ORDER: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// One labeled, already serialized training or validation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: TokenSeq,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` picks 32 with MixDA and 64 without.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub mixda: Option<MixDaConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            batch_size: None,
            epochs: 10,
            seed: 0,
            mixda: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.mixda.is_some() { 32 } else { 64 })
    }

    /// A learning rate of exactly zero is accepted so a run can be used as a no-op baseline.
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EncoderError::TrainConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.effective_batch_size() == 0 {
            return Err(EncoderError::TrainConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(EncoderError::TrainConfig("epochs must be at least 1".into()));
        }
        if let Some(m) = &self.mixda {
            m.validate()?;
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/total)`; updates use steps `0..total`.
pub fn lr_at(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
}

/// Best-validation snapshot plus the full per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub valid_f1: f64,
    /// Validation F1 of the untrained model.
    pub initial_valid_f1: f64,
    pub history: Vec<EpochStats>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<EncoderModel, EncoderError> {
        EncoderModel::from_parts(self.encoder.clone(), self.vocab.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String, EncoderError> {
        serde_json::to_string(self).map_err(|e| EncoderError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, EncoderError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(EncoderError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        crate::pipeline::write_atomic(path, self.to_json()?.as_bytes()).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let s = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn validation_f1(model: &EncoderModel, ids: &[Vec<u32>], gold: &[Label]) -> Result<f64, EncoderError> {
    let probs = model.predict_batch(ids)?;
    let pred: Vec<Label> = probs
        .iter()
        .map(|p| if p[1] > p[0] { Label::Match } else { Label::NoMatch })
        .collect();
    Ok(EvalReport::from_labels(gold, &pred).f1)
}

/// Trains for a fixed number of epochs and returns the epoch with the highest
/// validation F1 (earliest on ties).
///
/// With MixDA each example is paired with an augmented copy; the two `[CLS]`
/// vectors are mixed as `λ·orig + (1−λ)·aug` before the head and gradients
/// flow back through both passes with weights `λ` and `1−λ`.
pub fn train(
    mut model: EncoderModel,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
) -> Result<Checkpoint, EncoderError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(EncoderError::EmptyDataset("training"));
    }
    if valid_set.is_empty() {
        return Err(EncoderError::EmptyDataset("validation"));
    }
    let train_ids: Vec<Vec<u32>> = train_set.iter().map(|e| model.encode_tokens(&e.seq)).collect();
    let valid_ids: Vec<Vec<u32>> = valid_set.iter().map(|e| model.encode_tokens(&e.seq)).collect();
    let valid_gold: Vec<Label> = valid_set.iter().map(|e| e.label).collect();

    let mut order_rng = stream_rng(cfg.seed, STREAM_ORDER);
    let mut drop_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut aug_rng = stream_rng(cfg.seed, STREAM_AUGMENT);

    let bs = cfg.effective_batch_size();
    let steps_per_epoch = train_set.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.epochs;
    let d = model.config().embed_dim;

    let initial_valid_f1 = validation_f1(&model, &valid_ids, &valid_gold)?;
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = vec![0.0; model.num_params()];
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(bs) {
            grads.fill(0.0);
            for &i in batch {
                let label = train_set[i].label.index();
                let orig = model.forward_cached(&train_ids[i], Some(&mut drop_rng))?;
                let loss = match &cfg.mixda {
                    None => {
                        let (loss, dcls) = model.head_backward(orig.cls(d), label, &mut grads);
                        model.backward(&orig, &dcls, &mut grads);
                        loss
                    }
                    Some(mix) => {
                        let aug_seq = mix.augment_example(&train_set[i].seq, &mut aug_rng)?;
                        let lambda = mix.sample_lambda(&mut aug_rng)?;
                        let aug_ids = model.encode_tokens(&aug_seq);
                        let aug = model.forward_cached(&aug_ids, Some(&mut aug_rng))?;
                        let mixed = crate::augment::mixda_combine(orig.cls(d), aug.cls(d), lambda)?;
                        let (loss, dcls) = model.head_backward(&mixed, label, &mut grads);
                        let scaled: Vec<f64> = dcls.iter().map(|g| lambda * g).collect();
                        model.backward(&orig, &scaled, &mut grads);
                        if lambda != 1.0 {
                            let scaled: Vec<f64> = dcls.iter().map(|g| (1.0 - lambda) * g).collect();
                            model.backward(&aug, &scaled, &mut grads);
                        }
                        loss
                    }
                };
                if !loss.is_finite() {
                    return Err(EncoderError::NonFiniteLoss { loss, epoch, step });
                }
                loss_sum += loss;
            }
            let lr = lr_at(cfg.learning_rate, step, total_steps);
            if lr != 0.0 {
                let scale = lr / batch.len() as f64;
                for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                    *p -= scale * g;
                }
            }
            step += 1;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(EncoderError::NonFiniteParameters);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let valid_f1 = validation_f1(&model, &valid_ids, &valid_gold)?;
        log::info!("epoch {epoch}: loss {train_loss:.6} valid F1 {valid_f1:.4}");
        history.push(EpochStats {
            epoch,
            train_loss,
            valid_f1,
        });
        if best.as_ref().is_none_or(|b| valid_f1 > b.1) {
            best = Some((epoch, valid_f1, model.params().to_vec()));
        }
    }

    let (epoch, valid_f1, params) = best.expect("at least one epoch");
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        encoder: model.config().clone(),
        train: cfg.clone(),
        vocab: model.vocab().clone(),
        epoch,
        valid_f1,
        initial_valid_f1,
        history,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_schedule() {
        assert_eq!(lr_at(0.1, 0, 10), 0.1);
        assert!((lr_at(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(lr_at(0.1, 10, 10), 0.0);
        let v: Vec<f64> = (0..=10).map(|s| lr_at(1.0, s, 10)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn batch_size_defaults() {
        let mut c = TrainConfig::default();
        assert_eq!(c.effective_batch_size(), 64);
        c.mixda = Some(MixDaConfig::new(crate::augment::DaOperator::SpanDel));
        assert_eq!(c.effective_batch_size(), 32);
        c.batch_size = Some(5);
        assert_eq!(c.effective_batch_size(), 5);
    }

    #[test]
    fn rejects_bad_configs() {
        let c = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: Some(0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
