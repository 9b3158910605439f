//! A small from-scratch Transformer encoder and its training loop.

mod model;
mod train;
mod vocab;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{EncoderModel, Forward, ForwardCache, LayerParams, ParamLayout};
pub use train::{lr_at, train, Checkpoint, EpochStats, Example, TrainConfig, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use vocab::{Vocab, CLS_ID, SEP_ID, UNK, UNK_ID};

use crate::augment::{seeded_rng, AugmentError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("parameters contain NaN or infinity")]
    NonFiniteParameters,
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("loss became {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },
    #[error("epsilon {0} outside [1e-6, 1e-3]")]
    Epsilon(f64),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Overwritten by the vocabulary size when a model is built.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Normalize before each sub-layer instead of after the residual sum;
    /// the embedding norm then moves to the output.
    pub pre_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 128,
            max_seq_len: 256,
            dropout: 0.1,
            init_range: 0.05,
            pre_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return err("embed_dim, num_heads and ffn_dim must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 8 {
            return err(format!("max_seq_len {} is below 8", self.max_seq_len));
        }
        if self.vocab_size == 0 {
            return err("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return err(format!("init_range {} must be positive", self.init_range));
        }
        Ok(())
    }
}

/// Parameter indices that can influence the loss of `ids`: everything except
/// embedding rows of absent tokens, positions and segments.
pub fn active_params(model: &EncoderModel, ids: &[u32]) -> Vec<usize> {
    let d = model.config().embed_dim;
    let lay = model.layout();
    let mut used_tok = vec![false; model.config().vocab_size];
    for &id in ids {
        used_tok[id as usize] = true;
    }
    let n_seg = if ids.iter().take(ids.len().saturating_sub(1)).any(|&i| i == SEP_ID) { 2 } else { 1 };
    (0..lay.total)
        .filter(|&i| {
            if lay.tok.contains(&i) {
                used_tok[(i - lay.tok.start) / d]
            } else if lay.pos.contains(&i) {
                (i - lay.pos.start) / d < ids.len()
            } else if lay.seg.contains(&i) {
                (i - lay.seg.start) / d < n_seg
            } else {
                true
            }
        })
        .collect()
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor of [`relative_error`]: gradients smaller than this are
/// effectively compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of the cross-entropy of `(ids, label)` with
/// central finite differences on `n_samples` parameters drawn (seeded) from
/// [`active_params`]. Dropout is off.
pub fn gradient_check(
    model: &EncoderModel,
    ids: &[u32],
    label: usize,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheck, EncoderError> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(EncoderError::Epsilon(epsilon));
    }
    let (_, grads) = model.loss_and_grad(ids, label)?;
    let active = active_params(model, ids);
    let mut rng = seeded_rng(seed);
    let picks: Vec<usize> = if n_samples >= active.len() {
        active
    } else {
        let mut p: Vec<usize> = sample(&mut rng, active.len(), n_samples).into_iter().map(|i| active[i]).collect();
        p.sort_unstable();
        p
    };
    let mut probe = model.clone();
    let mut worst = (0.0, 0usize);
    for &i in &picks {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let up = probe.loss(ids, label)?;
        probe.params_mut()[i] = orig - epsilon;
        let down = probe.loss(ids, label)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = relative_error(grads[i], numeric);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: picks.len(),
    })
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entry::tokenize;

    #[test]
    fn config_validation() {
        let ok = EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        };
        assert!(ok.validate().is_ok());
        let bad_heads = EncoderConfig { num_heads: 3, ..ok.clone() };
        assert!(bad_heads.validate().is_err());
        let short = EncoderConfig { max_seq_len: 7, ..ok.clone() };
        assert!(short.validate().is_err());
        let drop = EncoderConfig { dropout: 1.0, ..ok };
        assert!(drop.validate().is_err());
    }

    #[test]
    fn gradient_check_small_model() {
        let seq = tokenize("[CLS] [COL] title [VAL] sony tv 42 [SEP] [COL] title [VAL] sony 42in tv [SEP]");
        let cfg = EncoderConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        let m = EncoderModel::new(cfg, Vocab::build([&seq]), 3).unwrap();
        let ids = m.encode_tokens(&seq);
        let r = gradient_check(&m, &ids, 1, 1e-5, 150, 9).unwrap();
        assert_eq!(r.checked, 150);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradient_check_pre_norm() {
        let seq = tokenize("[CLS] [COL] title [VAL] sony tv 42 [SEP] [COL] title [VAL] sony 42in tv [SEP]");
        let cfg = EncoderConfig {
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            dropout: 0.0,
            init_range: 0.3,
            pre_norm: true,
            ..EncoderConfig::default()
        };
        let m = EncoderModel::new(cfg, Vocab::build([&seq]), 5).unwrap();
        let ids = m.encode_tokens(&seq);
        let r = gradient_check(&m, &ids, 0, 1e-5, 200, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let seq = tokenize("[CLS] a [SEP]");
        let cfg = EncoderConfig {
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 4,
            max_seq_len: 8,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        let m = EncoderModel::new(cfg, Vocab::build([&seq]), 0).unwrap();
        let ids = m.encode_tokens(&seq);
        assert!(matches!(gradient_check(&m, &ids, 0, 1e-2, 10, 0), Err(EncoderError::Epsilon(_))));
    }

    #[test]
    fn cosine_of_self_is_one() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&v, &[0.0; 3]), 0.0);
    }
}
