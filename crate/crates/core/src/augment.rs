//! Data augmentation operators for serialized pairs and MixDA interpolation.
//!
//! | operator       | effect                                              |
//! |----------------|-----------------------------------------------------|
//! | `span_del`     | delete a span of ≤ 4 non-special tokens             |
//! | `span_shuffle` | shuffle a span of ≤ 4 non-special tokens            |
//! | `attr_del`     | delete one attribute (name and value)               |
//! | `attr_shuffle` | shuffle the attribute order of both entries         |
//! | `entry_swap`   | swap the two entries                                |
//!
//! Operators never touch special tokens, so their outputs are valid pairs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entry::{AttrSpan, PairLayout, StructureError, Token, TokenSeq, CLS, SEP};

/// Longest span touched by the span-level operators.
pub const MAX_SPAN_LEN: usize = 4;

/// Default Beta concentration for MixDA.
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Deterministic generator used for every random choice in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("unknown augmentation operator {0:?}")]
    UnknownOperator(String),
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("representation dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a serialized pair: {0}")]
    Structure(#[from] StructureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaOperator {
    SpanDel,
    SpanShuffle,
    AttrDel,
    AttrShuffle,
    EntrySwap,
}

impl DaOperator {
    pub const ALL: [DaOperator; 5] = [
        DaOperator::SpanDel,
        DaOperator::SpanShuffle,
        DaOperator::AttrDel,
        DaOperator::AttrShuffle,
        DaOperator::EntrySwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DaOperator::SpanDel => "span_del",
            DaOperator::SpanShuffle => "span_shuffle",
            DaOperator::AttrDel => "attr_del",
            DaOperator::AttrShuffle => "attr_shuffle",
            DaOperator::EntrySwap => "entry_swap",
        }
    }
}

impl fmt::Display for DaOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DaOperator {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DaOperator::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| AugmentError::UnknownOperator(s.to_string()))
    }
}

/// Samples a span of consecutive non-special tokens: start uniform over
/// eligible positions, length uniform in `[1, min(4, run)]`.
fn sample_span<R: Rng + ?Sized>(toks: &[Token], rng: &mut R) -> Option<(usize, usize)> {
    let eligible: Vec<usize> = (0..toks.len()).filter(|&i| !toks[i].special).collect();
    if eligible.is_empty() {
        return None;
    }
    let start = eligible[rng.random_range(0..eligible.len())];
    let run = toks[start..].iter().take_while(|t| !t.special).count();
    let len = rng.random_range(1..=run.min(MAX_SPAN_LEN));
    Some((start, start + len))
}

pub fn span_del<R: Rng + ?Sized>(s: &TokenSeq, rng: &mut R) -> TokenSeq {
    let mut toks = s.tokens().to_vec();
    if let Some((a, b)) = sample_span(&toks, rng) {
        toks.drain(a..b);
    }
    TokenSeq::from_tokens(toks)
}

pub fn span_shuffle<R: Rng + ?Sized>(s: &TokenSeq, rng: &mut R) -> TokenSeq {
    let mut toks = s.tokens().to_vec();
    if let Some((a, b)) = sample_span(&toks, rng) {
        toks[a..b].shuffle(rng);
    }
    TokenSeq::from_tokens(toks)
}

fn rebuild(toks: &[Token], left: &[AttrSpan], right: &[AttrSpan]) -> TokenSeq {
    let mut out = Vec::with_capacity(toks.len());
    out.push(Token::new(CLS));
    for side in [left, right] {
        for a in side {
            out.extend_from_slice(&toks[a.col..a.end]);
        }
        out.push(Token::new(SEP));
    }
    TokenSeq::from_tokens(out)
}

pub fn attr_del<R: Rng + ?Sized>(s: &TokenSeq, rng: &mut R) -> Result<TokenSeq, AugmentError> {
    let layout = PairLayout::parse(s)?;
    let n = layout.attr_count();
    if n == 0 {
        return Ok(s.clone());
    }
    let pick = rng.random_range(0..n);
    let mut left = layout.left;
    let mut right = layout.right;
    if pick < left.len() {
        left.remove(pick);
    } else {
        right.remove(pick - left.len());
    }
    Ok(rebuild(s.tokens(), &left, &right))
}

pub fn attr_shuffle<R: Rng + ?Sized>(s: &TokenSeq, rng: &mut R) -> Result<TokenSeq, AugmentError> {
    let mut layout = PairLayout::parse(s)?;
    layout.left.shuffle(rng);
    layout.right.shuffle(rng);
    Ok(rebuild(s.tokens(), &layout.left, &layout.right))
}

pub fn entry_swap(s: &TokenSeq) -> Result<TokenSeq, AugmentError> {
    let layout = PairLayout::parse(s)?;
    Ok(rebuild(s.tokens(), &layout.right, &layout.left))
}

/// Applies `op` to a serialized pair. Inapplicable operators (no attribute
/// to delete, no eligible span) return the input unchanged.
pub fn augment<R: Rng + ?Sized>(s: &TokenSeq, op: DaOperator, rng: &mut R) -> Result<TokenSeq, AugmentError> {
    PairLayout::parse(s)?;
    match op {
        DaOperator::SpanDel => Ok(span_del(s, rng)),
        DaOperator::SpanShuffle => Ok(span_shuffle(s, rng)),
        DaOperator::AttrDel => attr_del(s, rng),
        DaOperator::AttrShuffle => attr_shuffle(s, rng),
        DaOperator::EntrySwap => entry_swap(s),
    }
}

/// Draws the interpolation weight `λ ~ Beta(α, α)`.
pub fn mixda_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64, AugmentError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AugmentError::Alpha(alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| AugmentError::Alpha(alpha))?;
    Ok(beta.sample(rng))
}

/// `λ · orig + (1 − λ) · aug`, elementwise.
pub fn mixda_combine(rep_orig: &[f64], rep_aug: &[f64], lambda: f64) -> Result<Vec<f64>, AugmentError> {
    if rep_orig.len() != rep_aug.len() {
        return Err(AugmentError::DimensionMismatch(rep_orig.len(), rep_aug.len()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::Lambda(lambda));
    }
    Ok(rep_orig
        .iter()
        .zip(rep_aug)
        .map(|(o, a)| lambda * o + (1.0 - lambda) * a)
        .collect())
}

/// Augmentation settings used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixDaConfig {
    pub op: DaOperator,
    pub alpha: f64,
    /// Also swap the entries of the augmented example with probability 1/2.
    pub entry_swap_coin: bool,
    /// Overrides the Beta draw; used to check that λ = 1 reduces to plain training.
    pub fixed_lambda: Option<f64>,
}

impl MixDaConfig {
    pub fn new(op: DaOperator) -> Self {
        MixDaConfig {
            op,
            alpha: DEFAULT_ALPHA,
            entry_swap_coin: false,
            fixed_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AugmentError::Alpha(self.alpha));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(AugmentError::Lambda(l));
            }
        }
        Ok(())
    }

    /// Produces the augmented counterpart of one training example. For
    /// `entry_swap` itself the swap happens with probability 1/2.
    pub fn augment_example<R: Rng + ?Sized>(&self, s: &TokenSeq, rng: &mut R) -> Result<TokenSeq, AugmentError> {
        let out = if self.op == DaOperator::EntrySwap {
            if rng.random_bool(0.5) {
                entry_swap(s)?
            } else {
                s.clone()
            }
        } else {
            augment(s, self.op, rng)?
        };
        if self.entry_swap_coin && self.op != DaOperator::EntrySwap && rng.random_bool(0.5) {
            entry_swap(&out)
        } else {
            Ok(out)
        }
    }

    pub fn sample_lambda<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, AugmentError> {
        match self.fixed_lambda {
            Some(l) => Ok(l),
            None => mixda_lambda(self.alpha, rng),
        }
    }
}
