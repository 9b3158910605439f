//! Entity matching as sequence-pair classification.
//!
//! Records are serialized into `[CLS] … [SEP] … [SEP]` token sequences,
//! optionally enriched with domain-knowledge tags and TF-IDF summarized,
//! and classified by a small Transformer encoder trained with MixDA
//! augmentation. A blocking layer produces the candidate pairs.

pub mod augment;
pub mod blocking;
pub mod encoder;
pub mod entry;
pub mod knowledge;
pub mod pipeline;
pub mod summarizer;

pub use entry::{DataEntry, Label, LabeledPair, Token, TokenSeq};
