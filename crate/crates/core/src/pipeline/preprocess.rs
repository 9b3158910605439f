//! Turns labeled pairs into encoder-ready token sequences.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::encoder::Example;
use crate::entry::{assemble_pair, is_special_token, serialize_entry, tokenize, DataEntry, LabeledPair, TokenSeq, COL, VAL};
use crate::knowledge::{DomainKnowledge, KnowledgeConfig};
use crate::summarizer::{summarize, StopwordList, TfidfModel};

/// `[CLS]` and the two `[SEP]`s.
pub const PAIR_OVERHEAD: usize = 3;

/// Everything needed to reproduce preprocessing at inference time; stored
/// next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub knowledge: Option<KnowledgeConfig>,
    pub tfidf: Option<TfidfModel>,
    pub stopwords: Option<Vec<String>>,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessor {
    knowledge: Option<DomainKnowledge>,
    summarizer: Option<(TfidfModel, StopwordList)>,
    max_len: usize,
}

/// Splits `max_len - 3` between two entries; a side shorter than its half
/// leaves the remainder to the other.
pub fn entry_budgets(left: usize, right: usize, max_len: usize) -> (usize, usize) {
    let avail = max_len.saturating_sub(PAIR_OVERHEAD);
    let half = avail / 2;
    if left <= half {
        (left, avail - left)
    } else if right <= avail - half {
        (avail - right, right)
    } else {
        (half, avail - half)
    }
}

/// Keeps the first `budget` tokens, then drops a trailing attribute whose
/// name or value was cut off.
pub fn truncate_entry(s: &str, budget: usize) -> String {
    let toks: Vec<&str> = s.split_whitespace().collect();
    if toks.len() <= budget {
        return toks.join(" ");
    }
    let mut kept = &toks[..budget];
    if let Some(col) = kept.iter().rposition(|t| *t == COL) {
        let complete = kept[col..]
            .iter()
            .position(|t| *t == VAL)
            .is_some_and(|v| col + v + 1 < kept.len());
        if !complete {
            kept = &kept[..col];
        }
    }
    kept.join(" ")
}

impl Preprocessor {
    pub fn new(knowledge: Option<DomainKnowledge>, summarizer: Option<(TfidfModel, StopwordList)>, max_len: usize) -> Self {
        Preprocessor {
            knowledge,
            summarizer,
            max_len,
        }
    }

    /// Builds the preprocessing for a run. The TF-IDF model is fitted on the
    /// serialized entries of the training pairs only.
    pub fn fit(
        knowledge: Option<&KnowledgeConfig>,
        stopwords: Option<StopwordList>,
        max_len: usize,
        train: &[LabeledPair],
    ) -> Result<(Self, PreprocessSpec), PipelineError> {
        let dk = knowledge
            .map(DomainKnowledge::from_config)
            .transpose()
            .map_err(|e| PipelineError::stage("knowledge", e))?;
        let mut pre = Preprocessor::new(dk, None, max_len);
        let mut spec = PreprocessSpec {
            knowledge: knowledge.cloned(),
            tfidf: None,
            stopwords: None,
            max_len,
        };
        if let Some(stop) = stopwords {
            let corpus: Vec<String> = train
                .iter()
                .flat_map(|p| [pre.serialize_entry(&p.left), pre.serialize_entry(&p.right)])
                .collect();
            let tfidf = TfidfModel::fit(&corpus).map_err(|e| PipelineError::stage("summarize", e))?;
            spec.tfidf = Some(tfidf.clone());
            spec.stopwords = Some(stop.words());
            pre.summarizer = Some((tfidf, stop));
        }
        Ok((pre, spec))
    }

    pub fn from_spec(spec: &PreprocessSpec) -> Result<Self, PipelineError> {
        let dk = spec
            .knowledge
            .as_ref()
            .map(DomainKnowledge::from_config)
            .transpose()
            .map_err(|e| PipelineError::stage("knowledge", e))?;
        let summarizer = match (&spec.tfidf, &spec.stopwords) {
            (Some(m), Some(w)) => Some((m.clone(), StopwordList::new(w))),
            (None, None) => None,
            _ => return Err(PipelineError::Data("summarizer spec needs both tfidf and stopwords".into())),
        };
        Ok(Preprocessor::new(dk, summarizer, spec.max_len))
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn serialize_entry(&self, e: &DataEntry) -> String {
        match &self.knowledge {
            Some(dk) => dk.serialize_entry(e),
            None => serialize_entry(e),
        }
    }

    fn fit_entry(&self, s: &str, budget: usize) -> String {
        if let Some((m, stop)) = &self.summarizer {
            let specials = s.split_whitespace().filter(|t| is_special_token(t)).count();
            if specials <= budget {
                return summarize(s, m, stop, budget);
            }
        }
        truncate_entry(s, budget)
    }

    /// Serialized pair of at most `max_len` tokens.
    pub fn pair_text(&self, left: &DataEntry, right: &DataEntry) -> String {
        let l = self.serialize_entry(left);
        let r = self.serialize_entry(right);
        let (nl, nr) = (l.split_whitespace().count(), r.split_whitespace().count());
        if nl + nr + PAIR_OVERHEAD <= self.max_len {
            return assemble_pair(&l, &r);
        }
        let (bl, br) = entry_budgets(nl, nr, self.max_len);
        assemble_pair(&self.fit_entry(&l, bl), &self.fit_entry(&r, br))
    }

    pub fn pair_tokens(&self, left: &DataEntry, right: &DataEntry) -> TokenSeq {
        tokenize(&self.pair_text(left, right))
    }

    pub fn example(&self, p: &LabeledPair) -> Example {
        Example {
            seq: self.pair_tokens(&p.left, &p.right),
            label: p.label,
        }
    }

    pub fn examples(&self, pairs: &[LabeledPair]) -> Vec<Example> {
        pairs.iter().map(|p| self.example(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        assert_eq!(entry_budgets(10, 100, 63), (10, 50));
        assert_eq!(entry_budgets(100, 10, 63), (50, 10));
        assert_eq!(entry_budgets(100, 100, 63), (30, 30));
        assert_eq!(entry_budgets(100, 100, 64), (30, 31));
    }

    #[test]
    fn truncation_drops_partial_attribute() {
        let s = "[COL] a [VAL] x y [COL] b [VAL] z";
        assert_eq!(truncate_entry(s, 5), "[COL] a [VAL] x y");
        assert_eq!(truncate_entry(s, 7), "[COL] a [VAL] x y");
        assert_eq!(truncate_entry(s, 4), "[COL] a [VAL] x");
        assert_eq!(truncate_entry(s, 3), "");
        assert_eq!(truncate_entry(s, 99), s);
    }

    #[test]
    fn long_pair_fits() {
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let e = DataEntry::from_pairs([("title", long.as_str()), ("brand", "acme")]);
        let p = Preprocessor::new(None, None, 32);
        assert!(p.pair_tokens(&e, &e).len() <= 32);
        let corpus = vec![serialize_entry(&e)];
        let m = TfidfModel::fit(&corpus).unwrap();
        let p = Preprocessor::new(None, Some((m, StopwordList::english())), 32);
        let seq = p.pair_tokens(&e, &e);
        assert!(seq.len() <= 32);
        assert_eq!(seq.count(COL), 4);
    }
}
