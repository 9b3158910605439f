//! TF-IDF summarization of serialized entries.
//!
//! Long values are cut down to the most informative tokens instead of being
//! truncated: special tokens always survive, stopwords are dropped, and the
//! remaining tokens compete on TF-IDF score for the leftover budget.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entry::is_special_token;

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("reading stopword file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Document frequencies over a fitted corpus.
///
/// `tfidf(t, d) = tf(t, d) · (ln((1 + N) / (1 + df(t))) + 1)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TfidfData", into = "TfidfData")]
pub struct TfidfModel {
    terms: Vec<String>,
    df: Vec<u32>,
    n_docs: usize,
    vocab: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TfidfData {
    n_docs: usize,
    terms: Vec<String>,
    df: Vec<u32>,
}

impl From<TfidfData> for TfidfModel {
    fn from(d: TfidfData) -> Self {
        let vocab = d.terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TfidfModel {
            terms: d.terms,
            df: d.df,
            n_docs: d.n_docs,
            vocab,
        }
    }
}

impl From<TfidfModel> for TfidfData {
    fn from(m: TfidfModel) -> Self {
        TfidfData {
            n_docs: m.n_docs,
            terms: m.terms,
            df: m.df,
        }
    }
}

/// Lowercased non-special whitespace tokens.
pub fn content_tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace()
        .filter(|t| !is_special_token(t))
        .map(str::to_lowercase)
}

impl TfidfModel {
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Result<Self, SummarizerError> {
        Self::fit_with(corpus, |s| content_tokens(s).collect())
    }

    /// Fits with a caller-supplied tokenizer.
    pub fn fit_with<S: AsRef<str>>(
        corpus: &[S],
        tokenize: impl Fn(&str) -> Vec<String>,
    ) -> Result<Self, SummarizerError> {
        if corpus.is_empty() {
            return Err(SummarizerError::EmptyCorpus);
        }
        let mut vocab: HashMap<String, usize> = HashMap::new();
        let mut terms = Vec::new();
        let mut df: Vec<u32> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        for doc in corpus {
            seen.clear();
            for tok in tokenize(doc.as_ref()) {
                let idx = *vocab.entry(tok).or_insert_with_key(|k| {
                    terms.push(k.clone());
                    df.push(0);
                    terms.len() - 1
                });
                if seen.insert(idx) {
                    df[idx] += 1;
                }
            }
        }
        Ok(TfidfModel {
            terms,
            df,
            n_docs: corpus.len(),
            vocab,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn vocab_len(&self) -> usize {
        self.terms.len()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.vocab.get(term).copied()
    }

    pub fn df(&self, term: &str) -> u32 {
        self.index_of(term).map_or(0, |i| self.df[i])
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf_from_df(self.df(term))
    }

    pub fn idf_from_df(&self, df: u32) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn idf_at(&self, index: usize) -> f64 {
        self.idf_from_df(self.df[index])
    }

    /// Score of `term` in `doc` (raw term count times smoothed idf).
    pub fn tfidf(&self, term: &str, doc: &str) -> f64 {
        let term = term.to_lowercase();
        let tf = content_tokens(doc).filter(|t| *t == term).count();
        tf as f64 * self.idf(&term)
    }
}

/// A lowercase stopword set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
}

const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

impl StopwordList {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        StopwordList {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// The shipped 318-word English list.
    pub fn english() -> Self {
        Self::new(ENGLISH_STOPWORDS.lines())
    }

    pub fn empty() -> Self {
        Self::new(std::iter::empty::<&str>())
    }

    /// One token per line, UTF-8.
    pub fn load(path: &Path) -> Result<Self, SummarizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| SummarizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(text.lines()))
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.words.contains(&tok.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// The words in sorted order.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = self.words.iter().cloned().collect();
        w.sort();
        w
    }
}

/// Indices of the whitespace tokens of `s` kept by [`summarize`].
pub fn summarize_indices(s: &str, m: &TfidfModel, stop: &StopwordList, max_len: usize) -> Vec<usize> {
    let toks: Vec<&str> = s.split_whitespace().collect();
    let lowered: Vec<String> = toks.iter().map(|t| t.to_lowercase()).collect();
    let special: Vec<bool> = toks.iter().map(|t| is_special_token(t)).collect();
    let n_special = special.iter().filter(|s| **s).count();
    debug_assert!(max_len >= n_special, "budget smaller than the special tokens");

    let mut tf: HashMap<&str, usize> = HashMap::new();
    for (i, t) in lowered.iter().enumerate() {
        if !special[i] {
            *tf.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut candidates: Vec<(usize, f64)> = (0..toks.len())
        .filter(|&i| !special[i] && !stop.contains(&lowered[i]))
        .map(|i| (i, tf[lowered[i].as_str()] as f64 * m.idf(&lowered[i])))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let budget = max_len.saturating_sub(n_special);
    let mut keep = vec![false; toks.len()];
    for (i, _) in candidates.into_iter().take(budget) {
        keep[i] = true;
    }
    (0..toks.len()).filter(|&i| special[i] || keep[i]).collect()
}

/// Keeps every special token, drops stopwords, and fills the remaining
/// `max_len` budget with the highest TF-IDF tokens (earlier position wins
/// ties). Relative order is preserved.
pub fn summarize(s: &str, m: &TfidfModel, stop: &StopwordList, max_len: usize) -> String {
    let toks: Vec<&str> = s.split_whitespace().collect();
    summarize_indices(s, m, stop, max_len)
        .into_iter()
        .map(|i| toks[i])
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_counts_documents() {
        let m = TfidfModel::fit(&["a b", "a c"]).unwrap();
        assert_eq!(m.n_docs(), 2);
        assert_eq!(m.df("a"), 2);
        assert_eq!(m.df("b"), 1);
        assert_eq!(m.df("c"), 1);
        assert_eq!(m.df("zzz"), 0);
    }

    #[test]
    fn df_counts_once_per_document_and_skips_specials() {
        let m = TfidfModel::fit(&["[COL] a [VAL] a a", "[COL] b [VAL] NULL"]).unwrap();
        assert_eq!(m.df("a"), 1);
        assert_eq!(m.df("[COL]"), 0);
        assert_eq!(m.df("null"), 1);
    }

    #[test]
    fn tfidf_value() {
        let m = TfidfModel::fit(&["a b", "a c"]).unwrap();
        let expected = (3.0f64 / 2.0).ln() + 1.0;
        assert!((m.tfidf("b", "a b") - expected).abs() < 1e-12);
        assert!((m.tfidf("b", "a b") - 1.4055).abs() < 1e-4);
        assert_eq!(m.tfidf("c", "a b"), 0.0);
        // idf(a) = ln(3/3) + 1 = 1; tf = 2
        assert!((m.tfidf("a", "a a b") - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_is_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(TfidfModel::fit(&empty), Err(SummarizerError::EmptyCorpus)));
    }

    #[test]
    fn english_list_size() {
        let s = StopwordList::english();
        assert_eq!(s.len(), 318);
        assert!(s.contains("The"));
        assert!(!s.contains("quick"));
    }

    #[test]
    fn identity_when_short_and_no_stopwords() {
        let m = TfidfModel::fit(&["[COL] t [VAL] quick fox"]).unwrap();
        let s = "[COL] t [VAL] quick fox";
        assert_eq!(summarize(s, &m, &StopwordList::english(), 10), s);
    }

    #[test]
    fn drops_stopwords() {
        let m = TfidfModel::fit(&["[COL] t [VAL] the quick fox", "[COL] t [VAL] the dog"]).unwrap();
        let stop = StopwordList::new(["the"]);
        assert_eq!(summarize("[COL] t [VAL] the quick fox", &m, &stop, 6), "[COL] t [VAL] quick fox");
    }

    #[test]
    fn keeps_highest_scores_in_order() {
        // df: common=3, rare=1, mid=2 (N = 3)
        let m = TfidfModel::fit(&["common rare mid", "common mid", "common"]).unwrap();
        let s = "[COL] x [VAL] common mid rare";
        // budget after 2 specials = 2; x also competes (df 0 → highest idf)
        let out = summarize(s, &m, &StopwordList::empty(), 4);
        assert_eq!(out, "[COL] x [VAL] rare");
        let out = summarize(s, &m, &StopwordList::empty(), 5);
        assert_eq!(out, "[COL] x [VAL] mid rare");
    }

    #[test]
    fn duplicate_tokens_accumulate_tf() {
        let m = TfidfModel::fit(&["a b", "a c", "b"]).unwrap();
        // tf(a) = 3 with idf 1 + ln(4/3); b has tf 1 and idf 1 + ln(4/3) too
        let out = summarize("b a a a", &m, &StopwordList::empty(), 2);
        assert_eq!(out, "a a");
    }
}
