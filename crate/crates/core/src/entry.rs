//! Data entries and their serialization into tagged token sequences.
//!
//! An entry `[(name_1, value_1), …, (name_k, value_k)]` serializes to
//!
//! ```text
//! [COL] name_1 [VAL] value_1 … [COL] name_k [VAL] value_k
//! ```
//!
//! and a candidate pair `(e, e')` to `[CLS] serialize(e) [SEP] serialize(e') [SEP]`.
//! Empty values render as the literal `NULL`.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const COL: &str = "[COL]";
pub const VAL: &str = "[VAL]";
pub const NULL: &str = "NULL";

/// Tokens that carry the pair structure. Domain-knowledge tags are special
/// but not structural.
pub const STRUCTURAL_TOKENS: [&str; 4] = [CLS, SEP, COL, VAL];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntryError {
    #[error("attribute {index} has an empty name")]
    EmptyAttributeName { index: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StructureError {
    #[error("sequence does not start with [CLS]")]
    MissingCls,
    #[error("expected exactly one [CLS], found {0}")]
    ClsCount(usize),
    #[error("expected exactly two [SEP], found {0}")]
    SepCount(usize),
    #[error("sequence does not end with [SEP]")]
    TrailingTokens,
    #[error("token {0} inside an entry is not preceded by an attribute header")]
    OrphanToken(usize),
    #[error("[COL] at {0} has no matching [VAL]")]
    MissingVal(usize),
    #[error("unexpected [VAL] at {0}")]
    UnexpectedVal(usize),
}

/// One record: an ordered list of attribute/value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataEntry {
    attrs: Vec<(String, String)>,
}

impl DataEntry {
    pub fn new(attrs: Vec<(String, String)>) -> Result<Self, EntryError> {
        if let Some(index) = attrs.iter().position(|(n, _)| n.trim().is_empty()) {
            return Err(EntryError::EmptyAttributeName { index });
        }
        Ok(Self { attrs })
    }

    /// Convenience constructor for literals; panics on an empty name.
    pub fn from_pairs<N, V>(pairs: impl IntoIterator<Item = (N, V)>) -> Self
    where
        N: Into<String>,
        V: Into<String>,
    {
        Self::new(pairs.into_iter().map(|(n, v)| (n.into(), v.into())).collect())
            .expect("attribute names must be non-empty")
    }

    pub fn attrs(&self) -> &[(String, String)] {
        &self.attrs
    }

    /// Number of attribute/value pairs.
    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    /// Keeps only the named attributes, in their original order.
    pub fn project(&self, names: &[&str]) -> DataEntry {
        DataEntry {
            attrs: self
                .attrs
                .iter()
                .filter(|(n, _)| names.contains(&n.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Applies `f(name, value)` to every value.
    pub fn map_values(&self, mut f: impl FnMut(&str, &str) -> String) -> DataEntry {
        DataEntry {
            attrs: self
                .attrs
                .iter()
                .map(|(n, v)| (n.clone(), f(n, v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NoMatch = 0,
    Match = 1,
}

impl Label {
    pub fn from_int(v: i64) -> Option<Label> {
        match v {
            0 => Some(Label::NoMatch),
            1 => Some(Label::Match),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_match(self) -> bool {
        self == Label::Match
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub left: DataEntry,
    pub right: DataEntry,
    pub label: Label,
}

/// True for bracketed uppercase markers such as `[CLS]`, `[COL]`, `[LAST]`, `[/LAST]`.
pub fn is_special_token(tok: &str) -> bool {
    let Some(inner) = tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) else {
        return false;
    };
    let inner = inner.strip_prefix('/').unwrap_or(inner);
    let mut chars = inner.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

pub fn is_structural_token(tok: &str) -> bool {
    STRUCTURAL_TOKENS.contains(&tok)
}

/// Doubles the brackets of structural-token literals embedded in raw text,
/// e.g. `[COL]` becomes `[[COL]]`.
pub fn escape_text(s: &str) -> Cow<'_, str> {
    if !STRUCTURAL_TOKENS.iter().any(|t| s.contains(t)) {
        return Cow::Borrowed(s);
    }
    let mut out = s.to_string();
    for t in STRUCTURAL_TOKENS {
        out = out.replace(t, &format!("[{t}]"));
    }
    Cow::Owned(out)
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Serializes an entry, passing each escaped value through `f(name, value)`
/// before it is written. Used by the domain-knowledge stage to rewrite values
/// without losing the grammar. Values that end up empty render as `NULL`.
pub fn serialize_entry_with(e: &DataEntry, mut f: impl FnMut(&str, &str) -> String) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(e.len() * 4);
    for (name, value) in e.attrs() {
        let value = collapse_ws(value);
        let rendered = if value.is_empty() {
            NULL.to_string()
        } else {
            let v = collapse_ws(&f(name, &escape_text(&value)));
            if v.is_empty() {
                NULL.to_string()
            } else {
                v
            }
        };
        parts.push(COL.to_string());
        parts.push(escape_text(&collapse_ws(name)).into_owned());
        parts.push(VAL.to_string());
        parts.push(rendered);
    }
    parts.join(" ")
}

pub fn serialize_entry(e: &DataEntry) -> String {
    serialize_entry_with(e, |_, v| v.to_string())
}

/// Wraps two already-serialized entries into the pair grammar.
pub fn assemble_pair(left: &str, right: &str) -> String {
    let mut out = String::with_capacity(left.len() + right.len() + 20);
    out.push_str(CLS);
    for seg in [left, right] {
        if !seg.is_empty() {
            out.push(' ');
            out.push_str(seg);
        }
        out.push(' ');
        out.push_str(SEP);
    }
    out
}

pub fn serialize_pair(e: &DataEntry, e2: &DataEntry) -> String {
    assemble_pair(&serialize_entry(e), &serialize_entry(e2))
}

/// Serialization used for single-record encoding: `[CLS] serialize(e) [SEP]`.
pub fn serialize_single(e: &DataEntry) -> String {
    let body = serialize_entry(e);
    if body.is_empty() {
        format!("{CLS} {SEP}")
    } else {
        format!("{CLS} {body} {SEP}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub special: bool,
}

impl Token {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let special = is_special_token(&text);
        Token { text, special }
    }

    pub fn is(&self, s: &str) -> bool {
        self.text == s
    }

    pub fn is_structural(&self) -> bool {
        self.special && is_structural_token(&self.text)
    }
}

/// A token sequence with its special-token mask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        TokenSeq { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.special).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, tok: &str) -> usize {
        self.tokens.iter().filter(|t| t.is(tok)).count()
    }

    pub fn to_text(&self) -> String {
        self.texts().collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Whitespace tokenization. Special tokens are kept verbatim and flagged;
/// everything else is lowercased.
pub fn tokenize(s: &str) -> TokenSeq {
    let tokens = s
        .split_whitespace()
        .map(|w| {
            if is_special_token(w) {
                Token {
                    text: w.to_string(),
                    special: true,
                }
            } else {
                Token {
                    text: w.to_lowercase(),
                    special: false,
                }
            }
        })
        .collect();
    TokenSeq { tokens }
}

/// Token ranges of one attribute: `[COL]` at `col`, `[VAL]` at `val`, value
/// tokens up to `end` (exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttrSpan {
    pub col: usize,
    pub val: usize,
    pub end: usize,
}

/// Parsed structure of a serialized pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLayout {
    pub first_sep: usize,
    pub second_sep: usize,
    pub left: Vec<AttrSpan>,
    pub right: Vec<AttrSpan>,
}

impl PairLayout {
    pub fn parse(seq: &TokenSeq) -> Result<Self, StructureError> {
        let toks = seq.tokens();
        if toks.first().map(|t| t.is(CLS)) != Some(true) {
            return Err(StructureError::MissingCls);
        }
        let cls = seq.count(CLS);
        if cls != 1 {
            return Err(StructureError::ClsCount(cls));
        }
        let seps: Vec<usize> = toks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is(SEP))
            .map(|(i, _)| i)
            .collect();
        if seps.len() != 2 {
            return Err(StructureError::SepCount(seps.len()));
        }
        if seps[1] != toks.len() - 1 {
            return Err(StructureError::TrailingTokens);
        }
        let left = parse_entry_span(toks, 1, seps[0])?;
        let right = parse_entry_span(toks, seps[0] + 1, seps[1])?;
        Ok(PairLayout {
            first_sep: seps[0],
            second_sep: seps[1],
            left,
            right,
        })
    }

    pub fn attr_count(&self) -> usize {
        self.left.len() + self.right.len()
    }
}

fn parse_entry_span(toks: &[Token], start: usize, end: usize) -> Result<Vec<AttrSpan>, StructureError> {
    let mut spans = Vec::new();
    let mut i = start;
    while i < end {
        if !toks[i].is(COL) {
            if toks[i].is(VAL) {
                return Err(StructureError::UnexpectedVal(i));
            }
            return Err(StructureError::OrphanToken(i));
        }
        let col = i;
        let mut j = i + 1;
        while j < end && !toks[j].is(VAL) {
            if toks[j].is(COL) {
                return Err(StructureError::MissingVal(col));
            }
            j += 1;
        }
        if j == end {
            return Err(StructureError::MissingVal(col));
        }
        let val = j;
        let mut k = val + 1;
        while k < end && !toks[k].is(COL) {
            if toks[k].is(VAL) {
                return Err(StructureError::UnexpectedVal(k));
            }
            k += 1;
        }
        spans.push(AttrSpan { col, val, end: k });
        i = k;
    }
    Ok(spans)
}

/// Parses `[COL] name [VAL] value …` text back into an entry. `NULL` values
/// become empty strings.
pub fn parse_serialized_entry(s: &str) -> Result<DataEntry, StructureError> {
    let seq = TokenSeq::from_tokens(s.split_whitespace().map(Token::new).collect());
    let toks = seq.tokens();
    let spans = parse_entry_span(toks, 0, toks.len())?;
    let join = |r: std::ops::Range<usize>| {
        toks[r]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut attrs = Vec::with_capacity(spans.len());
    for sp in spans {
        let name = join(sp.col + 1..sp.val);
        let value = join(sp.val + 1..sp.end);
        let value = if value == NULL { String::new() } else { value };
        attrs.push((name, value));
    }
    DataEntry::new(attrs).map_err(|e| match e {
        EntryError::EmptyAttributeName { index } => StructureError::OrphanToken(index),
    })
}

/// Parses a full serialized pair `[CLS] … [SEP] … [SEP]` into two entries.
pub fn parse_serialized_pair(s: &str) -> Result<(DataEntry, DataEntry), StructureError> {
    let seq = TokenSeq::from_tokens(s.split_whitespace().map(Token::new).collect());
    let layout = PairLayout::parse(&seq)?;
    let texts: Vec<&str> = seq.texts().collect();
    let left = texts[1..layout.first_sep].join(" ");
    let right = texts[layout.first_sep + 1..layout.second_sep].join(" ");
    Ok((parse_serialized_entry(&left)?, parse_serialized_entry(&right)?))
}
