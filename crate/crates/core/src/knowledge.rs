//! Domain-knowledge injection.
//!
//! Span typing: recognizers find typed spans in attribute values and the
//! spans are wrapped in tags (`( 866 ) 246 - [LAST] 6453 [/LAST]`).
//!
//! Span normalization: rewrite rules and a synonym dictionary map equivalent
//! surface forms onto one canonical string (`2,020` → `2020`).
//!
//! Normalization runs before typing: tags would otherwise break the number
//! patterns the rules look for.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("span {start}..{end} is out of bounds for a value of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("span {start}..{end} is empty")]
    EmptySpan { start: usize, end: usize },
    #[error("spans {0:?} and {1:?} overlap or are not sorted")]
    OverlappingSpans((usize, usize), (usize, usize)),
    #[error("invalid pattern for {name}: {source}")]
    Pattern {
        name: String,
        #[source]
        source: regex::Error,
    },
    #[error("tag {0:?} is not a bracketed uppercase name")]
    BadTag(String),
    #[error("unknown built-in recognizer {0:?}")]
    UnknownBuiltin(String),
    #[error("recognizer {0} needs exactly one of `pattern` or `dictionary`")]
    MatcherSpec(String),
    #[error("synonym canonical form {canonical:?} is not a fixed point (rewrites to {rewritten:?})")]
    SynonymNotFixedPoint { canonical: String, rewritten: String },
    #[error("reading knowledge config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing knowledge config: {0}")]
    Config(#[from] toml::de::Error),
}

/// A named span type and the tags inserted around its spans.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpanType {
    pub name: String,
    pub start_tag: String,
    pub end_tag: Option<String>,
}

impl SpanType {
    pub fn new(name: &str, start_tag: &str, end_tag: Option<&str>) -> Result<Self, KnowledgeError> {
        let tag_ok = |t: &str| crate::entry::is_special_token(t) && !crate::entry::is_structural_token(t);
        if !tag_ok(start_tag) {
            return Err(KnowledgeError::BadTag(start_tag.to_string()));
        }
        if let Some(end) = end_tag {
            if !tag_ok(end) {
                return Err(KnowledgeError::BadTag(end.to_string()));
            }
        }
        Ok(SpanType {
            name: name.to_string(),
            start_tag: start_tag.to_string(),
            end_tag: end_tag.map(str::to_string),
        })
    }
}

/// A typed span; `start`/`end` are character offsets (end exclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub ty: Arc<SpanType>,
}

#[derive(Debug, Clone)]
enum Matcher {
    Pattern { re: Regex, group: usize },
    Dictionary { re: Regex },
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    span_type: Arc<SpanType>,
    matcher: Matcher,
    attrs: Vec<String>,
    first_only: bool,
    require_digit: bool,
    require_letter: bool,
}

fn byte_to_char_map(s: &str) -> Vec<usize> {
    let mut map = vec![0; s.len() + 1];
    let mut c = 0;
    for (b, ch) in s.char_indices() {
        for k in 0..ch.len_utf8() {
            map[b + k] = c;
        }
        c += 1;
    }
    map[s.len()] = c;
    map
}

impl Recognizer {
    pub fn from_pattern(span_type: SpanType, pattern: &str, group: usize) -> Result<Self, KnowledgeError> {
        let re = Regex::new(pattern).map_err(|source| KnowledgeError::Pattern {
            name: span_type.name.clone(),
            source,
        })?;
        Ok(Recognizer {
            span_type: Arc::new(span_type),
            matcher: Matcher::Pattern { re, group },
            attrs: Vec::new(),
            first_only: false,
            require_digit: false,
            require_letter: false,
        })
    }

    /// Case-insensitive whole-word dictionary lookup.
    pub fn from_dictionary<S: AsRef<str>>(span_type: SpanType, terms: &[S]) -> Result<Self, KnowledgeError> {
        let mut terms: Vec<&str> = terms.iter().map(|t| t.as_ref().trim()).filter(|t| !t.is_empty()).collect();
        terms.sort_by_key(|t| std::cmp::Reverse(t.len()));
        let alt = terms.iter().map(|t| regex::escape(t)).collect::<Vec<_>>().join("|");
        let pattern = if alt.is_empty() { "[^\\s\\S]".to_string() } else { format!(r"(?i)\b(?:{alt})\b") };
        let re = Regex::new(&pattern).map_err(|source| KnowledgeError::Pattern {
            name: span_type.name.clone(),
            source,
        })?;
        Ok(Recognizer {
            span_type: Arc::new(span_type),
            matcher: Matcher::Dictionary { re },
            attrs: Vec::new(),
            first_only: false,
            require_digit: false,
            require_letter: false,
        })
    }

    /// Restricts the recognizer to the named attributes when applied per attribute.
    pub fn for_attrs<S: Into<String>>(mut self, attrs: impl IntoIterator<Item = S>) -> Self {
        self.attrs = attrs.into_iter().map(Into::into).collect();
        self
    }

    /// Only report the first match.
    pub fn first_only(mut self, yes: bool) -> Self {
        self.first_only = yes;
        self
    }

    pub fn requiring(mut self, digit: bool, letter: bool) -> Self {
        self.require_digit = digit;
        self.require_letter = letter;
        self
    }

    pub fn span_type(&self) -> &SpanType {
        &self.span_type
    }

    pub fn applies_to(&self, attr: &str) -> bool {
        self.attrs.is_empty() || self.attrs.iter().any(|a| a.eq_ignore_ascii_case(attr))
    }

    fn accepts(&self, text: &str) -> bool {
        (!self.require_digit || text.chars().any(|c| c.is_ascii_digit()))
            && (!self.require_letter || text.chars().any(|c| c.is_alphabetic()))
    }

    /// Non-overlapping spans, sorted by start.
    pub fn recognize(&self, v: &str) -> Vec<Span> {
        let map = byte_to_char_map(v);
        let mut out = Vec::new();
        let ranges: Box<dyn Iterator<Item = (usize, usize)>> = match &self.matcher {
            Matcher::Pattern { re, group } => Box::new(
                re.captures_iter(v)
                    .filter_map(move |c| c.get(*group).map(|m| (m.start(), m.end()))),
            ),
            Matcher::Dictionary { re } => Box::new(re.find_iter(v).map(|m| (m.start(), m.end()))),
        };
        for (s, e) in ranges {
            if s == e || !self.accepts(&v[s..e]) {
                continue;
            }
            out.push(Span {
                start: map[s],
                end: map[e],
                ty: Arc::clone(&self.span_type),
            });
            if self.first_only {
                break;
            }
        }
        out
    }
}

/// Built-in recognizers for phone last-4 digits, street numbers, years and product ids.
pub mod builtin {
    use super::*;

    pub const NAMES: [&str; 4] = ["LAST4", "STREETNUM", "YEAR", "PRODID"];

    pub fn last4() -> Recognizer {
        Recognizer::from_pattern(
            SpanType::new("LAST4", "[LAST]", Some("[/LAST]")).unwrap(),
            r"\(?\d{3}\)?[\s.-]*\d{3}[\s.-]*(\d{4})\b",
            1,
        )
        .unwrap()
    }

    /// First number string of an address value.
    pub fn street_number() -> Recognizer {
        Recognizer::from_pattern(SpanType::new("STREETNUM", "[STREETNUM]", None).unwrap(), r"\b\d+\b", 0)
            .unwrap()
            .for_attrs(["addr", "address", "street"])
            .first_only(true)
    }

    pub fn year() -> Recognizer {
        Recognizer::from_pattern(SpanType::new("YEAR", "[YEAR]", None).unwrap(), r"\b(?:18|19|20)\d{2}\b", 0).unwrap()
    }

    /// Alphanumeric strings of length ≥ 5 holding at least one digit and one letter.
    pub fn product_id() -> Recognizer {
        Recognizer::from_pattern(
            SpanType::new("PRODID", "[PRODID]", None).unwrap(),
            r"\b[A-Za-z0-9][A-Za-z0-9-]{3,}[A-Za-z0-9]\b",
            0,
        )
        .unwrap()
        .requiring(true, true)
    }

    pub fn by_name(name: &str) -> Result<Recognizer, KnowledgeError> {
        match name.to_ascii_uppercase().as_str() {
            "LAST4" => Ok(last4()),
            "STREETNUM" => Ok(street_number()),
            "YEAR" => Ok(year()),
            "PRODID" => Ok(product_id()),
            _ => Err(KnowledgeError::UnknownBuiltin(name.to_string())),
        }
    }

    pub fn all() -> Vec<Recognizer> {
        vec![last4(), street_number(), year(), product_id()]
    }
}

/// Keeps a non-overlapping subset: smaller start wins, then the longer span,
/// then the earlier recognizer.
pub fn resolve_overlaps(mut spans: Vec<Span>) -> Vec<Span> {
    // stable sort keeps recognizer order for exact ties
    spans.sort_by(|a, b| a.start.cmp(&b.start).then((b.end - b.start).cmp(&(a.end - a.start))));
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        if out.last().is_none_or(|last| s.start >= last.end) {
            out.push(s);
        }
    }
    out
}

pub fn recognize_spans(v: &str, rs: &[Recognizer]) -> Vec<Span> {
    resolve_overlaps(rs.iter().flat_map(|r| r.recognize(v)).collect())
}

/// Like [`recognize_spans`] but honours each recognizer's attribute scope.
pub fn recognize_spans_for(attr: &str, v: &str, rs: &[Recognizer]) -> Vec<Span> {
    resolve_overlaps(
        rs.iter()
            .filter(|r| r.applies_to(attr))
            .flat_map(|r| r.recognize(v))
            .collect(),
    )
}

const SPLIT_PUNCT: &[char] = &['(', ')', '{', '}', '-', ':', ';', '"', '!', '?', '<', '>', '|', '*', '+', '=', '~', '#', '^'];

/// Separates bracket and dash punctuation from adjacent text and collapses
/// whitespace. Periods, commas, slashes and percent signs stay attached so
/// numbers such as `36.11` or `5.0%` remain single tokens.
pub fn pretokenize(v: &str) -> String {
    let mut out = String::with_capacity(v.len() + 8);
    for ch in v.chars() {
        if SPLIT_PUNCT.contains(&ch) {
            out.push(' ');
            out.push(ch);
            out.push(' ');
        } else {
            out.push(ch);
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Inserts the span tags into `v`. With no spans `v` is returned unchanged;
/// otherwise the text is pretokenized and each span is wrapped in its start
/// tag and, if the type has one, its end tag.
pub fn inject_span_types(v: &str, spans: &[Span]) -> Result<String, KnowledgeError> {
    if spans.is_empty() {
        return Ok(v.to_string());
    }
    let chars: Vec<char> = v.chars().collect();
    let mut prev_end = 0usize;
    for s in spans {
        if s.end > chars.len() {
            return Err(KnowledgeError::SpanOutOfBounds {
                start: s.start,
                end: s.end,
                len: chars.len(),
            });
        }
        if s.start >= s.end {
            return Err(KnowledgeError::EmptySpan { start: s.start, end: s.end });
        }
    }
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            return Err(KnowledgeError::OverlappingSpans((w[0].start, w[0].end), (w[1].start, w[1].end)));
        }
    }
    let piece = |a: usize, b: usize| pretokenize(&chars[a..b].iter().collect::<String>());
    let mut parts: Vec<String> = Vec::new();
    for s in spans {
        parts.push(piece(prev_end, s.start));
        parts.push(s.ty.start_tag.clone());
        parts.push(piece(s.start, s.end));
        if let Some(end) = &s.ty.end_tag {
            parts.push(end.clone());
        }
        prev_end = s.end;
    }
    parts.push(piece(prev_end, chars.len()));
    Ok(parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" "))
}

/// How a rewrite rule transforms its match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rewrite {
    /// Regex replacement template (`$1` etc.).
    Template(String),
    Lowercase,
    Uppercase,
    Delete,
}

#[derive(Debug, Clone)]
pub struct RewriteRule {
    pattern: Regex,
    rewrite: Rewrite,
}

impl RewriteRule {
    pub fn new(pattern: &str, rewrite: Rewrite) -> Result<Self, KnowledgeError> {
        let pattern = Regex::new(pattern).map_err(|source| KnowledgeError::Pattern {
            name: "rewrite".into(),
            source,
        })?;
        Ok(RewriteRule { pattern, rewrite })
    }

    pub fn apply(&self, v: &str) -> String {
        match &self.rewrite {
            Rewrite::Template(t) => self.pattern.replace_all(v, t.as_str()).into_owned(),
            Rewrite::Lowercase => self.pattern.replace_all(v, |c: &regex::Captures| c[0].to_lowercase()).into_owned(),
            Rewrite::Uppercase => self.pattern.replace_all(v, |c: &regex::Captures| c[0].to_uppercase()).into_owned(),
            Rewrite::Delete => self.pattern.replace_all(v, "").into_owned(),
        }
    }
}

/// Surface form → canonical form, matched case-insensitively on word boundaries.
#[derive(Debug, Clone, Default)]
pub struct SynonymDict {
    map: HashMap<String, String>,
    re: Option<Regex>,
    entries: BTreeMap<String, String>,
}

impl SynonymDict {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, KnowledgeError> {
        let entries: BTreeMap<String, String> = pairs
            .into_iter()
            .filter(|(s, _)| !s.trim().is_empty())
            .map(|(s, c)| (s.trim().to_string(), c))
            .collect();
        let map: HashMap<String, String> = entries.iter().map(|(s, c)| (s.to_lowercase(), c.clone())).collect();
        let re = if map.is_empty() {
            None
        } else {
            let mut surfaces: Vec<&String> = entries.keys().collect();
            surfaces.sort_by_key(|s| std::cmp::Reverse(s.len()));
            let alt = surfaces.iter().map(|s| regex::escape(s)).collect::<Vec<_>>().join("|");
            Some(
                Regex::new(&format!(r"(?i)\b(?:{alt})\b")).map_err(|source| KnowledgeError::Pattern {
                    name: "synonyms".into(),
                    source,
                })?,
            )
        };
        let dict = SynonymDict { map, re, entries };
        for canonical in dict.entries.values() {
            let rewritten = dict.apply(canonical);
            if &rewritten != canonical {
                return Err(KnowledgeError::SynonymNotFixedPoint {
                    canonical: canonical.clone(),
                    rewritten,
                });
            }
        }
        Ok(dict)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn apply(&self, v: &str) -> String {
        match &self.re {
            None => v.to_string(),
            Some(re) => re
                .replace_all(v, |c: &regex::Captures| {
                    let m = &c[0];
                    self.map.get(&m.to_lowercase()).cloned().unwrap_or_else(|| m.to_string())
                })
                .into_owned(),
        }
    }
}

/// Rounds the decimal `int.frac` to `places` digits, ties to even. Operates
/// on the digit string so the result does not depend on binary floats.
fn round_half_even(int: &str, frac: &str, places: usize) -> String {
    let mut frac_digits: Vec<u8> = frac.bytes().map(|b| b - b'0').collect();
    let round_up = if frac_digits.len() <= places {
        frac_digits.resize(places, 0);
        false
    } else {
        let rest = frac_digits.split_off(places);
        match rest[0].cmp(&5) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => {
                if rest[1..].iter().any(|&d| d != 0) {
                    true
                } else {
                    let last = frac_digits
                        .last()
                        .copied()
                        .unwrap_or_else(|| int.bytes().last().map(|b| b - b'0').unwrap_or(0));
                    last % 2 == 1
                }
            }
        }
    };
    let mut digits: Vec<u8> = int.bytes().map(|b| b - b'0').chain(frac_digits).collect();
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let to_str = |ds: &[u8]| ds.iter().map(|d| (d + b'0') as char).collect::<String>();
    let int_part = to_str(&digits[..split]);
    if places == 0 {
        int_part
    } else {
        format!("{}.{}", int_part, to_str(&digits[split..]))
    }
}

fn number_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d{1,3}(?:,\d{3})+|\d+)(?:\.(\d+))?(\s*%)?").unwrap())
}

/// Built-in number rules: commas dropped from integers, decimals rounded to
/// two places, percentages written with one decimal and no space (`5 %` →
/// `5.0%`). Numbers glued to letters (model numbers) are left alone.
pub fn normalize_numbers(v: &str) -> String {
    let re = number_regex();
    let bytes = v.as_bytes();
    let mut out = String::with_capacity(v.len());
    let mut last = 0;
    for c in re.captures_iter(v) {
        let m = c.get(0).unwrap();
        let (s, e) = (m.start(), m.end());
        let before_ok = s == 0 || {
            let p = v[..s].chars().next_back().unwrap();
            !(p.is_alphanumeric() || p == '.' || p == ',' || p == '_')
        };
        let after_ok = match v[e..].chars().next() {
            None => true,
            Some(n) if n.is_alphanumeric() || n == '_' => false,
            Some('.') | Some(',') => !bytes.get(e + 1).is_some_and(|b| b.is_ascii_digit()),
            Some(_) => true,
        };
        if !before_ok || !after_ok {
            continue;
        }
        let int = c[1].replace(',', "");
        let frac = c.get(2).map(|f| f.as_str());
        let percent = c.get(3).is_some();
        let rendered = if percent {
            format!("{}%", round_half_even(&int, frac.unwrap_or(""), 1))
        } else if let Some(frac) = frac {
            round_half_even(&int, frac, 2)
        } else {
            int
        };
        out.push_str(&v[last..s]);
        out.push_str(&rendered);
        last = e;
    }
    out.push_str(&v[last..]);
    out
}

/// Applies user rules, then synonyms, then the built-in number rules.
pub fn normalize_spans(v: &str, rules: &[RewriteRule], dict: &SynonymDict) -> String {
    let mut s = v.to_string();
    for r in rules {
        s = r.apply(&s);
    }
    let s = dict.apply(&s);
    normalize_numbers(&s)
}

/// Declarative form of a [`DomainKnowledge`] bundle, loadable from TOML.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    /// Names of built-in recognizers to enable (`LAST4`, `STREETNUM`, `YEAR`, `PRODID`).
    pub builtin: Vec<String>,
    #[serde(rename = "recognizer")]
    pub recognizers: Vec<RecognizerSpec>,
    #[serde(rename = "rewrite")]
    pub rewrites: Vec<RewriteSpec>,
    pub synonyms: BTreeMap<String, String>,
    /// Disable the built-in number rules.
    pub skip_number_rules: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerSpec {
    #[serde(rename = "type")]
    pub type_name: String,
    pub tag: Option<String>,
    pub end_tag: Option<String>,
    pub pattern: Option<String>,
    pub group: usize,
    pub dictionary: Option<Vec<String>>,
    pub attrs: Vec<String>,
    pub first_only: bool,
    pub require_digit: bool,
    pub require_letter: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteSpec {
    pub pattern: String,
    pub rewrite: Rewrite,
}

impl KnowledgeConfig {
    /// All built-in recognizers and number rules, no synonyms.
    pub fn builtin_all() -> Self {
        KnowledgeConfig {
            builtin: builtin::NAMES.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, KnowledgeError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

impl RecognizerSpec {
    fn build(&self) -> Result<Recognizer, KnowledgeError> {
        let name = self.type_name.to_ascii_uppercase();
        let tag = self.tag.clone().unwrap_or_else(|| format!("[{name}]"));
        let ty = SpanType::new(&name, &tag, self.end_tag.as_deref())?;
        let r = match (&self.pattern, &self.dictionary) {
            (Some(p), None) => Recognizer::from_pattern(ty, p, self.group)?,
            (None, Some(d)) => Recognizer::from_dictionary(ty, d)?,
            _ => return Err(KnowledgeError::MatcherSpec(name)),
        };
        Ok(r.for_attrs(self.attrs.iter().cloned())
            .first_only(self.first_only)
            .requiring(self.require_digit, self.require_letter))
    }
}

/// An immutable bundle of recognizers, rewrite rules and synonyms.
#[derive(Debug, Clone)]
pub struct DomainKnowledge {
    recognizers: Vec<Recognizer>,
    rules: Vec<RewriteRule>,
    synonyms: SynonymDict,
    number_rules: bool,
}

impl DomainKnowledge {
    pub fn from_config(cfg: &KnowledgeConfig) -> Result<Self, KnowledgeError> {
        let mut recognizers = Vec::new();
        for name in &cfg.builtin {
            recognizers.push(builtin::by_name(name)?);
        }
        for spec in &cfg.recognizers {
            recognizers.push(spec.build()?);
        }
        let rules = cfg
            .rewrites
            .iter()
            .map(|r| RewriteRule::new(&r.pattern, r.rewrite.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let synonyms = SynonymDict::new(cfg.synonyms.clone())?;
        Ok(DomainKnowledge {
            recognizers,
            rules,
            synonyms,
            number_rules: !cfg.skip_number_rules,
        })
    }

    pub fn recognizers(&self) -> &[Recognizer] {
        &self.recognizers
    }

    pub fn normalize(&self, v: &str) -> String {
        let mut s = v.to_string();
        for r in &self.rules {
            s = r.apply(&s);
        }
        let s = self.synonyms.apply(&s);
        if self.number_rules {
            normalize_numbers(&s)
        } else {
            s
        }
    }

    /// Normalizes, types and tags one attribute value.
    pub fn apply_value(&self, attr: &str, v: &str) -> String {
        let normalized = self.normalize(v);
        let spans = recognize_spans_for(attr, &normalized, &self.recognizers);
        if spans.is_empty() {
            pretokenize(&normalized)
        } else {
            inject_span_types(&normalized, &spans).expect("recognized spans are in bounds and disjoint")
        }
    }

    /// Serializes an entry with every value passed through [`Self::apply_value`].
    pub fn serialize_entry(&self, e: &crate::entry::DataEntry) -> String {
        crate::entry::serialize_entry_with(e, |name, v| self.apply_value(name, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span_text(v: &str, s: &Span) -> String {
        v.chars().skip(s.start).take(s.end - s.start).collect()
    }

    #[test]
    fn phone_last4() {
        let v = "(866) 246-6453";
        let spans = recognize_spans(v, &[builtin::last4()]);
        assert_eq!(spans.len(), 1);
        assert_eq!(span_text(v, &spans[0]), "6453");
        assert_eq!(inject_span_types(v, &spans).unwrap(), "( 866 ) 246 - [LAST] 6453 [/LAST]");
    }

    #[test]
    fn empty_value_has_no_spans() {
        assert!(recognize_spans("", &builtin::all()).is_empty());
    }

    #[test]
    fn street_number_is_first_number() {
        let v = "12 Main St 300";
        let spans = recognize_spans(v, &[builtin::street_number()]);
        assert_eq!(spans.len(), 1);
        assert_eq!(span_text(v, &spans[0]), "12");
        assert!(builtin::street_number().applies_to("addr"));
        assert!(!builtin::street_number().applies_to("name"));
    }

    #[test]
    fn no_spans_leaves_value() {
        assert_eq!(inject_span_types("(866) 246-6453", &[]).unwrap(), "(866) 246-6453");
    }

    #[test]
    fn two_spans_offsets() {
        // "ab 1999 cd 2001": YEAR spans at chars 3..7 and 11..15
        let v = "ab 1999 cd 2001";
        let spans = recognize_spans(v, &[builtin::year()]);
        assert_eq!(
            spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            [(3, 7), (11, 15)]
        );
        assert_eq!(inject_span_types(v, &spans).unwrap(), "ab [YEAR] 1999 cd [YEAR] 2001");

        let last = builtin::last4();
        let t = last.span_type().clone();
        let ty = Arc::new(t);
        let spans = vec![
            Span { start: 0, end: 2, ty: ty.clone() },
            Span { start: 4, end: 5, ty },
        ];
        assert_eq!(inject_span_types("xy-zw", &spans).unwrap(), "[LAST] xy [/LAST] - z [LAST] w [/LAST]");
    }

    #[test]
    fn inject_rejects_bad_spans() {
        let ty = Arc::new(SpanType::new("YEAR", "[YEAR]", None).unwrap());
        let oob = [Span { start: 2, end: 9, ty: ty.clone() }];
        assert!(matches!(inject_span_types("abc", &oob), Err(KnowledgeError::SpanOutOfBounds { .. })));
        let overlap = [
            Span { start: 0, end: 2, ty: ty.clone() },
            Span { start: 1, end: 3, ty: ty.clone() },
        ];
        assert!(matches!(
            inject_span_types("abc", &overlap),
            Err(KnowledgeError::OverlappingSpans(..))
        ));
        let empty = [Span { start: 1, end: 1, ty }];
        assert!(matches!(inject_span_types("abc", &empty), Err(KnowledgeError::EmptySpan { .. })));
    }

    #[test]
    fn overlap_prefers_earlier_then_longer() {
        let a = Arc::new(SpanType::new("A", "[A]", None).unwrap());
        let b = Arc::new(SpanType::new("B", "[B]", None).unwrap());
        let spans = vec![
            Span { start: 2, end: 4, ty: a.clone() },
            Span { start: 0, end: 3, ty: b.clone() },
            Span { start: 0, end: 5, ty: a.clone() },
            Span { start: 5, end: 6, ty: b.clone() },
        ];
        let kept = resolve_overlaps(spans);
        assert_eq!(kept.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), [(0, 5), (5, 6)]);
    }

    #[test]
    fn year_and_prodid() {
        let v = "sharp el1192bl calculator 2019 abc12";
        let spans = recognize_spans(v, &[builtin::year(), builtin::product_id()]);
        let got: Vec<_> = spans.iter().map(|s| (s.ty.name.clone(), span_text(v, s))).collect();
        assert_eq!(
            got,
            [
                ("PRODID".to_string(), "el1192bl".to_string()),
                ("YEAR".to_string(), "2019".to_string()),
                ("PRODID".to_string(), "abc12".to_string()),
            ]
        );
        assert!(recognize_spans("1750 2100 12345", &[builtin::year(), builtin::product_id()]).is_empty());
    }

    #[test]
    fn number_rules() {
        let none = SynonymDict::default();
        assert_eq!(normalize_spans("2,020", &[], &none), "2020");
        assert_eq!(normalize_spans("5 %", &[], &none), "5.0%");
        assert_eq!(normalize_spans("5.00 %", &[], &none), "5.0%");
        assert_eq!(normalize_spans("3.14159", &[], &none), "3.14");
        assert_eq!(normalize_spans("price 36.115 usd", &[], &none), "price 36.12 usd");
        assert_eq!(normalize_spans("2.125", &[], &none), "2.12");
        assert_eq!(normalize_spans("9.999", &[], &none), "10.00");
        assert_eq!(normalize_spans("12.25%", &[], &none), "12.2%");
        assert_eq!(normalize_spans("1,234,567.891", &[], &none), "1234567.89");
        assert_eq!(normalize_spans("el1192bl v2.0 1.2.3", &[], &none), "el1192bl v2.0 1.2.3");
        assert_eq!(normalize_spans("dlux 2", &[], &none), "dlux 2");
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even("0", "125", 2), "0.12");
        assert_eq!(round_half_even("0", "135", 2), "0.14");
        assert_eq!(round_half_even("0", "1251", 2), "0.13");
        assert_eq!(round_half_even("2", "5", 0), "2");
        assert_eq!(round_half_even("3", "5", 0), "4");
        assert_eq!(round_half_even("99", "95", 1), "100.0");
    }

    #[test]
    fn synonyms() {
        let dict = SynonymDict::new([("VLDB journal".to_string(), "VLDBJ".to_string())]).unwrap();
        assert_eq!(normalize_spans("VLDB journal", &[], &dict), "VLDBJ");
        assert_eq!(normalize_spans("the vldb Journal 2019", &[], &dict), "the VLDBJ 2019");
        assert_eq!(dict.apply("VLDBJ"), "VLDBJ");
    }

    #[test]
    fn synonym_canonical_must_be_fixed_point() {
        let err = SynonymDict::new([
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
        ])
        .unwrap_err();
        assert!(matches!(err, KnowledgeError::SynonymNotFixedPoint { .. }));
    }

    #[test]
    fn rewrite_rules() {
        let r = RewriteRule::new(r"\binc\.?", Rewrite::Template("inc".into())).unwrap();
        assert_eq!(r.apply("Google inc. llc"), "Google inc llc");
        let up = RewriteRule::new(r"\b[a-z]{2}\d+\b", Rewrite::Uppercase).unwrap();
        assert_eq!(up.apply("model el1192"), "model EL1192");
        let del = RewriteRule::new(r"\s*\(refurbished\)", Rewrite::Delete).unwrap();
        assert_eq!(del.apply("ipod (refurbished)"), "ipod");
    }

    #[test]
    fn bad_tags_rejected() {
        assert!(SpanType::new("X", "[x]", None).is_err());
        assert!(SpanType::new("X", "[COL]", None).is_err());
        assert!(SpanType::new("X", "[X]", Some("/X")).is_err());
    }

    #[test]
    fn config_roundtrip_from_toml() {
        let cfg = KnowledgeConfig::from_toml_str(
            r#"
builtin = ["LAST4", "streetnum"]

[[recognizer]]
type = "BRAND"
dictionary = ["sony", "apple"]

[[recognizer]]
type = "EDITION"
tag = "[ED]"
pattern = '(\d+)(?:st|nd|rd|th) edition'
group = 1

[[rewrite]]
pattern = '\bcorp\b'
rewrite = { template = "corporation" }

[synonyms]
"VLDB journal" = "VLDBJ"
"#,
        )
        .unwrap();
        let dk = DomainKnowledge::from_config(&cfg).unwrap();
        assert_eq!(dk.recognizers().len(), 4);
        assert_eq!(dk.apply_value("phone", "(866) 246-6453"), "( 866 ) 246 - [LAST] 6453 [/LAST]");
        assert_eq!(dk.apply_value("addr", "12 Main St"), "[STREETNUM] 12 Main St");
        assert_eq!(dk.apply_value("title", "Sony tv 2nd edition"), "[BRAND] Sony tv [ED] 2 nd edition");
        assert_eq!(dk.apply_value("venue", "vldb journal"), "VLDBJ");
        assert_eq!(dk.apply_value("name", "acme corp"), "acme corporation");
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            KnowledgeConfig::from_toml_str("builtin = [\"NOPE\"]")
                .map(|c| DomainKnowledge::from_config(&c)),
            Ok(Err(KnowledgeError::UnknownBuiltin(_)))
        ));
        let both = KnowledgeConfig::from_toml_str(
            "[[recognizer]]\ntype = \"X\"\npattern = \"a\"\ndictionary = [\"a\"]\n",
        )
        .unwrap();
        assert!(matches!(DomainKnowledge::from_config(&both), Err(KnowledgeError::MatcherSpec(_))));
        assert!(KnowledgeConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn apply_normalizes_before_typing() {
        let dk = DomainKnowledge::from_config(&KnowledgeConfig::builtin_all()).unwrap();
        assert_eq!(dk.apply_value("year", "1,999"), "[YEAR] 1999");
        assert_eq!(dk.apply_value("price", "36.119"), "36.12");
    }
}
