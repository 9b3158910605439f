//! Dataset ingestion and train/valid/test splitting.
//!
//! Two layouts are accepted:
//!
//! * a directory with `tableA.csv`, `tableB.csv` (header row, `id` column)
//!   and either `train.csv`/`valid.csv`/`test.csv` or a single `pairs.csv`,
//!   each with `ltable_id,rtable_id,label`;
//! * a text file of pre-serialized pairs, one `pair<TAB>label` per line.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::augment::seeded_rng;
use crate::entry::{parse_serialized_pair, DataEntry, Label, LabeledPair};

pub const DEFAULT_RATIOS: [f64; 3] = [3.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Directory → table layout, file → serialized pairs.
    #[default]
    Auto,
    Magellan,
    Serialized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub format: DataFormat,
    /// Collapse every record into a single `title` attribute.
    pub title_only: bool,
    /// Used when the pairs come unsplit.
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: DataFormat::Auto,
            title_only: false,
            ratios: DEFAULT_RATIOS,
            split_seed: 0,
        }
    }
}

/// Records of one table keyed by their `id` column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    ids: Vec<String>,
    entries: Vec<DataEntry>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn new(rows: impl IntoIterator<Item = (String, DataEntry)>) -> Result<Self, PipelineError> {
        let mut t = Table::default();
        for (id, e) in rows {
            if t.index.insert(id.clone(), t.ids.len()).is_some() {
                return Err(PipelineError::Data(format!("duplicate id {id:?}")));
            }
            t.ids.push(id);
            t.entries.push(e);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn entries(&self) -> &[DataEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&DataEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DataEntry)> {
        self.ids.iter().map(String::as_str).zip(&self.entries)
    }

    pub fn map_entries(&self, f: impl Fn(&DataEntry) -> DataEntry) -> Table {
        Table {
            ids: self.ids.clone(),
            entries: self.entries.iter().map(f).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Present for the table layout only.
    pub tables: Option<(Table, Table)>,
    pub train: Vec<LabeledPair>,
    pub valid: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Joins every non-empty value into one `title` attribute, or keeps an
/// existing `title` attribute alone.
pub fn title_only(e: &DataEntry) -> DataEntry {
    if let Some(t) = e.get("title") {
        return DataEntry::from_pairs([("title", t)]);
    }
    let joined = e
        .attrs()
        .iter()
        .map(|(_, v)| v.trim())
        .filter(|v| !v.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    DataEntry::from_pairs([("title", joined)])
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    let line = e.position().map(|p| p.line());
    PipelineError::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> PipelineError {
    PipelineError::Parse {
        path: path.display().to_string(),
        line: Some(line),
        msg: msg.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, PipelineError> {
    let f = std::fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(f))
}

/// Reads a header-bearing CSV table with an `id` column.
pub fn load_table(path: &Path) -> Result<Table, PipelineError> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h.trim() == "id")
        .ok_or_else(|| parse_err(path, 1, "missing `id` column"))?;
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[id_col].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate id {id:?}")));
        }
        let attrs = names
            .iter()
            .zip(rec.iter())
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .map(|(_, (n, v))| (n.clone(), v.to_string()))
            .collect();
        let entry = DataEntry::new(attrs).map_err(|e| parse_err(path, line, e.to_string()))?;
        rows.push((id, entry));
    }
    Table::new(rows)
}

/// `(ltable_id, rtable_id, label)` rows.
pub type PairRef = (String, String, Label);

pub fn load_pair_refs(path: &Path) -> Result<Vec<PairRef>, PipelineError> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing `{name}` column")))
    };
    let (l, r, y) = (col("ltable_id")?, col("rtable_id")?, col("label")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let label = parse_label(rec[y].trim()).ok_or_else(|| parse_err(path, line, format!("label {:?} is not 0 or 1", &rec[y])))?;
        out.push((rec[l].trim().to_string(), rec[r].trim().to_string(), label));
    }
    Ok(out)
}

fn parse_label(s: &str) -> Option<Label> {
    match s {
        "0" => Some(Label::NoMatch),
        "1" => Some(Label::Match),
        _ => None,
    }
}

fn resolve(path: &Path, refs: &[PairRef], a: &Table, b: &Table) -> Result<Vec<LabeledPair>, PipelineError> {
    refs.iter()
        .enumerate()
        .map(|(i, (l, r, label))| {
            let line = i as u64 + 2;
            let left = a.get(l).ok_or_else(|| PipelineError::DanglingId {
                path: path.display().to_string(),
                line,
                table: "A",
                id: l.clone(),
            })?;
            let right = b.get(r).ok_or_else(|| PipelineError::DanglingId {
                path: path.display().to_string(),
                line,
                table: "B",
                id: r.clone(),
            })?;
            Ok(LabeledPair {
                left: left.clone(),
                right: right.clone(),
                label: *label,
            })
        })
        .collect()
}

fn check_disjoint(splits: &[(&str, &[PairRef])]) -> Result<(), PipelineError> {
    let mut owner: HashMap<(&str, &str), &str> = HashMap::new();
    for (name, refs) in splits {
        for (l, r, _) in refs.iter() {
            if let Some(prev) = owner.insert((l, r), name) {
                if prev != *name {
                    return Err(PipelineError::Data(format!(
                        "pair ({l}, {r}) appears in both {prev} and {name}"
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn load_magellan(dir: &Path, opts: &LoadOptions) -> Result<Dataset, PipelineError> {
    let mut a = load_table(&dir.join("tableA.csv"))?;
    let mut b = load_table(&dir.join("tableB.csv"))?;
    if opts.title_only {
        a = a.map_entries(title_only);
        b = b.map_entries(title_only);
    }
    let split_files: Vec<PathBuf> = ["train.csv", "valid.csv", "test.csv"].iter().map(|f| dir.join(f)).collect();
    let (train, valid, test) = if split_files.iter().all(|p| p.exists()) {
        let refs: Vec<Vec<PairRef>> = split_files.iter().map(|p| load_pair_refs(p)).collect::<Result<_, _>>()?;
        check_disjoint(&[("train", &refs[0]), ("valid", &refs[1]), ("test", &refs[2])])?;
        (
            resolve(&split_files[0], &refs[0], &a, &b)?,
            resolve(&split_files[1], &refs[1], &a, &b)?,
            resolve(&split_files[2], &refs[2], &a, &b)?,
        )
    } else {
        let path = dir.join("pairs.csv");
        if !path.exists() {
            return Err(PipelineError::Data(format!(
                "{} has neither train/valid/test.csv nor pairs.csv",
                dir.display()
            )));
        }
        let refs = load_pair_refs(&path)?;
        let pairs = resolve(&path, &refs, &a, &b)?;
        let [tr, va, te] = split_dataset(&pairs, opts.ratios, opts.split_seed)?;
        (tr, va, te)
    };
    Ok(Dataset {
        tables: Some((a, b)),
        train,
        valid,
        test,
    })
}

/// Parses `pair<TAB>label` lines; blank lines are skipped.
pub fn parse_serialized_pairs(text: &str, path: &Path, opts: &LoadOptions) -> Result<Vec<LabeledPair>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (pair, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err(path, n, "expected `pair<TAB>label`"))?;
        let label = parse_label(label.trim()).ok_or_else(|| parse_err(path, n, format!("label {:?} is not 0 or 1", label.trim())))?;
        let (mut left, mut right) = parse_serialized_pair(pair).map_err(|e| parse_err(path, n, e.to_string()))?;
        if opts.title_only {
            left = title_only(&left);
            right = title_only(&right);
        }
        out.push(LabeledPair { left, right, label });
    }
    Ok(out)
}

pub fn load_serialized(path: &Path, opts: &LoadOptions) -> Result<Dataset, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pairs = parse_serialized_pairs(&text, path, opts)?;
    let [train, valid, test] = split_dataset(&pairs, opts.ratios, opts.split_seed)?;
    Ok(Dataset {
        tables: None,
        train,
        valid,
        test,
    })
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<Dataset, PipelineError> {
    match opts.format {
        DataFormat::Magellan => load_magellan(path, opts),
        DataFormat::Serialized => load_serialized(path, opts),
        DataFormat::Auto if path.is_dir() => load_magellan(path, opts),
        DataFormat::Auto => load_serialized(path, opts),
    }
}

/// Split sizes for `n` items: floor of each share, leftovers to the largest
/// fractional parts (earlier split on ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], PipelineError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(PipelineError::Split(format!("invalid ratios {ratios:?}")));
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(PipelineError::Split(format!("{n} pairs cannot fill {nonzero} splits")));
    }
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            rest -= 1;
        }
    }
    Ok(sizes)
}

/// Seeded shuffle followed by a contiguous cut into train/valid/test.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<[Vec<T>; 3], PipelineError> {
    let sizes = split_sizes(items.len(), ratios)?;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let take = |from: usize, len: usize| idx[from..from + len].iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok([
        take(0, sizes[0]),
        take(sizes[0], sizes[1]),
        take(sizes[0] + sizes[1], sizes[2]),
    ])
}
