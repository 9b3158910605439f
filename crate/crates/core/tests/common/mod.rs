//! Fixture generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use emkit::entry::{DataEntry, Label, LabeledPair};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const FILLER: &[&str] = &[
    "black", "white", "silver", "pro", "mini", "max", "ultra", "series", "edition", "wireless", "digital", "portable",
    "compact", "deluxe", "classic", "smart", "slim", "plus", "home", "office", "travel", "sport", "studio", "kit",
];

fn random_code<R: Rng>(rng: &mut R) -> String {
    const CHARS: &[u8] = b"abcdefghjkmnpqrstuvwxyz";
    const DIGITS: &[u8] = b"23456789";
    let mut s = String::new();
    for i in 0..6 {
        let pool = if i % 2 == 0 { CHARS } else { DIGITS };
        s.push(pool[rng.random_range(0..pool.len())] as char);
    }
    s
}

/// Id tokens that each occur in several pairs, so the vocabulary built from
/// a training split covers the ids seen at test time.
pub fn id_pool(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(random_code(&mut r));
    }
    let mut v: Vec<String> = set.into_iter().collect();
    v.shuffle(&mut r);
    v
}

fn product<R: Rng>(rng: &mut R, id: &str, fillers: usize, avoid: &[&str]) -> DataEntry {
    let allowed: Vec<&str> = FILLER.iter().copied().filter(|w| !avoid.contains(w)).collect();
    let mut words: Vec<&str> = allowed.choose_multiple(rng, fillers).copied().collect();
    let at = rng.random_range(0..=words.len());
    words.insert(at, id);
    DataEntry::from_pairs([("title", words.join(" "))])
}

/// `n` pairs, half matching. A pair matches iff both titles contain the same
/// id token; the filler words of the two titles never overlap.
pub fn id_pairs(n: usize, seed: u64) -> Vec<LabeledPair> {
    id_pairs_with(n, 24, 3, seed)
}

pub fn id_pairs_with(n: usize, pool_size: usize, fillers: usize, seed: u64) -> Vec<LabeledPair> {
    let pool = id_pool(pool_size, seed ^ 0x5eed);
    let mut r = rng(seed);
    let mut out: Vec<LabeledPair> = (0..n)
        .map(|i| {
            let a = pool[r.random_range(0..pool.len())].clone();
            let label = if i % 2 == 0 { Label::Match } else { Label::NoMatch };
            let b = if label == Label::Match {
                a.clone()
            } else {
                loop {
                    let c = &pool[r.random_range(0..pool.len())];
                    if *c != a {
                        break c.clone();
                    }
                }
            };
            let left = product(&mut r, &a, fillers, &[]);
            let used: Vec<&str> = left.get("title").unwrap_or("").split(' ').collect();
            let right = product(&mut r, &b, fillers, &used);
            LabeledPair { left, right, label }
        })
        .collect();
    out.shuffle(&mut r);
    out
}

/// Records `{title: <id>, code: <id>}` drawn from a pool of `pool_size` ids;
/// a pair matches iff the ids agree.
pub fn id_code_pairs(n: usize, pool_size: usize, seed: u64) -> Vec<LabeledPair> {
    id_pairs_with(n, pool_size, 0, seed)
        .into_iter()
        .map(|p| {
            let rec = |e: &DataEntry| {
                let id = e.get("title").unwrap().to_string();
                DataEntry::from_pairs([("title", id.clone()), ("code", id)])
            };
            LabeledPair { left: rec(&p.left), right: rec(&p.right), label: p.label }
        })
        .collect()
}

const NAME_A: &[&str] = &[
    "golden", "harbor", "summit", "blue", "river", "maple", "granite", "silver", "north", "cedar", "eagle", "prime",
    "liberty", "pioneer", "atlas", "crescent", "evergreen", "falcon", "horizon", "iron", "keystone", "lakeside",
    "meridian", "oak", "pacific", "quantum", "redwood", "sterling", "trinity", "vertex",
];
const NAME_B: &[&str] = &[
    "logistics", "bakery", "consulting", "dental", "foods", "hardware", "insurance", "labs", "media", "motors",
    "partners", "pharmacy", "plumbing", "realty", "systems", "textiles", "travel", "ventures", "welding", "works",
];
const SUFFIX: &[(&str, &str)] = &[("inc", "incorporated"), ("llc", "l.l.c."), ("co", "company"), ("corp", "corporation")];
const STREET: &[&str] = &[
    "main", "elm", "park", "washington", "lake", "hill", "mill", "church", "spring", "center", "pine", "union", "river",
    "market", "franklin", "highland", "jackson", "madison", "sunset", "walnut",
];
const STREET_KIND: &[(&str, &str)] = &[("st", "street"), ("ave", "avenue"), ("rd", "road"), ("blvd", "boulevard")];
const CITY: &[&str] = &[
    "springfield", "riverton", "fairview", "greenville", "madison", "clinton", "franklin", "georgetown", "salem",
    "bristol",
];

/// Two company tables with planted duplicates.
pub struct CompanyCorpus {
    pub a: Vec<DataEntry>,
    pub b: Vec<DataEntry>,
    /// `(b_row, a_row)` of every planted match.
    pub gold: BTreeSet<(usize, usize)>,
}

fn typo<R: Rng>(rng: &mut R, w: &str) -> String {
    let mut c: Vec<char> = w.chars().collect();
    if c.len() > 3 {
        let i = rng.random_range(1..c.len() - 1);
        c.swap(i, i + 1);
    }
    c.into_iter().collect()
}

fn company<R: Rng>(rng: &mut R, zips: &[String]) -> [String; 4] {
    let name = format!(
        "{} {} {}",
        NAME_A.choose(rng).unwrap(),
        NAME_B.choose(rng).unwrap(),
        SUFFIX.choose(rng).unwrap().0
    );
    let addr = format!(
        "{} {} {}",
        rng.random_range(1..9999),
        STREET.choose(rng).unwrap(),
        STREET_KIND.choose(rng).unwrap().0
    );
    [name, addr, CITY.choose(rng).unwrap().to_string(), zips.choose(rng).unwrap().clone()]
}

fn company_entry(f: &[String; 4]) -> DataEntry {
    DataEntry::from_pairs([("name", &f[0]), ("addr", &f[1]), ("city", &f[2]), ("zipcode", &f[3])])
}

/// A noisy copy: suffix and street kind spelled out, sometimes a typo in the
/// name, and for about a third of the copies a different or missing zip code.
fn perturb<R: Rng>(rng: &mut R, f: &[String; 4], zips: &[String]) -> [String; 4] {
    let mut name: Vec<String> = f[0].split(' ').map(String::from).collect();
    if let Some((_, long)) = SUFFIX.iter().find(|(s, _)| *s == name[2]) {
        name[2] = long.to_string();
    }
    if rng.random_bool(0.3) {
        name[0] = typo(rng, &name[0]);
    }
    let mut addr: Vec<String> = f[1].split(' ').map(String::from).collect();
    if let Some((_, long)) = STREET_KIND.iter().find(|(s, _)| *s == addr[2]) {
        addr[2] = long.to_string();
    }
    let zip = match rng.random_range(0..3) {
        0 if rng.random_bool(0.5) => String::new(),
        0 => zips.choose(rng).unwrap().clone(),
        _ => f[3].clone(),
    };
    [name.join(" "), addr.join(" "), f[2].clone(), zip]
}

/// `n_a × n_b` company tables where `n_match` B rows are perturbed copies of
/// distinct A rows; every other B row is an independent company.
pub fn company_corpus(n_a: usize, n_b: usize, n_match: usize, seed: u64) -> CompanyCorpus {
    let mut r = rng(seed);
    let zips: Vec<String> = (0..80).map(|_| format!("{:05}", r.random_range(10000..99999))).collect();
    let a_fields: Vec<[String; 4]> = (0..n_a).map(|_| company(&mut r, &zips)).collect();
    let mut a_rows: Vec<usize> = (0..n_a).collect();
    a_rows.shuffle(&mut r);
    let mut b_rows: Vec<usize> = (0..n_b).collect();
    b_rows.shuffle(&mut r);
    let mut b: Vec<Option<DataEntry>> = vec![None; n_b];
    let mut gold = BTreeSet::new();
    for (&ai, &bj) in a_rows.iter().zip(&b_rows).take(n_match) {
        b[bj] = Some(company_entry(&perturb(&mut r, &a_fields[ai], &zips)));
        gold.insert((bj, ai));
    }
    let b = b
        .into_iter()
        .map(|e| e.unwrap_or_else(|| company_entry(&company(&mut r, &zips))))
        .collect();
    CompanyCorpus {
        a: a_fields.iter().map(company_entry).collect(),
        b,
        gold,
    }
}

const FUZZ_WORDS: &[&str] = &[
    "sony", "tv", "42", "inch", "$", "19.99", "black", "a", "the", "-", "(", ")", "x2", "nikon", "d750", "kit", "usb",
];

fn fuzz_value<R: Rng>(rng: &mut R) -> String {
    if rng.random_bool(0.1) {
        return String::new();
    }
    let n = rng.random_range(1..10);
    let mut w: Vec<String> = (0..n).map(|_| FUZZ_WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.random_bool(0.3) {
        let at = rng.random_range(0..=w.len());
        w.insert(at, "[LAST] 6453 [/LAST]".to_string());
    }
    w.join(" ")
}

/// Random entry with up to `max_attrs` attributes (possibly none).
pub fn fuzz_entry<R: Rng>(rng: &mut R, max_attrs: usize) -> DataEntry {
    let k = rng.random_range(0..=max_attrs);
    DataEntry::from_pairs((0..k).map(|i| (format!("attr{i}"), fuzz_value(rng))))
}

pub fn fuzz_pair<R: Rng>(rng: &mut R) -> emkit::TokenSeq {
    let (l, r) = (fuzz_entry(rng, 4), fuzz_entry(rng, 4));
    emkit::entry::tokenize(&emkit::entry::serialize_pair(&l, &r))
}

fn attr_blocks(s: &emkit::TokenSeq) -> Vec<Vec<String>> {
    let layout = emkit::entry::PairLayout::parse(s).expect("valid pair");
    let t: Vec<&str> = s.texts().collect();
    layout
        .left
        .iter()
        .chain(&layout.right)
        .map(|a| t[a.col..a.end].iter().map(|x| x.to_string()).collect())
        .collect()
}

fn specials(s: &emkit::TokenSeq) -> Vec<String> {
    s.tokens().iter().filter(|t| t.special).map(|t| t.text.clone()).collect()
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

/// Structural invariants of one augmentation; `Err` describes the first violation.
pub fn check_augmentation(op: emkit::augment::DaOperator, input: &emkit::TokenSeq, out: &emkit::TokenSeq) -> Result<(), String> {
    use emkit::augment::{DaOperator, MAX_SPAN_LEN};
    use emkit::entry::{PairLayout, CLS, SEP};
    PairLayout::parse(out).map_err(|e| format!("{op}: unparsable output {e}"))?;
    if out.count(CLS) != 1 || out.count(SEP) != 2 {
        return Err(format!("{op}: wrong [CLS]/[SEP] counts"));
    }
    let (a, b) = (input.tokens(), out.tokens());
    match op {
        DaOperator::SpanDel => {
            if specials(input) != specials(out) {
                return Err("span_del touched a special token".into());
            }
            let removed = a.len() - b.len();
            let plain = a.iter().any(|t| !t.special);
            if plain && !(1..=MAX_SPAN_LEN).contains(&removed) {
                return Err(format!("span_del removed {removed} tokens"));
            }
            let pre = a.iter().zip(b).take_while(|(x, y)| x == y).count();
            if a[..pre] != b[..pre] || a[pre + removed..] != b[pre..] {
                return Err("span_del removed a non-contiguous span".into());
            }
        }
        DaOperator::SpanShuffle => {
            if a.len() != b.len() || specials(input) != specials(out) {
                return Err("span_shuffle changed length or special tokens".into());
            }
            let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
            if let (Some(&lo), Some(&hi)) = (diff.first(), diff.last()) {
                if hi - lo + 1 > MAX_SPAN_LEN || a[lo..=hi].iter().any(|t| t.special) {
                    return Err(format!("span_shuffle window {lo}..={hi}"));
                }
                if sorted(&a[lo..=hi].iter().map(|t| t.text.clone()).collect::<Vec<_>>())
                    != sorted(&b[lo..=hi].iter().map(|t| t.text.clone()).collect::<Vec<_>>())
                {
                    return Err("span_shuffle is not a permutation".into());
                }
            }
        }
        DaOperator::AttrDel => {
            let (bi, bo) = (attr_blocks(input), attr_blocks(out));
            let expect = if bi.is_empty() { 0 } else { bi.len() - 1 };
            if bo.len() != expect {
                return Err("attr_del must remove exactly one attribute".into());
            }
            let mut rest = sorted(&bi);
            for blk in &bo {
                match rest.iter().position(|x| x == blk) {
                    Some(i) => {
                        rest.remove(i);
                    }
                    None => return Err("attr_del altered an attribute".into()),
                }
            }
        }
        DaOperator::AttrShuffle | DaOperator::EntrySwap => {
            if sorted(&attr_blocks(input)) != sorted(&attr_blocks(out)) {
                return Err(format!("{op} altered attributes"));
            }
            if sorted(&specials(input)) != sorted(&specials(out)) {
                return Err(format!("{op} changed special tokens"));
            }
            if op == DaOperator::EntrySwap {
                let back = emkit::augment::entry_swap(out).map_err(|e| e.to_string())?;
                if &back != input {
                    return Err("entry_swap is not an involution".into());
                }
            }
        }
    }
    Ok(())
}

/// Writes `pairs` as `tableA.csv`, `tableB.csv` and `pairs.csv` under `dir`.
/// Identical records share one row. All entries must have the same attributes.
pub fn write_magellan(dir: &std::path::Path, pairs: &[LabeledPair]) {
    use std::collections::BTreeMap;
    let header: Vec<String> = pairs[0].left.attrs().iter().map(|(n, _)| n.clone()).collect();
    let mut tables: [BTreeMap<String, (String, DataEntry)>; 2] = Default::default();
    let mut refs = Vec::new();
    for p in pairs {
        let mut ids = Vec::new();
        for (side, e) in [&p.left, &p.right].into_iter().enumerate() {
            let key = emkit::entry::serialize_entry(e);
            let next = format!("{}{}", ["a", "b"][side], tables[side].len());
            let id = tables[side].entry(key).or_insert((next, e.clone())).0.clone();
            ids.push(id);
        }
        refs.push((ids[0].clone(), ids[1].clone(), p.label.index()));
    }
    for (side, name) in ["tableA.csv", "tableB.csv"].into_iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(name)).unwrap();
        let mut h = vec!["id".to_string()];
        h.extend(header.iter().cloned());
        w.write_record(&h).unwrap();
        let mut rows: Vec<&(String, DataEntry)> = tables[side].values().collect();
        rows.sort_by_key(|(id, _)| id[1..].parse::<usize>().unwrap());
        for (id, e) in rows {
            let mut rec = vec![id.clone()];
            rec.extend(e.attrs().iter().map(|(_, v)| v.clone()));
            w.write_record(&rec).unwrap();
        }
        w.flush().unwrap();
    }
    let mut w = csv::Writer::from_path(dir.join("pairs.csv")).unwrap();
    w.write_record(["ltable_id", "rtable_id", "label"]).unwrap();
    for (l, r, y) in refs {
        w.write_record([l, r, y.to_string()]).unwrap();
    }
    w.flush().unwrap();
}

/// One fuzzed summarizer input checked against the length, subsequence,
/// special-token and TF-IDF ordering properties.
pub fn summarizer_case(seed: u64) -> Result<(), String> {
    use emkit::entry::{is_special_token, serialize_entry, COL, VAL};
    use emkit::summarizer::{summarize_indices, StopwordList, TfidfModel};
    let mut r = rng(seed);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).chain(["the", "a", "of", "and"].map(String::from)).collect();
    let corpus: Vec<String> = (0..20)
        .map(|_| {
            let n = r.random_range(1..15);
            let ws: Vec<&str> = (0..n).map(|_| words.choose(&mut r).unwrap().as_str()).collect();
            format!("{COL} title {VAL} {}", ws.join(" "))
        })
        .collect();
    let model = TfidfModel::fit(&corpus).unwrap();
    let stop = StopwordList::english();

    let e = fuzz_entry(&mut r, 5);
    let mut s = serialize_entry(&e);
    let extra: Vec<&str> = (0..r.random_range(0..30)).map(|_| words.choose(&mut r).unwrap().as_str()).collect();
    s.push(' ');
    s.push_str(&extra.join(" "));
    let toks: Vec<&str> = s.split_whitespace().collect();
    let n_special = toks.iter().filter(|t| is_special_token(t)).count();
    let max_len = r.random_range(n_special..=toks.len() + 2);

    let kept = summarize_indices(&s, &model, &stop, max_len);
    if kept.len() > max_len {
        return Err(format!("{} tokens kept, max {max_len}", kept.len()));
    }
    if !kept.windows(2).all(|w| w[0] < w[1]) {
        return Err("not a subsequence".into());
    }
    let specials_in: Vec<usize> = (0..toks.len()).filter(|&i| is_special_token(toks[i])).collect();
    let specials_out: Vec<usize> = kept.iter().copied().filter(|&i| is_special_token(toks[i])).collect();
    if specials_in != specials_out {
        return Err("special tokens lost".into());
    }

    // Oracle score: count in this entry × smoothed idf.
    let lower: Vec<String> = toks.iter().map(|t| t.to_lowercase()).collect();
    let score = |i: usize| {
        let tf = lower.iter().enumerate().filter(|(j, t)| !is_special_token(toks[*j]) && **t == lower[i]).count();
        tf as f64 * model.idf(&lower[i])
    };
    let content: Vec<usize> = (0..toks.len())
        .filter(|&i| !is_special_token(toks[i]) && !stop.contains(&lower[i]))
        .collect();
    let kept_set: std::collections::HashSet<usize> = kept.iter().copied().collect();
    for &a in content.iter().filter(|i| kept_set.contains(i)) {
        for &b in content.iter().filter(|i| !kept_set.contains(i)) {
            let (sa, sb) = (score(a), score(b));
            if !(sa > sb || (sa == sb && a < b)) {
                return Err(format!("kept {} ({sa}) vs dropped {} ({sb})", toks[a], toks[b]));
            }
        }
    }
    for &i in &kept {
        if !is_special_token(toks[i]) && stop.contains(&lower[i]) {
            return Err(format!("stopword {} kept", toks[i]));
        }
    }
    Ok(())
}
