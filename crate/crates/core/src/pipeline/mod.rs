//! Loading, preprocessing, training, evaluation and blocking orchestration.

mod dataset;
mod preprocess;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    load_dataset, load_magellan, load_pair_refs, load_serialized, load_table, parse_serialized_pairs, split_dataset,
    split_sizes, title_only, DataFormat, Dataset, LoadOptions, PairRef, Table, DEFAULT_RATIOS,
};
pub use preprocess::{entry_budgets, truncate_entry, PreprocessSpec, Preprocessor, PAIR_OVERHEAD};

use crate::augment::{DaOperator, MixDaConfig, DEFAULT_ALPHA};
use crate::blocking::{
    blocked_topk, dedup_exact, key_block, BlockingConfig, CandidateSet, EmbeddingMatrix, Phase, Similarity,
    TfidfIndex, TimingReport,
};
use crate::encoder::{self, Checkpoint, EncoderConfig, EncoderModel, Example, TrainConfig, Vocab};
use crate::entry::{DataEntry, Label, LabeledPair};
use crate::knowledge::KnowledgeConfig;
use crate::summarizer::StopwordList;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse { path: String, line: Option<u64>, msg: String },
    #[error("{path}:{line}: id {id:?} not found in table {table}")]
    DanglingId {
        path: String,
        line: u64,
        table: &'static str,
        id: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("split: {0}")]
    Split(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl PipelineError {
    pub fn stage(stage: &'static str, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Precision, recall and F1 on the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// No predicted and no gold positives.
    pub degenerate: bool,
}

impl EvalReport {
    /// Precision is 0 with no predicted positives; recall is 1 with no gold
    /// positives; F1 is 0 when `P + R = 0` or the report is degenerate.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let degenerate = tp + fp == 0 && tp + fn_ == 0;
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if degenerate || precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            degenerate,
        }
    }

    pub fn from_labels(gold: &[Label], pred: &[Label]) -> Self {
        assert_eq!(gold.len(), pred.len(), "gold and predicted label counts differ");
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (g, p) in gold.iter().zip(pred) {
            match (g.is_match(), p.is_match()) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }
}

pub fn argmax_label(p: [f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Match
    } else {
        Label::NoMatch
    }
}

/// Match probabilities for prepared examples.
pub fn predict(model: &EncoderModel, examples: &[Example]) -> Result<Vec<[f64; 2]>, encoder::EncoderError> {
    let ids: Vec<Vec<u32>> = examples.iter().map(|e| model.encode_tokens(&e.seq)).collect();
    model.predict_batch(&ids)
}

/// Argmax predictions scored against the examples' labels.
pub fn evaluate(model: &EncoderModel, examples: &[Example]) -> Result<EvalReport, encoder::EncoderError> {
    let probs = predict(model, examples)?;
    let pred: Vec<Label> = probs.into_iter().map(argmax_label).collect();
    let gold: Vec<Label> = examples.iter().map(|e| e.label).collect();
    Ok(EvalReport::from_labels(&gold, &pred))
}

/// Checkpoint plus the preprocessing it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub preprocess: PreprocessSpec,
    pub checkpoint: Checkpoint,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string(self).map_err(|e| PipelineError::stage("checkpoint", e))?;
        write_atomic(path, json.as_bytes()).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let b: ModelBundle = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: Some(e.line() as u64),
            msg: e.to_string(),
        })?;
        Checkpoint::from_json(&serde_json::to_string(&b.checkpoint).map_err(|e| PipelineError::stage("checkpoint", e))?)
            .map_err(|e| PipelineError::stage("checkpoint", e))?;
        Ok(b)
    }

    pub fn model(&self) -> Result<EncoderModel, PipelineError> {
        self.checkpoint.model().map_err(|e| PipelineError::stage("checkpoint", e))
    }

    pub fn preprocessor(&self) -> Result<Preprocessor, PipelineError> {
        Preprocessor::from_spec(&self.preprocess)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Table directory or serialized-pairs file.
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub load: LoadOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeStage {
    pub enabled: bool,
    /// TOML recognizer/rewrite/synonym file; all built-ins when unset.
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeStage {
    pub enabled: bool,
    /// One stopword per line; the bundled English list when unset.
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentStage {
    pub enabled: bool,
    pub op: DaOperator,
    pub alpha: f64,
    pub entry_swap_coin: bool,
}

impl Default for AugmentStage {
    fn default() -> Self {
        AugmentStage {
            enabled: false,
            op: DaOperator::SpanDel,
            alpha: DEFAULT_ALPHA,
            entry_swap_coin: false,
        }
    }
}

impl AugmentStage {
    pub fn mixda(&self) -> Option<MixDaConfig> {
        self.enabled.then(|| MixDaConfig {
            op: self.op,
            alpha: self.alpha,
            entry_swap_coin: self.entry_swap_coin,
            fixed_lambda: None,
        })
    }
}

/// Full run configuration; every section may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output: PathBuf,
    /// Repetitions with seeds `seed, seed+1, …`.
    pub runs: usize,
    pub data: DataConfig,
    pub knowledge: KnowledgeStage,
    pub summarize: SummarizeStage,
    pub augment: AugmentStage,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub blocking: BlockingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output: PathBuf::from("emkit-out"),
            runs: 1,
            data: DataConfig::default(),
            knowledge: KnowledgeStage::default(),
            summarize: SummarizeStage::default(),
            augment: AugmentStage::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            blocking: BlockingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Variant name after the stages that are switched on.
    pub fn variant(&self) -> String {
        let mut parts = Vec::new();
        if self.knowledge.enabled {
            parts.push("dk");
        }
        if self.summarize.enabled {
            parts.push("su");
        }
        if self.augment.enabled {
            parts.push("da");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn knowledge_config(&self) -> Result<Option<KnowledgeConfig>, PipelineError> {
        if !self.knowledge.enabled {
            return Ok(None);
        }
        match &self.knowledge.config {
            Some(p) => KnowledgeConfig::load(p).map(Some).map_err(|e| PipelineError::stage("knowledge", e)),
            None => Ok(Some(KnowledgeConfig::builtin_all())),
        }
    }

    pub fn stopwords(&self) -> Result<Option<StopwordList>, PipelineError> {
        if !self.summarize.enabled {
            return Ok(None);
        }
        match &self.summarize.stopwords {
            Some(p) => StopwordList::load(p).map(Some).map_err(|e| PipelineError::stage("summarize", e)),
            None => Ok(Some(StopwordList::english())),
        }
    }

    pub fn train_config(&self, run: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.train.seed.wrapping_add(run as u64);
        if self.augment.enabled {
            t.mixda = self.augment.mixda();
        } else {
            t.mixda = None;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Test-set evaluation of one trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub valid_f1: f64,
    pub counts: SplitCounts,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub variant: String,
    pub runs: Vec<RunReport>,
    pub mean_test_f1: f64,
}

/// Paths written by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub result: RunReport,
}

/// Loaded data plus the fitted preprocessing shared by every run.
pub struct Prepared {
    pub preprocessor: Preprocessor,
    pub spec: PreprocessSpec,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare(cfg: &PipelineConfig, data: &Dataset) -> Result<Prepared, PipelineError> {
    let dk = cfg.knowledge_config()?;
    let stop = cfg.stopwords()?;
    let (pre, spec) = Preprocessor::fit(dk.as_ref(), stop, cfg.encoder.max_seq_len, &data.train)?;
    Ok(Prepared {
        train: pre.examples(&data.train),
        valid: pre.examples(&data.valid),
        test: pre.examples(&data.test),
        preprocessor: pre,
        spec,
    })
}

/// Trains one run on prepared examples and scores it on the test split.
pub fn train_and_evaluate(
    cfg: &PipelineConfig,
    prepared: &Prepared,
    run: usize,
) -> Result<(ModelBundle, RunReport), PipelineError> {
    let tcfg = cfg.train_config(run);
    let vocab = Vocab::build(prepared.train.iter().map(|e| &e.seq));
    let model = EncoderModel::new(cfg.encoder.clone(), vocab, tcfg.seed).map_err(|e| PipelineError::stage("train", e))?;
    let ck = encoder::train(model, &prepared.train, &prepared.valid, &tcfg).map_err(|e| PipelineError::stage("train", e))?;
    let bundle = ModelBundle {
        preprocess: prepared.spec.clone(),
        checkpoint: ck,
    };
    let report = report_for(&bundle, &prepared.test, cfg.variant(), [prepared.train.len(), prepared.valid.len()])?;
    Ok((bundle, report))
}

/// Test evaluation; depends only on the checkpoint and the test examples.
pub fn report_for(
    bundle: &ModelBundle,
    test: &[Example],
    variant: String,
    [n_train, n_valid]: [usize; 2],
) -> Result<RunReport, PipelineError> {
    let model = bundle.model()?;
    let test_report = evaluate(&model, test).map_err(|e| PipelineError::stage("evaluate", e))?;
    Ok(RunReport {
        variant,
        seed: bundle.checkpoint.train.seed,
        epoch: bundle.checkpoint.epoch,
        valid_f1: bundle.checkpoint.valid_f1,
        counts: SplitCounts {
            train: n_train,
            valid: n_valid,
            test: test.len(),
        },
        test: test_report,
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| PipelineError::stage("report", e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes()).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// load → domain knowledge → summarization → training (with MixDA) →
/// evaluation → `checkpoint.json` + `report.json`. With `runs > 1` each run
/// goes to `run-<i>/` and a `summary.json` is written alongside.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<RunArtifacts>, PipelineError> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no data path configured".into()))?;
    let data = load_dataset(path, &cfg.data.load)?;
    run_pipeline_on(cfg, &data)
}

pub fn run_pipeline_on(cfg: &PipelineConfig, data: &Dataset) -> Result<Vec<RunArtifacts>, PipelineError> {
    if cfg.runs == 0 {
        return Err(PipelineError::Config("runs must be at least 1".into()));
    }
    let prepared = prepare(cfg, data)?;
    let mut out = Vec::new();
    for run in 0..cfg.runs {
        let dir = if cfg.runs == 1 {
            cfg.output.clone()
        } else {
            cfg.output.join(format!("run-{run}"))
        };
        let (bundle, report) = train_and_evaluate(cfg, &prepared, run)?;
        let checkpoint = dir.join("checkpoint.json");
        let report_path = dir.join("report.json");
        bundle.save(&checkpoint)?;
        write_json(&report_path, &report)?;
        log::info!("run {run}: test F1 {:.4}", report.test.f1);
        out.push(RunArtifacts {
            checkpoint,
            report: report_path,
            result: report,
        });
    }
    if cfg.runs > 1 {
        let runs: Vec<RunReport> = out.iter().map(|a| a.result.clone()).collect();
        let mean = runs.iter().map(|r| r.test.f1).sum::<f64>() / runs.len() as f64;
        write_json(
            &cfg.output.join("summary.json"),
            &SummaryReport {
                variant: cfg.variant(),
                runs,
                mean_test_f1: mean,
            },
        )?;
    }
    Ok(out)
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub b: usize,
    pub a: usize,
    pub score: Option<f64>,
    pub provenance: crate::blocking::Provenance,
    pub match_prob: Option<f64>,
}

/// Candidate generation over two tables, with optional classification of
/// every candidate by a trained bundle.
pub fn run_blocking(
    a: &[DataEntry],
    b: &[DataEntry],
    cfg: &BlockingConfig,
    bundle: Option<&ModelBundle>,
) -> Result<(Vec<ScoredCandidate>, TimingReport), PipelineError> {
    let mut timing = TimingReport::default();
    let keep_b: Vec<usize> = if cfg.dedup { dedup_exact(b) } else { (0..b.len()).collect() };
    let b_kept: Vec<DataEntry> = keep_b.iter().map(|&i| b[i].clone()).collect();
    let stage = |e| PipelineError::stage("block", e);

    let t0 = Instant::now();
    let key = match &cfg.key_attr {
        Some(k) => key_block(a, &b_kept, k).map_err(stage)?,
        None => CandidateSet::new(),
    };
    let model = bundle.map(ModelBundle::model).transpose()?;
    let mut similar = CandidateSet::new();
    match cfg.sim {
        Similarity::Tfidf => {
            let index = TfidfIndex::build(a, &b_kept, &cfg.attrs);
            timing.set(Phase::Blocking, t0.elapsed());
            let t = Instant::now();
            similar = index.topk(cfg.topk).map_err(stage)?;
            timing.set(Phase::Search, t.elapsed());
        }
        Similarity::Embedding => {
            timing.set(Phase::Blocking, t0.elapsed());
            let m = model
                .as_ref()
                .ok_or_else(|| PipelineError::Config("embedding similarity needs a checkpoint".into()))?;
            let t = Instant::now();
            let enc = |rows: &[DataEntry]| -> Result<EmbeddingMatrix, PipelineError> {
                let vecs: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|e| m.encode_record_truncated(e))
                    .collect::<Result<_, _>>()
                    .map_err(|e| PipelineError::stage("encode", e))?;
                EmbeddingMatrix::from_rows(&vecs).map_err(stage)
            };
            let ma = enc(a)?;
            let mb = enc(&b_kept)?;
            timing.set(Phase::Encoding, t.elapsed());
            let t = Instant::now();
            if !a.is_empty() && !b_kept.is_empty() {
                similar = blocked_topk(&mb, &ma, cfg.embed_k, cfg.block_size).map_err(stage)?;
            }
            timing.set(Phase::Search, t.elapsed());
        }
    }
    let all = key.union(&similar);

    let mut out: Vec<ScoredCandidate> = all
        .iter()
        .map(|((bj, ai), c)| ScoredCandidate {
            b: keep_b[bj],
            a: ai,
            score: c.score,
            provenance: c.provenance,
            match_prob: None,
        })
        .collect();
    if let (Some(bundle), Some(model)) = (bundle, &model) {
        let t = Instant::now();
        let pre = bundle.preprocessor()?;
        let examples: Vec<Example> = out
            .iter()
            .map(|c| Example {
                seq: pre.pair_tokens(&a[c.a], &b[c.b]),
                label: Label::NoMatch,
            })
            .collect();
        let probs = predict(model, &examples).map_err(|e| PipelineError::stage("match", e))?;
        for (c, p) in out.iter_mut().zip(probs) {
            c.match_prob = Some(p[1]);
        }
        timing.set(Phase::Matching, t.elapsed());
    }
    Ok((out, timing))
}

/// Pairs of a dataset as prepared examples, for callers outside a run.
pub fn examples_for(pre: &Preprocessor, pairs: &[LabeledPair]) -> Vec<Example> {
    pre.examples(pairs)
}
