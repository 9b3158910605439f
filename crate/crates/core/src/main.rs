use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use emkit::augment::{augment, seeded_rng, DaOperator};
use emkit::blocking::Similarity;
use emkit::entry::{parse_serialized_entry, parse_serialized_pair, serialize_entry, tokenize};
use emkit::pipeline::{
    evaluate, load_dataset, load_table, predict, run_blocking, run_pipeline, DataFormat, ModelBundle, PipelineConfig,
};
use emkit::summarizer::{summarize, StopwordList, TfidfModel};
use emkit::Label;

#[derive(Parser)]
#[command(name = "emkit", version, about = "Entity matching toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a matcher and evaluate it on the test split.
    Train(TrainArgs),
    /// Score a trained checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Match probabilities for serialized pairs, one per line.
    Predict(PredictArgs),
    /// Generate candidate pairs between two tables.
    Block(BlockArgs),
    /// Show augmented versions of serialized pairs.
    AugmentPreview(AugmentArgs),
    /// TF-IDF summarize serialized entries to a token budget.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Table directory or serialized-pairs file; defaults to $EMKIT_DATA_DIR.
    #[arg(long, env = "EMKIT_DATA_DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Collapse each record into a single title attribute.
    #[arg(long)]
    title_only: bool,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Magellan,
    Serialized,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Repeat with seeds seed, seed+1, ...
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable MixDA with this operator.
    #[arg(long)]
    da: Option<DaOperator>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Inject domain knowledge with the built-in recognizers.
    #[arg(long)]
    dk: bool,
    /// Summarize long entries.
    #[arg(long)]
    summarize: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    init_range: Option<f64>,
    #[arg(long)]
    pre_norm: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Serialized pairs; a trailing tab and label is ignored. Reads stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimArg {
    Tfidf,
    Embedding,
}

#[derive(Args)]
struct BlockArgs {
    #[arg(long)]
    table_a: PathBuf,
    #[arg(long)]
    table_b: PathBuf,
    /// TOML run configuration; its [blocking] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    key_attr: Option<String>,
    /// Comma-separated attributes for the similarity blocker.
    #[arg(long, value_delimiter = ',')]
    attrs: Option<Vec<String>>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, value_enum)]
    sim: Option<SimArg>,
    #[arg(long)]
    embed_k: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    dedup: bool,
    /// Trained checkpoint for embedding search and candidate scoring.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Candidate output; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Serialized pairs, one per line; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "span_del")]
    op: DaOperator,
    /// Augmented copies per pair.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Serialized entries, one per line; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Corpus for document frequencies; the input itself when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    /// One stopword per line; the bundled English list when omitted.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Predict(a) => predict_cmd(a),
        Cmd::Block(a) => block(a),
        Cmd::AugmentPreview(a) => augment_preview(a),
        Cmd::Summarize(a) => summarize_cmd(a),
    }
}

fn read_lines(path: Option<&Path>) -> Result<Vec<String>> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => io::read_to_string(io::stdin()).context("reading stdin")?,
    };
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Drops an optional `\t<label>` suffix.
fn pair_text(line: &str) -> &str {
    match line.rsplit_once('\t') {
        Some((pair, _)) => pair,
        None => line,
    }
}

fn apply_data_args(cfg: &mut PipelineConfig, d: &DataArgs) {
    if let Some(p) = &d.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(f) = d.format {
        cfg.data.load.format = match f {
            FormatArg::Auto => DataFormat::Auto,
            FormatArg::Magellan => DataFormat::Magellan,
            FormatArg::Serialized => DataFormat::Serialized,
        };
    }
    if d.title_only {
        cfg.data.load.title_only = true;
    }
    if let Some(s) = d.split_seed {
        cfg.data.load.split_seed = s;
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_data_args(&mut cfg, &a.data);
    if let Some(o) = a.output {
        cfg.output = o;
    }
    if let Some(n) = a.runs {
        cfg.runs = n;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if a.batch_size.is_some() {
        t.batch_size = a.batch_size;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(op) = a.da {
        cfg.augment.enabled = true;
        cfg.augment.op = op;
    }
    if let Some(v) = a.alpha {
        cfg.augment.alpha = v;
    }
    cfg.knowledge.enabled |= a.dk;
    cfg.summarize.enabled |= a.summarize;
    let e = &mut cfg.encoder;
    for (dst, src) in [
        (&mut e.embed_dim, a.embed_dim),
        (&mut e.num_layers, a.num_layers),
        (&mut e.num_heads, a.num_heads),
        (&mut e.ffn_dim, a.ffn_dim),
        (&mut e.max_seq_len, a.max_seq_len),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(v) = a.dropout {
        e.dropout = v;
    }
    if let Some(v) = a.init_range {
        e.init_range = v;
    }
    e.pre_norm |= a.pre_norm;

    let runs = run_pipeline(&cfg)?;
    for r in &runs {
        println!(
            "{}\tseed {}\tepoch {}\tvalid F1 {:.4}\ttest F1 {:.4}\t{}",
            r.result.variant,
            r.result.seed,
            r.result.epoch,
            r.result.valid_f1,
            r.result.test.f1,
            r.checkpoint.display()
        );
    }
    if runs.len() > 1 {
        let mean = runs.iter().map(|r| r.result.test.f1).sum::<f64>() / runs.len() as f64;
        println!("mean test F1 {mean:.4}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let mut cfg = PipelineConfig::default();
    apply_data_args(&mut cfg, &a.data);
    let path = cfg.data.path.context("no dataset given (--data or EMKIT_DATA_DIR)")?;
    let data = load_dataset(&path, &cfg.data.load)?;
    let pairs = match a.split {
        SplitArg::Train => data.train,
        SplitArg::Valid => data.valid,
        SplitArg::Test => data.test,
        SplitArg::All => [data.train, data.valid, data.test].concat(),
    };
    let pre = bundle.preprocessor()?;
    let report = evaluate(&bundle.model()?, &pre.examples(&pairs))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let pre = bundle.preprocessor()?;
    let model = bundle.model()?;
    let mut examples = Vec::new();
    for (i, line) in read_lines(a.input.as_deref())?.iter().enumerate() {
        let (l, r) = parse_serialized_pair(pair_text(line)).with_context(|| format!("line {}", i + 1))?;
        examples.push(emkit::encoder::Example {
            seq: pre.pair_tokens(&l, &r),
            label: Label::NoMatch,
        });
    }
    let probs = predict(&model, &examples)?;
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(out, "line\tp_match\tlabel")?;
    for (i, p) in probs.iter().enumerate() {
        writeln!(out, "{}\t{:.6}\t{}", i + 1, p[1], emkit::pipeline::argmax_label(*p).index())?;
    }
    Ok(())
}

fn block(a: BlockArgs) -> Result<()> {
    let mut bc = load_config(a.config.as_deref())?.blocking;
    if a.key_attr.is_some() {
        bc.key_attr = a.key_attr;
    }
    if let Some(v) = a.attrs {
        bc.attrs = v;
    }
    if let Some(v) = a.topk {
        bc.topk = v;
    }
    if let Some(s) = a.sim {
        bc.sim = match s {
            SimArg::Tfidf => Similarity::Tfidf,
            SimArg::Embedding => Similarity::Embedding,
        };
    }
    if let Some(v) = a.embed_k {
        bc.embed_k = v;
    }
    if let Some(v) = a.block_size {
        bc.block_size = v;
    }
    bc.dedup |= a.dedup;
    let ta = load_table(&a.table_a)?;
    let tb = load_table(&a.table_b)?;
    let bundle = a.checkpoint.as_deref().map(ModelBundle::load).transpose()?;
    if bc.sim == Similarity::Embedding && bundle.is_none() {
        bail!("--sim embedding needs --checkpoint");
    }
    let (cands, timing) = run_blocking(ta.entries(), tb.entries(), &bc, bundle.as_ref())?;

    let sink: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(sink));
    let scored = bundle.is_some();
    let mut header = vec!["idB", "idA", "score", "provenance"];
    if scored {
        header.push("p_match");
    }
    w.write_record(&header)?;
    for c in &cands {
        let mut row = vec![
            tb.ids()[c.b].clone(),
            ta.ids()[c.a].clone(),
            c.score.map(|s| format!("{s:.6}")).unwrap_or_default(),
            c.provenance.name().to_string(),
        ];
        if scored {
            row.push(c.match_prob.map(|p| format!("{p:.6}")).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    eprintln!("{} candidates", cands.len());
    eprint!("{timing}");
    Ok(())
}

fn augment_preview(a: AugmentArgs) -> Result<()> {
    let mut rng = seeded_rng(a.seed);
    let mut out = BufWriter::new(io::stdout().lock());
    for (i, line) in read_lines(a.input.as_deref())?.iter().enumerate() {
        let seq = tokenize(pair_text(line));
        writeln!(out, "before\t{seq}")?;
        for _ in 0..a.n {
            let aug = augment(&seq, a.op, &mut rng).with_context(|| format!("line {}", i + 1))?;
            writeln!(out, "after\t{aug}")?;
        }
    }
    Ok(())
}

fn summarize_cmd(a: SummarizeArgs) -> Result<()> {
    let lines = read_lines(a.input.as_deref())?;
    let corpus = match &a.corpus {
        Some(p) => read_lines(Some(p))?,
        None => lines.clone(),
    };
    // Normalize through the parser so the corpus uses canonical serialization.
    let canon = |s: &String| -> Result<String> { Ok(serialize_entry(&parse_serialized_entry(s)?)) };
    let corpus: Vec<String> = corpus.iter().map(canon).collect::<Result<_>>()?;
    let model = TfidfModel::fit(&corpus)?;
    let stop = match &a.stopwords {
        Some(p) => StopwordList::load(p)?,
        None => StopwordList::english(),
    };
    let mut out = BufWriter::new(io::stdout().lock());
    for line in &lines {
        writeln!(out, "{}", summarize(&canon(line)?, &model, &stop, a.max_len))?;
    }
    Ok(())
}
