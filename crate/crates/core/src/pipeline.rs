//! File-level pipeline stages: corpus preparation, training, fine-tuning and
//! evaluation. Every artifact is written atomically into an output
//! directory, and every stage is deterministic in its seed.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, StageMeta};
use crate::corpus::{
    apply_patches, audit, build_vocab_with, deduplicate, filter_short, parse_corpus, parse_patches, Corpus,
    CorpusError, CorpusKind, Token, TokenTypeReport, Vocabulary,
};
use crate::encoder::{Head, ModelError};
use crate::evaluation::{
    dating_results, representation_report, restoration_results, DatingReport, EvalReport, RestorationReport,
    TargetFilter, DEFAULT_KS,
};
use crate::files::write_atomic;
use crate::glyphnet::{build_families, parse_pairs, AllographPair, GlyphNet, GlyphNetError};
use crate::trainer::{
    encode_corpus, fine_tune_dating, run, FinetuneConfig, FinetuneRecord, RunConfig, Schedule, Stage, TrainError,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const DEDUP_FILE: &str = "dedup.json";
pub const AUDIT_JSON: &str = "audit.json";
pub const AUDIT_TEXT: &str = "audit.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "trainlog.jsonl";
pub const FINETUNE_LOG: &str = "finetunelog.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}: {source}")]
    Pairs { path: PathBuf, source: GlyphNetError },
    #[error(transparent)]
    GlyphNet(#[from] GlyphNetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Training diverged rather than being fed bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::Train(TrainError::NonFinite { .. }))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn read_corpus(path: &Path, kind: CorpusKind) -> Result<Corpus, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_corpus(BufReader::new(file), kind).map_err(|source| PipelineError::Corpus {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_pairs(path: &Path) -> Result<Vec<AllographPair>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_pairs(BufReader::new(file)).map_err(|source| PipelineError::Pairs {
        path: path.to_path_buf(),
        source,
    })
}

/// Glyph net over a fixed vocabulary, keeping only pairs whose endpoints
/// are both in it. Returns the net and the number of pairs dropped.
pub fn net_for_vocab(pairs: &[AllographPair], vocab: &Vocabulary) -> Result<(GlyphNet, usize), GlyphNetError> {
    let kept: Vec<AllographPair> = pairs
        .iter()
        .filter(|p| vocab.index_of_surface(&p.a).is_some() && vocab.index_of_surface(&p.b).is_some())
        .cloned()
        .collect();
    let dropped = pairs.len() - kept.len();
    Ok((build_families(&kept, vocab)?, dropped))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepOptions {
    /// Inscriptions shorter than this many tokens are removed.
    pub min_len: usize,
    pub patch: Option<PathBuf>,
    pub kind: CorpusKind,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            min_len: 2,
            patch: None,
            kind: CorpusKind::Inscriptional,
        }
    }
}

/// Contents of `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    /// Token types of the input as parsed.
    pub input: TokenTypeReport,
    pub patches_applied: usize,
    pub short_removed: usize,
    pub duplicates_removed: usize,
    /// Token types of the prepared corpus.
    pub output: TokenTypeReport,
}

impl PrepSummary {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Input\n{}", self.input.render_table());
        let _ = writeln!(
            out,
            "patches applied {}, short removed {}, duplicates removed {}\n",
            self.patches_applied, self.short_removed, self.duplicates_removed
        );
        let _ = write!(out, "Prepared\n{}", self.output.render_table());
        out
    }
}

/// Parse, patch, filter short texts, deduplicate. Writes the prepared corpus,
/// the dedup log and the audit into `out_dir`.
pub fn prep(input: &Path, out_dir: &Path, opts: &PrepOptions) -> Result<PrepSummary, PipelineError> {
    let parsed = read_corpus(input, opts.kind)?;
    let mut patches_applied = 0;
    let patched = match &opts.patch {
        Some(p) => {
            let file = File::open(p).map_err(io_err(p))?;
            let corpus_err = |source| PipelineError::Corpus {
                path: p.clone(),
                source,
            };
            let patches = parse_patches(BufReader::new(file)).map_err(corpus_err)?;
            patches_applied = patches.len();
            apply_patches(&parsed, &patches).map_err(corpus_err)?
        }
        None => parsed.clone(),
    };
    let filtered = filter_short(&patched, opts.min_len);
    let (deduped, log) = deduplicate(&filtered);
    let summary = PrepSummary {
        input: audit(&parsed),
        patches_applied,
        short_removed: patched.len() - filtered.len(),
        duplicates_removed: filtered.len() - deduped.len(),
        output: audit(&deduped),
    };
    ensure_dir(out_dir)?;
    write_file(&out_dir.join(CORPUS_FILE), deduped.to_jsonl().as_bytes())?;
    write_file(&out_dir.join(DEDUP_FILE), to_json(&log).as_bytes())?;
    write_file(&out_dir.join(AUDIT_JSON), to_json(&summary).as_bytes())?;
    write_file(&out_dir.join(AUDIT_TEXT), summary.render_text().as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainInputs {
    pub config: RunConfig,
    pub tapt: Option<PathBuf>,
    pub dapt: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Further corpora whose tokens join the vocabulary without being
    /// trained on, typically the test split.
    pub vocab_from: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub stages: Vec<Stage>,
    pub steps: u64,
    pub vocab_size: usize,
    pub families: usize,
    pub final_loss: Option<f64>,
}

/// Builds the vocabulary from every supplied corpus and the pair endpoints,
/// trains, and writes checkpoint, step log and resolved config.
pub fn train(inputs: &TrainInputs, out_dir: &Path) -> Result<TrainSummary, PipelineError> {
    let config = &inputs.config;
    config.validate()?;
    let tapt = inputs
        .tapt
        .as_deref()
        .map(|p| read_corpus(p, CorpusKind::Inscriptional))
        .transpose()?;
    let dapt = inputs.dapt.as_deref().map(|p| read_corpus(p, CorpusKind::Auxiliary)).transpose()?;
    let extra = inputs
        .vocab_from
        .iter()
        .map(|p| read_corpus(p, CorpusKind::Inscriptional))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs = inputs.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
    let corpora: Vec<&Corpus> = tapt.iter().chain(dapt.iter()).chain(extra.iter()).collect();
    let vocab = build_vocab_with(&corpora, pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]))
        .map_err(|e| PipelineError::Invalid(format!("vocabulary: {e}")))?;
    let net = build_families(&pairs, &vocab)?;
    let max = config.encoder.max_seq_len;
    let tapt_enc = tapt.as_ref().map(|c| encode_corpus(c, &vocab, max)).transpose()?;
    let dapt_enc = dapt.as_ref().map(|c| encode_corpus(c, &vocab, max)).transpose()?;
    let out = run(config, dapt_enc.as_ref(), tapt_enc.as_ref(), &net, &vocab)?;
    let meta = StageMeta {
        run: Some(config.clone()),
        stages: out.stages.clone(),
        steps: out.log.steps.len() as u64,
        seen_tokens: out.seen_tokens.iter().copied().collect(),
        finetuned_heads: Vec::new(),
    };
    let ck = Checkpoint::new(out.model, vocab, meta)?;
    ensure_dir(out_dir)?;
    ck.save(&out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(TRAIN_LOG), out.log.to_jsonl().as_bytes())?;
    write_file(&out_dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    Ok(TrainSummary {
        label: model_label(&ck.meta),
        stages: out.stages,
        steps: ck.meta.steps,
        vocab_size: ck.vocab.len(),
        families: net.non_singleton().count(),
        final_loss: out.log.steps.last().map(|r| r.total),
    })
}

/// Replaces tokens the vocabulary lacks with Unreadable; returns the count.
pub fn encode_leniently(corpus: &Corpus, vocab: &Vocabulary) -> (Corpus, usize) {
    let mut unknown = 0;
    let mut out = corpus.clone();
    for ins in &mut out.inscriptions {
        for t in &mut ins.tokens {
            if vocab.index_of(t).is_none() {
                *t = Token::Unreadable;
                unknown += 1;
            }
        }
    }
    (out, unknown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub heads: Vec<Head>,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Fine-tunes dating heads of a checkpoint on a labelled corpus and writes
/// the updated checkpoint and the step log into `out_dir`.
pub fn finetune(
    checkpoint: &Path,
    labelled: &Path,
    heads: &[Head],
    config: &FinetuneConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<FinetuneSummary, PipelineError> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = read_corpus(labelled, CorpusKind::Inscriptional)?;
    let (corpus, _) = encode_leniently(&corpus, &ck.vocab);
    let data = encode_corpus(&corpus, &ck.vocab, ck.model.config.max_seq_len)?;
    let (model, records) = fine_tune_dating(ck.model, &data, heads, config, seed)?;
    let mut meta = ck.meta;
    meta.stages.push(Stage::Finetune);
    for &h in heads {
        if !meta.finetuned_heads.contains(&h) {
            meta.finetuned_heads.push(h);
        }
    }
    let out = Checkpoint::new(model, ck.vocab, meta)?;
    ensure_dir(out_dir)?;
    out.save(&out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(FINETUNE_LOG), finetune_jsonl(&records).as_bytes())?;
    Ok(FinetuneSummary {
        heads: heads.to_vec(),
        steps: records.len(),
        final_loss: records.last().map(|r| r.dynasty.unwrap_or(0.0) + r.period.unwrap_or(0.0)),
    })
}

fn finetune_jsonl(records: &[FinetuneRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Short name for a trained model, e.g. `TAPT_GN+Bias`.
pub fn model_label(meta: &StageMeta) -> String {
    let Some(run) = &meta.run else {
        return "model".into();
    };
    let mut s = match run.schedule {
        Schedule::Baseline => "Baseline",
        Schedule::DAPTOnly => "DAPT",
        Schedule::TAPTOnly => "TAPT",
        Schedule::TAPTFromDAPT => "DAPT+TAPT",
    }
    .to_string();
    let mut tags = Vec::new();
    if run.use_gn_loss {
        tags.push("GN");
    }
    if run.use_bias_sampling {
        tags.push("Bias");
    }
    if !tags.is_empty() && run.schedule != Schedule::Baseline {
        s.push('_');
        s.push_str(&tags.join("+"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Restoration,
    Dating,
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restoration" => Ok(Task::Restoration),
            "dating" => Ok(Task::Dating),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub task: Task,
    pub ks: Vec<usize>,
    pub filter: TargetFilter,
    pub pairs: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: Task::Restoration,
            ks: DEFAULT_KS.to_vec(),
            filter: TargetFilter::All,
            pairs: None,
            batch_size: 64,
        }
    }
}

/// Scores a checkpoint on a test corpus. Restoration also reports family
/// cohesion of the token embeddings.
pub fn evaluate(checkpoint: &Path, test: &Path, opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = read_corpus(test, CorpusKind::Inscriptional)?;
    evaluate_loaded(&ck, &corpus, opts)
}

pub fn evaluate_loaded(ck: &Checkpoint, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    let pairs = opts.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
    let (net, _) = net_for_vocab(&pairs, &ck.vocab)?;
    let (corpus, unknown) = encode_leniently(corpus, &ck.vocab);
    let data = encode_corpus(&corpus, &ck.vocab, ck.model.config.max_seq_len)?;
    let mut report = EvalReport::new(model_label(&ck.meta));
    report.unknown_tokens = unknown;
    match opts.task {
        Task::Restoration => {
            let k = opts.ks.iter().copied().max().unwrap_or(1);
            if opts.ks.is_empty() || opts.ks.contains(&0) {
                return Err(PipelineError::Invalid("K values must be positive".into()));
            }
            let seen = ck.meta.seen_tokens.iter().copied().collect();
            let (results, split) =
                restoration_results(&ck.model, &data, &ck.vocab, &seen, opts.filter, k, opts.batch_size)?;
            report.restoration = Some(RestorationReport::new(&results, &net, &opts.ks, split));
            let table = ck.model.params.tok_emb.mapv(f64::from);
            report.representation = Some(representation_report(table.view(), &net)?);
        }
        Task::Dating => {
            if ck.meta.finetuned_heads.is_empty() {
                return Err(PipelineError::Invalid("checkpoint has no fine-tuned dating heads".into()));
            }
            let results = dating_results(&ck.model, &data, opts.batch_size)?;
            report.dating = Some(DatingReport::new(&results));
        }
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<(), PipelineError> {
    ensure_dir(out_dir)?;
    write_file(&out_dir.join(REPORT_JSON), report.to_json().as_bytes())?;
    write_file(&out_dir.join(REPORT_TEXT), report.render_text().as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}
