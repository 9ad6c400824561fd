//! `glyphmlm`: corpus preparation, glyph families, training, fine-tuning,
//! evaluation, restoration and the HTTP service behind one command.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use glyphmlm_client::{Client, ClientError};
use glyphmlm_core::api::{self, family_view, RestoreRequest, RestoreResponse};
use glyphmlm_core::checkpoint::Checkpoint;
use glyphmlm_core::corpus::{build_vocab_with, Corpus, CorpusKind};
use glyphmlm_core::decode::{DecodeError, DecodeMode, Restorer};
use glyphmlm_core::encoder::Head;
use glyphmlm_core::evaluation::TargetFilter;
use glyphmlm_core::glyphnet::build_families;
use glyphmlm_core::pipeline::{
    self, net_for_vocab, read_corpus, read_pairs, EvalOptions, PipelineError, PrepOptions, Task, TrainInputs,
};
use glyphmlm_core::trainer::{RunConfig, TrainError};
use glyphmlm_service::{AppState, ServiceConfig};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

/// Name of the run configuration looked up in the config directory.
const CONFIG_NAME: &str = "train.toml";

#[derive(Parser)]
#[command(name = "glyphmlm", version, about = "Allograph-aware masked language modeling for inscriptions")]
struct Cli {
    /// Directory holding a default `train.toml`.
    #[arg(long, global = true, env = "GLYPHMLM_CONFIG_DIR")]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, patch, filter and deduplicate a corpus; write an audit.
    Prep(PrepArgs),
    /// Build glyph families from a pair file and list them.
    Glyphnet(GlyphnetArgs),
    /// Run a pretraining schedule and write a checkpoint.
    Train(TrainArgs),
    /// Fine-tune dating heads on a labelled corpus.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a test corpus.
    Eval(EvalArgs),
    /// Propose restorations for masked cells.
    Restore(RestoreArgs),
    /// Re-render a saved evaluation report.
    Report(ReportArgs),
    /// Serve restoration, sessions, families and dating over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Structured,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Inscriptional,
    Auxiliary,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Remove inscriptions with fewer tokens than this.
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long)]
    patch: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "inscriptional")]
    kind: KindArg,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct GlyphnetArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Corpora whose tokens join the universe as singletons.
    #[arg(long)]
    vocab_from: Vec<PathBuf>,
    /// Show only the family of this token.
    #[arg(long)]
    token: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); defaults to `train.toml` in the config
    /// directory, then to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tapt: Option<PathBuf>,
    #[arg(long)]
    dapt: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Extra corpora for the vocabulary only, e.g. the test split.
    #[arg(long)]
    vocab_from: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    labelled: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Heads to train.
    #[arg(long, value_delimiter = ',', default_value = "dynasty,period")]
    heads: Vec<String>,
    /// Reads the `[finetune]` table; same lookup as `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train only the heads.
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Restoration,
    Dating,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    All,
    Unseen,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "restoration")]
    task: TaskArg,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// Restoration targets: every identifiable position, or only forms
    /// unseen in training.
    #[arg(long, value_enum, default_value = "all")]
    filter: FilterArg,
    /// Directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Greedy,
}

#[derive(Args)]
struct RestoreArgs {
    /// Local checkpoint.
    #[arg(long, required_unless_present = "server", conflicts_with = "server")]
    checkpoint: Option<PathBuf>,
    /// Pair file for family annotations with a local checkpoint.
    #[arg(long, conflicts_with = "server")]
    pairs: Option<PathBuf>,
    /// Base URL of a running service.
    #[arg(long)]
    server: Option<String>,
    /// Text with `[MASK]` or `□` cells.
    #[arg(long)]
    text: String,
    #[arg(long, value_enum, default_value = "parallel")]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Also restore `{UNK:n}` cells.
    #[arg(long)]
    mask_undeciphered: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Append-only session log; sessions are in-memory only without it.
    #[arg(long)]
    session_log: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: DATA,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: if e.is_numeric() { NUMERIC } else { DATA },
            message: e.to_string(),
        }
    }
}

impl From<DecodeError> for Failure {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::NoMask | DecodeError::ZeroK | DecodeError::Empty => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.status() {
            Some(400) => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

fn emit<T: Serialize>(format: Format, text: &str, value: &T) {
    match format {
        Format::Text => print!("{text}"),
        Format::Structured => println!("{}", serde_json::to_string_pretty(value).expect("output serializes")),
    }
}

fn load_config(explicit: Option<&Path>, dir: Option<&Path>) -> Result<RunConfig, Failure> {
    let path = match (explicit, dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => Some(d.join(CONFIG_NAME)).filter(|p| p.exists()),
        (None, None) => None,
    };
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    RunConfig::from_toml(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn prep(a: PrepArgs) -> Result<(), Failure> {
    let opts = PrepOptions {
        min_len: a.min_len,
        patch: a.patch,
        kind: match a.kind {
            KindArg::Inscriptional => CorpusKind::Inscriptional,
            KindArg::Auxiliary => CorpusKind::Auxiliary,
        },
    };
    let summary = pipeline::prep(&a.input, &a.out, &opts)?;
    emit(a.format, &summary.render_text(), &summary);
    Ok(())
}

#[derive(Serialize)]
struct FamilyListing {
    families: usize,
    non_singleton: usize,
    glyph_tokens: usize,
    sizes: Vec<usize>,
    members: Vec<Vec<String>>,
}

fn glyphnet(a: GlyphnetArgs) -> Result<(), Failure> {
    let pairs = read_pairs(&a.pairs)?;
    let corpora = a
        .vocab_from
        .iter()
        .map(|p| read_corpus(p, CorpusKind::Inscriptional))
        .collect::<Result<Vec<Corpus>, _>>()?;
    // Pair endpoints alone define the universe when no corpus is given.
    let empty = Corpus::new(CorpusKind::Inscriptional, Vec::new());
    let mut refs: Vec<&Corpus> = corpora.iter().collect();
    if refs.is_empty() {
        refs.push(&empty);
    }
    let vocab = build_vocab_with(&refs, pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]))
        .map_err(|e| Failure::data(e.to_string()))?;
    let net = build_families(&pairs, &vocab).map_err(|e| Failure::data(e.to_string()))?;
    if let Some(token) = a.token {
        let view = family_view(&net, &vocab, &token).ok_or_else(|| Failure::data(format!("unknown token {token:?}")))?;
        let text = format!("family {} ({}): {}\n", view.family, view.canonical, view.members.join(" "));
        emit(a.format, &text, &view);
        return Ok(());
    }
    let name = |t: usize| vocab.token(t).unwrap_or_default().to_string();
    let listing = FamilyListing {
        families: net.families().len() - vocab.reserved(),
        non_singleton: net.non_singleton().count(),
        glyph_tokens: net.glyph_token_count(),
        sizes: net.size_histogram(),
        members: net.non_singleton().map(|f| f.members.iter().map(|&m| name(m)).collect()).collect(),
    };
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in &listing.sizes {
        *hist.entry(s).or_default() += 1;
    }
    let mut text = format!(
        "{} families over {} tokens; {} with two or more members covering {} glyph tokens\nsizes:",
        listing.families,
        listing.families + net.glyph_token_count() - listing.non_singleton,
        listing.non_singleton,
        listing.glyph_tokens
    );
    for (size, n) in &hist {
        text.push_str(&format!(" {size}x{n}"));
    }
    text.push('\n');
    for m in &listing.members {
        text.push_str(&m.join(" "));
        text.push('\n');
    }
    emit(a.format, &text, &listing);
    Ok(())
}

fn train(a: TrainArgs, config_dir: Option<&Path>) -> Result<(), Failure> {
    let mut config = load_config(a.config.as_deref(), config_dir)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let inputs = TrainInputs {
        config,
        tapt: a.tapt,
        dapt: a.dapt,
        pairs: a.pairs,
        vocab_from: a.vocab_from,
    };
    let started = Instant::now();
    let summary = pipeline::train(&inputs, &a.out).map_err(|e| match e {
        PipelineError::Train(TrainError::InvalidConfig(m)) => Failure::usage(m),
        PipelineError::Train(e @ TrainError::MissingCorpus { .. }) => Failure::usage(e.to_string()),
        other => other.into(),
    })?;
    eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
    let text = format!(
        "{}: stages {:?}, {} steps, vocabulary {}, {} families, final loss {}\nwrote {}\n",
        summary.label,
        summary.stages,
        summary.steps,
        summary.vocab_size,
        summary.families,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        a.out.display()
    );
    emit(a.format, &text, &summary);
    Ok(())
}

fn finetune(a: FinetuneArgs, config_dir: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref(), config_dir)?.finetune;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.freeze_encoder |= a.freeze_encoder;
    let heads = a
        .heads
        .iter()
        .map(|h| h.parse::<Head>().map_err(|e| Failure::usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = pipeline::finetune(&a.checkpoint, &a.labelled, &heads, &cfg, a.seed, &a.out)?;
    let text = format!(
        "fine-tuned {:?}: {} steps, final loss {}\nwrote {}\n",
        summary.heads,
        summary.steps,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        a.out.display()
    );
    emit(a.format, &text, &summary);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Failure::usage("K values must be positive"));
    }
    let opts = EvalOptions {
        task: match a.task {
            TaskArg::Restoration => Task::Restoration,
            TaskArg::Dating => Task::Dating,
        },
        ks: a.k,
        filter: match a.filter {
            FilterArg::All => TargetFilter::All,
            FilterArg::Unseen => TargetFilter::Unseen,
        },
        pairs: a.pairs,
        ..EvalOptions::default()
    };
    let report = pipeline::evaluate(&a.checkpoint, &a.test, &opts)?;
    if let Some(out) = &a.out {
        pipeline::write_report(&report, out)?;
    }
    emit(a.format, &report.render_text(), &report);
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let report = pipeline::read_report(&a.report)?;
    emit(a.format, &report.render_text(), &report);
    Ok(())
}

/// Candidate listing with family annotations from `members_of`.
fn render_restoration(resp: &RestoreResponse, mut members_of: impl FnMut(&str) -> Vec<String>) -> String {
    let mut out = format!("{}\n", resp.text);
    for p in &resp.positions {
        out.push_str(&format!("position {}\n", p.position));
        for (rank, c) in p.candidates.iter().enumerate() {
            let members = members_of(&c.surface);
            let family = if members.len() > 1 {
                format!("  family {}: {}", c.family, members.join(" "))
            } else {
                String::new()
            };
            out.push_str(&format!("  {:>2}. {}  {:>9.4}{family}\n", rank + 1, c.surface, c.log_prob));
        }
    }
    if let (Some(order), Some(restored)) = (&resp.order, &resp.restored) {
        let order: Vec<String> = order.iter().map(usize::to_string).collect();
        out.push_str(&format!("fill order {}\nrestored {restored}\n", order.join(", ")));
    }
    out
}

fn restore(a: RestoreArgs) -> Result<(), Failure> {
    let req = RestoreRequest {
        text: a.text,
        mode: match a.mode {
            ModeArg::Parallel => DecodeMode::Parallel,
            ModeArg::Greedy => DecodeMode::Greedy,
        },
        k: a.k,
        mask_undeciphered: a.mask_undeciphered,
    };
    if let Some(server) = a.server {
        let client = Client::new(&server).map_err(|e| Failure::usage(e.to_string()))?;
        let resp = client.restore(&req)?;
        let mut cache: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let text = render_restoration(&resp, |s| {
            cache
                .entry(s.to_string())
                .or_insert_with(|| client.family(s).map(|f| f.members).unwrap_or_default())
                .clone()
        });
        emit(a.format, &text, &resp);
        return Ok(());
    }
    let path = a.checkpoint.expect("clap requires a checkpoint without --server");
    let ck = Checkpoint::load(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let pairs = a.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
    let (net, _) = net_for_vocab(&pairs, &ck.vocab).map_err(|e| Failure::data(e.to_string()))?;
    let r = Restorer::new(&ck.model, &ck.vocab, &net)?;
    let resp = api::restore(&r, &req)?;
    let text = render_restoration(&resp, |s| family_view(&net, &ck.vocab, s).map(|f| f.members).unwrap_or_default());
    emit(a.format, &text, &resp);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let config = ServiceConfig {
        checkpoint: a.checkpoint,
        pairs: a.pairs,
        session_log: a.session_log,
    };
    let state = AppState::load(&config).map_err(|e| Failure::data(e.to_string()))?;
    let info = state.info().clone();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::data(e.to_string()))?;
    rt.block_on(glyphmlm_service::serve(state, SocketAddr::new(a.host, a.port), |addr| {
        eprintln!(
            "serving {} ({} families) on http://{addr}; sessions {}",
            info.model,
            info.families,
            if info.persistent_sessions { "persisted" } else { "in memory only" }
        );
    }))
    .map_err(|e| Failure::data(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let dir = cli.config_dir.as_deref();
    let result = match cli.command {
        Command::Prep(a) => prep(a),
        Command::Glyphnet(a) => glyphnet(a),
        Command::Train(a) => train(a, dir),
        Command::Finetune(a) => finetune(a, dir),
        Command::Eval(a) => eval(a),
        Command::Restore(a) => restore(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
