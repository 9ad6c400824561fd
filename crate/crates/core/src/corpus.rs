//! Inscription corpora: parsing, correction patches, filtering, deduplication,
//! vocabulary construction and token-type audits.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"id":"CCYZBI.00649","text":"伯□父{UNK:3}","dynasty":"WesternZhou","period":"Late","provenance":"..."}
//! ```
//!
//! Inside `text`, `□` marks an unreadable (damaged) character and `{UNK:n}` an
//! undeciphered glyph with the stable placeholder id `n`. Every other extended
//! grapheme cluster is one identifiable token. Whitespace is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_segmentation::UnicodeSegmentation;

pub const UNREADABLE_MARK: &str = "□";
pub const MASK_MARK: &str = "[MASK]";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty inscription")]
    EmptyInscription { line: usize },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: period given without dynasty for {id:?}")]
    PeriodWithoutDynasty { line: usize, id: String },
    #[error("patch line {line}: {message}")]
    Patch { line: usize, message: String },
    #[error("no corpora supplied")]
    NoCorpora,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Identifiable(String),
    Unreadable,
    Undeciphered(u32),
}

impl Token {
    /// The surface form used in corpus text and as the vocabulary key.
    pub fn surface(&self) -> String {
        match self {
            Token::Identifiable(s) => s.clone(),
            Token::Unreadable => UNREADABLE_MARK.to_string(),
            Token::Undeciphered(n) => format!("{{UNK:{n}}}"),
        }
    }

    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Identifiable(_) => TokenKind::Identifiable,
            Token::Unreadable => TokenKind::Unreadable,
            Token::Undeciphered(_) => TokenKind::Undeciphered,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Identifiable,
    Unreadable,
    Undeciphered,
}

/// A piece of parsed text: either a corpus token or a restoration mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Token(Token),
    Mask,
}

/// Splits encoded text into cells. `[MASK]` is recognised only when
/// `allow_mask` is set; corpus text never carries masks.
pub fn tokenize_cells(text: &str, allow_mask: bool) -> Result<Vec<Cell>, String> {
    let mut cells = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if allow_mask && rest.starts_with(MASK_MARK) {
            cells.push(Cell::Mask);
            rest = &rest[MASK_MARK.len()..];
            continue;
        }
        if let Some(after) = rest.strip_prefix("{UNK:") {
            if let Some(end) = after.find('}') {
                let digits = &after[..end];
                if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                    let id: u32 = digits
                        .parse()
                        .map_err(|_| format!("undeciphered id out of range: {digits}"))?;
                    cells.push(Cell::Token(Token::Undeciphered(id)));
                    rest = &after[end + 1..];
                    continue;
                }
            }
        }
        let cluster = rest.graphemes(true).next().expect("non-empty remainder");
        rest = &rest[cluster.len()..];
        if cluster.chars().all(char::is_whitespace) {
            continue;
        }
        if cluster == UNREADABLE_MARK {
            cells.push(Cell::Token(Token::Unreadable));
        } else {
            cells.push(Cell::Token(Token::Identifiable(cluster.to_string())));
        }
    }
    Ok(cells)
}

/// Tokenizes corpus text (no masks allowed).
pub fn tokenize(text: &str) -> Result<Vec<Token>, String> {
    tokenize_cells(text, false).map(|cells| {
        cells
            .into_iter()
            .map(|c| match c {
                Cell::Token(t) => t,
                Cell::Mask => unreachable!("masks disabled"),
            })
            .collect()
    })
}

pub fn render_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(Token::surface).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dynasty {
    Shang,
    WesternZhou,
    SpringAutumn,
    WarringStates,
}

impl Dynasty {
    pub const ALL: [Dynasty; 4] = [
        Dynasty::Shang,
        Dynasty::WesternZhou,
        Dynasty::SpringAutumn,
        Dynasty::WarringStates,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dynasty::Shang => "Shang",
            Dynasty::WesternZhou => "WesternZhou",
            Dynasty::SpringAutumn => "SpringAutumn",
            Dynasty::WarringStates => "WarringStates",
        }
    }
}

impl FromStr for Dynasty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dynasty {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Period {
    Early,
    Middle,
    Late,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::Early, Period::Middle, Period::Late];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Period::Early => "Early",
            Period::Middle => "Middle",
            Period::Late => "Late",
        }
    }
}

impl FromStr for Period {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown period {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inscription {
    pub id: String,
    pub tokens: Vec<Token>,
    pub dynasty: Option<Dynasty>,
    pub period: Option<Period>,
    pub provenance: Option<String>,
}

impl Inscription {
    pub fn text(&self) -> String {
        render_tokens(&self.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusKind {
    /// Target inscriptional corpus used for task-adaptive pretraining.
    Inscriptional,
    /// Auxiliary transmitted text used for domain-adaptive pretraining.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub inscriptions: Vec<Inscription>,
}

/// On-disk record. Unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynasty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl Corpus {
    pub fn new(kind: CorpusKind, inscriptions: Vec<Inscription>) -> Self {
        Corpus { kind, inscriptions }
    }

    pub fn len(&self) -> usize {
        self.inscriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inscriptions.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.inscriptions.iter().map(|i| i.tokens.len()).sum()
    }

    /// Serializes to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ins in &self.inscriptions {
            let rec = CorpusRecord {
                id: ins.id.clone(),
                text: ins.text(),
                dynasty: ins.dynasty.map(|d| d.name().to_string()),
                period: ins.period.map(|p| p.name().to_string()),
                provenance: ins.provenance.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn record_to_inscription(
    rec: CorpusRecord,
    kind: CorpusKind,
    line: usize,
) -> Result<Inscription, CorpusError> {
    let malformed = |message: String| CorpusError::Malformed { line, message };
    let mut tokens = tokenize(&rec.text).map_err(malformed)?;
    if tokens.is_empty() {
        return Err(CorpusError::EmptyInscription { line });
    }
    if kind == CorpusKind::Auxiliary {
        // Auxiliary text is transmitted literature: every cell is identifiable.
        tokens = tokens
            .into_iter()
            .map(|t| match t {
                Token::Identifiable(_) => t,
                other => Token::Identifiable(other.surface()),
            })
            .collect();
    }
    let dynasty = rec
        .dynasty
        .as_deref()
        .map(Dynasty::from_str)
        .transpose()
        .map_err(malformed)?;
    let period = rec
        .period
        .as_deref()
        .map(Period::from_str)
        .transpose()
        .map_err(malformed)?;
    if period.is_some() && dynasty.is_none() {
        return Err(CorpusError::PeriodWithoutDynasty { line, id: rec.id });
    }
    Ok(Inscription {
        id: rec.id,
        tokens,
        dynasty,
        period,
        provenance: rec.provenance,
    })
}

/// Parses a line-delimited corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: BufRead>(input: R, kind: CorpusKind) -> Result<Corpus, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut inscriptions = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let ins = record_to_inscription(rec, kind, line_no)?;
        if !seen.insert(ins.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: ins.id,
            });
        }
        inscriptions.push(ins);
    }
    Ok(Corpus { kind, inscriptions })
}

pub fn parse_corpus_str(input: &str, kind: CorpusKind) -> Result<Corpus, CorpusError> {
    parse_corpus(input.as_bytes(), kind)
}

/// One field-level correction, applied before filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub id: String,
    pub field: String,
    #[serde(default)]
    pub old: Option<String>,
    #[serde(default)]
    pub new: Option<String>,
    pub citation: String,
}

pub fn parse_patches<R: BufRead>(input: R) -> Result<Vec<PatchRecord>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CorpusError::Patch {
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Applies corrections in order. Each patch must name an existing inscription
/// and its `old` value must match the current field value exactly.
pub fn apply_patches(corpus: &Corpus, patches: &[PatchRecord]) -> Result<Corpus, CorpusError> {
    let mut out = corpus.clone();
    for (idx, patch) in patches.iter().enumerate() {
        let line = idx + 1;
        let err = |message: String| CorpusError::Patch { line, message };
        let ins = out
            .inscriptions
            .iter_mut()
            .find(|i| i.id == patch.id)
            .ok_or_else(|| err(format!("unknown id {:?}", patch.id)))?;
        let current = match patch.field.as_str() {
            "text" => Some(ins.text()),
            "dynasty" => ins.dynasty.map(|d| d.name().to_string()),
            "period" => ins.period.map(|p| p.name().to_string()),
            "provenance" => ins.provenance.clone(),
            other => return Err(err(format!("unknown field {other:?}"))),
        };
        if current != patch.old {
            return Err(err(format!(
                "{}.{}: expected {:?}, found {:?}",
                patch.id, patch.field, patch.old, current
            )));
        }
        match patch.field.as_str() {
            "text" => {
                let text = patch
                    .new
                    .as_deref()
                    .ok_or_else(|| err("text cannot be removed".into()))?;
                let tokens = tokenize(text).map_err(err)?;
                if tokens.is_empty() {
                    return Err(err("empty inscription".into()));
                }
                ins.tokens = tokens;
            }
            "dynasty" => {
                ins.dynasty = patch.new.as_deref().map(Dynasty::from_str).transpose().map_err(err)?;
            }
            "period" => {
                ins.period = patch.new.as_deref().map(Period::from_str).transpose().map_err(err)?;
            }
            _ => ins.provenance = patch.new.clone(),
        }
        if ins.period.is_some() && ins.dynasty.is_none() {
            return Err(err(format!("{}: period without dynasty", patch.id)));
        }
    }
    Ok(out)
}

/// Keeps inscriptions with at least `min_tokens` tokens, i.e. removes those of
/// length `<= min_tokens - 1`. Thresholds 0 and 1 keep everything.
pub fn filter_short(corpus: &Corpus, min_tokens: usize) -> Corpus {
    Corpus {
        kind: corpus.kind,
        inscriptions: corpus
            .inscriptions
            .iter()
            .filter(|i| i.tokens.len() >= min_tokens)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupGroup {
    pub representative: String,
    /// All ids sharing the token sequence, sorted, representative included.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupLog {
    pub groups: Vec<DedupGroup>,
}

/// Collapses inscriptions with identical token sequences onto the member with
/// the lexicographically smallest id. Survivors keep their input order.
pub fn deduplicate(corpus: &Corpus) -> (Corpus, DedupLog) {
    let mut by_tokens: BTreeMap<&[Token], Vec<usize>> = BTreeMap::new();
    for (i, ins) in corpus.inscriptions.iter().enumerate() {
        by_tokens.entry(ins.tokens.as_slice()).or_default().push(i);
    }
    let mut keep = vec![false; corpus.inscriptions.len()];
    let mut groups = Vec::new();
    for members in by_tokens.values() {
        let rep = *members
            .iter()
            .min_by(|&&a, &&b| corpus.inscriptions[a].id.cmp(&corpus.inscriptions[b].id))
            .expect("group non-empty");
        keep[rep] = true;
        if members.len() > 1 {
            let mut ids: Vec<String> = members
                .iter()
                .map(|&m| corpus.inscriptions[m].id.clone())
                .collect();
            ids.sort();
            groups.push(DedupGroup {
                representative: corpus.inscriptions[rep].id.clone(),
                members: ids,
            });
        }
    }
    groups.sort_by(|a, b| a.representative.cmp(&b.representative));
    let inscriptions = corpus
        .inscriptions
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(i, _)| i.clone())
        .collect();
    (
        Corpus {
            kind: corpus.kind,
            inscriptions,
        },
        DedupLog { groups },
    )
}

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNREADABLE: usize = 4;
const FIXED_RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", UNREADABLE_MARK];

/// Bidirectional token/index map.
///
/// Layout: the five fixed specials, then one entry per undeciphered
/// placeholder id (ascending), then identifiable tokens in codepoint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    entries: Vec<String>,
    index: BTreeMap<String, usize>,
    reserved: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: usize,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;
    fn try_from(f: VocabFile) -> Result<Self, Self::Error> {
        if f.reserved < FIXED_RESERVED.len() || f.reserved > f.tokens.len() {
            return Err("bad reserved block size".into());
        }
        if f.tokens[..FIXED_RESERVED.len()] != FIXED_RESERVED {
            return Err("fixed reserved entries out of place".into());
        }
        let mut index = BTreeMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocabulary {
            entries: f.tokens,
            index,
            reserved: f.reserved,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.entries,
            reserved: v.reserved,
        }
    }
}

impl Vocabulary {
    fn from_token_set(undeciphered: BTreeSet<u32>, identifiable: BTreeSet<String>) -> Self {
        let mut entries: Vec<String> = FIXED_RESERVED.iter().map(|s| s.to_string()).collect();
        entries.extend(undeciphered.iter().map(|n| Token::Undeciphered(*n).surface()));
        let reserved = entries.len();
        entries.extend(identifiable);
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            entries,
            index,
            reserved,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries in the reserved block (specials and placeholders).
    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(String::as_str)
    }

    pub fn index_of_surface(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn index_of(&self, token: &Token) -> Option<usize> {
        match token {
            Token::Unreadable => Some(UNREADABLE),
            other => self.index_of_surface(&other.surface()),
        }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn is_special(&self, index: usize) -> bool {
        index < FIXED_RESERVED.len()
    }

    /// True for Unreadable and Undeciphered entries, which never serve as
    /// training targets.
    pub fn is_unidentified(&self, index: usize) -> bool {
        index == UNREADABLE || (index >= FIXED_RESERVED.len() && index < self.reserved)
    }

    /// Encodes tokens, returning the first token missing from the vocabulary
    /// on failure.
    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<usize>, Token> {
        tokens
            .iter()
            .map(|t| self.index_of(t).ok_or_else(|| t.clone()))
            .collect()
    }

    /// Stable content hash recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.reserved as u64).to_le_bytes());
        for e in &self.entries {
            h.update((e.len() as u64).to_le_bytes());
            h.update(e.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the shared vocabulary over several corpora.
pub fn build_vocab(corpora: &[&Corpus]) -> Result<Vocabulary, CorpusError> {
    build_vocab_with(corpora, std::iter::empty::<String>())
}

/// Like [`build_vocab`], additionally registering standalone surface forms
/// (e.g. allograph pair endpoints that never occur in the corpora).
pub fn build_vocab_with<I, S>(corpora: &[&Corpus], extra: I) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if corpora.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    let mut undeciphered = BTreeSet::new();
    let mut identifiable = BTreeSet::new();
    let mut add = |t: &Token| match t {
        Token::Identifiable(s) => {
            identifiable.insert(s.clone());
        }
        Token::Undeciphered(n) => {
            undeciphered.insert(*n);
        }
        Token::Unreadable => {}
    };
    for c in corpora {
        for ins in &c.inscriptions {
            ins.tokens.iter().for_each(&mut add);
        }
    }
    for s in extra {
        let toks = tokenize(s.as_ref()).map_err(|message| CorpusError::Malformed {
            line: 0,
            message,
        })?;
        toks.iter().for_each(&mut add);
    }
    Ok(Vocabulary::from_token_set(undeciphered, identifiable))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCount {
    pub kind: TokenKind,
    pub count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTypeReport {
    pub inscriptions: usize,
    pub tokens: usize,
    pub kinds: Vec<KindCount>,
}

impl TokenTypeReport {
    pub fn count(&self, kind: TokenKind) -> usize {
        self.kinds
            .iter()
            .find(|k| k.kind == kind)
            .map_or(0, |k| k.count)
    }

    /// Plain-text table: type, count, proportion at two decimals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14} {:>10} {:>11}\n", "Type", "Count", "Proportion"));
        for k in &self.kinds {
            let label = match k.kind {
                TokenKind::Identifiable => "Identifiable",
                TokenKind::Unreadable => "Unreadable (□)",
                TokenKind::Undeciphered => "Undeciphered",
            };
            out.push_str(&format!(
                "{:<14} {:>10} {:>10.2}%\n",
                label,
                k.count,
                k.proportion * 100.0
            ));
        }
        out.push_str(&format!(
            "{} inscriptions, {} tokens\n",
            self.inscriptions, self.tokens
        ));
        out
    }
}

pub fn audit(corpus: &Corpus) -> TokenTypeReport {
    let mut counts = [0usize; 3];
    for ins in &corpus.inscriptions {
        for t in &ins.tokens {
            counts[t.kind() as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let kinds = [
        TokenKind::Identifiable,
        TokenKind::Unreadable,
        TokenKind::Undeciphered,
    ]
    .into_iter()
    .map(|kind| {
        let count = counts[kind as usize];
        KindCount {
            kind,
            count,
            proportion: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        }
    })
    .collect();
    TokenTypeReport {
        inscriptions: corpus.inscriptions.len(),
        tokens: total,
        kinds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_of(lines: &[(&str, &str)]) -> Corpus {
        let text: String = lines
            .iter()
            .map(|(id, t)| format!("{{\"id\":\"{id}\",\"text\":\"{t}\"}}\n"))
            .collect();
        parse_corpus_str(&text, CorpusKind::Inscriptional).unwrap()
    }

    #[test]
    fn unreadable_and_identifiable() {
        let c = parse_corpus_str(
            r#"{"id":"a","text":"□王","dynasty":"WesternZhou"}"#,
            CorpusKind::Inscriptional,
        )
        .unwrap();
        assert_eq!(
            c.inscriptions[0].tokens,
            vec![Token::Unreadable, Token::Identifiable("王".into())]
        );
        assert_eq!(c.inscriptions[0].dynasty, Some(Dynasty::WesternZhou));
    }

    #[test]
    fn undeciphered_placeholders() {
        let toks = tokenize("王{UNK:12}{UNK:12}{U").unwrap();
        assert_eq!(toks[1], Token::Undeciphered(12));
        assert_eq!(toks[2], Token::Undeciphered(12));
        // an unterminated brace is ordinary text
        assert_eq!(toks.len(), 5);
    }

    #[test]
    fn combining_sequences_are_atomic() {
        let toks = tokenize("e\u{301}王").unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0], Token::Identifiable("e\u{301}".into()));
    }

    #[test]
    fn parse_errors() {
        let empty = parse_corpus_str(r#"{"id":"a","text":""}"#, CorpusKind::Inscriptional);
        assert!(matches!(empty, Err(CorpusError::EmptyInscription { line: 1 })));
        assert_eq!(empty.unwrap_err().to_string(), "line 1: empty inscription");

        let unknown = parse_corpus_str(
            "{\"id\":\"a\",\"text\":\"王\"}\n{\"id\":\"b\",\"text\":\"王\",\"color\":1}",
            CorpusKind::Inscriptional,
        );
        assert!(matches!(unknown, Err(CorpusError::Malformed { line: 2, .. })));

        let dup = parse_corpus_str(
            "{\"id\":\"a\",\"text\":\"王\"}\n{\"id\":\"a\",\"text\":\"公\"}",
            CorpusKind::Inscriptional,
        );
        assert!(matches!(dup, Err(CorpusError::DuplicateId { line: 2, .. })));

        let per = parse_corpus_str(
            r#"{"id":"a","text":"王","period":"Late"}"#,
            CorpusKind::Inscriptional,
        );
        assert!(matches!(per, Err(CorpusError::PeriodWithoutDynasty { .. })));

        let bad_dyn = parse_corpus_str(
            r#"{"id":"a","text":"王","dynasty":"Han"}"#,
            CorpusKind::Inscriptional,
        );
        assert!(matches!(bad_dyn, Err(CorpusError::Malformed { .. })));
    }

    #[test]
    fn auxiliary_text_is_all_identifiable() {
        let c = parse_corpus_str(r#"{"id":"a","text":"□子"}"#, CorpusKind::Auxiliary).unwrap();
        assert!(c.inscriptions[0]
            .tokens
            .iter()
            .all(|t| t.kind() == TokenKind::Identifiable));
    }

    #[test]
    fn filter_short_thresholds() {
        let c = corpus_of(&[("a", "王"), ("b", "王公"), ("c", "王公伯子孫")]);
        let lens = |c: &Corpus| c.inscriptions.iter().map(|i| i.tokens.len()).collect::<Vec<_>>();
        assert_eq!(lens(&filter_short(&c, 2)), vec![2, 5]);
        assert_eq!(filter_short(&c, 0), c);
        assert_eq!(filter_short(&c, 1), c);
    }

    #[test]
    fn dedup_ten_copies() {
        let lines: Vec<(String, String)> = (0..10)
            .map(|i| (format!("CCYZBI.{:05}", 658 - i), "伯先父鬲".to_string()))
            .collect();
        let refs: Vec<(&str, &str)> = lines.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let (out, log) = deduplicate(&corpus_of(&refs));
        assert_eq!(out.len(), 1);
        assert_eq!(out.inscriptions[0].id, "CCYZBI.00649");
        assert_eq!(log.groups.len(), 1);
        assert_eq!(log.groups[0].members.len(), 10);
    }

    #[test]
    fn dedup_distinct_and_identity() {
        let c = corpus_of(&[("a", "王公"), ("b", "王伯")]);
        let (out, log) = deduplicate(&c);
        assert_eq!(out, c);
        assert!(log.groups.is_empty());
    }

    #[test]
    fn vocab_layout() {
        let c = corpus_of(&[("a", "王公{UNK:7}□"), ("b", "公{UNK:2}")]);
        let v = build_vocab(&[&c]).unwrap();
        assert_eq!(&v.entries()[..5], &FIXED_RESERVED);
        assert_eq!(v.token(5), Some("{UNK:2}"));
        assert_eq!(v.token(6), Some("{UNK:7}"));
        assert_eq!(v.reserved(), 7);
        // 公 U+516C < 王 U+738B
        assert_eq!(v.token(7), Some("公"));
        assert_eq!(v.token(8), Some("王"));
        assert!(v.is_unidentified(5) && v.is_unidentified(UNREADABLE));
        assert!(!v.is_unidentified(7));
        assert_ne!(v.index_of(&Token::Undeciphered(2)), Some(UNREADABLE));
        assert_eq!(build_vocab(&[&c]).unwrap(), v);

        let d = corpus_of(&[("x", "王子")]);
        let shared = build_vocab(&[&c, &d]).unwrap();
        assert_eq!(shared.len(), v.len() + 1);
        assert!(matches!(build_vocab(&[]), Err(CorpusError::NoCorpora)));
    }

    #[test]
    fn patches_apply_and_check_old_values() {
        let c = corpus_of(&[("a", "王□")]);
        let patches = vec![PatchRecord {
            id: "a".into(),
            field: "text".into(),
            old: Some("王□".into()),
            new: Some("王公".into()),
            citation: "later reading".into(),
        }];
        let out = apply_patches(&c, &patches).unwrap();
        assert_eq!(out.inscriptions[0].text(), "王公");
        assert!(apply_patches(&out, &patches).is_err());
    }

    #[test]
    fn audit_counts() {
        let c = corpus_of(&[("a", "王□{UNK:1}"), ("b", "公伯")]);
        let r = audit(&c);
        assert_eq!(r.count(TokenKind::Identifiable), 3);
        assert_eq!(r.count(TokenKind::Unreadable), 1);
        assert_eq!(r.count(TokenKind::Undeciphered), 1);
        let no_unk = audit(&corpus_of(&[("a", "王公")]));
        assert_eq!(no_unk.count(TokenKind::Undeciphered), 0);
        assert_eq!(no_unk.count(TokenKind::Unreadable), 0);
    }

    fn arb_token() -> impl Strategy<Value = Token> {
        prop_oneof![
            6 => (0x4E00u32..0x4F00).prop_map(|c| Token::Identifiable(char::from_u32(c).unwrap().to_string())),
            1 => Just(Token::Unreadable),
            1 => (0u32..20).prop_map(Token::Undeciphered),
        ]
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec(
            (prop::collection::vec(arb_token(), 1..8), prop::option::of(0usize..4), prop::option::of(0usize..3)),
            0..25,
        )
        .prop_map(|rows| {
            let inscriptions = rows
                .into_iter()
                .enumerate()
                .map(|(i, (tokens, d, p))| {
                    let dynasty = d.and_then(Dynasty::from_index);
                    Inscription {
                        id: format!("id{:03}", (i * 7919) % 1000),
                        tokens,
                        dynasty,
                        period: dynasty.and(p.and_then(Period::from_index)),
                        provenance: None,
                    }
                })
                .collect();
            Corpus::new(CorpusKind::Inscriptional, inscriptions)
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(c in arb_corpus()) {
            let text = c.to_jsonl();
            let back = parse_corpus_str(&text, CorpusKind::Inscriptional).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_jsonl(), text);
        }

        #[test]
        fn filter_and_dedup_commute(c in arb_corpus(), min in 0usize..5) {
            let a = deduplicate(&filter_short(&c, min)).0;
            let b = filter_short(&deduplicate(&c).0, min);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn audit_proportions_sum_to_one(c in arb_corpus()) {
            let r = audit(&c);
            if r.tokens > 0 {
                let s: f64 = r.kinds.iter().map(|k| k.proportion).sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn placeholders_get_distinct_entries(c in arb_corpus()) {
            prop_assume!(!c.is_empty());
            let v = build_vocab(&[&c]).unwrap();
            for ins in &c.inscriptions {
                for t in &ins.tokens {
                    let idx = v.index_of(t).unwrap();
                    if let Token::Undeciphered(_) = t {
                        prop_assert_ne!(idx, UNREADABLE);
                        prop_assert!(v.is_unidentified(idx));
                    }
                }
            }
        }
    }
}
