//! Restoration inference over texts with mask cells: parallel filling,
//! greedy iterative filling, and the step-wise variant behind interactive
//! sessions.
//!
//! Positions are 0-based cell indices into the query text (boundaries are
//! added internally).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_cells, Cell, Dynasty, Period, Token, Vocabulary, BOS, EOS, MASK};
use crate::encoder::{Batch, EncoderModel, Head, Mode, ModelError, Scalar};
use crate::evaluation::rank_top_k;
use crate::glyphnet::GlyphNet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("query has no mask")]
    NoMask,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("empty text")]
    Empty,
    #[error("sequence of {len} cells exceeds the model limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unparseable text: {0}")]
    Parse(String),
    #[error("position {0} is not a mask")]
    NotAMask(usize),
    #[error("token {0:?} cannot be restored")]
    BadToken(String),
    #[error("vocabulary of {vocab} entries does not match model of {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Parallel,
    Greedy,
    Interactive,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parallel" => Ok(DecodeMode::Parallel),
            "greedy" => Ok(DecodeMode::Greedy),
            "interactive" => Ok(DecodeMode::Interactive),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: usize,
    pub surface: String,
    pub log_prob: f64,
    pub family: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionCandidates {
    pub position: usize,
    pub candidates: Vec<Candidate>,
}

/// Ranked candidates per masked position, ordered by position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub positions: Vec<PositionCandidates>,
}

impl CandidateSet {
    pub fn at(&self, position: usize) -> Option<&PositionCandidates> {
        self.positions.iter().find(|p| p.position == position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    /// Candidates of each position as seen at the step it was committed.
    pub candidates: CandidateSet,
    /// Positions in commit order.
    pub order: Vec<usize>,
    /// The query with every mask replaced by its committed token.
    pub filled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatingDistribution {
    pub dynasty: Vec<(Dynasty, f64)>,
    pub period: Vec<(Period, f64)>,
}

/// Read-only view of a model, its vocabulary and glyph net.
#[derive(Debug, Clone, Copy)]
pub struct Restorer<'a, T> {
    model: &'a EncoderModel<T>,
    vocab: &'a Vocabulary,
    net: &'a GlyphNet,
}

impl<'a, T: Scalar> Restorer<'a, T> {
    pub fn new(model: &'a EncoderModel<T>, vocab: &'a Vocabulary, net: &'a GlyphNet) -> Result<Self, DecodeError> {
        if vocab.len() != model.vocab_size || net.universe_size() != vocab.len() {
            return Err(DecodeError::VocabMismatch {
                vocab: vocab.len(),
                model: model.vocab_size,
            });
        }
        Ok(Restorer { model, vocab, net })
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    /// Encodes query text. `[MASK]` and `□` become masks; `{UNK:n}` cells
    /// become masks only when `mask_undeciphered` is set.
    pub fn parse(&self, text: &str, mask_undeciphered: bool) -> Result<Vec<usize>, DecodeError> {
        let cells = tokenize_cells(text, true).map_err(DecodeError::Parse)?;
        cells
            .into_iter()
            .map(|c| match c {
                Cell::Mask | Cell::Token(Token::Unreadable) => Ok(MASK),
                Cell::Token(Token::Undeciphered(_)) if mask_undeciphered => Ok(MASK),
                Cell::Token(t) => self
                    .vocab
                    .index_of(&t)
                    .ok_or_else(|| DecodeError::UnknownToken(t.surface())),
            })
            .collect()
    }

    pub fn render(&self, cells: &[usize]) -> String {
        cells.iter().map(|&c| self.vocab.token(c).unwrap_or("?")).collect()
    }

    fn check_cells(&self, cells: &[usize]) -> Result<(), DecodeError> {
        if cells.is_empty() {
            return Err(DecodeError::Empty);
        }
        let max = self.model.config.max_seq_len.saturating_sub(2);
        if cells.len() > max {
            return Err(DecodeError::TooLong { len: cells.len(), max });
        }
        if let Some(&c) = cells.iter().find(|&&c| c >= self.vocab.len()) {
            return Err(DecodeError::UnknownToken(format!("#{c}")));
        }
        Ok(())
    }

    fn check_query(&self, cells: &[usize], k: usize) -> Result<(), DecodeError> {
        self.check_cells(cells)?;
        if k == 0 {
            return Err(DecodeError::ZeroK);
        }
        if !cells.contains(&MASK) {
            return Err(DecodeError::NoMask);
        }
        Ok(())
    }

    fn with_boundaries(cells: &[usize]) -> Vec<usize> {
        let mut seq = Vec::with_capacity(cells.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(cells);
        seq.push(EOS);
        seq
    }

    /// One eval-mode pass; every mask predicted from the same context.
    fn predict(&self, cells: &[usize], k: usize) -> Result<CandidateSet, DecodeError> {
        let masks: Vec<(usize, usize)> = cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == MASK)
            .map(|(p, _)| (p + 1, MASK))
            .collect();
        if masks.is_empty() {
            return Ok(CandidateSet::default());
        }
        let batch = Batch::from_sequences(&[Self::with_boundaries(cells)], std::slice::from_ref(&masks));
        let (logp, _) = self.model.forward_mlm(&batch, Mode::Eval)?;
        let reserved = self.vocab.reserved();
        let positions = masks
            .iter()
            .enumerate()
            .map(|(i, &(p, _))| {
                let row = logp.row(i);
                let ranked = rank_top_k(row.as_slice().expect("standard layout"), k, |t| t >= reserved);
                PositionCandidates {
                    position: p - 1,
                    candidates: ranked
                        .into_iter()
                        .map(|r| Candidate {
                            token: r.token,
                            surface: self.vocab.token(r.token).unwrap_or_default().to_string(),
                            log_prob: r.score,
                            family: self.net.family_of(r.token).expect("net covers vocabulary").0,
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(CandidateSet { positions })
    }

    pub fn restore_parallel(&self, cells: &[usize], k: usize) -> Result<CandidateSet, DecodeError> {
        self.check_query(cells, k)?;
        self.predict(cells, k)
    }

    /// Commits the most confident mask (highest top-1 log-probability, ties
    /// to the smaller position) and re-predicts until no mask is left.
    pub fn restore_greedy(&self, cells: &[usize], k: usize) -> Result<GreedyOutcome, DecodeError> {
        self.check_query(cells, k)?;
        let mut current = cells.to_vec();
        let mut committed = Vec::new();
        let mut order = Vec::new();
        loop {
            let set = self.predict(&current, k)?;
            let best = set
                .positions
                .iter()
                .filter(|p| !p.candidates.is_empty())
                .fold(None::<&PositionCandidates>, |best, p| match best {
                    Some(b) if b.candidates[0].log_prob >= p.candidates[0].log_prob => Some(b),
                    _ => Some(p),
                });
            let Some(best) = best else { break };
            current[best.position] = best.candidates[0].token;
            order.push(best.position);
            committed.push(best.clone());
        }
        committed.sort_by_key(|p| p.position);
        Ok(GreedyOutcome {
            candidates: CandidateSet { positions: committed },
            order,
            filled: current,
        })
    }

    /// Candidates for the masks left after applying human-accepted tokens.
    /// A pure function of its inputs.
    pub fn restore_step(
        &self,
        cells: &[usize],
        accepted: &BTreeMap<usize, usize>,
        k: usize,
    ) -> Result<CandidateSet, DecodeError> {
        self.check_query(cells, k)?;
        let filled = self.apply_accepted(cells, accepted)?;
        self.predict(&filled, k)
    }

    pub fn apply_accepted(&self, cells: &[usize], accepted: &BTreeMap<usize, usize>) -> Result<Vec<usize>, DecodeError> {
        let mut filled = cells.to_vec();
        for (&pos, &tok) in accepted {
            if cells.get(pos) != Some(&MASK) {
                return Err(DecodeError::NotAMask(pos));
            }
            if tok < self.vocab.reserved() || tok >= self.vocab.len() {
                return Err(DecodeError::BadToken(self.vocab.token(tok).unwrap_or("?").to_string()));
            }
            filled[pos] = tok;
        }
        Ok(filled)
    }

    /// Dynasty and period probabilities for a text (masks allowed).
    pub fn date(&self, cells: &[usize]) -> Result<DatingDistribution, DecodeError> {
        self.check_cells(cells)?;
        let batch = Batch::from_sequences(&[Self::with_boundaries(cells)], &[Vec::new()]);
        let trace = self.model.encode(&batch, Mode::Eval)?;
        let probs = |head| -> Vec<f64> {
            self.model
                .classify_log_probs(&trace, head)
                .row(0)
                .iter()
                .map(|x| x.to_f64().unwrap().exp())
                .collect()
        };
        Ok(DatingDistribution {
            dynasty: Dynasty::ALL.iter().copied().zip(probs(Head::Dynasty)).collect(),
            period: Period::ALL.iter().copied().zip(probs(Head::Period)).collect(),
        })
    }
}
