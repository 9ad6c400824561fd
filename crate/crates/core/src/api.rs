//! Request and response payloads of the restoration service, and the pure
//! functions that compute them. The command line uses the same functions
//! when it runs against a local checkpoint, so both paths agree exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, MASK};
use crate::decode::{DecodeError, DecodeMode, PositionCandidates, Restorer};
use crate::encoder::Scalar;
use crate::glyphnet::{AllographPair, GlyphNet};

pub const API_SCHEMA: &str = "glyphmlm-api/v1";

fn default_k() -> usize {
    5
}

fn default_mode() -> DecodeMode {
    DecodeMode::Parallel
}

fn schema() -> String {
    API_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreRequest {
    /// Text with `[MASK]` or `□` cells to restore.
    pub text: String,
    #[serde(default = "default_mode")]
    pub mode: DecodeMode,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Also restore `{UNK:n}` cells.
    #[serde(default)]
    pub mask_undeciphered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub schema: String,
    pub mode: DecodeMode,
    pub text: String,
    /// Ranked candidates per mask, by position. In greedy mode, as seen at
    /// the step each position was committed.
    pub positions: Vec<PositionCandidates>,
    /// Greedy commit order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order: Option<Vec<usize>>,
    /// Greedy result with every mask filled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub restored: Option<String>,
}

/// Parallel and greedy filling. Interactive mode returns the opening
/// candidates of a session, which equal the parallel ones.
pub fn restore<T: Scalar>(r: &Restorer<'_, T>, req: &RestoreRequest) -> Result<RestoreResponse, DecodeError> {
    let cells = r.parse(&req.text, req.mask_undeciphered)?;
    let mut resp = RestoreResponse {
        schema: schema(),
        mode: req.mode,
        text: req.text.clone(),
        positions: Vec::new(),
        order: None,
        restored: None,
    };
    match req.mode {
        DecodeMode::Parallel | DecodeMode::Interactive => {
            resp.positions = r.restore_parallel(&cells, req.k)?.positions;
        }
        DecodeMode::Greedy => {
            let g = r.restore_greedy(&cells, req.k)?;
            resp.positions = g.candidates.positions;
            resp.order = Some(g.order);
            resp.restored = Some(r.render(&g.filled));
        }
    }
    Ok(resp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub text: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub mask_undeciphered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptRequest {
    pub position: usize,
    /// Surface form of the accepted token.
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub position: usize,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema: String,
    pub id: String,
    pub text: String,
    pub k: usize,
    /// Acceptances in the order they were made; the undo stack.
    pub accepted: Vec<Accepted>,
    /// The text with accepted tokens filled in.
    pub current: String,
    /// Mask positions still open.
    pub remaining: Vec<usize>,
    /// Candidates for the open positions, conditioned on every acceptance.
    pub candidates: Vec<PositionCandidates>,
    pub complete: bool,
}

/// Interactive restoration state. The current state is a pure function of
/// the query and the acceptance history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub text: String,
    pub cells: Vec<usize>,
    pub k: usize,
    pub history: Vec<(usize, usize)>,
}

impl Session {
    /// Validates the query by computing its opening candidates.
    pub fn open<T: Scalar>(r: &Restorer<'_, T>, id: String, req: &SessionRequest) -> Result<Self, DecodeError> {
        let cells = r.parse(&req.text, req.mask_undeciphered)?;
        r.restore_parallel(&cells, req.k)?;
        Ok(Session {
            id,
            text: req.text.clone(),
            cells,
            k: req.k,
            history: Vec::new(),
        })
    }

    pub fn accepted_map(&self) -> BTreeMap<usize, usize> {
        self.history.iter().copied().collect()
    }

    /// Commits `token` at an open mask position.
    pub fn accept<T: Scalar>(&mut self, r: &Restorer<'_, T>, req: &AcceptRequest) -> Result<(), DecodeError> {
        let open = self.cells.get(req.position) == Some(&MASK) && !self.history.iter().any(|&(p, _)| p == req.position);
        if !open {
            return Err(DecodeError::NotAMask(req.position));
        }
        let tok = r
            .vocab()
            .index_of_surface(&req.token)
            .ok_or_else(|| DecodeError::UnknownToken(req.token.clone()))?;
        let mut accepted = self.accepted_map();
        accepted.insert(req.position, tok);
        r.apply_accepted(&self.cells, &accepted)?;
        self.history.push((req.position, tok));
        Ok(())
    }

    /// Pops the latest acceptance; false when there is none.
    pub fn undo(&mut self) -> bool {
        self.history.pop().is_some()
    }

    pub fn view<T: Scalar>(&self, r: &Restorer<'_, T>) -> Result<SessionView, DecodeError> {
        let accepted = self.accepted_map();
        let filled = r.apply_accepted(&self.cells, &accepted)?;
        let candidates = r.restore_step(&self.cells, &accepted, self.k)?.positions;
        let remaining: Vec<usize> = candidates.iter().map(|p| p.position).collect();
        Ok(SessionView {
            schema: schema(),
            id: self.id.clone(),
            text: self.text.clone(),
            k: self.k,
            accepted: self
                .history
                .iter()
                .map(|&(position, t)| Accepted {
                    position,
                    token: r.vocab().token(t).unwrap_or_default().to_string(),
                })
                .collect(),
            current: r.render(&filled),
            complete: remaining.is_empty(),
            remaining,
            candidates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyView {
    pub schema: String,
    pub token: String,
    pub family: u32,
    pub canonical: String,
    /// Member surface forms, sorted.
    pub members: Vec<String>,
    /// Attested pairs inside the family, with era and source.
    pub pairs: Vec<AllographPair>,
}

/// The glyph family of a surface form; `None` when it is not in the
/// vocabulary.
pub fn family_view(net: &GlyphNet, vocab: &Vocabulary, surface: &str) -> Option<FamilyView> {
    let id = net.family_of_surface(vocab, surface).ok()?;
    let fam = net.family(id);
    let name = |t: usize| vocab.token(t).unwrap_or_default().to_string();
    let mut members: Vec<String> = fam.members.iter().map(|&m| name(m)).collect();
    members.sort();
    Some(FamilyView {
        schema: schema(),
        token: surface.to_string(),
        family: id.0,
        canonical: name(fam.canonical),
        members,
        pairs: net.pairs_in(id).cloned().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProb {
    pub label: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateResponse {
    pub schema: String,
    pub text: String,
    pub dynasty: Vec<LabelProb>,
    pub period: Vec<LabelProb>,
}

pub fn date<T: Scalar>(r: &Restorer<'_, T>, req: &DateRequest) -> Result<DateResponse, DecodeError> {
    let cells = r.parse(&req.text, false)?;
    let d = r.date(&cells)?;
    Ok(DateResponse {
        schema: schema(),
        text: req.text.clone(),
        dynasty: d
            .dynasty
            .iter()
            .map(|&(l, p)| LabelProb {
                label: l.name().to_string(),
                p,
            })
            .collect(),
        period: d
            .period
            .iter()
            .map(|&(l, p)| LabelProb {
                label: l.name().to_string(),
                p,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema: String,
    pub status: u16,
    pub error: String,
}

impl ErrorBody {
    pub fn new(status: u16, error: impl Into<String>) -> Self {
        ErrorBody {
            schema: schema(),
            status,
            error: error.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab_with, Corpus, CorpusKind};
    use crate::encoder::{EncoderConfig, EncoderModel, LabelSpaces};
    use crate::glyphnet::{build_families, parse_pairs_str};

    fn fixture() -> (EncoderModel<f32>, Vocabulary, GlyphNet) {
        let c = Corpus::new(CorpusKind::Inscriptional, vec![]);
        let v = build_vocab_with(&[&c], "王曰君子孑孫".chars().map(String::from)).unwrap();
        let net = build_families(&parse_pairs_str("子\t孑\tShang\tsrc\n").unwrap(), &v).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ff_dim: 16,
            max_seq_len: 10,
            seed: 3,
            ..EncoderConfig::default()
        };
        (EncoderModel::init(&cfg, v.len(), LabelSpaces::default()).unwrap(), v, net)
    }

    #[test]
    fn greedy_payload_fills_every_mask() {
        let (m, v, net) = fixture();
        let r = Restorer::new(&m, &v, &net).unwrap();
        let req = RestoreRequest {
            text: "王[MASK]君□".into(),
            mode: DecodeMode::Greedy,
            k: 3,
            mask_undeciphered: false,
        };
        let resp = restore(&r, &req).unwrap();
        assert_eq!(resp.positions.len(), 2);
        assert!(resp.positions.iter().all(|p| p.candidates.len() == 3));
        assert_eq!(resp.order.as_ref().unwrap().len(), 2);
        assert!(!resp.restored.unwrap().contains('□'));
        let par = restore(&r, &RestoreRequest { mode: DecodeMode::Parallel, ..req.clone() }).unwrap();
        let inter = restore(&r, &RestoreRequest { mode: DecodeMode::Interactive, ..req }).unwrap();
        assert_eq!(par.positions, inter.positions);
        assert!(par.order.is_none());
    }

    #[test]
    fn session_accept_undo_round_trips() {
        let (m, v, net) = fixture();
        let r = Restorer::new(&m, &v, &net).unwrap();
        let req = SessionRequest {
            text: "王□君□".into(),
            k: 4,
            mask_undeciphered: false,
        };
        let mut s = Session::open(&r, "s1".into(), &req).unwrap();
        let before = s.view(&r).unwrap();
        assert!(before.accepted.is_empty());
        assert_eq!(before.remaining, [1, 3]);
        s.accept(&r, &AcceptRequest { position: 1, token: "子".into() }).unwrap();
        let mid = s.view(&r).unwrap();
        assert_eq!(mid.remaining, [3]);
        assert_eq!(mid.current, "王子君[MASK]");
        let again = s.accept(&r, &AcceptRequest { position: 1, token: "子".into() });
        assert_eq!(again, Err(DecodeError::NotAMask(1)));
        assert_eq!(
            s.accept(&r, &AcceptRequest { position: 0, token: "子".into() }),
            Err(DecodeError::NotAMask(0))
        );
        assert!(matches!(
            s.accept(&r, &AcceptRequest { position: 3, token: "鼎".into() }),
            Err(DecodeError::UnknownToken(_))
        ));
        assert!(s.undo());
        assert_eq!(s.view(&r).unwrap(), before);
        assert!(!s.undo());
    }

    #[test]
    fn family_and_dating_payloads() {
        let (m, v, net) = fixture();
        let f = family_view(&net, &v, "孑").unwrap();
        assert_eq!(f.members, ["子", "孑"]);
        assert_eq!(f.pairs.len(), 1);
        assert_eq!(family_view(&net, &v, "王").unwrap().members, ["王"]);
        assert!(family_view(&net, &v, "鼎").is_none());
        let r = Restorer::new(&m, &v, &net).unwrap();
        let d = date(&r, &DateRequest { text: "王曰".into() }).unwrap();
        assert_eq!(d.dynasty.len(), 4);
        assert_eq!(d.period.len(), 3);
        assert!((d.dynasty.iter().map(|x| x.p).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(date(&r, &DateRequest { text: String::new() }), Err(DecodeError::Empty));
    }
}
