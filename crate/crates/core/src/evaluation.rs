//! Restoration, dating and representation metrics, plus the model-driven
//! passes that produce their inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dynasty, Period, Vocabulary, MASK};
use crate::encoder::{Batch, EncoderModel, Head, Mode, ModelError, Scalar};
use crate::glyphnet::{compute_centroids, cosine, GlyphNet, GlyphNetError};
use crate::trainer::EncodedCorpus;

pub const REPORT_SCHEMA: &str = "glyphmlm/v1";
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub token: usize,
    pub score: f64,
}

/// Top `k` entries of a score row, descending, ties by ascending index.
/// Indices rejected by `keep` never appear.
pub fn rank_top_k<T: Scalar>(row: &[T], k: usize, keep: impl Fn(usize) -> bool) -> Vec<Ranked> {
    let mut all: Vec<Ranked> = row
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(token, s)| Ranked {
            token,
            score: s.to_f64().unwrap(),
        })
        .collect();
    let by_rank = |a: &Ranked, b: &Ranked| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token));
    let k = k.min(all.len());
    if k > 0 && k < all.len() {
        all.select_nth_unstable_by(k - 1, by_rank);
        all.truncate(k);
    }
    all.sort_by(by_rank);
    all
}

/// One masked position of a restoration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationResult {
    pub id: String,
    /// Index into the sequence including the leading boundary.
    pub position: usize,
    pub gold: usize,
    pub ranked: Vec<Ranked>,
}

fn mean_indicator(n: usize, hits: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn exact_at_k(results: &[RestorationResult], k: usize) -> f64 {
    let hits = results
        .iter()
        .filter(|r| r.ranked.iter().take(k).any(|c| c.token == r.gold))
        .count();
    mean_indicator(results.len(), hits)
}

pub fn family_at_k(results: &[RestorationResult], k: usize, net: &GlyphNet) -> f64 {
    let hits = results
        .iter()
        .filter(|r| {
            let fam = net.members_of(r.gold);
            r.ranked.iter().take(k).any(|c| fam.binary_search(&c.token).is_ok())
        })
        .count();
    mean_indicator(results.len(), hits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatingResult {
    pub id: String,
    pub gold_dynasty: Option<Dynasty>,
    pub gold_period: Option<Period>,
    pub pred_dynasty: Dynasty,
    pub pred_period: Period,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub items: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over `(gold, predicted)` pairs. Classes absent from
/// both gold and predictions are ignored; a class with no true positives
/// scores F1 = 0.
pub fn class_metrics<L: Ord + Copy>(pairs: &[(L, L)]) -> ClassMetrics {
    let mut counts: BTreeMap<L, (usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for &(g, p) in pairs {
        if g == p {
            correct += 1;
            counts.entry(g).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let f1_sum: f64 = counts
        .values()
        .map(|&(tp, fp, fneg)| {
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
            }
        })
        .sum();
    ClassMetrics {
        items: pairs.len(),
        accuracy: mean_indicator(pairs.len(), correct),
        macro_f1: if counts.is_empty() {
            0.0
        } else {
            f1_sum / counts.len() as f64
        },
    }
}

/// Flat dynasty accuracy and macro-F1 over items with a gold dynasty.
pub fn dynasty_metrics(results: &[DatingResult]) -> ClassMetrics {
    let pairs: Vec<(Dynasty, Dynasty)> = results
        .iter()
        .filter_map(|r| r.gold_dynasty.map(|g| (g, r.pred_dynasty)))
        .collect();
    class_metrics(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalMetrics {
    pub acc_hier_dyn: f64,
    pub f1_hier_dyn: f64,
    pub acc_hier_per: f64,
    pub f1_hier_per: f64,
    /// Items carrying both gold labels.
    pub scored: usize,
    /// Items skipped for a missing gold period or dynasty.
    pub excluded: usize,
}

/// Dynasty first, then period within the predicted dynasty: a period
/// prediction is credited only when the dynasty is right too. Period F1 is
/// macro-averaged over observed `(dynasty, period)` classes.
pub fn hierarchical_metrics(results: &[DatingResult]) -> HierarchicalMetrics {
    let scored: Vec<(Dynasty, Period, Dynasty, Period)> = results
        .iter()
        .filter_map(|r| match (r.gold_dynasty, r.gold_period) {
            (Some(d), Some(p)) => Some((d, p, r.pred_dynasty, r.pred_period)),
            _ => None,
        })
        .collect();
    let dyn_pairs: Vec<_> = scored.iter().map(|&(gd, _, pd, _)| (gd, pd)).collect();
    let per_pairs: Vec<_> = scored.iter().map(|&(gd, gp, pd, pp)| ((gd, gp), (pd, pp))).collect();
    let d = class_metrics(&dyn_pairs);
    let p = class_metrics(&per_pairs);
    HierarchicalMetrics {
        acc_hier_dyn: d.accuracy,
        f1_hier_dyn: d.macro_f1,
        acc_hier_per: p.accuracy,
        f1_hier_per: p.macro_f1,
        scored: scored.len(),
        excluded: results.len() - scored.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCohesion {
    pub family: u32,
    pub size: usize,
    pub intra_cos: f64,
    /// Most similar other family and its centroid cosine.
    pub nearest: Option<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub families: usize,
    pub intra_cos: f64,
    /// `None` with fewer than two non-singleton families.
    pub nearest_inter_cos: Option<f64>,
    pub details: Vec<FamilyCohesion>,
}

/// Cohesion of non-singleton families in an embedding table (one row per
/// vocabulary entry) and separation of their centroids.
pub fn representation_report(
    table: ArrayView2<'_, f64>,
    net: &GlyphNet,
) -> Result<RepresentationReport, GlyphNetError> {
    let cents = compute_centroids(net, table)?;
    let mut details = Vec::with_capacity(cents.len());
    for (i, c) in cents.iter().enumerate() {
        let fam = net.family(c.family);
        let intra = fam
            .members
            .iter()
            .map(|&m| cosine(table.row(m).as_slice().expect("standard layout"), &c.centroid))
            .sum::<f64>()
            / fam.members.len() as f64;
        let mut nearest: Option<(u32, f64)> = None;
        for (j, o) in cents.iter().enumerate() {
            if i == j {
                continue;
            }
            let sim = cosine(&c.centroid, &o.centroid);
            if nearest.is_none_or(|(_, s)| sim > s) {
                nearest = Some((o.family.0, sim));
            }
        }
        details.push(FamilyCohesion {
            family: c.family.0,
            size: fam.members.len(),
            intra_cos: intra,
            nearest,
        });
    }
    let n = details.len();
    let intra_cos = if n == 0 {
        0.0
    } else {
        details.iter().map(|d| d.intra_cos).sum::<f64>() / n as f64
    };
    let nearest_inter_cos = (n >= 2).then(|| details.iter().map(|d| d.nearest.expect("n >= 2").1).sum::<f64>() / n as f64);
    Ok(RepresentationReport {
        families: n,
        intra_cos,
        nearest_inter_cos,
        details,
    })
}

/// Which positions of a test corpus become restoration targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetFilter {
    /// Every identifiable position.
    All,
    /// Positions whose gold form never occurred in training text.
    Unseen,
}

/// Train/test token-form split accounting emitted with every restoration
/// report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub filter: TargetFilter,
    /// Identifiable positions in the test corpus.
    pub identifiable_positions: usize,
    pub gold_seen_in_training: usize,
    pub gold_unseen_in_training: usize,
    /// Positions skipped because they hold Unreadable or Undeciphered cells.
    pub unidentified_positions: usize,
    pub targets: usize,
    /// Distinct test forms that never occurred in training text.
    pub unseen_forms: usize,
}

/// Single-position restoration: every target position is masked on its own
/// and ranked from the remaining context. Reserved entries are never
/// proposed.
pub fn restoration_results<T: Scalar>(
    model: &EncoderModel<T>,
    data: &EncodedCorpus,
    vocab: &Vocabulary,
    seen: &BTreeSet<usize>,
    filter: TargetFilter,
    k: usize,
    batch_size: usize,
) -> Result<(Vec<RestorationResult>, SplitAudit), ModelError> {
    let mut audit = SplitAudit {
        filter,
        identifiable_positions: 0,
        gold_seen_in_training: 0,
        gold_unseen_in_training: 0,
        unidentified_positions: 0,
        targets: 0,
        unseen_forms: 0,
    };
    let mut unseen_forms = BTreeSet::new();
    let mut targets = Vec::new();
    for (row, seq) in data.sequences.iter().enumerate() {
        for (p, &t) in seq.iter().enumerate().take(seq.len() - 1).skip(1) {
            if vocab.is_special(t) || vocab.is_unidentified(t) {
                audit.unidentified_positions += 1;
                continue;
            }
            audit.identifiable_positions += 1;
            let is_seen = seen.contains(&t);
            if is_seen {
                audit.gold_seen_in_training += 1;
            } else {
                audit.gold_unseen_in_training += 1;
                unseen_forms.insert(t);
            }
            if filter == TargetFilter::All || !is_seen {
                targets.push((row, p));
            }
        }
    }
    audit.targets = targets.len();
    audit.unseen_forms = unseen_forms.len();

    let reserved = vocab.reserved();
    let mut results = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(batch_size.max(1)) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for &(row, p) in chunk {
            let mut s = data.sequences[row].clone();
            let gold = s[p];
            s[p] = MASK;
            inputs.push(s);
            masks.push(vec![(p, gold)]);
        }
        let batch = Batch::from_sequences(&inputs, &masks);
        let (logp, _) = model.forward_mlm(&batch, Mode::Eval)?;
        for (i, &(row, p)) in chunk.iter().enumerate() {
            let r = logp.row(i);
            results.push(RestorationResult {
                id: data.ids[row].clone(),
                position: p,
                gold: batch.gold[i],
                ranked: rank_top_k(r.as_slice().expect("standard layout"), k, |t| t >= reserved),
            });
        }
    }
    Ok((results, audit))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

/// Eval-mode dynasty and period predictions, one per sequence.
pub fn dating_results<T: Scalar>(
    model: &EncoderModel<T>,
    data: &EncodedCorpus,
    batch_size: usize,
) -> Result<Vec<DatingResult>, ModelError> {
    let mut out = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| data.sequences[i].clone()).collect();
        let batch = Batch::from_sequences(&seqs, &vec![Vec::new(); seqs.len()]);
        let trace = model.encode(&batch, Mode::Eval)?;
        let dl = model.classify_log_probs(&trace, Head::Dynasty);
        let pl = model.classify_log_probs(&trace, Head::Period);
        for (j, &i) in chunk.iter().enumerate() {
            out.push(DatingResult {
                id: data.ids[i].clone(),
                gold_dynasty: data.dynasty[i].and_then(Dynasty::from_index),
                gold_period: data.period[i].and_then(Period::from_index),
                pred_dynasty: Dynasty::from_index(argmax(dl.row(j).as_slice().expect("layout")))
                    .expect("four dynasty classes"),
                pred_period: Period::from_index(argmax(pl.row(j).as_slice().expect("layout")))
                    .expect("three period classes"),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub exact: f64,
    pub family: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub positions: usize,
    pub at_k: Vec<AtK>,
    pub split: SplitAudit,
}

impl RestorationReport {
    pub fn new(results: &[RestorationResult], net: &GlyphNet, ks: &[usize], split: SplitAudit) -> Self {
        RestorationReport {
            positions: results.len(),
            at_k: ks
                .iter()
                .map(|&k| AtK {
                    k,
                    exact: exact_at_k(results, k),
                    family: family_at_k(results, k, net),
                })
                .collect(),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatingReport {
    pub dynasty: ClassMetrics,
    pub hierarchical: HierarchicalMetrics,
}

impl DatingReport {
    pub fn new(results: &[DatingResult]) -> Self {
        DatingReport {
            dynasty: dynasty_metrics(results),
            hierarchical: hierarchical_metrics(results),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub model: String,
    /// Test tokens missing from the model vocabulary, scored as unreadable.
    #[serde(default)]
    pub unknown_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub restoration: Option<RestorationReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dating: Option<DatingReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub representation: Option<RepresentationReport>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>) -> Self {
        EvalReport {
            schema: REPORT_SCHEMA.into(),
            model: model.into(),
            unknown_tokens: 0,
            restoration: None,
            dating: None,
            representation: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text tables: restoration as `E@K | F@K` columns, dating as flat
    /// then hierarchical columns, all in percent.
    pub fn render_text(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut out = String::new();
        if let Some(r) = &self.restoration {
            let mut head = format!("{:<16}", "Model");
            let mut row = format!("{:<16}", self.model);
            for a in &r.at_k {
                head.push_str(&format!(" | {:>7}", format!("E@{}", a.k)));
                row.push_str(&format!(" | {:>7}", pct(a.exact)));
            }
            for a in &r.at_k {
                head.push_str(&format!(" | {:>7}", format!("F@{}", a.k)));
                row.push_str(&format!(" | {:>7}", pct(a.family)));
            }
            let _ = writeln!(out, "Restoration ({} positions)", r.positions);
            let _ = writeln!(out, "{head}\n{row}");
            let s = &r.split;
            let _ = writeln!(
                out,
                "targets {} ({:?}); gold seen in training {}, unseen {} ({} forms); unidentified skipped {}",
                s.targets, s.filter, s.gold_seen_in_training, s.gold_unseen_in_training, s.unseen_forms,
                s.unidentified_positions
            );
        }
        if let Some(d) = &self.dating {
            let h = &d.hierarchical;
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "Dating ({} items, {} hierarchical, {} excluded)", d.dynasty.items, h.scored, h.excluded);
            let _ = writeln!(
                out,
                "{:<16} | {:>7} | {:>7} | {:>12} | {:>11} | {:>12} | {:>11}",
                "Model", "Acc", "F1", "Acc_Hier_Dyn", "F1_Hier_Dyn", "Acc_Hier_Per", "F1_Hier_Per"
            );
            let _ = writeln!(
                out,
                "{:<16} | {:>7} | {:>7} | {:>12} | {:>11} | {:>12} | {:>11}",
                self.model,
                pct(d.dynasty.accuracy),
                pct(d.dynasty.macro_f1),
                pct(h.acc_hier_dyn),
                pct(h.f1_hier_dyn),
                pct(h.acc_hier_per),
                pct(h.f1_hier_per)
            );
        }
        if let Some(r) = &self.representation {
            if !out.is_empty() {
                out.push('\n');
            }
            let inter = r.nearest_inter_cos.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(out, "Representation ({} families)", r.families);
            let _ = writeln!(out, "IntraCos {:.4} | Nearest-InterCos {inter}", r.intra_cos);
        }
        if self.unknown_tokens > 0 {
            let _ = writeln!(out, "\n{} test tokens outside the vocabulary were scored as unreadable", self.unknown_tokens);
        }
        out
    }
}
