//! Glyph families: the partition of the vocabulary induced by the transitive
//! closure of grapheme–allograph pairs, plus centroid alignment of unseen
//! glyph forms.

use std::io::BufRead;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum GlyphNetError {
    #[error("pair file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("pair endpoint {0:?} is not in the vocabulary")]
    UnknownEndpoint(String),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token index {0} is outside the glyph net")]
    UnknownIndex(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Era {
    Shang,
    WesternZhou,
    EasternZhou,
}

impl FromStr for Era {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Shang" => Ok(Era::Shang),
            "WesternZhou" => Ok(Era::WesternZhou),
            "EasternZhou" => Ok(Era::EasternZhou),
            other => Err(format!("unknown era {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllographPair {
    pub a: String,
    pub b: String,
    pub era: Option<Era>,
    pub source: String,
}

impl AllographPair {
    /// Phonetic loans are marked by a `loan:` source prefix. They are not
    /// allographs and never join families.
    pub fn is_loan(&self) -> bool {
        self.source.starts_with("loan:")
    }
}

/// Reads `tokenA<TAB>tokenB<TAB>era<TAB>source` lines. `#` starts a comment
/// line; an empty or `-` era field means unknown.
pub fn parse_pairs<R: BufRead>(input: R) -> Result<Vec<AllographPair>, GlyphNetError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let malformed = |message: String| GlyphNetError::Malformed {
            line: line_no,
            message,
        };
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated fields, got {}", cols.len())));
        }
        let (a, b) = (cols[0].trim(), cols[1].trim());
        if a.is_empty() || b.is_empty() {
            return Err(malformed("empty token".into()));
        }
        if a == b {
            return Err(malformed(format!("self pair {a:?}")));
        }
        let era = match cols[2].trim() {
            "" | "-" => None,
            e => Some(e.parse().map_err(malformed)?),
        };
        out.push(AllographPair {
            a: a.to_string(),
            b: b.to_string(),
            era,
            source: cols[3].trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_pairs_str(input: &str) -> Result<Vec<AllographPair>, GlyphNetError> {
    parse_pairs(input.as_bytes())
}

pub fn render_pairs(pairs: &[AllographPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let era = match p.era {
            Some(Era::Shang) => "Shang",
            Some(Era::WesternZhou) => "WesternZhou",
            Some(Era::EasternZhou) => "EasternZhou",
            None => "-",
        };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", p.a, p.b, era, p.source));
    }
    out
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FamilyId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub id: FamilyId,
    /// Vocabulary indices, ascending.
    pub members: Vec<usize>,
    /// Member whose surface form is lexicographically smallest.
    pub canonical: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphNet {
    family_of: Vec<FamilyId>,
    families: Vec<Family>,
    pairs: Vec<AllographPair>,
    /// For each pair, the family it belongs to.
    pair_family: Vec<FamilyId>,
}

/// Builds families as connected components of the pair graph over the whole
/// vocabulary. Era metadata is kept but does not affect closure; loan
/// pairs are dropped.
pub fn build_families(
    pairs: &[AllographPair],
    universe: &Vocabulary,
) -> Result<GlyphNet, GlyphNetError> {
    let pairs: Vec<AllographPair> = pairs.iter().filter(|p| !p.is_loan()).cloned().collect();
    let pairs = pairs.as_slice();
    let n = universe.len();
    let mut sets = DisjointSets::new(n);
    let mut endpoints = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ia = universe
            .index_of_surface(&p.a)
            .ok_or_else(|| GlyphNetError::UnknownEndpoint(p.a.clone()))?;
        let ib = universe
            .index_of_surface(&p.b)
            .ok_or_else(|| GlyphNetError::UnknownEndpoint(p.b.clone()))?;
        sets.union(ia, ib);
        endpoints.push(ia);
    }
    // Components are enumerated by their smallest index, which fixes ids
    // independently of pair order and of union-find internals.
    let mut root_family = vec![u32::MAX; n];
    let mut family_of = vec![FamilyId(0); n];
    let mut families: Vec<Family> = Vec::new();
    for tok in 0..n {
        let root = sets.find(tok);
        if root_family[root] == u32::MAX {
            root_family[root] = families.len() as u32;
            families.push(Family {
                id: FamilyId(families.len() as u32),
                members: Vec::new(),
                canonical: tok,
            });
        }
        let fid = root_family[root];
        family_of[tok] = FamilyId(fid);
        families[fid as usize].members.push(tok);
    }
    for fam in &mut families {
        fam.canonical = *fam
            .members
            .iter()
            .min_by(|&&a, &&b| universe.token(a).cmp(&universe.token(b)))
            .expect("family non-empty");
    }
    let pair_family = endpoints.iter().map(|&i| family_of[i]).collect();
    Ok(GlyphNet {
        family_of,
        families,
        pairs: pairs.to_vec(),
        pair_family,
    })
}

impl GlyphNet {
    /// Every token in its own family.
    pub fn singletons(vocab_size: usize) -> Self {
        GlyphNet {
            family_of: (0..vocab_size as u32).map(FamilyId).collect(),
            families: (0..vocab_size)
                .map(|i| Family {
                    id: FamilyId(i as u32),
                    members: vec![i],
                    canonical: i,
                })
                .collect(),
            pairs: Vec::new(),
            pair_family: Vec::new(),
        }
    }

    pub fn universe_size(&self) -> usize {
        self.family_of.len()
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn family(&self, id: FamilyId) -> &Family {
        &self.families[id.0 as usize]
    }

    pub fn family_of(&self, token: usize) -> Result<FamilyId, GlyphNetError> {
        self.family_of
            .get(token)
            .copied()
            .ok_or(GlyphNetError::UnknownIndex(token))
    }

    /// Lookup by surface form.
    pub fn family_of_surface(
        &self,
        vocab: &Vocabulary,
        surface: &str,
    ) -> Result<FamilyId, GlyphNetError> {
        let idx = vocab
            .index_of_surface(surface)
            .ok_or_else(|| GlyphNetError::UnknownToken(surface.to_string()))?;
        self.family_of(idx)
    }

    /// Members of the family containing `token` (the token set of its cluster).
    pub fn members_of(&self, token: usize) -> &[usize] {
        &self.family(self.family_of[token]).members
    }

    pub fn is_glyph_token(&self, token: usize) -> Result<bool, GlyphNetError> {
        let fid = self.family_of(token)?;
        Ok(self.family(fid).members.len() >= 2)
    }

    pub fn glyph_token_count(&self) -> usize {
        self.families
            .iter()
            .filter(|f| f.members.len() >= 2)
            .map(|f| f.members.len())
            .sum()
    }

    pub fn non_singleton(&self) -> impl Iterator<Item = &Family> {
        self.families.iter().filter(|f| f.members.len() >= 2)
    }

    /// Source pairs that fall inside the given family.
    pub fn pairs_in(&self, id: FamilyId) -> impl Iterator<Item = &AllographPair> {
        self.pairs
            .iter()
            .zip(&self.pair_family)
            .filter(move |(_, f)| **f == id)
            .map(|(p, _)| p)
    }

    pub fn pairs(&self) -> &[AllographPair] {
        &self.pairs
    }

    /// A spanning set of pairs (canonical member to every other member) that
    /// regenerates the same partition.
    pub fn implied_pairs(&self, vocab: &Vocabulary) -> Vec<AllographPair> {
        let mut out = Vec::new();
        for fam in self.non_singleton() {
            let canon = vocab.token(fam.canonical).unwrap_or_default();
            for &m in fam.members.iter().filter(|&&m| m != fam.canonical) {
                out.push(AllographPair {
                    a: canon.to_string(),
                    b: vocab.token(m).unwrap_or_default().to_string(),
                    era: None,
                    source: "implied".into(),
                });
            }
        }
        out
    }

    /// Family sizes of non-singleton families, sorted descending.
    pub fn size_histogram(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.non_singleton().map(|f| f.members.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCentroid {
    pub family: FamilyId,
    pub centroid: Vec<f64>,
    pub members: usize,
}

/// Mean embedding row of every non-singleton family.
pub fn compute_centroids(
    net: &GlyphNet,
    embeddings: ArrayView2<'_, f64>,
) -> Result<Vec<FamilyCentroid>, GlyphNetError> {
    if embeddings.nrows() != net.universe_size() {
        return Err(GlyphNetError::DimensionMismatch {
            expected: net.universe_size(),
            got: embeddings.nrows(),
        });
    }
    let dim = embeddings.ncols();
    Ok(net
        .non_singleton()
        .map(|fam| {
            let mut c = vec![0.0; dim];
            for &m in &fam.members {
                for (acc, v) in c.iter_mut().zip(embeddings.row(m)) {
                    *acc += v;
                }
            }
            let n = fam.members.len() as f64;
            c.iter_mut().for_each(|x| *x /= n);
            FamilyCentroid {
                family: fam.id,
                centroid: c,
                members: fam.members.len(),
            }
        })
        .collect())
}

/// Cosine similarity; zero when either vector has zero norm.
///
/// Computed as `1 - |a/|a| - b/|b||^2 / 2`, which is exact for parallel and
/// for orthogonal unit vectors where the plain quotient can be off by an ulp.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dist2: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    (1.0 - dist2 / 2.0).clamp(-1.0, 1.0)
}

/// Assigns an unseen glyph vector to the most similar family centroid when
/// the cosine similarity reaches `threshold`. Ties go to the smaller family id.
/// Never mutates the net.
pub fn align_new_glyph(
    centroids: &[FamilyCentroid],
    vector: &[f64],
    threshold: f64,
) -> Result<Option<FamilyId>, GlyphNetError> {
    let mut best: Option<(f64, FamilyId)> = None;
    for c in centroids {
        if c.centroid.len() != vector.len() {
            return Err(GlyphNetError::DimensionMismatch {
                expected: c.centroid.len(),
                got: vector.len(),
            });
        }
        let sim = cosine(&c.centroid, vector);
        best = match best {
            Some((s, f)) if s > sim || (s == sim && f < c.family) => Some((s, f)),
            _ => Some((sim, c.family)),
        };
    }
    Ok(best.filter(|(s, _)| *s >= threshold).map(|(_, f)| f))
}
