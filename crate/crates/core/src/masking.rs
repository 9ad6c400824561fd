//! Stride-based candidate selection and glyph-biased mask sampling.
//!
//! Sequences here are encoded with boundaries: `[BOS] t1 .. tn [EOS]`, so the
//! non-boundary positions are `1..=n`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, MASK};
use crate::glyphnet::GlyphNet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("no maskable candidate positions")]
    NoCandidates,
    #[error("invalid mask configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Uniform,
    GlyphBiased,
}

/// Where the stride grid starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrideOffset {
    /// Grid anchored at the first non-boundary position.
    First,
    /// Grid anchored at a seeded offset in `[0, min(stride, len))`, so every
    /// position is reachable across epochs.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub stride: usize,
    pub mlm_prob: f64,
    pub bias: f64,
    pub mode: MaskMode,
    #[serde(default = "default_offset")]
    pub offset: StrideOffset,
}

fn default_offset() -> StrideOffset {
    StrideOffset::First
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            stride: 10,
            mlm_prob: 0.2,
            bias: 3.0,
            mode: MaskMode::Uniform,
            offset: StrideOffset::First,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.stride < 1 {
            return Err(MaskError::InvalidConfig("stride must be >= 1".into()));
        }
        if !(self.mlm_prob > 0.0 && self.mlm_prob <= 1.0) {
            return Err(MaskError::InvalidConfig("mlm_prob must lie in (0, 1]".into()));
        }
        if !(self.bias >= 1.0) {
            return Err(MaskError::InvalidConfig("bias must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub sequence: String,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Gold vocabulary index at each masked position.
    pub gold: Vec<usize>,
    /// Candidate position and its sampling probability.
    pub distribution: Vec<(usize, f64)>,
}

impl MaskPlan {
    /// Copy of `seq` with every planned position replaced by the mask index.
    pub fn apply(&self, seq: &[usize]) -> Vec<usize> {
        let mut out = seq.to_vec();
        for &p in &self.positions {
            out[p] = MASK;
        }
        out
    }
}

/// Every `stride`-th non-boundary position starting `offset` positions after
/// the first one, minus Unreadable and Undeciphered cells.
pub fn stride_candidates(
    seq: &[usize],
    vocab: &Vocabulary,
    stride: usize,
    offset: usize,
) -> Vec<usize> {
    let stride = stride.max(1);
    let n = seq.len().saturating_sub(2);
    (1..=n)
        .filter(|&p| p > offset && (p - 1 - offset).is_multiple_of(stride))
        .filter(|&p| !vocab.is_unidentified(seq[p]) && !vocab.is_special(seq[p]))
        .collect()
}

/// Sampling probability per candidate: weight `bias` for glyph tokens
/// (members of a family with at least two forms), 1 otherwise, normalised.
pub fn glyph_bias_weights(
    candidates: &[usize],
    seq: &[usize],
    net: &GlyphNet,
    bias: f64,
) -> Result<Vec<f64>, MaskError> {
    if candidates.is_empty() {
        return Err(MaskError::NoCandidates);
    }
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&p| {
            if net.members_of(seq[p]).len() >= 2 {
                bias
            } else {
                1.0
            }
        })
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Number of positions drawn from a pool of `pool` candidates.
pub fn draw_count(mlm_prob: f64, pool: usize) -> usize {
    ((mlm_prob * pool as f64).round() as usize).clamp(1, pool.max(1))
}

/// Draws `max(1, round(mlm_prob * |C|))` distinct positions without
/// replacement. Deterministic in `seed`.
pub fn sample_mask_plan(
    id: &str,
    seq: &[usize],
    config: &MaskConfig,
    net: &GlyphNet,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<MaskPlan, MaskError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = seq.len().saturating_sub(2);
    let offset = match config.offset {
        StrideOffset::First => 0,
        StrideOffset::Random if n > 0 => rng.gen_range(0..config.stride.min(n)),
        StrideOffset::Random => 0,
    };
    let candidates = stride_candidates(seq, vocab, config.stride, offset);
    if candidates.is_empty() {
        return Err(MaskError::NoCandidates);
    }
    // Uniform mode is the biased sampler at unit bias, so both modes share
    // one random stream.
    let bias = match config.mode {
        MaskMode::Uniform => 1.0,
        MaskMode::GlyphBiased => config.bias,
    };
    let probs = glyph_bias_weights(&candidates, seq, net, bias)?;
    let m = draw_count(config.mlm_prob, candidates.len());
    let indexed: Vec<usize> = (0..candidates.len()).collect();
    let mut chosen: Vec<usize> = indexed
        .choose_multiple_weighted(&mut rng, m, |&i| probs[i])
        .expect("weights are positive and finite")
        .map(|&i| candidates[i])
        .collect();
    chosen.sort_unstable();
    Ok(MaskPlan {
        sequence: id.to_string(),
        gold: chosen.iter().map(|&p| seq[p]).collect(),
        positions: chosen,
        distribution: candidates.into_iter().zip(probs).collect(),
    })
}
