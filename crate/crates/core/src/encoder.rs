//! A small pre-norm transformer encoder with a tied masked-language-model head
//! and two linear classification heads, trained with hand-derived
//! reverse-mode gradients.
//!
//! The model is generic over [`Scalar`] (`f32` or `f64`). Training and
//! inference default to `f32`; gradient checks run in `f64`.
//!
//! Forward passes return a [`Trace`] holding every activation the backward
//! pass needs. Gradients come back as a [`Params`] value with exactly the
//! model's shapes.

use std::fmt::Debug;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seeds::derive_seed;

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[inline]
pub(crate) fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token index {index} outside vocabulary of size {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
    #[error("malformed batch: {0}")]
    BadBatch(String),
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("no upstream gradient supplied")]
    NoUpstream,
    #[error("unknown head {0:?}")]
    UnknownHead(String),
    #[error("cannot freeze {k} layers of a {layers}-layer model")]
    BadFreeze { k: usize, layers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Representation of the leading boundary token.
    First,
    /// Mean over non-padding positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub attention_dropout: f64,
    pub hidden_dropout: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    pub seed: u64,
}

fn default_init_std() -> f64 {
    0.02
}

fn default_pooling() -> Pooling {
    Pooling::First
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            ff_dim: 512,
            max_seq_len: 128,
            attention_dropout: 0.1,
            hidden_dropout: 0.1,
            init_std: 0.02,
            pooling: Pooling::First,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return bad("layers, heads, dim and ff_dim must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must leave room for two boundary tokens");
        }
        for p in [self.attention_dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout must lie in [0, 1)");
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaces {
    pub dynasty: usize,
    pub period: usize,
}

impl Default for LabelSpaces {
    fn default() -> Self {
        LabelSpaces {
            dynasty: 4,
            period: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    Dynasty,
    Period,
}

impl FromStr for Head {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dynasty" => Ok(Head::Dynasty),
            "period" => Ok(Head::Period),
            _ => Err(ModelError::UnknownHead(s.to_string())),
        }
    }
}

/// Which parameters a tensor belongs to, for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Embedding,
    Block(usize),
    Top,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Full parameter set. Also used for gradients and optimizer moments, which
/// guarantees a slot of identical shape for every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// Token embeddings, shared with the MLM output projection.
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub mlm_bias: Array1<T>,
    pub dyn_w: Array2<T>,
    pub dyn_b: Array1<T>,
    pub per_w: Array2<T>,
    pub per_b: Array1<T>,
}

/// Name, group and shape of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        self.map(|a| vec![T::zero(); a.len()])
    }

    fn map(&self, f: impl Fn(&[T]) -> Vec<T>) -> Self {
        let mut out = self.clone();
        for ((_, dst), (_, src)) in out.slices_mut().into_iter().zip(self.slices()) {
            dst.copy_from_slice(&f(src));
        }
        out
    }

    /// Flat views of every tensor in a fixed order.
    pub fn slices(&self) -> Vec<(TensorInfo, &[T])> {
        let mut out: Vec<(TensorInfo, &[T])> = Vec::new();
        let info = |name: String, group: Group, shape: &[usize]| TensorInfo {
            name,
            group,
            shape: shape.to_vec(),
        };
        out.push((info("tok_emb".into(), Group::Embedding, self.tok_emb.shape()), self.tok_emb.as_slice().unwrap()));
        out.push((info("pos_emb".into(), Group::Embedding, self.pos_emb.shape()), self.pos_emb.as_slice().unwrap()));
        for (i, b) in self.blocks.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {$(
                    out.push((
                        info(format!("blocks.{i}.{}", stringify!($f)), Group::Block(i), b.$f.shape()),
                        b.$f.as_slice().unwrap(),
                    ));
                )*};
            }
            block_fields!(push);
        }
        macro_rules! push_top {
            ($($f:ident),*) => {$(
                out.push((info(stringify!($f).into(), Group::Top, self.$f.shape()), self.$f.as_slice().unwrap()));
            )*};
        }
        push_top!(lnf_g, lnf_b, mlm_bias, dyn_w, dyn_b, per_w, per_b);
        out
    }

    /// Mutable flat views in the same order as [`Params::slices`].
    pub fn slices_mut(&mut self) -> Vec<(Group, &mut [T])> {
        let mut out: Vec<(Group, &mut [T])> = Vec::new();
        out.push((Group::Embedding, self.tok_emb.as_slice_mut().unwrap()));
        out.push((Group::Embedding, self.pos_emb.as_slice_mut().unwrap()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {$( out.push((Group::Block(i), b.$f.as_slice_mut().unwrap())); )*};
            }
            block_fields!(push);
        }
        macro_rules! push_top {
            ($($f:ident),*) => {$( out.push((Group::Top, self.$f.as_slice_mut().unwrap())); )*};
        }
        push_top!(lnf_g, lnf_b, mlm_bias, dyn_w, dyn_b, per_w, per_b);
        out
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for ((_, dst), (_, src)) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    pub fn scale(&mut self, scale: T) {
        for (_, dst) in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap());
        let c2 = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap());
        Params {
            tok_emb: c2(&self.tok_emb),
            pos_emb: c2(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    macro_rules! conv {
                        ($($f:ident),*) => {
                            BlockParams { $($f: {
                                let a = &b.$f;
                                a.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                            }),* }
                        };
                    }
                    block_fields!(conv)
                })
                .collect(),
            lnf_g: c1(&self.lnf_g),
            lnf_b: c1(&self.lnf_b),
            mlm_bias: c1(&self.mlm_bias),
            dyn_w: c2(&self.dyn_w),
            dyn_b: c1(&self.dyn_b),
            per_w: c2(&self.per_w),
            per_b: c1(&self.per_b),
        }
    }
}

/// One padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `batch_size x seq_len` token indices.
    pub tokens: Vec<usize>,
    /// Row-major attention mask; `false` marks padding.
    pub valid: Vec<bool>,
    /// `(row, position)` of each masked position, in output order.
    pub mask_positions: Vec<(usize, usize)>,
    /// Gold token per masked position.
    pub gold: Vec<usize>,
    pub dynasty: Option<Vec<Option<usize>>>,
    pub period: Option<Vec<Option<usize>>>,
}

impl Batch {
    /// Pads `sequences` with the padding index; `masks[i]` lists masked
    /// positions of sequence `i` (already replaced by the caller) with golds.
    pub fn from_sequences(sequences: &[Vec<usize>], masks: &[Vec<(usize, usize)>]) -> Self {
        let batch_size = sequences.len();
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = vec![crate::corpus::PAD; batch_size * seq_len];
        let mut valid = vec![false; batch_size * seq_len];
        for (b, s) in sequences.iter().enumerate() {
            tokens[b * seq_len..b * seq_len + s.len()].copy_from_slice(s);
            valid[b * seq_len..b * seq_len + s.len()].iter_mut().for_each(|v| *v = true);
        }
        let mut mask_positions = Vec::new();
        let mut gold = Vec::new();
        for (b, m) in masks.iter().enumerate() {
            for &(p, g) in m {
                mask_positions.push((b, p));
                gold.push(g);
            }
        }
        Batch {
            batch_size,
            seq_len,
            tokens,
            valid,
            mask_positions,
            gold,
            dynasty: None,
            period: None,
        }
    }

    pub fn with_labels(mut self, dynasty: Vec<Option<usize>>, period: Vec<Option<usize>>) -> Self {
        self.dynasty = Some(dynasty);
        self.period = Some(period);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks seeded by `(model seed, step, layer, site)`.
    Train { step: u64 },
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities per `(row, head)`, before dropout.
    probs: Vec<Array2<T>>,
    /// Inverted-dropout multipliers per `(row, head)`, if any.
    att_drop: Option<Vec<Array2<T>>>,
    ctx: Array2<T>,
    o_drop: Option<Array2<T>>,
    ln2: LnCache<T>,
    c: Array2<T>,
    f1: Array2<T>,
    g: Array2<T>,
    f2_drop: Option<Array2<T>>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    shape_key: (usize, usize, usize, usize),
    batch: Batch,
    emb_drop: Option<Array2<T>>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> Trace<T> {
    /// Final hidden states, `(batch * seq_len) x dim`.
    pub fn hidden(&self) -> ArrayView2<'_, T> {
        self.hidden.view()
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }
}

/// Gradients of a scalar loss with respect to head log-probabilities.
#[derive(Debug, Clone, Default)]
pub struct Upstream<T> {
    pub mlm: Option<Array2<T>>,
    pub dynasty: Option<Array2<T>>,
    pub period: Option<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub labels: LabelSpaces,
    pub params: Params<T>,
    frozen_layers: usize,
    freeze_embeddings: bool,
}

const LN_EPS: f64 = 1e-5;

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| cst(dist.sample(rng)))
}

impl<T: Scalar> EncoderModel<T> {
    /// Deterministic initialization: weights `N(0, init_std^2)`, biases zero,
    /// layer-norm gains one.
    pub fn init(
        config: &EncoderConfig,
        vocab_size: usize,
        labels: LabelSpaces,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 || labels.dynasty == 0 || labels.period == 0 {
            return Err(ModelError::InvalidConfig("empty vocabulary or label space".into()));
        }
        let (d, f) = (config.dim, config.ff_dim);
        let std = config.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x1417]));
        let ones = || Array1::from_elem(d, T::one());
        let zeros = |n: usize| Array1::from_elem(n, T::zero());
        let tok_emb = normal_matrix(&mut rng, vocab_size, d, std);
        let pos_emb = normal_matrix(&mut rng, config.max_seq_len, d, std);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_g: ones(),
                ln1_b: zeros(d),
                wq: normal_matrix(&mut rng, d, d, std),
                bq: zeros(d),
                wk: normal_matrix(&mut rng, d, d, std),
                bk: zeros(d),
                wv: normal_matrix(&mut rng, d, d, std),
                bv: zeros(d),
                wo: normal_matrix(&mut rng, d, d, std),
                bo: zeros(d),
                ln2_g: ones(),
                ln2_b: zeros(d),
                w1: normal_matrix(&mut rng, d, f, std),
                b1: zeros(f),
                w2: normal_matrix(&mut rng, f, d, std),
                b2: zeros(d),
            })
            .collect();
        let params = Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones(),
            lnf_b: zeros(d),
            mlm_bias: zeros(vocab_size),
            dyn_w: normal_matrix(&mut rng, d, labels.dynasty, std),
            dyn_b: zeros(labels.dynasty),
            per_w: normal_matrix(&mut rng, d, labels.period, std),
            per_b: zeros(labels.period),
        };
        Ok(EncoderModel {
            config: config.clone(),
            vocab_size,
            labels,
            params,
            frozen_layers: 0,
            freeze_embeddings: false,
        })
    }

    pub fn from_params(
        config: EncoderConfig,
        vocab_size: usize,
        labels: LabelSpaces,
        params: Params<T>,
    ) -> Result<Self, ModelError> {
        let reference = EncoderModel::<T>::init(&config, vocab_size, labels)?;
        let expected: Vec<_> = reference.params.slices().into_iter().map(|(i, _)| i).collect();
        let got: Vec<_> = params.slices().into_iter().map(|(i, _)| i).collect();
        if expected != got {
            return Err(ModelError::InvalidConfig("parameter shapes do not match config".into()));
        }
        Ok(EncoderModel {
            params,
            ..reference
        })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            labels: self.labels,
            params: self.params.cast(),
            frozen_layers: self.frozen_layers,
            freeze_embeddings: self.freeze_embeddings,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Excludes the embeddings and the bottom `k` blocks from optimization.
    /// `k = 0` unfreezes everything.
    pub fn freeze_layers(&mut self, k: usize) -> Result<(), ModelError> {
        if k > self.config.layers {
            return Err(ModelError::BadFreeze {
                k,
                layers: self.config.layers,
            });
        }
        self.frozen_layers = k;
        self.freeze_embeddings = k > 0;
        Ok(())
    }

    /// Freezes every encoder tensor, leaving only the top (final norm and
    /// heads) trainable.
    pub fn freeze_encoder(&mut self) {
        self.frozen_layers = self.config.layers;
        self.freeze_embeddings = true;
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen_layers
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        match group {
            Group::Embedding => self.freeze_embeddings,
            Group::Block(i) => i < self.frozen_layers,
            Group::Top => false,
        }
    }

    fn validate_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let n = batch.batch_size * batch.seq_len;
        if batch.tokens.len() != n || batch.valid.len() != n {
            return Err(ModelError::BadBatch("token/mask matrix size mismatch".into()));
        }
        if batch.seq_len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&index) = batch.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                index,
                vocab: self.vocab_size,
            });
        }
        if batch.gold.len() != batch.mask_positions.len() {
            return Err(ModelError::BadBatch("one gold token per masked position required".into()));
        }
        for (&(b, p), &g) in batch.mask_positions.iter().zip(&batch.gold) {
            if b >= batch.batch_size || p >= batch.seq_len || !batch.valid[b * batch.seq_len + p] {
                return Err(ModelError::BadBatch(format!("mask position ({b}, {p}) out of bounds")));
            }
            if g >= self.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    index: g,
                    vocab: self.vocab_size,
                });
            }
        }
        for row in 0..batch.batch_size {
            if !batch.valid[row * batch.seq_len] {
                return Err(ModelError::BadBatch(format!("row {row} starts with padding")));
            }
        }
        Ok(())
    }

    fn dropout_mask(&self, mode: Mode, layer: u64, site: u64, rows: usize, cols: usize, p: f64) -> Option<Array2<T>> {
        match mode {
            Mode::Train { step } if p > 0.0 => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[0xD809, step, layer, site]));
                let keep: T = cst(1.0 / (1.0 - p));
                Some(Array2::from_shape_fn((rows, cols), |_| {
                    if rng.gen::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }

    /// Runs the encoder stack and records a trace.
    pub fn encode(&self, batch: &Batch, mode: Mode) -> Result<Trace<T>, ModelError> {
        self.validate_batch(batch)?;
        let cfg = &self.config;
        let (bsz, len, d) = (batch.batch_size, batch.seq_len, cfg.dim);
        let n = bsz * len;
        let p = &self.params;

        let mut x = Array2::<T>::zeros((n, d));
        for r in 0..n {
            let tok = batch.tokens[r];
            let pos = r % len.max(1);
            let mut row = x.row_mut(r);
            row.assign(&p.tok_emb.row(tok));
            row += &p.pos_emb.row(pos);
        }
        let emb_drop = self.dropout_mask(mode, 0, 0, n, d, cfg.hidden_dropout);
        if let Some(m) = &emb_drop {
            x *= m;
        }

        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale: T = cst(1.0 / (dh as f64).sqrt());
        let mut blocks = Vec::with_capacity(cfg.layers);
        for (l, bp) in p.blocks.iter().enumerate() {
            let layer = l as u64 + 1;
            let x_in = x.clone();
            let (a, ln1) = layer_norm(&x, &bp.ln1_g, &bp.ln1_b);
            let q = a.dot(&bp.wq) + &bp.bq;
            let k = a.dot(&bp.wk) + &bp.bk;
            let v = a.dot(&bp.wv) + &bp.bv;
            let mut ctx = Array2::<T>::zeros((n, d));
            let mut probs = Vec::with_capacity(bsz * heads);
            let mut att_drop = match mode {
                Mode::Train { .. } if cfg.attention_dropout > 0.0 => Some(Vec::with_capacity(bsz * heads)),
                _ => None,
            };
            for b in 0..bsz {
                let rows = b * len..(b + 1) * len;
                let valid = &batch.valid[b * len..(b + 1) * len];
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![rows.clone(), cols.clone()]);
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    let mut scores = qh.dot(&kh.t());
                    scores *= scale;
                    let pr = masked_softmax(&scores, valid);
                    let out = if let Some(drops) = att_drop.as_mut() {
                        let m = self
                            .dropout_mask(mode, layer, 1 + (b * heads + h) as u64 * 4, len, len, cfg.attention_dropout)
                            .expect("train mode");
                        let out = (&pr * &m).dot(&vh);
                        drops.push(m);
                        out
                    } else {
                        pr.dot(&vh)
                    };
                    ctx.slice_mut(s![rows.clone(), cols]).assign(&out);
                    probs.push(pr);
                }
            }
            let mut o = ctx.dot(&bp.wo) + &bp.bo;
            let o_drop = self.dropout_mask(mode, layer, 2, n, d, cfg.hidden_dropout);
            if let Some(m) = &o_drop {
                o *= m;
            }
            let h1 = &x_in + &o;
            let (c, ln2) = layer_norm(&h1, &bp.ln2_g, &bp.ln2_b);
            let f1 = c.dot(&bp.w1) + &bp.b1;
            let g = f1.mapv(gelu);
            let mut f2 = g.dot(&bp.w2) + &bp.b2;
            let f2_drop = self.dropout_mask(mode, layer, 3, n, d, cfg.hidden_dropout);
            if let Some(m) = &f2_drop {
                f2 *= m;
            }
            x = &h1 + &f2;
            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                att_drop,
                ctx,
                o_drop,
                ln2,
                c,
                f1,
                g,
                f2_drop,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        Ok(Trace {
            shape_key: self.shape_key(),
            batch: batch.clone(),
            emb_drop,
            blocks,
            lnf,
            hidden,
        })
    }

    fn shape_key(&self) -> (usize, usize, usize, usize) {
        (self.config.layers, self.config.dim, self.vocab_size, self.config.heads)
    }

    fn mlm_hidden(&self, trace: &Trace<T>) -> Array2<T> {
        let len = trace.batch.seq_len;
        let mut hm = Array2::<T>::zeros((trace.batch.mask_positions.len(), self.config.dim));
        for (i, &(b, p)) in trace.batch.mask_positions.iter().enumerate() {
            hm.row_mut(i).assign(&trace.hidden.row(b * len + p));
        }
        hm
    }

    fn mlm_logits(&self, trace: &Trace<T>) -> Array2<T> {
        self.mlm_hidden(trace).dot(&self.params.tok_emb.t()) + &self.params.mlm_bias
    }

    /// Log-probabilities over the vocabulary, one row per masked position.
    pub fn mlm_log_probs(&self, trace: &Trace<T>) -> Array2<T> {
        log_softmax(&self.mlm_logits(trace))
    }

    fn pooled(&self, trace: &Trace<T>) -> Array2<T> {
        let (bsz, len) = (trace.batch.batch_size, trace.batch.seq_len);
        let mut out = Array2::<T>::zeros((bsz, self.config.dim));
        for b in 0..bsz {
            match self.config.pooling {
                Pooling::First => out.row_mut(b).assign(&trace.hidden.row(b * len)),
                Pooling::Mean => {
                    let valid = &trace.batch.valid[b * len..(b + 1) * len];
                    let cnt = valid.iter().filter(|&&v| v).count();
                    let inv: T = cst(1.0 / cnt as f64);
                    let mut row = out.row_mut(b);
                    for (p, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                        row.scaled_add(inv, &trace.hidden.row(b * len + p));
                    }
                }
            }
        }
        out
    }

    fn head_params(&self, head: Head) -> (&Array2<T>, &Array1<T>) {
        match head {
            Head::Dynasty => (&self.params.dyn_w, &self.params.dyn_b),
            Head::Period => (&self.params.per_w, &self.params.per_b),
        }
    }

    /// Log-probabilities over a label space, one row per sequence.
    pub fn classify_log_probs(&self, trace: &Trace<T>, head: Head) -> Array2<T> {
        let (w, b) = self.head_params(head);
        log_softmax(&(self.pooled(trace).dot(w) + b))
    }

    pub fn forward_mlm(&self, batch: &Batch, mode: Mode) -> Result<(Array2<T>, Trace<T>), ModelError> {
        let trace = self.encode(batch, mode)?;
        Ok((self.mlm_log_probs(&trace), trace))
    }

    pub fn forward_classify(
        &self,
        batch: &Batch,
        head: Head,
        mode: Mode,
    ) -> Result<(Array2<T>, Trace<T>), ModelError> {
        let trace = self.encode(batch, mode)?;
        Ok((self.classify_log_probs(&trace, head), trace))
    }

    /// Exact gradients of a loss whose derivative with respect to the head
    /// log-probabilities is `upstream`. Frozen tensors receive zeros.
    pub fn backward(&self, trace: &Trace<T>, upstream: &Upstream<T>) -> Result<Params<T>, ModelError> {
        if trace.shape_key != self.shape_key() || trace.blocks.len() != self.params.blocks.len() {
            return Err(ModelError::TraceMismatch("shape differs".into()));
        }
        if upstream.mlm.is_none() && upstream.dynasty.is_none() && upstream.period.is_none() {
            return Err(ModelError::NoUpstream);
        }
        let cfg = &self.config;
        let p = &self.params;
        let batch = &trace.batch;
        let (bsz, len, d) = (batch.batch_size, batch.seq_len, cfg.dim);
        let n = bsz * len;
        let mut grads = p.zeros_like();
        let mut dhidden = Array2::<T>::zeros((n, d));

        if let Some(g) = &upstream.mlm {
            let m = batch.mask_positions.len();
            if g.dim() != (m, self.vocab_size) {
                return Err(ModelError::TraceMismatch("MLM upstream shape".into()));
            }
            let logits = self.mlm_logits(trace);
            let dlogits = log_softmax_backward(&log_softmax(&logits), g);
            let hm = self.mlm_hidden(trace);
            grads.mlm_bias += &dlogits.sum_axis(Axis(0));
            grads.tok_emb += &dlogits.t().dot(&hm);
            let dhm = dlogits.dot(&p.tok_emb);
            for (i, &(b, pos)) in batch.mask_positions.iter().enumerate() {
                let mut row = dhidden.row_mut(b * len + pos);
                row += &dhm.row(i);
            }
        }
        for (head, g) in [(Head::Dynasty, &upstream.dynasty), (Head::Period, &upstream.period)] {
            let Some(g) = g else { continue };
            let classes = match head {
                Head::Dynasty => self.labels.dynasty,
                Head::Period => self.labels.period,
            };
            if g.dim() != (bsz, classes) {
                return Err(ModelError::TraceMismatch("classification upstream shape".into()));
            }
            let (w, bias) = self.head_params(head);
            let pooled = self.pooled(trace);
            let dlogits = log_softmax_backward(&log_softmax(&(pooled.dot(w) + bias)), g);
            let dw = pooled.t().dot(&dlogits);
            let db = dlogits.sum_axis(Axis(0));
            match head {
                Head::Dynasty => {
                    grads.dyn_w += &dw;
                    grads.dyn_b += &db;
                }
                Head::Period => {
                    grads.per_w += &dw;
                    grads.per_b += &db;
                }
            }
            let dpooled = dlogits.dot(&w.t());
            for b in 0..bsz {
                match cfg.pooling {
                    Pooling::First => {
                        let mut row = dhidden.row_mut(b * len);
                        row += &dpooled.row(b);
                    }
                    Pooling::Mean => {
                        let valid = &batch.valid[b * len..(b + 1) * len];
                        let cnt = valid.iter().filter(|&&v| v).count();
                        let inv: T = cst(1.0 / cnt as f64);
                        for (pos, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                            dhidden.row_mut(b * len + pos).scaled_add(inv, &dpooled.row(b));
                        }
                    }
                }
            }
        }

        let (mut dx, dg, db) = layer_norm_backward(&dhidden, &trace.lnf, &p.lnf_g);
        grads.lnf_g += &dg;
        grads.lnf_b += &db;

        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale: T = cst(1.0 / (dh as f64).sqrt());
        for l in (0..cfg.layers).rev() {
            let bp = &p.blocks[l];
            let cache = &trace.blocks[l];
            let gb = &mut grads.blocks[l];
            // x_out = h1 + drop(f2)
            let mut df2 = dx.clone();
            if let Some(m) = &cache.f2_drop {
                df2 *= m;
            }
            gb.w2 += &cache.g.t().dot(&df2);
            gb.b2 += &df2.sum_axis(Axis(0));
            let dg_act = df2.dot(&bp.w2.t());
            let df1 = &dg_act * &cache.f1.mapv(gelu_grad);
            gb.w1 += &cache.c.t().dot(&df1);
            gb.b1 += &df1.sum_axis(Axis(0));
            let dc = df1.dot(&bp.w1.t());
            let (dh1_ln, dg2, db2) = layer_norm_backward(&dc, &cache.ln2, &bp.ln2_g);
            gb.ln2_g += &dg2;
            gb.ln2_b += &db2;
            let dh1 = dx + &dh1_ln;
            // h1 = x_in + drop(o)
            let mut do_ = dh1.clone();
            if let Some(m) = &cache.o_drop {
                do_ *= m;
            }
            gb.wo += &cache.ctx.t().dot(&do_);
            gb.bo += &do_.sum_axis(Axis(0));
            let dctx = do_.dot(&bp.wo.t());
            let mut dq = Array2::<T>::zeros((n, d));
            let mut dk = Array2::<T>::zeros((n, d));
            let mut dv = Array2::<T>::zeros((n, d));
            for b in 0..bsz {
                let rows = b * len..(b + 1) * len;
                for h in 0..heads {
                    let idx = b * heads + h;
                    let cols = h * dh..(h + 1) * dh;
                    let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                    let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                    let dout = dctx.slice(s![rows.clone(), cols.clone()]);
                    let pr = &cache.probs[idx];
                    let (p_used, mut dpr) = match &cache.att_drop {
                        Some(drops) => {
                            let m = &drops[idx];
                            let dp_used = dout.dot(&vh.t());
                            (pr * m, dp_used * m)
                        }
                        None => (pr.clone(), dout.dot(&vh.t())),
                    };
                    dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p_used.t().dot(&dout));
                    // softmax backward, row-wise
                    let inner = (&dpr * pr).sum_axis(Axis(1));
                    for (mut row, &s_) in dpr.rows_mut().into_iter().zip(inner.iter()) {
                        row.mapv_inplace(|x| x - s_);
                    }
                    let mut dscores = &dpr * pr;
                    dscores *= scale;
                    dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&dscores.dot(&kh));
                    dk.slice_mut(s![rows.clone(), cols]).assign(&dscores.t().dot(&qh));
                }
            }
            gb.wq += &cache.a.t().dot(&dq);
            gb.bq += &dq.sum_axis(Axis(0));
            gb.wk += &cache.a.t().dot(&dk);
            gb.bk += &dk.sum_axis(Axis(0));
            gb.wv += &cache.a.t().dot(&dv);
            gb.bv += &dv.sum_axis(Axis(0));
            let da = dq.dot(&bp.wq.t()) + dk.dot(&bp.wk.t()) + dv.dot(&bp.wv.t());
            let (dx_ln, dg1, db1) = layer_norm_backward(&da, &cache.ln1, &bp.ln1_g);
            gb.ln1_g += &dg1;
            gb.ln1_b += &db1;
            dx = dh1 + &dx_ln;
        }
        if let Some(m) = &trace.emb_drop {
            dx *= m;
        }
        for r in 0..n {
            let tok = batch.tokens[r];
            let pos = r % len.max(1);
            let src = dx.row(r);
            let mut t = grads.tok_emb.row_mut(tok);
            t += &src;
            let mut ps = grads.pos_emb.row_mut(pos);
            ps += &src;
        }
        for (group, slice) in grads.slices_mut() {
            if self.is_frozen(group) {
                slice.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        Ok(grads)
    }
}

fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = x.ncols();
    let inv_d: T = cst(1.0 / d as f64);
    let eps: T = cst(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::<T>::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let mut dxhat = dy * g;
    let inv_d: T = cst(1.0 / dy.ncols() as f64);
    for ((mut row, xh), &rs) in dxhat
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() * inv_d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for (v, &xv) in row.iter_mut().zip(xh.iter()) {
            *v = rs * (*v - mean_d - xv * mean_dx);
        }
    }
    (dxhat, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c: T = cst(GELU_C);
    let a: T = cst(0.044715);
    let half: T = cst(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = cst(GELU_C);
    let a: T = cst(0.044715);
    let half: T = cst(0.5);
    let three: T = cst(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Row-wise softmax over valid key columns; invalid columns get probability 0.
fn masked_softmax<T: Scalar>(scores: &Array2<T>, valid: &[bool]) -> Array2<T> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let mut max = T::neg_infinity();
        for (v, &ok) in row.iter().zip(valid) {
            if ok && *v > max {
                max = *v;
            }
        }
        let mut sum = T::zero();
        for (v, &ok) in row.iter_mut().zip(valid) {
            *v = if ok { (*v - max).exp() } else { T::zero() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradient with respect to logits given the gradient with respect to
/// log-softmax outputs: `g - softmax * rowsum(g)`.
fn log_softmax_backward<T: Scalar>(logp: &Array2<T>, g: &Array2<T>) -> Array2<T> {
    let mut out = g.clone();
    for ((mut row, lp), gs) in out
        .rows_mut()
        .into_iter()
        .zip(logp.rows())
        .zip(g.sum_axis(Axis(1)).iter())
    {
        for (o, &l) in row.iter_mut().zip(lp.iter()) {
            *o -= l.exp() * *gs;
        }
    }
    out
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Params<T>,
    v: Params<T>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &EncoderModel<T>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `theta <- theta * (1 - lr * wd)`, then the bias-corrected Adam update.
    /// Frozen tensors are left untouched.
    pub fn step(&mut self, model: &mut EncoderModel<T>, grads: &Params<T>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let frozen: Vec<bool> = model
            .params
            .slices()
            .iter()
            .map(|(info, _)| model.is_frozen(info.group))
            .collect();
        let decay: T = cst(1.0 - lr * weight_decay);
        let (b1t, b2t): (T, T) = (cst(b1), cst(b2));
        let (ob1, ob2): (T, T) = (cst(1.0 - b1), cst(1.0 - b2));
        let (lr_t, bc1t, bc2t, eps): (T, T, T, T) = (cst(lr), cst(bc1), cst(bc2), cst(self.eps));
        let params = model.params.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        let gs = grads.slices();
        for ((((_, p), (_, m)), (_, v)), ((_, g), &fz)) in params
            .into_iter()
            .zip(ms)
            .zip(vs)
            .zip(gs.into_iter().zip(&frozen))
        {
            if fz {
                continue;
            }
            for i in 0..p.len() {
                m[i] = b1t * m[i] + ob1 * g[i];
                v[i] = b2t * v[i] + ob2 * g[i] * g[i];
                let mhat = m[i] / bc1t;
                let vhat = v[i] / bc2t;
                p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(layers: usize, dim: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            heads: 2,
            dim,
            ff_dim: 2 * dim,
            max_seq_len: 12,
            attention_dropout: 0.1,
            hidden_dropout: 0.1,
            init_std: 0.3,
            pooling: Pooling::First,
            seed: 3,
        }
    }

    fn toy_batch() -> Batch {
        let seqs = vec![vec![2, 5, 1, 7, 3], vec![2, 6, 8, 1, 9, 3, 0]];
        let mut b = Batch::from_sequences(&seqs, &[vec![(2, 4)], vec![(3, 6)]]);
        b.valid[13] = false;
        b
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ff_dim: 16,
            max_seq_len: 10,
            ..EncoderConfig::default()
        };
        let (v, d, f, l) = (20usize, 8usize, 16usize, 10usize);
        let m = EncoderModel::<f64>::init(&cfg, v, LabelSpaces::default()).unwrap();
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let expected = v * d + l * d + block + 2 * d + v + (d * 4 + 4) + (d * 3 + 3);
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_config(1, 8);
        let a = EncoderModel::<f32>::init(&cfg, 10, LabelSpaces::default()).unwrap();
        let b = EncoderModel::<f32>::init(&cfg, 10, LabelSpaces::default()).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::<f32>::init(&EncoderConfig { seed: 4, ..cfg }, 10, LabelSpaces::default()).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn invalid_configs() {
        let bad = EncoderConfig {
            dim: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(EncoderModel::<f32>::init(&bad, 10, LabelSpaces::default()).is_err());
        let bad = EncoderConfig {
            hidden_dropout: 1.0,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_errors() {
        let cfg = tiny_config(1, 8);
        let m = EncoderModel::<f64>::init(&cfg, 10, LabelSpaces::default()).unwrap();
        let long = Batch::from_sequences(&[vec![2; 13]], &[vec![]]);
        assert!(matches!(m.encode(&long, Mode::Eval), Err(ModelError::SequenceTooLong { .. })));
        let oov = Batch::from_sequences(&[vec![2, 11, 3]], &[vec![]]);
        assert!(matches!(m.encode(&oov, Mode::Eval), Err(ModelError::TokenOutOfRange { .. })));
        let trace = m.encode(&toy_batch(), Mode::Eval).unwrap();
        assert_eq!(m.backward(&trace, &Upstream::default()), Err(ModelError::NoUpstream));
        let other = EncoderModel::<f64>::init(&tiny_config(2, 8), 10, LabelSpaces::default()).unwrap();
        let up = Upstream {
            mlm: Some(Array2::zeros((2, 10))),
            ..Default::default()
        };
        assert!(matches!(other.backward(&trace, &up), Err(ModelError::TraceMismatch(_))));
    }

    #[test]
    fn log_probs_normalized_and_eval_deterministic() {
        let m = EncoderModel::<f64>::init(&tiny_config(2, 8), 10, LabelSpaces::default()).unwrap();
        let (lp, _) = m.forward_mlm(&toy_batch(), Mode::Eval).unwrap();
        for row in lp.rows() {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let (lp2, _) = m.forward_mlm(&toy_batch(), Mode::Eval).unwrap();
        assert_eq!(lp, lp2);
        let (d, _) = m.forward_classify(&toy_batch(), Head::Dynasty, Mode::Eval).unwrap();
        assert_eq!(d.ncols(), 4);
        let (p, _) = m.forward_classify(&toy_batch(), Head::Period, Mode::Eval).unwrap();
        assert_eq!(p.ncols(), 3);
        let (t1, _) = m.forward_mlm(&toy_batch(), Mode::Train { step: 1 }).unwrap();
        let (t2, _) = m.forward_mlm(&toy_batch(), Mode::Train { step: 2 }).unwrap();
        assert_ne!(t1, t2);
        assert_ne!(t1, lp);
    }

    #[test]
    fn single_token_vocabulary() {
        let m = EncoderModel::<f64>::init(&tiny_config(1, 8), 1, LabelSpaces::default()).unwrap();
        let b = Batch::from_sequences(&[vec![0, 0, 0]], &[vec![(1, 0)]]);
        let (lp, _) = m.forward_mlm(&b, Mode::Eval).unwrap();
        assert_eq!(lp[[0, 0]], 0.0);
    }

    #[test]
    fn padding_never_leaks() {
        let m = EncoderModel::<f64>::init(&tiny_config(2, 8), 10, LabelSpaces::default()).unwrap();
        let mut a = toy_batch();
        let (lp_a, tr_a) = m.forward_mlm(&a, Mode::Eval).unwrap();
        a.tokens[13] = 5;
        let (lp_b, tr_b) = m.forward_mlm(&a, Mode::Eval).unwrap();
        assert_eq!(lp_a, lp_b);
        let h = a.seq_len;
        for r in 0..a.batch_size * h {
            if a.valid[r] {
                assert_eq!(tr_a.hidden().row(r), tr_b.hidden().row(r));
            }
        }
    }

    #[test]
    fn frozen_gradients_are_zero() {
        let mut m = EncoderModel::<f64>::init(&tiny_config(2, 8), 10, LabelSpaces::default()).unwrap();
        m.freeze_layers(1).unwrap();
        let b = toy_batch();
        let (lp, tr) = m.forward_mlm(&b, Mode::Eval).unwrap();
        let mut up = Array2::zeros(lp.dim());
        up[[0, 4]] = -0.5;
        up[[1, 6]] = -0.5;
        let g = m.backward(&tr, &Upstream { mlm: Some(up), ..Default::default() }).unwrap();
        for (info, s) in g.slices() {
            let zero = s.iter().all(|&x| x == 0.0);
            match info.group {
                Group::Embedding | Group::Block(0) => assert!(zero, "{}", info.name),
                Group::Block(1) if info.name.ends_with("wq") => assert!(!zero),
                _ => {}
            }
        }
        assert!(m.freeze_layers(3).is_err());
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut m = EncoderModel::<f64>::init(&tiny_config(1, 8), 10, LabelSpaces::default()).unwrap();
        let before = m.params.clone();
        let mut grads = m.params.zeros_like();
        grads.mlm_bias[0] = 2.0;
        grads.mlm_bias[1] = -0.5;
        let mut opt = AdamW::new(&m);
        let (lr, wd) = (0.1, 0.01);
        opt.step(&mut m, &grads, lr, wd);
        // first step: m_hat = g, v_hat = g^2, so the Adam term is lr * g / (|g| + eps)
        let exp0 = before.mlm_bias[0] * (1.0 - lr * wd) - lr * 2.0 / (2.0 + 1e-8);
        let exp1 = before.mlm_bias[1] * (1.0 - lr * wd) + lr * 0.5 / (0.5 + 1e-8);
        assert!((m.params.mlm_bias[0] - exp0).abs() < 1e-15);
        assert!((m.params.mlm_bias[1] - exp1).abs() < 1e-15);
        let w_before = before.blocks[0].wq[[0, 0]];
        assert!((m.params.blocks[0].wq[[0, 0]] - w_before * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_lr_and_decay_contraction() {
        let mut m = EncoderModel::<f64>::init(&tiny_config(1, 8), 10, LabelSpaces::default()).unwrap();
        let before = m.params.clone();
        let grads = m.params.zeros_like();
        AdamW::new(&m).step(&mut m, &grads, 0.0, 0.01);
        assert_eq!(m.params, before);
        let norm = |p: &Params<f64>| p.slices().iter().flat_map(|(_, s)| s.iter()).map(|x| x * x).sum::<f64>();
        AdamW::new(&m).step(&mut m, &grads, 0.1, 0.5);
        assert!(norm(&m.params) < norm(&before));
    }

    #[test]
    fn freezing_everything_blocks_updates() {
        let mut m = EncoderModel::<f64>::init(&tiny_config(2, 8), 10, LabelSpaces::default()).unwrap();
        m.freeze_layers(2).unwrap();
        let before = m.params.clone();
        let mut grads = m.params.zeros_like();
        for (_, s) in grads.slices_mut() {
            s.iter_mut().enumerate().for_each(|(i, x)| *x = ((i % 7) as f64 - 3.0) * 0.1);
        }
        AdamW::new(&m).step(&mut m, &grads, 0.01, 0.01);
        for ((info, a), (_, b)) in m.params.slices().into_iter().zip(before.slices()) {
            if info.group == Group::Top {
                assert_ne!(a, b, "{}", info.name);
            } else {
                assert_eq!(a, b, "{}", info.name);
            }
        }
    }
}
