//! Adaptation schedules: optional domain-adaptive pretraining on auxiliary
//! text (bottom layers frozen), task-adaptive pretraining on inscriptions,
//! and dating fine-tuning of the classification heads.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary, BOS, EOS};
use crate::encoder::{AdamW, Batch, EncoderConfig, EncoderModel, Head, LabelSpaces, Mode, ModelError, Upstream};
use crate::glyphnet::GlyphNet;
use crate::masking::{sample_mask_plan, MaskConfig, MaskError, MaskMode, StrideOffset};
use crate::objectives::{classification_loss, objective, AlphaSchedule, LossBreakdown, LossError};
use crate::seeds::{derive_seed, str_key};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("schedule {schedule:?} needs a {which} corpus")]
    MissingCorpus { schedule: Schedule, which: &'static str },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or gradient at step {step} ({stage:?})")]
    NonFinite { step: u64, stage: Stage },
    #[error("corpus has no {0} labels")]
    NoLabels(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Baseline,
    DAPTOnly,
    TAPTOnly,
    TAPTFromDAPT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dapt,
    Tapt,
    Finetune,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Dapt => 1,
            Stage::Tapt => 2,
            Stage::Finetune => 4,
        }
    }
}

const MIX_TAG: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Train only the heads (and final norm), leaving the encoder fixed.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: Schedule,
    pub use_gn_loss: bool,
    pub use_bias_sampling: bool,
    pub mask: MaskConfig,
    /// `encoder.seed` is overwritten by the run seed.
    pub encoder: EncoderConfig,
    pub alpha: AlphaSchedule,
    pub dapt_epochs: usize,
    pub tapt_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Blocks frozen (with the embeddings) during DAPT; `layers / 2` if unset.
    pub dapt_frozen_layers: Option<usize>,
    /// Weight of a mixed-in DAPT batch during TAPT; 0 disables mixing.
    pub lambda_dapt: f64,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: Schedule::TAPTOnly,
            use_gn_loss: false,
            use_bias_sampling: false,
            mask: MaskConfig {
                offset: StrideOffset::Random,
                ..MaskConfig::default()
            },
            encoder: EncoderConfig::default(),
            alpha: AlphaSchedule::default(),
            dapt_epochs: 2,
            tapt_epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            dapt_frozen_layers: None,
            lambda_dapt: 0.0,
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.lambda_dapt) {
            return bad("lambda_dapt must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr >= 0.0 && self.finetune.lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.dapt_frozen_layers.is_some_and(|k| k > self.encoder.layers) {
            return bad("dapt_frozen_layers exceeds encoder depth");
        }
        self.encoder.validate()?;
        self.mask.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: self.seed,
            ..self.encoder.clone()
        }
    }

    pub fn frozen_for_dapt(&self) -> usize {
        self.dapt_frozen_layers.unwrap_or(self.encoder.layers / 2)
    }
}

/// A corpus encoded against a vocabulary, with boundaries, split into
/// windows that fit the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub ids: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub dynasty: Vec<Option<usize>>,
    pub period: Vec<Option<usize>>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Token indices occurring anywhere in the corpus.
    pub fn token_set(&self) -> BTreeSet<usize> {
        self.sequences
            .iter()
            .flat_map(|s| s[1..s.len() - 1].iter().copied())
            .collect()
    }

    fn has_labels(&self, head: Head) -> bool {
        match head {
            Head::Dynasty => self.dynasty.iter().any(Option::is_some),
            Head::Period => self.period.iter().any(Option::is_some),
        }
    }
}

/// Encodes `[BOS] tokens [EOS]`. Inscriptions longer than `max_seq_len - 2`
/// are split into consecutive windows with ids `id#1`, `id#2`, ...
pub fn encode_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<EncodedCorpus, TrainError> {
    if max_seq_len < 3 {
        return Err(TrainError::InvalidConfig("max_seq_len must be at least 3".into()));
    }
    let window = max_seq_len - 2;
    let mut out = EncodedCorpus {
        ids: Vec::new(),
        sequences: Vec::new(),
        dynasty: Vec::new(),
        period: Vec::new(),
    };
    for ins in &corpus.inscriptions {
        let idx = vocab.encode(&ins.tokens).map_err(|t| {
            TrainError::VocabMismatch(format!("{}: token {:?} not in vocabulary", ins.id, t.surface()))
        })?;
        let chunks: Vec<&[usize]> = idx.chunks(window).collect();
        for (k, chunk) in chunks.iter().enumerate() {
            let mut seq = Vec::with_capacity(chunk.len() + 2);
            seq.push(BOS);
            seq.extend_from_slice(chunk);
            seq.push(EOS);
            out.ids.push(if chunks.len() == 1 {
                ins.id.clone()
            } else {
                format!("{}#{}", ins.id, k + 1)
            });
            out.sequences.push(seq);
            out.dynasty.push(ins.dynasty.map(|d| d.index()));
            out.period.push(ins.period.map(|p| p.index()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Loss of the mixed-in DAPT batch, when stage mixing is active.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mixed: Option<LossBreakdown>,
    /// Objective actually optimized at this step.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub epoch: usize,
    pub dynasty: Option<f64>,
    pub period: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.steps {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(TrainLog { steps })
    }

    /// Step indices and optimized losses.
    pub fn losses(&self) -> Vec<(u64, f64)> {
        self.steps.iter().map(|r| (r.step, r.total)).collect()
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |r| r.stage == stage)
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: EncoderModel<f32>,
    pub log: TrainLog,
    pub stages: Vec<Stage>,
    /// Tokens observed by the model during training, for the unseen-form
    /// evaluation split.
    pub seen_tokens: BTreeSet<usize>,
}

struct StageSpec<'a> {
    stage: Stage,
    data: &'a EncodedCorpus,
    epochs: usize,
    frozen: usize,
    gn: bool,
    mask: MaskConfig,
    mix: Option<(&'a EncodedCorpus, MaskConfig)>,
}

fn check_vocab(data: &EncodedCorpus, vocab: &Vocabulary, net: &GlyphNet) -> Result<(), TrainError> {
    if net.universe_size() != vocab.len() {
        return Err(TrainError::VocabMismatch(format!(
            "glyph net covers {} tokens, vocabulary has {}",
            net.universe_size(),
            vocab.len()
        )));
    }
    if let Some(&t) = data.sequences.iter().flatten().find(|&&t| t >= vocab.len()) {
        return Err(TrainError::VocabMismatch(format!("token index {t} outside vocabulary")));
    }
    Ok(())
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Masks each selected sequence; sequences without candidates are dropped.
fn mlm_batch(
    data: &EncodedCorpus,
    rows: &[usize],
    mask: &MaskConfig,
    net: &GlyphNet,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Option<Batch>, TrainError> {
    let mut inputs = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for &i in rows {
        let id = &data.ids[i];
        let seq = &data.sequences[i];
        match sample_mask_plan(id, seq, mask, net, vocab, derive_seed(seed, &[str_key(id)])) {
            Ok(plan) => {
                inputs.push(plan.apply(seq));
                masks.push(plan.positions.iter().copied().zip(plan.gold.iter().copied()).collect());
            }
            Err(MaskError::NoCandidates) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if inputs.is_empty() {
        return Ok(None);
    }
    Ok(Some(Batch::from_sequences(&inputs, &masks)))
}

fn mlm_gradients(
    model: &EncoderModel<f32>,
    batch: &Batch,
    net: &GlyphNet,
    alpha: f64,
    step: u64,
) -> Result<(LossBreakdown, crate::encoder::Params<f32>), TrainError> {
    let (logp, trace) = model.forward_mlm(batch, Mode::Train { step })?;
    let (breakdown, grad) = objective(logp.view(), &batch.gold, net, alpha)?;
    let grads = model.backward(
        &trace,
        &Upstream {
            mlm: Some(grad),
            ..Default::default()
        },
    )?;
    Ok((breakdown, grads))
}

/// Executes the configured schedule. Deterministic in `config.seed`.
pub fn run(
    config: &RunConfig,
    dapt: Option<&EncodedCorpus>,
    tapt: Option<&EncodedCorpus>,
    net: &GlyphNet,
    vocab: &Vocabulary,
) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let schedule = config.schedule;
    let need_dapt = matches!(schedule, Schedule::DAPTOnly | Schedule::TAPTFromDAPT);
    let need_tapt = matches!(schedule, Schedule::TAPTOnly | Schedule::TAPTFromDAPT);
    let dapt = match (need_dapt, dapt) {
        (true, None) => return Err(TrainError::MissingCorpus { schedule, which: "DAPT" }),
        (_, d) => d,
    };
    let tapt = match (need_tapt, tapt) {
        (true, None) => return Err(TrainError::MissingCorpus { schedule, which: "TAPT" }),
        (_, t) => t,
    };
    for data in dapt.iter().chain(tapt.iter()) {
        check_vocab(data, vocab, net)?;
    }

    let mut model = EncoderModel::<f32>::init(&config.model_config(), vocab.len(), LabelSpaces::default())?;
    let plain = MaskConfig {
        mode: MaskMode::Uniform,
        ..config.mask.clone()
    };
    let task_mask = MaskConfig {
        mode: if config.use_bias_sampling {
            MaskMode::GlyphBiased
        } else {
            MaskMode::Uniform
        },
        ..config.mask.clone()
    };
    let mut specs = Vec::new();
    if need_dapt {
        specs.push(StageSpec {
            stage: Stage::Dapt,
            data: dapt.expect("checked"),
            epochs: config.dapt_epochs,
            frozen: config.frozen_for_dapt(),
            gn: false,
            mask: plain.clone(),
            mix: None,
        });
    }
    if need_tapt {
        let mix = match (schedule, dapt) {
            (Schedule::TAPTFromDAPT, Some(d)) if config.lambda_dapt > 0.0 => Some((d, plain.clone())),
            _ => None,
        };
        specs.push(StageSpec {
            stage: Stage::Tapt,
            data: tapt.expect("checked"),
            epochs: config.tapt_epochs,
            frozen: 0,
            gn: config.use_gn_loss,
            mask: task_mask,
            mix,
        });
    }

    let mut seen_tokens = BTreeSet::new();
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for spec in &specs {
        seen_tokens.extend(spec.data.token_set());
        if let Some((d, _)) = spec.mix {
            seen_tokens.extend(d.token_set());
        }
        model.freeze_layers(spec.frozen)?;
        let mut opt = AdamW::new(&model);
        let per_epoch = batches_per_epoch(spec.data.len(), config.batch_size);
        let alpha = if spec.gn {
            config.alpha.resolved(per_epoch * spec.epochs as u64)
        } else {
            AlphaSchedule::constant(0.0)
        };
        let mut stage_step = 0u64;
        let mut mix_cursor = 0usize;
        let mut mix_epoch = 0u64;
        let mut mix_order: Vec<usize> = Vec::new();
        for epoch in 0..spec.epochs {
            let tag = spec.stage.tag();
            let order = permutation(spec.data.len(), derive_seed(config.seed, &[tag, epoch as u64]));
            let mask_seed = derive_seed(config.seed, &[tag, epoch as u64, 0x3A5C]);
            for rows in order.chunks(config.batch_size) {
                let a = alpha.alpha_at(stage_step);
                stage_step += 1;
                let Some(batch) = mlm_batch(spec.data, rows, &spec.mask, net, vocab, mask_seed)? else {
                    continue;
                };
                let (loss, mut grads) = mlm_gradients(&model, &batch, net, a, step)?;
                let mut total = loss.combined;
                let mut mixed = None;
                if let Some((mix_data, mix_mask)) = &spec.mix {
                    let lambda = config.lambda_dapt;
                    let mut rows = Vec::with_capacity(config.batch_size);
                    while rows.len() < config.batch_size.min(mix_data.len()) {
                        if mix_cursor == mix_order.len() {
                            mix_order =
                                permutation(mix_data.len(), derive_seed(config.seed, &[MIX_TAG, mix_epoch]));
                            mix_epoch += 1;
                            mix_cursor = 0;
                        }
                        rows.push(mix_order[mix_cursor]);
                        mix_cursor += 1;
                    }
                    let seed = derive_seed(config.seed, &[MIX_TAG, step, 0x3A5C]);
                    if let Some(mb) = mlm_batch(mix_data, &rows, mix_mask, net, vocab, seed)? {
                        let (mloss, mgrads) = mlm_gradients(&model, &mb, net, 0.0, step)?;
                        grads.scale(1.0 - lambda as f32);
                        grads.add_scaled(&mgrads, lambda as f32);
                        total = (1.0 - lambda) * loss.combined + lambda * mloss.combined;
                        mixed = Some(mloss);
                    }
                }
                if !total.is_finite() || !grads.all_finite() {
                    return Err(TrainError::NonFinite { step, stage: spec.stage });
                }
                opt.step(&mut model, &grads, config.lr, config.weight_decay);
                log.steps.push(StepRecord {
                    step,
                    stage: spec.stage,
                    epoch,
                    loss,
                    mixed,
                    total,
                });
                step += 1;
            }
        }
    }
    model.freeze_layers(0)?;
    Ok(RunOutput {
        model,
        log,
        stages: specs.iter().map(|s| s.stage).collect(),
        seen_tokens,
    })
}

/// Trains the requested classification heads on labelled sequences.
/// Rows missing every requested label are skipped.
pub fn fine_tune_dating(
    mut model: EncoderModel<f32>,
    data: &EncodedCorpus,
    heads: &[Head],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(EncoderModel<f32>, Vec<FinetuneRecord>), TrainError> {
    if heads.is_empty() {
        return Err(TrainError::InvalidConfig("no head selected".into()));
    }
    if config.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch size must be positive".into()));
    }
    for &h in heads {
        if !data.has_labels(h) {
            return Err(TrainError::NoLabels(match h {
                Head::Dynasty => "dynasty",
                Head::Period => "period",
            }));
        }
    }
    let use_dyn = heads.contains(&Head::Dynasty);
    let use_per = heads.contains(&Head::Period);
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| (use_dyn && data.dynasty[i].is_some()) || (use_per && data.period[i].is_some()))
        .collect();
    if config.freeze_encoder {
        model.freeze_encoder();
    } else {
        model.freeze_layers(0)?;
    }
    let mut opt = AdamW::new(&model);
    let mut records = Vec::new();
    let tag = Stage::Finetune.tag();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = permutation(rows.len(), derive_seed(seed, &[tag, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let picked: Vec<usize> = chunk.iter().map(|&j| rows[j]).collect();
            let seqs: Vec<Vec<usize>> = picked.iter().map(|&i| data.sequences[i].clone()).collect();
            let dyn_gold: Vec<Option<usize>> = picked.iter().map(|&i| data.dynasty[i]).collect();
            let per_gold: Vec<Option<usize>> = picked.iter().map(|&i| data.period[i]).collect();
            let batch = Batch::from_sequences(&seqs, &vec![Vec::new(); seqs.len()]);
            // Dropout streams are keyed apart from pretraining steps.
            let trace = model.encode(&batch, Mode::Train { step: derive_seed(seed, &[tag, step]) })?;
            let mut upstream = Upstream::default();
            let mut rec = FinetuneRecord {
                step,
                epoch,
                dynasty: None,
                period: None,
            };
            if use_dyn && dyn_gold.iter().any(Option::is_some) {
                let logp = model.classify_log_probs(&trace, Head::Dynasty);
                let term = classification_loss(logp.view(), &dyn_gold)?;
                rec.dynasty = Some(term.value);
                upstream.dynasty = Some(term.grad);
            }
            if use_per && per_gold.iter().any(Option::is_some) {
                let logp = model.classify_log_probs(&trace, Head::Period);
                let term = classification_loss(logp.view(), &per_gold)?;
                rec.period = Some(term.value);
                upstream.period = Some(term.grad);
            }
            let grads = model.backward(&trace, &upstream)?;
            let finite = rec.dynasty.is_none_or(f64::is_finite) && rec.period.is_none_or(f64::is_finite);
            if !finite || !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    stage: Stage::Finetune,
                });
            }
            opt.step(&mut model, &grads, config.lr, config.weight_decay);
            records.push(rec);
            step += 1;
        }
    }
    model.freeze_layers(0)?;
    Ok((model, records))
}
