//! Seeded generators for formulaic synthetic corpora with allograph
//! families, used by tests, fixtures and directional experiments.
//!
//! Texts are built from a fixed phrase inventory; a template is a sequence
//! of phrases and an inscription is one realization of a template. Family
//! graphemes have three forms each: two occur in training text, the third
//! only in held-out test text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusKind, Dynasty, Inscription, Period, Token};
use crate::glyphnet::{AllographPair, Era};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub graphemes: usize,
    /// Graphemes `0..families` carry three forms each.
    pub families: usize,
    pub phrases: usize,
    pub phrase_len: (usize, usize),
    pub phrases_per_template: usize,
    pub templates: usize,
    /// Training realizations per template.
    pub realizations: usize,
    /// Test inscriptions, each from a fresh template.
    pub test_templates: usize,
    pub dapt_texts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            graphemes: 120,
            families: 50,
            phrases: 60,
            phrase_len: (3, 5),
            phrases_per_template: 3,
            templates: 600,
            realizations: 3,
            test_templates: 200,
            dapt_texts: 300,
            seed: 0,
        }
    }
}

/// Surface form `f` (0 to 3) of grapheme `g`.
pub fn form(g: usize, f: usize) -> String {
    let base = [0x4E00, 0x5400, 0x5A00, 0x6000][f];
    char::from_u32(base + g as u32).expect("CJK block").to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Corpus,
    pub test: Corpus,
    pub dapt: Corpus,
    pub pairs: Vec<AllographPair>,
    /// Forms that occur only in the test corpus.
    pub held_out: Vec<String>,
}

struct Language {
    phrases: Vec<Vec<usize>>,
}

impl Language {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let phrases = (0..cfg.phrases)
            .map(|_| {
                let n = rng.gen_range(cfg.phrase_len.0..=cfg.phrase_len.1);
                (0..n).map(|_| rng.gen_range(0..cfg.graphemes)).collect()
            })
            .collect();
        Language { phrases }
    }

    fn template(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..cfg.phrases_per_template)
            .flat_map(|_| self.phrases.choose(rng).expect("phrases").iter().copied())
            .collect()
    }
}

fn family_pairs(families: usize, forms: usize) -> Vec<AllographPair> {
    let mut pairs = Vec::new();
    for g in 0..families {
        // A chain, so later forms join only through closure.
        for f in 1..forms {
            pairs.push(AllographPair {
                a: form(g, f - 1),
                b: form(g, f),
                era: if f == 1 { Some(Era::WesternZhou) } else { None },
                source: "synthetic".into(),
            });
        }
    }
    pairs
}

fn inscription(id: String, graphemes: &[usize], realize: impl FnMut(usize) -> String) -> Inscription {
    Inscription {
        id,
        tokens: graphemes.iter().copied().map(realize).map(Token::Identifiable).collect(),
        dynasty: None,
        period: None,
        provenance: Some("synthetic".into()),
    }
}

/// Restoration corpus: training realizations mix forms 0 and 1 at random;
/// test inscriptions use form 2 for every family grapheme. The DAPT corpus
/// renders longer texts in form 0 only.
pub fn restoration_corpus(cfg: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5E]));
    let lang = Language::new(cfg, &mut rng);
    let nf = cfg.families;
    let mut train = Vec::new();
    for t in 0..cfg.templates {
        let tpl = lang.template(cfg, &mut rng);
        for r in 0..cfg.realizations {
            let ins = inscription(format!("T{t:04}-{r}"), &tpl, |g| {
                form(g, if g < nf { rng.gen_range(0..2) } else { 0 })
            });
            train.push(ins);
        }
    }
    let test = (0..cfg.test_templates)
        .map(|t| {
            let tpl = lang.template(cfg, &mut rng);
            inscription(format!("H{t:04}"), &tpl, |g| form(g, if g < nf { 2 } else { 0 }))
        })
        .collect();
    let dapt = (0..cfg.dapt_texts)
        .map(|t| {
            let n = 2 * cfg.phrases_per_template;
            let text: Vec<usize> = (0..n)
                .flat_map(|_| lang.phrases.choose(&mut rng).expect("phrases").iter().copied())
                .collect();
            inscription(format!("D{t:04}"), &text, |g| form(g, 0))
        })
        .collect();
    SynthData {
        train: Corpus::new(CorpusKind::Inscriptional, train),
        test: Corpus::new(CorpusKind::Inscriptional, test),
        dapt: Corpus::new(CorpusKind::Auxiliary, dapt),
        pairs: family_pairs(cfg.families, 3),
        held_out: (0..nf).map(|g| form(g, 2)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatingData {
    /// Unlabelled text for adaptive pretraining.
    pub unlabelled: Corpus,
    /// Labelled fine-tuning set.
    pub labelled: Corpus,
    pub test: Corpus,
    pub pairs: Vec<AllographPair>,
}

/// Dating corpus where the dynasty governs allograph choice: family
/// graphemes have four forms and an inscription of dynasty `d` writes each
/// with form `d` with probability `style`, otherwise a uniformly random
/// form. Periods are uniform noise. Dynasties are balanced.
pub fn dating_corpus(cfg: &SynthConfig, style: f64, unlabelled: usize, labelled: usize, test: usize) -> DatingData {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xDA7E]));
    let lang = Language::new(cfg, &mut rng);
    let nf = cfg.families;
    let make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Inscription> {
        (0..n)
            .map(|i| {
                let d = i % 4;
                let p = rng.gen_range(0..3);
                let tpl = lang.template(cfg, rng);
                let mut ins = inscription(format!("{prefix}{i:05}"), &tpl, |g| {
                    if g < nf {
                        form(g, if rng.gen_bool(style) { d } else { rng.gen_range(0..4) })
                    } else {
                        form(g, 0)
                    }
                });
                ins.dynasty = Dynasty::from_index(d);
                ins.period = Period::from_index(p);
                ins
            })
            .collect()
    };
    let mut u = make("U", unlabelled, &mut rng);
    let l = make("L", labelled, &mut rng);
    let t = make("E", test, &mut rng);
    for ins in &mut u {
        ins.dynasty = None;
        ins.period = None;
    }
    DatingData {
        unlabelled: Corpus::new(CorpusKind::Inscriptional, u),
        labelled: Corpus::new(CorpusKind::Inscriptional, l),
        test: Corpus::new(CorpusKind::Inscriptional, t),
        pairs: family_pairs(nf, 4),
    }
}
