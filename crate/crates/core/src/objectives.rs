//! Training objectives: the masked-LM loss, the glyph-family loss, their
//! interpolation, the mixing-weight schedule and the classification loss.
//!
//! Each loss comes with its gradient with respect to the log-probability
//! matrix it consumes, ready to feed [`crate::encoder::Upstream`].

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::{cst, Scalar};
use crate::glyphnet::GlyphNet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("no masked positions")]
    EmptyMask,
    #[error("no labelled examples")]
    NoLabels,
    #[error("expected {expected} gold entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("gold index {0} outside the output space")]
    GoldOutOfRange(usize),
}

#[derive(Debug, Clone)]
pub struct LossTerm<T> {
    pub value: f64,
    /// d value / d log-probabilities.
    pub grad: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub gn: f64,
    pub alpha: f64,
    pub combined: f64,
    pub masked: usize,
}

fn check_gold<T>(logp: &ArrayView2<'_, T>, gold: &[usize]) -> Result<(), LossError> {
    if gold.is_empty() || logp.nrows() == 0 {
        return Err(LossError::EmptyMask);
    }
    if gold.len() != logp.nrows() {
        return Err(LossError::LengthMismatch {
            expected: logp.nrows(),
            got: gold.len(),
        });
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= logp.ncols()) {
        return Err(LossError::GoldOutOfRange(g));
    }
    Ok(())
}

/// Mean negative log-probability of the gold token over masked positions.
pub fn mlm_loss<T: Scalar>(logp: ArrayView2<'_, T>, gold: &[usize]) -> Result<LossTerm<T>, LossError> {
    check_gold(&logp, gold)?;
    let m = gold.len() as f64;
    let mut grad = Array2::<T>::zeros(logp.dim());
    let w: T = cst(-1.0 / m);
    let mut sum = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        sum -= logp[[i, g]].to_f64().unwrap();
        grad[[i, g]] = w;
    }
    Ok(LossTerm { value: sum / m, grad })
}

/// For each masked position, the mean negative log-probability over every
/// member of the gold token's family; then the mean over positions.
pub fn gn_loss<T: Scalar>(
    logp: ArrayView2<'_, T>,
    gold: &[usize],
    net: &GlyphNet,
) -> Result<LossTerm<T>, LossError> {
    check_gold(&logp, gold)?;
    let m = gold.len() as f64;
    let mut grad = Array2::<T>::zeros(logp.dim());
    let mut sum = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        let members = if g < net.universe_size() {
            net.members_of(g)
        } else {
            std::slice::from_ref(&gold[i])
        };
        let k = members.len() as f64;
        let w: T = cst(-1.0 / (m * k));
        let mut inner = 0.0;
        for &t in members {
            inner -= logp[[i, t]].to_f64().unwrap();
            grad[[i, t]] += w;
        }
        sum += inner / k;
    }
    Ok(LossTerm { value: sum / m, grad })
}

/// `(1 - alpha) * mlm + alpha * gn`.
pub fn combined_loss(mlm: f64, gn: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        mlm
    } else if alpha == 1.0 {
        gn
    } else {
        (1.0 - alpha) * mlm + alpha * gn
    }
}

/// Computes both terms, their mixture and the mixed gradient. With
/// `alpha == 0` the family term is still reported but contributes nothing.
pub fn objective<T: Scalar>(
    logp: ArrayView2<'_, T>,
    gold: &[usize],
    net: &GlyphNet,
    alpha: f64,
) -> Result<(LossBreakdown, Array2<T>), LossError> {
    let mlm = mlm_loss(logp, gold)?;
    let gn = gn_loss(logp, gold, net)?;
    let grad = if alpha == 0.0 {
        mlm.grad
    } else {
        mlm.grad * cst::<T>(1.0 - alpha) + &(gn.grad * cst::<T>(alpha))
    };
    Ok((
        LossBreakdown {
            mlm: mlm.value,
            gn: gn.value,
            alpha,
            combined: combined_loss(mlm.value, gn.value, alpha),
            masked: gold.len(),
        },
        grad,
    ))
}

/// Mean negative log-probability of the gold label over labelled rows;
/// unlabelled rows get zero gradient.
pub fn classification_loss<T: Scalar>(
    logp: ArrayView2<'_, T>,
    gold: &[Option<usize>],
) -> Result<LossTerm<T>, LossError> {
    if gold.len() != logp.nrows() {
        return Err(LossError::LengthMismatch {
            expected: logp.nrows(),
            got: gold.len(),
        });
    }
    let labelled = gold.iter().flatten().count();
    if labelled == 0 {
        return Err(LossError::NoLabels);
    }
    let n = labelled as f64;
    let w: T = cst(-1.0 / n);
    let mut grad = Array2::<T>::zeros(logp.dim());
    let mut sum = 0.0;
    for (i, g) in gold.iter().enumerate() {
        if let Some(g) = *g {
            if g >= logp.ncols() {
                return Err(LossError::GoldOutOfRange(g));
            }
            sum -= logp[[i, g]].to_f64().unwrap();
            grad[[i, g]] = w;
        }
    }
    Ok(LossTerm { value: sum / n, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaShape {
    Constant,
    LinearWarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSchedule {
    pub shape: AlphaShape,
    pub start: f64,
    pub end: f64,
    /// Warm-up length in steps. When `None`, the trainer uses 20% of the
    /// total step count.
    #[serde(default)]
    pub warm_steps: Option<u64>,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            shape: AlphaShape::LinearWarm,
            start: 0.0,
            end: 0.3,
            warm_steps: None,
        }
    }
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> Self {
        AlphaSchedule {
            shape: AlphaShape::Constant,
            start: alpha,
            end: alpha,
            warm_steps: Some(0),
        }
    }

    /// Resolves an unset warm-up length against the run's total step count.
    pub fn resolved(&self, total_steps: u64) -> Self {
        let mut out = self.clone();
        if out.warm_steps.is_none() {
            out.warm_steps = Some(total_steps / 5);
        }
        out
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        let a = match self.shape {
            AlphaShape::Constant => self.start,
            AlphaShape::LinearWarm => {
                let warm = self.warm_steps.unwrap_or(0);
                if step >= warm {
                    self.end
                } else {
                    let t = step as f64 / warm as f64;
                    self.start + (self.end - self.start) * t
                }
            }
        };
        a.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab_with, Corpus, CorpusKind};
    use crate::encoder::log_softmax;
    use crate::glyphnet::{build_families, AllographPair};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logp(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        log_softmax(&Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-3.0..3.0)))
    }

    fn net_with_families(groups: &[&[usize]], vocab: usize) -> GlyphNet {
        // Indices 0..5 are the fixed specials; identifiable tokens follow.
        let names: Vec<String> = (5..vocab)
            .map(|i| char::from_u32(0x4E00 + i as u32).unwrap().to_string())
            .collect();
        let v = build_vocab_with(&[&Corpus::new(CorpusKind::Inscriptional, vec![])], &names).unwrap();
        assert_eq!(v.len(), vocab);
        let pairs: Vec<AllographPair> = groups
            .iter()
            .flat_map(|g| g.windows(2))
            .map(|w| AllographPair {
                a: names[w[0] - 5].clone(),
                b: names[w[1] - 5].clone(),
                era: None,
                source: String::new(),
            })
            .collect();
        build_families(&pairs, &v).unwrap()
    }

    #[test]
    fn uniform_model_costs_log_v() {
        let v = 37;
        let logp = Array2::from_elem((4, v), -(v as f64).ln());
        let l = mlm_loss(logp.view(), &[1, 2, 3, 4]).unwrap();
        assert!((l.value - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_gold_costs_nothing() {
        let mut logp = Array2::from_elem((1, 3), f64::NEG_INFINITY);
        logp[[0, 2]] = 0.0;
        assert_eq!(mlm_loss(logp.view(), &[2]).unwrap().value, 0.0);
    }

    #[test]
    fn mlm_matches_recomputation() {
        let logp = random_logp(5, 11, 1);
        let gold = [3, 0, 10, 7, 7];
        let expect: f64 = -(0..5).map(|i| logp[[i, gold[i]]]).sum::<f64>() / 5.0;
        assert!((mlm_loss(logp.view(), &gold).unwrap().value - expect).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logp = Array2::<f64>::zeros((0, 4));
        assert_eq!(mlm_loss(logp.view(), &[]).unwrap_err(), LossError::EmptyMask);
        let net = GlyphNet::singletons(4);
        assert_eq!(gn_loss(logp.view(), &[], &net).unwrap_err(), LossError::EmptyMask);
    }

    #[test]
    fn singleton_net_reduces_to_mlm() {
        let logp = random_logp(6, 9, 2);
        let gold = [1, 2, 3, 4, 5, 8];
        let net = GlyphNet::singletons(9);
        let a = mlm_loss(logp.view(), &gold).unwrap();
        let b = gn_loss(logp.view(), &gold, &net).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn symmetric_family_equals_mlm() {
        let net = net_with_families(&[&[5, 6]], 9);
        let mut logp = random_logp(1, 9, 3);
        logp[[0, 6]] = logp[[0, 5]];
        let a = mlm_loss(logp.view(), &[5]).unwrap().value;
        let b = gn_loss(logp.view(), &[5], &net).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gn_matches_double_sum() {
        let fams: [&[usize]; 3] = [&[5, 6, 7], &[8, 9, 10], &[11, 12, 13]];
        let net = net_with_families(&fams, 16);
        let logp = random_logp(7, 16, 4);
        let gold = [5, 9, 13, 14, 6, 10, 15];
        let mut total = 0.0;
        for (i, &g) in gold.iter().enumerate() {
            let fam: Vec<usize> = fams
                .iter()
                .find(|f| f.contains(&g))
                .map(|f| f.to_vec())
                .unwrap_or_else(|| vec![g]);
            let mut inner = 0.0;
            for t in &fam {
                inner += logp[[i, *t]];
            }
            total += inner / fam.len() as f64;
        }
        let expect = -total / gold.len() as f64;
        assert!((gn_loss(logp.view(), &gold, &net).unwrap().value - expect).abs() < 1e-9);
    }

    #[test]
    fn mixtures() {
        assert_eq!(combined_loss(1.5, 2.5, 0.0), 1.5);
        assert_eq!(combined_loss(1.5, 2.5, 1.0), 2.5);
        assert_eq!(combined_loss(1.5, 2.5, 0.5), 2.0);
        let net = net_with_families(&[&[5, 6]], 8);
        let logp = random_logp(3, 8, 5);
        let (b, _) = objective(logp.view(), &[5, 6, 7], &net, 0.0).unwrap();
        assert_eq!(b.combined, b.mlm);
        let (b, _) = objective(logp.view(), &[5, 6, 7], &net, 0.4).unwrap();
        assert!((b.combined - (0.6 * b.mlm + 0.4 * b.gn)).abs() <= 1e-9);
        assert!(b.mlm >= 0.0 && b.gn >= 0.0);
    }

    #[test]
    fn schedules() {
        let s = AlphaSchedule {
            shape: AlphaShape::LinearWarm,
            start: 0.1,
            end: 0.5,
            warm_steps: Some(10),
        };
        assert_eq!(s.alpha_at(0), 0.1);
        assert_eq!(s.alpha_at(10), 0.5);
        assert_eq!(s.alpha_at(99), 0.5);
        assert!((s.alpha_at(5) - 0.3).abs() < 1e-15);
        assert_eq!(AlphaSchedule::constant(0.2).alpha_at(1000), 0.2);
        let wild = AlphaSchedule {
            shape: AlphaShape::Constant,
            start: 1.7,
            end: 0.0,
            warm_steps: None,
        };
        assert_eq!(wild.alpha_at(0), 1.0);
        assert_eq!(AlphaSchedule::default().resolved(100).warm_steps, Some(20));
    }

    #[test]
    fn classification_examples() {
        let c = 4;
        let uniform = Array2::from_elem((3, c), -(c as f64).ln());
        let l = classification_loss(uniform.view(), &[Some(0), Some(3), None]).unwrap();
        assert!((l.value - (c as f64).ln()).abs() < 1e-12);
        assert_eq!(l.grad.row(2).sum(), 0.0);
        let mut sure = Array2::from_elem((1, 2), f64::NEG_INFINITY);
        sure[[0, 1]] = 0.0;
        assert_eq!(classification_loss(sure.view(), &[Some(1)]).unwrap().value, 0.0);
        let logp = random_logp(4, 3, 6);
        let gold = [Some(2), Some(0), Some(1), Some(1)];
        let expect = -(logp[[0, 2]] + logp[[1, 0]] + logp[[2, 1]] + logp[[3, 1]]) / 4.0;
        assert!((classification_loss(logp.view(), &gold).unwrap().value - expect).abs() < 1e-9);
        assert_eq!(
            classification_loss(logp.view(), &[None, None, None, None]).unwrap_err(),
            LossError::NoLabels
        );
    }

    proptest! {
        #[test]
        fn gn_within_member_bounds(seed: u64) {
            let net = net_with_families(&[&[5, 6, 7], &[8, 9]], 10);
            let logp = random_logp(1, 10, seed);
            for g in 0..10 {
                let l = gn_loss(logp.view(), &[g], &net).unwrap().value;
                let nll: Vec<f64> = net.members_of(g).iter().map(|&t| -logp[[0, t]]).collect();
                let lo = nll.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = nll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12);
            }
        }

        #[test]
        fn more_family_mass_never_hurts(seed: u64, member in 0usize..3, frac in 0.0f64..1.0) {
            // Move a fraction of a non-family token's mass onto one family
            // member; every other probability stays fixed.
            let net = net_with_families(&[&[5, 6, 7]], 9);
            let logp = random_logp(1, 9, seed);
            let base = gn_loss(logp.view(), &[5], &net).unwrap().value;
            let mut probs = logp.mapv(f64::exp);
            let moved = probs[[0, 8]] * frac;
            probs[[0, 8]] -= moved;
            probs[[0, 5 + member]] += moved;
            let after = gn_loss(probs.mapv(f64::ln).view(), &[5], &net).unwrap().value;
            prop_assert!(after <= base + 1e-12);
        }
    }
}
