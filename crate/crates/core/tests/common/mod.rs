//! Test-only oracles shared by the integration suites.

#![allow(dead_code)]

use glyphmlm_core::encoder::{Batch, EncoderModel, Params};

/// Central finite differences of `loss` with respect to every parameter.
pub fn finite_difference_grads(
    model: &EncoderModel<f64>,
    step: f64,
    loss: &dyn Fn(&EncoderModel<f64>) -> f64,
) -> Params<f64> {
    let mut grads = model.params.zeros_like();
    let mut probe = model.clone();
    let sizes: Vec<usize> = model.params.slices().iter().map(|(_, s)| s.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.params.slices()[t].1[i];
            probe.params.slices_mut()[t].1[i] = orig + step;
            let up = loss(&probe);
            probe.params.slices_mut()[t].1[i] = orig - step;
            let down = loss(&probe);
            probe.params.slices_mut()[t].1[i] = orig;
            grads.slices_mut()[t].1[i] = (up - down) / (2.0 * step);
        }
    }
    grads
}

/// Largest relative discrepancy `|a - n| / max(|a|, |n|, floor)` over all
/// entries, with the tensor name where it occurs.
pub fn max_relative_error(analytic: &Params<f64>, numeric: &Params<f64>, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((info, a), (_, n)) in analytic.slices().into_iter().zip(numeric.slices()) {
        for (x, y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(floor);
            let e = (x - y).abs() / denom;
            if e > worst.0 {
                worst = (e, info.name.clone());
            }
        }
    }
    worst
}

/// A two-row batch with one padded position and three masked slots.
pub fn small_batch() -> Batch {
    let seqs = vec![vec![2, 5, 1, 7, 1, 3], vec![2, 6, 8, 1, 9, 3]];
    let mut b = Batch::from_sequences(&seqs, &[vec![(2, 6), (4, 8)], vec![(3, 10)]]);
    b.valid[11] = false;
    b.tokens[11] = 0;
    b.with_labels(vec![Some(1), Some(3)], vec![Some(0), Some(2)])
}
