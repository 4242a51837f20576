//! Combined cross-entropy + soft Dice training loss.
//!
//! `loss = mean_pixels(CE) + mean_{c ≥ 1}(1 − D_c)` where, over the whole
//! batch, `D_c = (2·Σ p_c·y_c + ε) / (Σ p_c + Σ y_c + ε)`. The background class
//! is excluded from the Dice term. The two terms are weighted equally.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing term in both numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Records the combined loss of `logits` (`[N, C, H, W]`) against integer
/// `labels` (`N·H·W` class ids, row-major) and returns the scalar node.
pub fn ce_dice_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.ce_dice(logits, labels)
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape("ce_dice_loss", "logits rank", 4, shape.len()));
    }
    let (n, c) = (shape[0], shape[1]);
    if c < 2 {
        return Err(Error::shape("ce_dice_loss", "classes", ">= 2", c));
    }
    Ok((n, c, shape[2] * shape[3]))
}

/// Returns the loss value and the softmax probabilities (saved for backward).
pub(crate) fn ce_dice_forward(logits: &Tensor, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let (n, c, hw) = dims(logits.shape())?;
    if labels.len() != n * hw {
        return Err(Error::shape("ce_dice_loss", "labels length", n * hw, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let z = logits.data();
    let mut probs = vec![0.0; z.len()];
    let mut ce = 0.0;
    for item in 0..n {
        for p in 0..hw {
            let at = |k: usize| (item * c + k) * hw + p;
            let max = (0..c).map(|k| z[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..c).map(|k| (z[at(k)] - max).exp()).sum();
            for k in 0..c {
                probs[at(k)] = (z[at(k)] - max).exp() / total;
            }
            let y = labels[item * hw + p] as usize;
            ce -= z[at(y)] - max - total.ln();
        }
    }
    let pixels = (n * hw) as f64;
    let stats = dice_stats(&probs, labels, n, c, hw);
    let dice: f64 = stats
        .iter()
        .map(|&(inter, denom)| 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH))
        .sum::<f64>()
        / (c - 1) as f64;
    Ok((ce / pixels + dice, probs))
}

/// Per foreground class: (Σ p·y, Σ p + Σ y).
fn dice_stats(probs: &[f64], labels: &[u8], n: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    (1..c)
        .map(|k| {
            let mut inter = 0.0;
            let mut denom = 0.0;
            for item in 0..n {
                for p in 0..hw {
                    let pr = probs[(item * c + k) * hw + p];
                    let y = (labels[item * hw + p] as usize == k) as u8 as f64;
                    inter += pr * y;
                    denom += pr + y;
                }
            }
            (inter, denom)
        })
        .collect()
}

pub(crate) fn ce_dice_backward(shape: &[usize], labels: &[u8], probs: &[f64], upstream: f64) -> Vec<f64> {
    let (n, c, hw) = dims(shape).expect("validated in forward");
    let pixels = (n * hw) as f64;
    let stats = dice_stats(probs, labels, n, c, hw);
    let fg = (c - 1) as f64;
    let mut out = vec![0.0; probs.len()];
    let mut dprob = vec![0.0; c];
    for item in 0..n {
        for p in 0..hw {
            let at = |k: usize| (item * c + k) * hw + p;
            let label = labels[item * hw + p] as usize;
            dprob[0] = 0.0;
            for k in 1..c {
                let (inter, denom) = stats[k - 1];
                let y = (label == k) as u8 as f64;
                let s = denom + DICE_SMOOTH;
                dprob[k] = -(2.0 * y * s - (2.0 * inter + DICE_SMOOTH)) / (s * s) / fg;
            }
            let dot: f64 = (0..c).map(|k| probs[at(k)] * dprob[k]).sum();
            for k in 0..c {
                let pr = probs[at(k)];
                let y = (label == k) as u8 as f64;
                out[at(k)] = upstream * ((pr - y) / pixels + pr * (dprob[k] - dot));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: Tensor, labels: &[u8]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(logits).unwrap();
        let l = ce_dice_loss(&mut tape, x, labels).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let labels = [0u8, 1, 1, 0];
        let (_, probs) = ce_dice_forward(&Tensor::zeros(&[1, 2, 2, 2]), &labels).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
        // p = 1/2 everywhere: Dice on class 1 = (2·1 + ε)/(2 + 2 + ε).
        let dice = 1.0 - (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        let total = loss_of(Tensor::zeros(&[1, 2, 2, 2]), &labels);
        assert!((total - dice - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_approaches_zero() {
        let labels = [0u8, 1, 1, 0];
        let margin = 40.0;
        let logits = Tensor::from_fn(&[1, 2, 2, 2], |i| {
            let (class, pixel) = (i / 4, i % 4);
            if labels[pixel] as usize == class {
                margin
            } else {
                -margin
            }
        });
        assert!(loss_of(logits, &labels) < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 1, 2])).unwrap();
        assert!(matches!(ce_dice_loss(&mut tape, x, &[0, 2]), Err(Error::Data(_))));
        assert!(ce_dice_loss(&mut tape, x, &[0]).is_err());
    }
}
