//! Training losses over probability maps.
//!
//! Each loss returns its scalar value together with the analytic gradient
//! with respect to every predicted probability, ready to seed a backward
//! pass at the node that produced the probabilities.
//!
//! Rank-4 inputs are treated as a batch along the first axis: the loss is
//! the mean of per-image losses and the gradient map is scaled to match.
//! Lower-rank inputs are a single image.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp bound for the logarithms in the cross-entropy losses.
pub const CE_EPS: f64 = 1e-7;

/// Scalar loss value and its gradient with respect to the predictions.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_map: Tensor,
}

/// Selects which loss a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Jaccard,
    CrossEntropy,
    BalancedCrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::Jaccard,
        LossKind::CrossEntropy,
        LossKind::BalancedCrossEntropy,
    ];

    /// Computes this loss on a prediction/target pair.
    pub fn compute(self, pred: &Tensor, target: &Tensor) -> Result<LossResult> {
        match self {
            LossKind::Jaccard => jaccard_loss(pred, target),
            LossKind::CrossEntropy => cross_entropy_loss(pred, target),
            LossKind::BalancedCrossEntropy => balanced_cross_entropy_loss(pred, target),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::Jaccard => "jaccard",
            LossKind::CrossEntropy => "ce",
            LossKind::BalancedCrossEntropy => "balanced-ce",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossKind> {
        match s {
            "jaccard" => Ok(LossKind::Jaccard),
            "ce" => Ok(LossKind::CrossEntropy),
            "balanced-ce" => Ok(LossKind::BalancedCrossEntropy),
            other => Err(Error::invalid(format!(
                "unknown loss {other:?}; expected jaccard, ce, or balanced-ce"
            ))),
        }
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "loss pred/target",
            expected: target.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    if let Some(&v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!(
            "loss target must be binary, found {v}"
        )));
    }
    if let Some(&v) = pred
        .data()
        .iter()
        .find(|&&v| !(0.0..=1.0).contains(&v) || !v.is_finite())
    {
        return Err(Error::invalid(format!(
            "loss prediction must lie in [0,1], found {v}"
        )));
    }
    Ok(())
}

/// Flat index ranges of the per-image sub-buffers: one per batch element
/// for rank-4 tensors, a single range otherwise.
fn image_ranges(t: &Tensor) -> Vec<Range<usize>> {
    if t.rank() == 4 {
        let n = t.shape()[0];
        let per = t.len() / n.max(1);
        (0..n).map(|i| i * per..(i + 1) * per).collect()
    } else {
        vec![0..t.len()]
    }
}

/// Overlap-direct loss: `1 - S / D` with `S` the summed foreground
/// probabilities, `D = |Y+| + ` the summed background probabilities.
///
/// The gradient is `-1/D` at foreground pixels and `+S/D^2` at background
/// pixels. With no foreground pixels the loss is 1 when any background
/// probability is positive and 0 when the prediction is identically zero;
/// both plateaus carry a zero gradient.
pub fn jaccard_loss(pred: &Tensor, target: &Tensor) -> Result<LossResult> {
    check_pair(pred, target)?;
    let ranges = image_ranges(pred);
    let batch = ranges.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for range in ranges {
        let mut fg_count = 0.0;
        let mut s = 0.0;
        let mut bg_sum = 0.0;
        for i in range.clone() {
            if target.data()[i] == 1.0 {
                fg_count += 1.0;
                s += pred.data()[i];
            } else {
                bg_sum += pred.data()[i];
            }
        }
        let d = fg_count + bg_sum;
        if fg_count == 0.0 {
            total += if bg_sum > 0.0 { 1.0 } else { 0.0 };
            continue;
        }
        total += 1.0 - s / d;
        let fg_grad = -1.0 / d / batch;
        let bg_grad = s / (d * d) / batch;
        for i in range {
            grad.data_mut()[i] = if target.data()[i] == 1.0 {
                fg_grad
            } else {
                bg_grad
            };
        }
    }
    Ok(LossResult {
        value: total / batch,
        grad_map: grad,
    })
}

/// Per-pixel negative log likelihood, mean-reduced, with predictions
/// clamped to `[CE_EPS, 1 - CE_EPS]` before the logarithms.
pub fn cross_entropy_loss(pred: &Tensor, target: &Tensor) -> Result<LossResult> {
    weighted_cross_entropy(pred, target, |_, _| (1.0, 1.0))
}

/// Cross entropy with per-image class weights: foreground terms carry
/// `|Y-| / |Y|` and background terms `|Y+| / |Y|`, so the rarer class
/// contributes more.
pub fn balanced_cross_entropy_loss(pred: &Tensor, target: &Tensor) -> Result<LossResult> {
    weighted_cross_entropy(pred, target, |fg_count, total| {
        let w_fg = (total - fg_count) / total;
        (w_fg, 1.0 - w_fg)
    })
}

fn weighted_cross_entropy(
    pred: &Tensor,
    target: &Tensor,
    weights: impl Fn(f64, f64) -> (f64, f64),
) -> Result<LossResult> {
    check_pair(pred, target)?;
    let ranges = image_ranges(pred);
    let batch = ranges.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for range in ranges {
        let count = range.len() as f64;
        let fg_count = range.clone().filter(|&i| target.data()[i] == 1.0).count() as f64;
        let (w_fg, w_bg) = weights(fg_count, count);
        let mut sum = 0.0;
        for i in range {
            let y = target.data()[i];
            let p = pred.data()[i].clamp(CE_EPS, 1.0 - CE_EPS);
            let inside = pred.data()[i] > CE_EPS && pred.data()[i] < 1.0 - CE_EPS;
            if y == 1.0 {
                sum -= w_fg * p.ln();
                if inside {
                    grad.data_mut()[i] = -w_fg / p / count / batch;
                }
            } else {
                sum -= w_bg * (1.0 - p).ln();
                if inside {
                    grad.data_mut()[i] = w_bg / (1.0 - p) / count / batch;
                }
            }
        }
        total += sum / count;
    }
    Ok(LossResult {
        value: total / batch,
        grad_map: grad,
    })
}

/// Loss over a deeply supervised prediction: one weighted term per side
/// output plus one for the fused map. `weights` lists the side weights in
/// order followed by the fused weight.
#[derive(Debug, Clone)]
pub struct DeepSupervisionLoss {
    pub value: f64,
    pub side_grads: Vec<Tensor>,
    pub fused_grad: Tensor,
}

pub fn deep_supervision_loss(
    side_outputs: &[Tensor],
    fused: &Tensor,
    target: &Tensor,
    kind: LossKind,
    weights: &[f64],
) -> Result<DeepSupervisionLoss> {
    if weights.len() != side_outputs.len() + 1 {
        return Err(Error::invalid(format!(
            "deep supervision needs {} weights (sides + fused), got {}",
            side_outputs.len() + 1,
            weights.len()
        )));
    }
    let mut value = 0.0;
    let mut side_grads = Vec::with_capacity(side_outputs.len());
    for (side, &w) in side_outputs.iter().zip(weights) {
        let r = kind.compute(side, target)?;
        value += w * r.value;
        side_grads.push(scaled(r.grad_map, w));
    }
    let fused_w = weights[weights.len() - 1];
    let r = kind.compute(fused, target)?;
    value += fused_w * r.value;
    Ok(DeepSupervisionLoss {
        value,
        side_grads,
        fused_grad: scaled(r.grad_map, fused_w),
    })
}

fn scaled(mut t: Tensor, k: f64) -> Tensor {
    for v in t.data_mut() {
        *v *= k;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[2, 2], values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_binary_prediction_has_zero_loss() {
        let t = map(&[1.0, 0.0, 1.0, 0.0]);
        let r = jaccard_loss(&t, &t).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn all_zero_prediction_has_unit_loss() {
        let target = map(&[1.0, 1.0, 1.0, 1.0]);
        let pred = map(&[0.0, 0.0, 0.0, 0.0]);
        let r = jaccard_loss(&pred, &target).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn empty_foreground_edge_cases() {
        let target = map(&[0.0, 0.0, 0.0, 0.0]);
        let zero = jaccard_loss(&map(&[0.0; 4]), &target).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.grad_map.data().iter().all(|&g| g == 0.0));
        let some = jaccard_loss(&map(&[0.2, 0.0, 0.0, 0.0]), &target).unwrap();
        assert_eq!(some.value, 1.0);
        assert!(some.grad_map.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_half_prediction_ce_is_ln_two() {
        let target = map(&[1.0, 0.0, 0.0, 1.0]);
        let pred = map(&[0.5; 4]);
        let r = cross_entropy_loss(&pred, &target).unwrap();
        assert!((r.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_binary_ce_is_at_clamp_floor() {
        let t = map(&[1.0, 0.0, 1.0, 0.0]);
        let r = cross_entropy_loss(&t, &t).unwrap();
        assert!(r.value <= -(1.0 - CE_EPS).ln() + 1e-15);
    }

    #[test]
    fn batch_loss_is_mean_of_per_image_losses() {
        let pred = Tensor::from_vec(&[2, 1, 1, 2], vec![0.8, 0.1, 0.3, 0.9]).unwrap();
        let target = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let whole = jaccard_loss(&pred, &target).unwrap();
        let a = jaccard_loss(
            &Tensor::from_vec(&[1, 2], vec![0.8, 0.1]).unwrap(),
            &Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let b = jaccard_loss(
            &Tensor::from_vec(&[1, 2], vec![0.3, 0.9]).unwrap(),
            &Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert!((whole.value - 0.5 * (a.value + b.value)).abs() < 1e-15);
        assert!((whole.grad_map.data()[0] - 0.5 * a.grad_map.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn loss_kind_round_trips_through_strings() {
        for kind in LossKind::ALL {
            assert_eq!(kind.to_string().parse::<LossKind>().unwrap(), kind);
        }
        assert!("dice".parse::<LossKind>().is_err());
    }

    #[test]
    fn rejects_non_binary_target() {
        let pred = map(&[0.5; 4]);
        let target = map(&[0.5, 0.0, 1.0, 0.0]);
        assert!(jaccard_loss(&pred, &target).is_err());
    }

    #[test]
    fn rejects_out_of_range_prediction() {
        let pred = map(&[1.2, 0.0, 0.0, 0.0]);
        let target = map(&[1.0, 0.0, 0.0, 0.0]);
        assert!(jaccard_loss(&pred, &target).is_err());
    }
}
