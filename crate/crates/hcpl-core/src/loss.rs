//! Multi-label classification losses on the tape: weighted binary
//! cross-entropy and focal loss. Targets may be soft (confidence labels in
//! [0,1]); probabilities are clamped to [EPS, 1-EPS] before the logs.

use crate::error::{HcplError, Result};
use crate::graph::{Tape, ValueId};
use crate::tensor::Tensor;

/// Probability clamp used by both losses.
pub const EPS: f64 = 1e-7;

/// Loss selection; the focal modulation with gamma 0 reduces to plain BCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    WeightedBce,
    Focal { gamma: f64 },
}

fn check_targets(p_shape: &[usize], y: &Tensor, w: &[f64]) -> Result<(usize, usize)> {
    let (rows, cols) = match p_shape {
        [c] => (1, *c),
        [n, c] => (*n, *c),
        other => {
            return Err(HcplError::ShapeMismatch {
                op: "loss",
                detail: format!("probabilities must be [C] or [N,C], got {:?}", other),
            })
        }
    };
    if y.shape() != p_shape {
        return Err(HcplError::ShapeMismatch {
            op: "loss",
            detail: format!("targets {:?} vs probabilities {:?}", y.shape(), p_shape),
        });
    }
    if w.len() != cols {
        return Err(HcplError::ShapeMismatch {
            op: "loss",
            detail: format!("{} class weights for {} classes", w.len(), cols),
        });
    }
    if let Some(bad) = y.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(HcplError::InvalidOperand {
            op: "loss",
            detail: format!("target {} outside [0,1]", bad),
        });
    }
    if let Some(bad) = w.iter().find(|v| !(**v > 0.0)) {
        return Err(HcplError::InvalidOperand {
            op: "loss",
            detail: format!("class weight {} not strictly positive", bad),
        });
    }
    Ok((rows, cols))
}

/// Tile class weights over rows and fold in the normaliser:
/// each entry is w_c / (rows * sum_c w_c).
fn weight_tile(shape: &[usize], rows: usize, w: &[f64]) -> Tensor {
    let wsum: f64 = w.iter().sum();
    let scale = 1.0 / (rows as f64 * wsum);
    let mut data = Vec::with_capacity(rows * w.len());
    for _ in 0..rows {
        for wc in w {
            data.push(wc * scale);
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("tile shape")
}

/// Weighted BCE, averaged over rows when `p` is a matrix:
/// -(1/N) sum_n sum_c w_c [y log p + (1-y) log(1-p)] / sum_c w_c.
pub fn weighted_bce(tape: &mut Tape, p: ValueId, y: &Tensor, w: &[f64]) -> Result<ValueId> {
    focal_loss(tape, p, y, 0.0, w)
}

/// Focal loss with soft-target modulation:
/// -(1/N) sum_n sum_c w_c [y (1-p)^g log p + (1-y) p^g log(1-p)] / sum_c w_c.
pub fn focal_loss(tape: &mut Tape, p: ValueId, y: &Tensor, gamma: f64, w: &[f64]) -> Result<ValueId> {
    if !(gamma >= 0.0) {
        return Err(HcplError::InvalidOperand {
            op: "focal_loss",
            detail: format!("gamma must be non-negative, got {}", gamma),
        });
    }
    let p_shape = tape.value(p).shape().to_vec();
    let (rows, _cols) = check_targets(&p_shape, y, w)?;
    let pc = tape.clamp(p, EPS, 1.0 - EPS)?;
    let ones = tape.constant(Tensor::full(p_shape.clone(), 1.0));
    let pm = tape.sub(ones, pc)?;
    let log_p = tape.log(pc)?;
    let log_pm = tape.log(pm)?;
    let yc = tape.constant(y.clone());
    let ymc = tape.constant(y.map(|v| 1.0 - v));
    let (pos, neg) = if gamma == 0.0 {
        let pos = tape.mul(yc, log_p)?;
        let neg = tape.mul(ymc, log_pm)?;
        (pos, neg)
    } else {
        let mod_pos = tape.pow_const(pm, gamma)?;
        let mod_neg = tape.pow_const(pc, gamma)?;
        let pos_raw = tape.mul(yc, log_p)?;
        let pos = tape.mul(pos_raw, mod_pos)?;
        let neg_raw = tape.mul(ymc, log_pm)?;
        let neg = tape.mul(neg_raw, mod_neg)?;
        (pos, neg)
    };
    let term = tape.add(pos, neg)?;
    let wt = tape.constant(weight_tile(&p_shape, rows, w));
    let weighted = tape.mul(term, wt)?;
    let total = tape.reduce_sum(weighted, None)?;
    let neg_one = tape.scalar_const(-1.0);
    tape.mul(total, neg_one)
}

/// Loss selected by kind.
pub fn classification_loss(
    tape: &mut Tape,
    kind: LossKind,
    p: ValueId,
    y: &Tensor,
    w: &[f64],
) -> Result<ValueId> {
    match kind {
        LossKind::WeightedBce => weighted_bce(tape, p, y, w),
        LossKind::Focal { gamma } => focal_loss(tape, p, y, gamma, w),
    }
}
