//! Training losses.

use crate::error::{shape_err, Result};
use crate::rsm::RelianceTarget;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub mask: f64,
    pub psnm: f64,
    pub rsm: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            mask: 1.0,
            psnm: 1.0,
            rsm: 10.0,
        }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_psnm_rgb: f64,
    pub l_psnm_depth: f64,
    pub l_rsm: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_mask, self.l_psnm_rgb, self.l_psnm_depth, self.l_rsm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `1 - sum(min(pred, gt)) / sum(max(pred, gt))` for one map. Two all-zero
/// maps give 0.
pub fn iou_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[T]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != gt.len() {
        return Err(shape_err(
            "iou_loss",
            format!("prediction {shape:?} vs {} gt pixels", gt.len()),
        ));
    }
    let gt = tape.constant(Tensor::new(&shape, gt.to_vec())?);
    let inter = tape.minimum(pred, gt)?;
    let inter = tape.sum(inter);
    let union = tape.maximum(pred, gt)?;
    let union = tape.sum(union);
    if tape.value(union).item() == T::zero() {
        return Ok(tape.scale(inter, T::zero()));
    }
    let ratio = tape.div(inter, union)?;
    let neg = tape.scale(ratio, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean per-sample IoU loss over a `[B, H, W]` batch.
pub fn batch_iou_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[T]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s.iter().product::<usize>() != gt.len() {
        return Err(shape_err(
            "batch_iou_loss",
            format!("prediction {s:?} vs {} gt pixels", gt.len()),
        ));
    }
    let plane = s[1] * s[2];
    let mut total: Option<Var> = None;
    for b in 0..s[0] {
        let p = tape.narrow(pred, 0, b, 1)?;
        let l = iou_loss(tape, p, &gt[b * plane..(b + 1) * plane])?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| shape_err("batch_iou_loss", "empty batch"))?;
    Ok(tape.scale(total, T::one() / T::of(s[0] as f64)))
}

/// Mean binary cross entropy of the auxiliary map, predictions clamped.
pub fn psnm_loss<T: Real>(tape: &mut Tape<T>, am_pred: Var, am_gt: &[T]) -> Result<Var> {
    tape.bce(am_pred, am_gt)
}

/// `|rely_r - gt_r| + |rely_d - gt_d|`, averaged over the batch.
pub fn rsm_loss<T: Real>(tape: &mut Tape<T>, rely: Var, targets: &[RelianceTarget]) -> Result<Var> {
    if tape.shape(rely) != [targets.len(), 2] || targets.is_empty() {
        return Err(shape_err(
            "rsm_loss",
            format!("weights {:?} for {} targets", tape.shape(rely), targets.len()),
        ));
    }
    let t: Vec<T> = targets
        .iter()
        .flat_map(|t| [T::of(t.gt_r), T::of(t.gt_d)])
        .collect();
    let t = tape.constant(Tensor::new(&[targets.len(), 2], t)?);
    let d = tape.sub(rely, t)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, T::one() / T::of(targets.len() as f64)))
}

/// `mask * l_mask + psnm * (l_rgb + l_depth) + rsm * l_rsm`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    l_mask: Var,
    l_psnm: &[Var],
    l_rsm: Var,
    lambdas: Lambdas,
) -> Result<Var> {
    let mut total = tape.scale(l_mask, T::of(lambdas.mask));
    for &l in l_psnm {
        let w = tape.scale(l, T::of(lambdas.psnm));
        total = tape.add(total, w)?;
    }
    let r = tape.scale(l_rsm, T::of(lambdas.rsm));
    tape.add(total, r)
}
