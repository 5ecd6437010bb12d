//! Loss evaluators over flow sequences and pose pairs.
//!
//! These are the quantities a learned update step would train against,
//! implemented as metrics so external estimators can be scored offline.

use crate::error::{invalid_arg, Result};
use crate::geometry::{MotionVector, RigidTransform};
use alloc::vec::Vec;
use nalgebra::{Vector2, Vector3};

/// Loss coefficients. `n_fl` is the number of flow-refinement iterations in
/// a supplied flow sequence; `gamma` discounts earlier iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub n_fl: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5, lambda: 1e-3, zeta: 1e-5, gamma: 0.8, n_fl: 6 }
    }
}

/// Mean L1 distance (mm) between the two poses' images of the evaluation
/// points: `mean_i ‖T_pred(w_i) − T_gt(w_i)‖₁`.
///
/// The mean-over-points normalization keeps values comparable across
/// different contour counts.
pub fn registration_loss(
    t_pred: &RigidTransform,
    t_gt: &RigidTransform,
    points: &[Vector3<f64>],
) -> Result<f64> {
    if points.is_empty() {
        return Err(invalid_arg!("registration loss needs at least one point"));
    }
    let total: f64 = points
        .iter()
        .map(|w| {
            let d = t_pred.apply(w) - t_gt.apply(w);
            d.x.abs() + d.y.abs() + d.z.abs()
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Discounted end-point-error over a flow-refinement sequence:
///
/// `Σ_{j=1..N_FL} γ^(N_FL−j) · (1/N_cp) · Σ_masked ‖f_j − f_gt‖₁`
///
/// where `N_cp` counts masked-in points. The mask zeroes the loss away from
/// projected contour points.
pub fn flow_loss(
    flow_seq: &[Vec<Vector2<f64>>],
    flow_gt: &[Vector2<f64>],
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<f64> {
    if flow_seq.len() != cfg.n_fl {
        return Err(invalid_arg!(
            "flow sequence has {} iterations, config says {}",
            flow_seq.len(),
            cfg.n_fl
        ));
    }
    let n_cp = mask.iter().filter(|&&m| m).count();
    if n_cp == 0 {
        return Err(invalid_arg!("flow-loss mask excludes every point"));
    }
    if mask.len() != flow_gt.len() {
        return Err(invalid_arg!("mask and ground-truth flow lengths differ"));
    }

    let mut total = 0.0;
    for (j, flow) in flow_seq.iter().enumerate() {
        if flow.len() != flow_gt.len() {
            return Err(invalid_arg!("flow iteration {j} has wrong point count"));
        }
        let mut sum = 0.0;
        for i in 0..flow.len() {
            if mask[i] {
                let d = flow[i] - flow_gt[i];
                sum += d.x.abs() + d.y.abs();
            }
        }
        // j is 0-based here; the exponent N_FL − j of the 1-based formula.
        let discount = cfg.gamma.powi((cfg.n_fl - 1 - j) as i32);
        total += discount * sum / n_cp as f64;
    }
    Ok(total)
}

/// The combined objective:
/// `α·flow + β·reg + λ·‖dv‖₂ + (ζ/2)·‖weights‖²`.
///
/// The network-weight norm is an opaque scalar supplied by the caller since
/// no network lives in this crate.
pub fn combined_loss(
    flow_term: f64,
    reg_term: f64,
    dv: &MotionVector,
    weight_norm_sq: f64,
    cfg: &LossConfig,
) -> f64 {
    cfg.alpha * flow_term
        + cfg.beta * reg_term
        + cfg.lambda * dv.norm()
        + 0.5 * cfg.zeta * weight_norm_sq
}
