//! Standardized 2D/3D registration evaluation measures.

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{CameraModel, RigidTransform, EPS_DEPTH};
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::Vector3;

/// Mean target registration error: mean 3D distance between the two poses'
/// images of the target points (mm). Measures misalignment in full 3D.
pub fn mtre(t_a: &RigidTransform, t_b: &RigidTransform, targets: &[Vector3<f64>]) -> Result<f64> {
    if targets.is_empty() {
        return Err(invalid_arg!("mTRE needs at least one target"));
    }
    let total: f64 = targets.iter().map(|x| (t_a.apply(x) - t_b.apply(x)).norm()).sum();
    Ok(total / targets.len() as f64)
}

/// Mean re-projection distance: for each target, the perpendicular 3D
/// distance (mm) from its ground-truth camera-frame position to the
/// back-projection ray of its estimated projection.
///
/// Motion exactly along a viewing ray leaves the projection unchanged, so
/// mRPD is blind to it by construction — the accepted behavior for
/// single-view evaluation.
pub fn mrpd(
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    targets: &[Vector3<f64>],
    cam: &CameraModel,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(invalid_arg!("mRPD needs at least one target"));
    }
    let mut total = 0.0;
    for x in targets {
        let est = t_est.apply(x);
        if est.z <= EPS_DEPTH {
            return Err(Error::BehindCamera);
        }
        let ray = cam.backproject_ray(&cam.project(&est)?);
        let truth = t_gt.apply(x);
        // Distance from `truth` to the line through the source along `ray`.
        total += (truth - ray * truth.dot(&ray)).norm();
    }
    Ok(total / targets.len() as f64)
}

/// Outcome class of one registration case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseStatus {
    Converged,
    MaxIterations,
    Failed,
}

impl CaseStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseStatus::Converged => "converged",
            CaseStatus::MaxIterations => "max-iterations",
            CaseStatus::Failed => "failed",
        }
    }
}

/// One evaluated registration case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub view: String,
    pub mtre_init_mm: f64,
    /// Final mRPD; `None` for failed runs where it is undefined.
    pub mrpd_final_mm: Option<f64>,
    pub status: CaseStatus,
    pub iterations: usize,
    pub wall_time_s: f64,
}

impl CaseRecord {
    /// Whether the case counts as successful at the given mRPD threshold.
    /// Failed runs are never successful but stay in every denominator.
    pub fn is_success(&self, threshold_mm: f64) -> bool {
        self.status != CaseStatus::Failed
            && self.mrpd_final_mm.is_some_and(|m| m <= threshold_mm)
    }
}

/// Fraction of cases with final mRPD at or below the threshold (default
/// 2.0 mm). Failed cases count in the denominator only.
pub fn success_ratio(records: &[CaseRecord], threshold_mm: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.is_success(threshold_mm)).count();
    hits as f64 / records.len() as f64
}

/// A capture-range determination over initial-error bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRange {
    /// The highest passing interval `[5(k−1), 5k)` mm, or `None` when even
    /// the first bin fails.
    pub interval_mm: Option<(f64, f64)>,
    /// Indices of empty bins below the result that had to be skipped.
    pub skipped_empty_bins: Vec<usize>,
}

/// Bins records by initial mTRE into `[0, bin_mm), [bin_mm, 2·bin_mm), …`
/// and returns the highest interval such that every non-empty bin below it
/// reaches the per-bin success ratio `sr_min`. Empty bins below the result
/// are skipped and reported.
pub fn capture_range(records: &[CaseRecord], bin_mm: f64, sr_min: f64) -> Result<CaptureRange> {
    if records.is_empty() {
        return Err(invalid_arg!("capture range needs at least one record"));
    }
    if !(bin_mm > 0.0 && bin_mm.is_finite()) {
        return Err(invalid_arg!("bin width must be positive"));
    }

    let bin_of = |r: &CaseRecord| (r.mtre_init_mm / bin_mm).floor() as usize;
    let max_bin = records.iter().map(bin_of).max().expect("nonempty");

    // Per-bin success ratios at the 2 mm mRPD success threshold.
    let mut hits = alloc::vec![0usize; max_bin + 1];
    let mut counts = alloc::vec![0usize; max_bin + 1];
    for r in records {
        let b = bin_of(r);
        counts[b] += 1;
        if r.is_success(2.0) {
            hits[b] += 1;
        }
    }

    let mut best_k = 0usize;
    for k in 1..=max_bin + 1 {
        let all_pass = (0..k)
            .filter(|&b| counts[b] > 0)
            .all(|b| hits[b] as f64 / counts[b] as f64 >= sr_min);
        if all_pass {
            best_k = k;
        }
    }
    if best_k == 0 {
        return Ok(CaptureRange { interval_mm: None, skipped_empty_bins: Vec::new() });
    }
    let skipped = (0..best_k).filter(|&b| counts[b] == 0).collect();
    Ok(CaptureRange {
        interval_mm: Some(((best_k - 1) as f64 * bin_mm, best_k as f64 * bin_mm)),
        skipped_empty_bins: skipped,
    })
}
