//! The iterative registration loop: render, select contours, estimate
//! correspondences, weight, solve, update the pose, repeat.

use crate::contour::{select_apparent_contours, ContourParams};
use crate::correspondence::{weight_correspondences, CorrespondenceEstimator, WeightStrategy};
use crate::error::Result;
use crate::geometry::{CameraModel, MotionVector, RigidTransform};
use crate::image::Image2D;
use crate::metrics::mrpd;
use crate::render::{default_step_mm, render_drr};
use crate::solver::{build_ppc_system, dv_to_transform, solve_ppc, SolverConfig};
use crate::volume::{SurfacePoint, Volume};
use alloc::string::ToString;
use alloc::string::String;
use alloc::vec::Vec;

/// Convergence thresholds on the two halves of the motion increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriteria {
    pub rot_tol_rad: f64,
    pub trans_tol_mm: f64,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self { rot_tol_rad: 1e-4, trans_tol_mm: 1e-3 }
    }
}

/// Loop configuration. The correspondence estimator is passed separately as
/// a trait object so oracle, patch-matching, and external sources are
/// interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub stop: StopCriteria,
    pub weighting: WeightStrategy,
    pub contour: ContourParams,
    pub solver: SolverConfig,
    /// Ray-marching step; `None` uses half the smallest voxel spacing.
    pub step_mm: Option<f64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            stop: StopCriteria::default(),
            weighting: WeightStrategy::Uniform,
            contour: ContourParams::default(),
            solver: SolverConfig::default(),
            step_mm: None,
        }
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub dv: MotionVector,
    pub num_correspondences: usize,
    pub mean_flow_px: f64,
    /// Re-projection distance of the post-update pose, when truth is known.
    pub mrpd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegistrationStatus {
    Converged,
    MaxIterations,
    Failed(String),
}

/// Outcome of a full registration run. The trace always has exactly
/// `iterations_run` entries, also after a mid-run failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub t_final: RigidTransform,
    pub iterations_run: usize,
    pub trace: Vec<IterationRecord>,
    pub status: RegistrationStatus,
}

/// One update step's products. Contours and correspondences ride along so
/// observers (overlay writers, correspondence dumps) can consume them.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub dv: MotionVector,
    pub t_next: RigidTransform,
    pub diagnostics: IterationRecord,
    pub contours: crate::contour::ContourSet,
    pub correspondences: crate::correspondence::CorrespondenceSet,
    pub i_drr: Option<Image2D>,
}

/// Runs a single update step at pose `t_i`.
///
/// The DRR is only rendered when the estimator consumes images (the oracle
/// and external file sources never look at them, and skipping the render
/// changes nothing downstream for those estimators).
#[allow(clippy::too_many_arguments)]
pub fn update_step(
    v: &Volume,
    surface: &[SurfacePoint],
    i_flr: Option<&Image2D>,
    t_i: &RigidTransform,
    cam: &CameraModel,
    cfg: &LoopConfig,
    estimator: &dyn CorrespondenceEstimator,
    t_gt: Option<&RigidTransform>,
    iteration: usize,
) -> Result<StepOutcome> {
    let contours = select_apparent_contours(surface, t_i, cam, &cfg.contour)?;

    let i_drr = if estimator.needs_images() {
        Some(render_drr(v, t_i, cam, cfg.step_mm.unwrap_or_else(|| default_step_mm(v)))?)
    } else {
        None
    };
    let correspondences = estimator.estimate(&contours, cam, t_i, i_drr.as_ref(), i_flr, iteration)?;

    let weights = weight_correspondences(&correspondences, cfg.weighting, None);
    let system = build_ppc_system(&contours, &correspondences, cam)?;
    let dv = solve_ppc(&system, &weights, &cfg.solver)?;
    let t_next = dv_to_transform(&dv)?.compose(t_i);

    let mrpd_mm = match t_gt {
        Some(gt) => {
            let targets: Vec<_> = surface.iter().map(|sp| sp.w_obj).collect();
            mrpd(&t_next, gt, &targets, cam).ok()
        }
        None => None,
    };
    let diagnostics = IterationRecord {
        dv,
        num_correspondences: correspondences.valid_count(),
        mean_flow_px: correspondences.mean_flow_px(),
        mrpd_mm,
    };
    Ok(StepOutcome { dv, t_next, diagnostics, contours, correspondences, i_drr })
}

/// Iterates [`update_step`] from `t_init` until the increment drops below
/// both stop tolerances or the iteration budget runs out.
///
/// A failed step never panics or propagates: the run ends with
/// `RegistrationStatus::Failed` and the partial trace, which is how batch
/// evaluation records unsuccessful cases.
#[allow(clippy::too_many_arguments)]
pub fn register(
    v: &Volume,
    surface: &[SurfacePoint],
    i_flr: Option<&Image2D>,
    t_init: &RigidTransform,
    cam: &CameraModel,
    cfg: &LoopConfig,
    estimator: &dyn CorrespondenceEstimator,
    t_gt: Option<&RigidTransform>,
) -> RegistrationResult {
    register_observed(v, surface, i_flr, t_init, cam, cfg, estimator, t_gt, &mut |_, _| {})
}

/// [`register`] with a per-iteration observer, called after each successful
/// step with the iteration index and its full outcome.
#[allow(clippy::too_many_arguments)]
pub fn register_observed(
    v: &Volume,
    surface: &[SurfacePoint],
    i_flr: Option<&Image2D>,
    t_init: &RigidTransform,
    cam: &CameraModel,
    cfg: &LoopConfig,
    estimator: &dyn CorrespondenceEstimator,
    t_gt: Option<&RigidTransform>,
    observer: &mut dyn FnMut(usize, &StepOutcome),
) -> RegistrationResult {
    let mut t_current = t_init.clone();
    let mut trace: Vec<IterationRecord> = Vec::new();
    for iteration in 0..cfg.max_iterations {
        match update_step(v, surface, i_flr, &t_current, cam, cfg, estimator, t_gt, iteration) {
            Ok(step) => {
                observer(iteration, &step);
                trace.push(step.diagnostics.clone());
                t_current = step.t_next;
                if step.dv.omega.norm() < cfg.stop.rot_tol_rad
                    && step.dv.trans.norm() < cfg.stop.trans_tol_mm
                {
                    return RegistrationResult {
                        t_final: t_current,
                        iterations_run: trace.len(),
                        trace,
                        status: RegistrationStatus::Converged,
                    };
                }
            }
            Err(err) => {
                return RegistrationResult {
                    t_final: t_current,
                    iterations_run: trace.len(),
                    trace,
                    status: RegistrationStatus::Failed(err.to_string()),
                };
            }
        }
    }
    RegistrationResult {
        t_final: t_current,
        iterations_run: trace.len(),
        trace,
        status: RegistrationStatus::MaxIterations,
    }
}
