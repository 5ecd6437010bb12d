//! Iterative 2D/3D rigid registration with point-to-plane correspondences.
//!
//! Given a 3D attenuation volume, a fixed 2D projection image, and a rough
//! initial pose, the registration loop alternates rendering, apparent-contour
//! selection, 2D correspondence estimation, and a closed-form weighted
//! least-squares solve for a 6-DOF motion update until the pose converges.
//!
//! The crate is `no_std` (with `alloc`); everything here is pure computation.
//! File formats, the CLI, and the parallel benchmark runner live in the
//! companion `ppc-tools` crate.
//!
//! Module map:
//! - [`geometry`]: SE(3) poses, motion vectors, the pinhole camera.
//! - [`volume`]: synthetic phantoms and surface-point extraction.
//! - [`contour`]: pose-dependent apparent-contour selection.
//! - [`image`]: 2D scalar images (line-integral units).
//! - [`render`]: ray-cast DRR rendering and contour overlays.
//! - [`correspondence`]: oracle / patch-matching estimators, noise injection,
//!   weighting strategies, and the text exchange format.
//! - [`solver`]: the point-to-plane constraint system, its closed-form solve,
//!   and analytic Jacobians of the solution.
//! - [`pipeline`]: the iterative registration loop.
//! - [`loss`]: flow / registration / combined loss evaluators.
//! - [`metrics`]: mTRE, mRPD, success ratio, capture range.
//! - [`sampling`]: random initial-pose generation.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod contour;
pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sampling;
pub mod solver;
pub mod volume;

pub use contour::{select_apparent_contours, ContourParams, ContourSet};
pub use correspondence::{
    add_correspondence_noise, format_correspondences, oracle_correspondences,
    parse_correspondences, patch_match_correspondences, weight_correspondences,
    CorrespondenceEstimator, CorrespondenceSet, NoiseConfig, OracleEstimator, PatchMatchConfig,
    PatchMatchEstimator, WeightStrategy, WeightVector,
};
pub use error::{Error, Result};
pub use geometry::{se3_exp, CameraModel, MotionVector, RigidTransform};
pub use image::Image2D;
pub use loss::{combined_loss, flow_loss, registration_loss, LossConfig};
pub use metrics::{capture_range, mrpd, mtre, success_ratio, CaptureRange, CaseRecord, CaseStatus};
pub use pipeline::{
    register, register_observed, update_step, IterationRecord, LoopConfig, RegistrationResult,
    RegistrationStatus, StepOutcome, StopCriteria,
};
pub use sampling::derive_seed;
pub use render::{default_step_mm, render_drr, render_overlay};
pub use sampling::{sample_initial_transforms, sample_initial_transforms_stratified, SampledPose,
    SamplingRanges};
pub use solver::{build_ppc_system, dv_to_transform, ppc_jacobians, solve_ppc, PpcJacobians,
    PpcSystem, SolverConfig};
pub use volume::{extract_surface_points, make_phantom, PhantomKind, SurfacePoint, Volume};
