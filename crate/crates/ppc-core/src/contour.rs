//! Pose-dependent apparent-contour selection.
//!
//! A surface point contributes to the projected silhouette when its intensity
//! gradient is perpendicular to the viewing ray from the source, so the
//! selection keeps points with `|ĝ · r̂| ≤ tau`.

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{CameraModel, RigidTransform, EPS_DEPTH};
use crate::volume::SurfacePoint;
use alloc::vec::Vec;
use nalgebra::{Vector2, Vector3};

/// Contour-selection parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourParams {
    /// Perpendicularity threshold on `|ĝ · r̂|`; 1.0 keeps every visible point.
    pub tau: f64,
    /// Upper bound on selected points; larger survivor sets are subsampled by
    /// a deterministic stride.
    pub max_contour_points: usize,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self { tau: 0.15, max_contour_points: 800 }
    }
}

/// Apparent-contour points at one pose: camera-frame positions and gradients
/// plus their detector projections, with the originating surface indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourSet {
    pub w_cam: Vec<Vector3<f64>>,
    pub g_cam: Vec<Vector3<f64>>,
    pub p: Vec<Vector2<f64>>,
    /// Index of each contour point in the surface-point list it came from.
    pub surface_indices: Vec<usize>,
}

impl ContourSet {
    pub fn len(&self) -> usize {
        self.w_cam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_cam.is_empty()
    }
}

/// Selects apparent-contour points from posed surface points.
///
/// Positions transform by `t`, gradients rotate only, and a point survives
/// when it lies in front of the source and `|ĝ_cam · r̂| ≤ tau` with `r̂` the
/// unit viewing direction from the source. Survivors beyond
/// `max_contour_points` are thinned with an even stride. Fewer than 6
/// survivors is an error because no solvable constraint system can follow.
pub fn select_apparent_contours(
    points: &[SurfacePoint],
    t: &RigidTransform,
    cam: &CameraModel,
    params: &ContourParams,
) -> Result<ContourSet> {
    if points.is_empty() {
        return Err(invalid_arg!("no surface points supplied"));
    }
    if !(params.tau.is_finite() && params.tau >= 0.0) {
        return Err(invalid_arg!("tau must be finite and non-negative"));
    }

    let mut kept: Vec<usize> = Vec::new();
    let mut w_all: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
    let mut g_all: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
    for (idx, sp) in points.iter().enumerate() {
        let w = t.apply(&sp.w_obj);
        let g = t.rotate(&sp.g_obj);
        w_all.push(w);
        g_all.push(g);
        if w.z <= EPS_DEPTH {
            continue;
        }
        let view = w / w.norm();
        if g.dot(&view).abs() <= params.tau {
            kept.push(idx);
        }
    }

    if kept.len() > params.max_contour_points {
        let n = kept.len();
        let m = params.max_contour_points;
        kept = (0..m).map(|i| kept[i * n / m]).collect();
    }
    if kept.len() < 6 {
        return Err(Error::InsufficientContours { found: kept.len() });
    }

    let mut w_cam = Vec::with_capacity(kept.len());
    let mut g_cam = Vec::with_capacity(kept.len());
    let mut p = Vec::with_capacity(kept.len());
    for &idx in &kept {
        w_cam.push(w_all[idx]);
        g_cam.push(g_all[idx]);
        p.push(cam.project(&w_all[idx]).expect("kept points are in front of the source"));
    }
    Ok(ContourSet { w_cam, g_cam, p, surface_indices: kept })
}
