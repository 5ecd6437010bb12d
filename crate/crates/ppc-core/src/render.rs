//! Ray-cast DRR rendering: the operator `R(V, T)`.

use crate::contour::ContourSet;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::image::Image2D;
use crate::volume::Volume;
use alloc::vec::Vec;
use nalgebra::{Vector2, Vector3};

/// Default ray-marching step: half the smallest voxel spacing.
pub fn default_step_mm(v: &Volume) -> f64 {
    let s = v.spacing();
    0.5 * s.x.min(s.y).min(s.z)
}

/// Entry/exit distances of a ray against an axis-aligned box, or `None`
/// when the forward ray misses it.
fn intersect_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-12 {
            if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (t0, t1) = {
            let a = (lo[axis] - origin[axis]) * inv;
            let b = (hi[axis] - origin[axis]) * inv;
            if a <= b { (a, b) } else { (b, a) }
        };
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    Some((tmin, tmax))
}

/// Renders a DRR of the posed volume: per pixel, the midpoint-rule line
/// integral of trilinearly interpolated attenuation along the source ray,
/// sampled every `step_mm`. Rays that miss the volume read exactly 0.
pub fn render_drr(
    v: &Volume,
    t: &RigidTransform,
    cam: &CameraModel,
    step_mm: f64,
) -> Result<Image2D> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(invalid_arg!("step_mm must be positive"));
    }

    let (lo, hi) = v.bounds();
    // All eight posed corners behind the source means nothing can project.
    let mut any_in_front = false;
    for &cx in &[lo.x, hi.x] {
        for &cy in &[lo.y, hi.y] {
            for &cz in &[lo.z, hi.z] {
                if t.apply(&Vector3::new(cx, cy, cz)).z > 0.0 {
                    any_in_front = true;
                }
            }
        }
    }
    if !any_in_front {
        return Err(Error::NothingVisible);
    }

    // March in the object frame, where the volume is axis-aligned.
    let t_inv = t.inverse();
    let origin_obj = t_inv.apply(&Vector3::zeros());
    let [width, height] = cam.detector_res();
    let mut data = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let pixel = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let dir_obj = t_inv.rotate(&cam.backproject_ray(&pixel));
            let value = match intersect_aabb(&origin_obj, &dir_obj, &lo, &hi) {
                None => 0.0,
                Some((tmin, tmax)) => {
                    let length = tmax - tmin;
                    if length <= 0.0 {
                        0.0
                    } else {
                        let steps = (length / step_mm).ceil().max(1.0);
                        let h = length / steps;
                        let mut sum = 0.0;
                        for s in 0..steps as usize {
                            let dist = tmin + (s as f64 + 0.5) * h;
                            sum += v.sample_trilinear(&(origin_obj + dir_obj * dist));
                        }
                        sum * h
                    }
                }
            };
            data.push(value as f32);
        }
    }
    Image2D::new(width, height, cam.pixel_spacing(), data)
}

/// Copies the image and marks each projected contour point's pixel at a
/// sentinel intensity (1.1 × the input maximum) for visual inspection.
/// Off-detector points are skipped.
pub fn render_overlay(i_flr: &Image2D, contours: &ContourSet) -> Image2D {
    let mut out = i_flr.clone();
    let max = i_flr.max_value();
    let sentinel = if max > 0.0 { max * 1.1 } else { 1.0 };
    for p in &contours.p {
        if let Some((x, y)) = i_flr.pixel_index(p) {
            out.set(x, y, sentinel);
        }
    }
    out
}
