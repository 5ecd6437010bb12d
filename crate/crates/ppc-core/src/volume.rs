//! Attenuation volumes, synthetic phantoms, and surface-point extraction.

use crate::error::{invalid_arg, Error, Result};
use alloc::vec::Vec;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 3D scalar attenuation field (1/mm) on a regular voxel grid.
///
/// Voxel `(0,0,0)` is centered at `origin` (object-frame mm); storage is
/// x-fastest. Values are kept as `f32`, matching the on-disk payload, while
/// all arithmetic on them happens in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(invalid_arg!("volume dims must be at least 2 per axis, got {dims:?}"));
        }
        if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(invalid_arg!("voxel spacing must be positive"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid_arg!("non-finite volume origin"));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(invalid_arg!("data length {} does not match dims {dims:?}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid_arg!("voxel values must be finite and non-negative"));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vector3<f64> {
        self.spacing
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Object-frame position of a voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                i as f64 * self.spacing.x,
                j as f64 * self.spacing.y,
                k as f64 * self.spacing.z,
            )
    }

    /// Full voxel extent of the grid (centers padded by half a voxel).
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let half = self.spacing * 0.5;
        let max = self.origin
            + Vector3::new(
                (self.dims[0] as f64 - 0.5) * self.spacing.x,
                (self.dims[1] as f64 - 0.5) * self.spacing.y,
                (self.dims[2] as f64 - 0.5) * self.spacing.z,
            );
        (self.origin - half, max)
    }

    /// Trilinear interpolation at an object-frame point; samples that fall
    /// outside the voxel-center grid read zero (zero-padding boundary).
    pub fn sample_trilinear(&self, p_obj: &Vector3<f64>) -> f64 {
        let u = (p_obj - self.origin).component_div(&self.spacing);
        let fx = u.x.floor();
        let fy = u.y.floor();
        let fz = u.z.floor();
        let wx = u.x - fx;
        let wy = u.y - fy;
        let wz = u.z - fz;
        let (ix, iy, iz) = (fx as isize, fy as isize, fz as isize);

        let fetch = |i: isize, j: isize, k: isize| -> f64 {
            if i < 0
                || j < 0
                || k < 0
                || i >= self.dims[0] as isize
                || j >= self.dims[1] as isize
                || k >= self.dims[2] as isize
            {
                0.0
            } else {
                self.voxel(i as usize, j as usize, k as usize) as f64
            }
        };

        let c00 = fetch(ix, iy, iz) * (1.0 - wx) + fetch(ix + 1, iy, iz) * wx;
        let c10 = fetch(ix, iy + 1, iz) * (1.0 - wx) + fetch(ix + 1, iy + 1, iz) * wx;
        let c01 = fetch(ix, iy, iz + 1) * (1.0 - wx) + fetch(ix + 1, iy, iz + 1) * wx;
        let c11 = fetch(ix, iy + 1, iz + 1) * (1.0 - wx) + fetch(ix + 1, iy + 1, iz + 1) * wx;
        let c0 = c00 * (1.0 - wy) + c10 * wy;
        let c1 = c01 * (1.0 - wy) + c11 * wy;
        c0 * (1.0 - wz) + c1 * wz
    }

    /// Central-difference intensity gradient (1/mm²) at a voxel, one-sided
    /// at grid boundaries.
    pub fn gradient_at(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let diff = |idx: usize, dim: usize, spacing: f64, at: &dyn Fn(usize) -> f32| -> f64 {
            if idx == 0 {
                (at(1) as f64 - at(0) as f64) / spacing
            } else if idx == dim - 1 {
                (at(idx) as f64 - at(idx - 1) as f64) / spacing
            } else {
                (at(idx + 1) as f64 - at(idx - 1) as f64) / (2.0 * spacing)
            }
        };
        Vector3::new(
            diff(i, self.dims[0], self.spacing.x, &|x| self.voxel(x, j, k)),
            diff(j, self.dims[1], self.spacing.y, &|y| self.voxel(i, y, k)),
            diff(k, self.dims[2], self.spacing.z, &|z| self.voxel(i, j, z)),
        )
    }
}

/// Analytic solids rasterized as phantoms. Every kind is centered in the
/// volume; `TwoSpheres` offsets its lobes by the given object-frame centers.
#[derive(Debug, Clone, PartialEq)]
pub enum PhantomKind {
    Sphere { radius_mm: f64 },
    Box { half_extents_mm: Vector3<f64> },
    /// Capped cylinder along the object z axis.
    Tube { radius_mm: f64, half_length_mm: f64 },
    /// Two additive spheres with different densities; the density contrast
    /// gives DRRs internal edges that patch matching can lock onto.
    TwoSpheres {
        radius_a_mm: f64,
        center_a_mm: Vector3<f64>,
        radius_b_mm: f64,
        center_b_mm: Vector3<f64>,
        density_ratio_b: f64,
    },
}

fn sd_sphere(p: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> f64 {
    (p - c).norm() - r
}

fn sd_box(p: &Vector3<f64>, he: &Vector3<f64>) -> f64 {
    let q = Vector3::new(p.x.abs() - he.x, p.y.abs() - he.y, p.z.abs() - he.z);
    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

fn sd_tube(p: &Vector3<f64>, r: f64, hl: f64) -> f64 {
    let radial = (p.x * p.x + p.y * p.y).sqrt() - r;
    let axial = p.z.abs() - hl;
    let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
    outside + radial.max(axial).min(0.0)
}

/// Rasterizes an analytic solid with a 1-voxel linear falloff at the surface
/// so intensity gradients are well-defined there.
///
/// The object frame is centered on the volume: `origin = -(dims-1)·spacing/2`.
pub fn make_phantom(
    kind: &PhantomKind,
    dims: [usize; 3],
    spacing: Vector3<f64>,
    density: f64,
) -> Result<Volume> {
    if dims.iter().any(|&d| d < 16) {
        return Err(invalid_arg!("phantom dims must be at least 16 per axis"));
    }
    if spacing.iter().any(|&s| s <= 0.0) || density <= 0.0 || !density.is_finite() {
        return Err(invalid_arg!("phantom spacing and density must be positive"));
    }
    match kind {
        PhantomKind::Sphere { radius_mm } if *radius_mm <= 0.0 => {
            return Err(invalid_arg!("sphere radius must be positive"));
        }
        PhantomKind::Box { half_extents_mm } if half_extents_mm.iter().any(|&h| h <= 0.0) => {
            return Err(invalid_arg!("box half-extents must be positive"));
        }
        PhantomKind::Tube { radius_mm, half_length_mm }
            if *radius_mm <= 0.0 || *half_length_mm <= 0.0 =>
        {
            return Err(invalid_arg!("tube radius and half-length must be positive"));
        }
        PhantomKind::TwoSpheres { radius_a_mm, radius_b_mm, density_ratio_b, .. }
            if *radius_a_mm <= 0.0 || *radius_b_mm <= 0.0 || *density_ratio_b <= 0.0 =>
        {
            return Err(invalid_arg!("two-spheres radii and density ratio must be positive"));
        }
        _ => {}
    }

    let origin = -Vector3::new(
        (dims[0] - 1) as f64 * spacing.x,
        (dims[1] - 1) as f64 * spacing.y,
        (dims[2] - 1) as f64 * spacing.z,
    ) * 0.5;
    let falloff = spacing.x.min(spacing.y).min(spacing.z);
    // Smoothstep from `density` inside to 0 outside across ±1 voxel around
    // the analytic surface; the C¹ transition keeps central-difference
    // gradient directions stable.
    let ramp = |d: f64| {
        let t = ((1.0 - d / falloff) * 0.5).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };

    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = origin
                    + Vector3::new(
                        i as f64 * spacing.x,
                        j as f64 * spacing.y,
                        k as f64 * spacing.z,
                    );
                let value = match kind {
                    PhantomKind::Sphere { radius_mm } => {
                        density * ramp(sd_sphere(&p, &Vector3::zeros(), *radius_mm))
                    }
                    PhantomKind::Box { half_extents_mm } => {
                        density * ramp(sd_box(&p, half_extents_mm))
                    }
                    PhantomKind::Tube { radius_mm, half_length_mm } => {
                        density * ramp(sd_tube(&p, *radius_mm, *half_length_mm))
                    }
                    PhantomKind::TwoSpheres {
                        radius_a_mm,
                        center_a_mm,
                        radius_b_mm,
                        center_b_mm,
                        density_ratio_b,
                    } => {
                        density * ramp(sd_sphere(&p, center_a_mm, *radius_a_mm))
                            + density
                                * density_ratio_b
                                * ramp(sd_sphere(&p, center_b_mm, *radius_b_mm))
                    }
                };
                data.push(value as f32);
            }
        }
    }
    Volume::new(dims, spacing, origin, data)
}

/// A surface sample: object-frame position and unit gradient direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub w_obj: Vector3<f64>,
    pub g_obj: Vector3<f64>,
}

/// Extracts surface points as voxel centers whose gradient magnitude reaches
/// `grad_threshold` (1/mm²), uniformly subsampled to at most `max_points`.
///
/// Deterministic for a fixed `(volume, threshold, max_points, seed)`; the
/// returned points keep voxel scan order.
pub fn extract_surface_points(
    v: &Volume,
    grad_threshold: f64,
    max_points: usize,
    seed: u64,
) -> Result<Vec<SurfacePoint>> {
    if grad_threshold <= 0.0 || !grad_threshold.is_finite() {
        return Err(invalid_arg!("gradient threshold must be positive"));
    }
    if max_points == 0 {
        return Err(invalid_arg!("max_points must be at least 1"));
    }

    let dims = v.dims();
    let mut candidates: Vec<SurfacePoint> = Vec::new();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let g = v.gradient_at(i, j, k);
                let mag = g.norm();
                if mag >= grad_threshold {
                    candidates.push(SurfacePoint {
                        w_obj: v.voxel_center(i, j, k),
                        g_obj: g / mag,
                    });
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptySurface);
    }
    if candidates.len() <= max_points {
        return Ok(candidates);
    }

    // Partial Fisher-Yates over the index list, then restore scan order so
    // downstream stride subsampling stays spatially uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = candidates.len();
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..max_points {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen = indices[..max_points].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| candidates[i]).collect())
}
