//! 2D correspondence estimation at projected contour points.
//!
//! Three interchangeable sources produce `(p, p′)` pairs: an oracle that
//! projects ground truth, a classical normalized-cross-correlation patch
//! matcher, and (via [`CorrespondenceEstimator`]) externally supplied sets in
//! the text exchange format. Weighting strategies turn estimator output into
//! the diagonal weight matrix of the constraint solve.

use crate::contour::ContourSet;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{CameraModel, RigidTransform, EPS_DEPTH};
use crate::image::Image2D;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Matched 2D points per contour point. `p` mirrors the contour projections;
/// `p_prime` holds the match in the fixed image. Rows that could not be
/// matched carry `valid = false` and score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub p: Vec<Vector2<f64>>,
    pub p_prime: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
    pub score: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Flow `p′ − p` per row (meaningless for invalid rows).
    pub fn flow(&self, i: usize) -> Vector2<f64> {
        self.p_prime[i] - self.p[i]
    }

    /// Mean flow magnitude over valid rows, 0 when none are valid.
    pub fn mean_flow_px(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.len() {
            if self.valid[i] {
                sum += self.flow(i).norm();
                n += 1;
            }
        }
        if n == 0 { 0.0 } else { sum / n as f64 }
    }
}

/// Ground-truth correspondences: each contour point's true position under
/// `t_gt` is projected into the fixed image.
///
/// Contour points are expressed at pose `t_i`, so the target position is
/// `(t_gt ∘ t_i⁻¹)(w)`. Rows whose target leaves the detector or falls
/// behind the source are flagged invalid rather than erroring.
pub fn oracle_correspondences(
    contours: &ContourSet,
    t_i: &RigidTransform,
    t_gt: &RigidTransform,
    cam: &CameraModel,
) -> CorrespondenceSet {
    let rel = t_gt.compose(&t_i.inverse());
    let n = contours.len();
    let mut p_prime = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    for i in 0..n {
        let x_gt = rel.apply(&contours.w_cam[i]);
        let mut ok = x_gt.z > EPS_DEPTH;
        let target = if ok {
            let proj = cam.project(&x_gt).expect("z checked above");
            ok = cam.contains(&proj);
            proj
        } else {
            contours.p[i]
        };
        p_prime.push(if ok { target } else { contours.p[i] });
        valid.push(ok);
        score.push(if ok { 1.0 } else { 0.0 });
    }
    CorrespondenceSet { p: contours.p.clone(), p_prime, valid, score }
}

/// Synthetic degradation of a correspondence set, standing in for an
/// imperfect estimator when stress-testing the weighting stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_px: f64,
    pub outlier_frac: f64,
    pub outlier_mag_px: f64,
    pub seed: u64,
}

/// Adds isotropic Gaussian noise (std `sigma_px`) to every valid match, then
/// replaces a `⌊outlier_frac · N⌋`-row random subset of the valid rows with
/// uniform offsets of magnitude up to `outlier_mag_px` from the original
/// match. Deterministic per seed; scores are left untouched.
pub fn add_correspondence_noise(
    c: &CorrespondenceSet,
    sigma_px: f64,
    outlier_frac: f64,
    outlier_mag_px: f64,
    seed: u64,
) -> CorrespondenceSet {
    let mut out = c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if sigma_px > 0.0 {
        for i in 0..out.len() {
            if !out.valid[i] {
                continue;
            }
            // Box-Muller: two independent unit normals per row.
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let phi = 2.0 * core::f64::consts::PI * u2;
            out.p_prime[i] += Vector2::new(r * phi.cos(), r * phi.sin()) * sigma_px;
        }
    }

    let n_outliers = (outlier_frac * c.len() as f64).floor() as usize;
    if n_outliers > 0 && outlier_mag_px > 0.0 {
        let mut valid_rows: Vec<usize> =
            (0..c.len()).filter(|&i| c.valid[i]).collect();
        let take = n_outliers.min(valid_rows.len());
        for i in 0..take {
            let j = rng.random_range(i..valid_rows.len());
            valid_rows.swap(i, j);
        }
        for &row in &valid_rows[..take] {
            let phi = rng.random_range(0.0..2.0 * core::f64::consts::PI);
            let mag = rng.random_range(0.0..outlier_mag_px);
            out.p_prime[row] = c.p_prime[row] + Vector2::new(phi.cos(), phi.sin()) * mag;
        }
    }
    out
}

/// Exhaustive-search NCC patch matching parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatchConfig {
    pub patch_radius_px: usize,
    pub search_radius_px: usize,
    pub min_ncc: f64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self { patch_radius_px: 5, search_radius_px: 20, min_ncc: 0.3 }
    }
}

/// Summed-area tables for O(1) window sums of values and squares.
struct IntegralImage {
    width: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl IntegralImage {
    fn build(img: &Image2D) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sum = vec![0.0f64; stride * (h + 1)];
        let mut sum_sq = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            let mut row_sq = 0.0;
            for x in 0..w {
                let v = img.at(x, y) as f64;
                row += v;
                row_sq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + row;
                sum_sq[(y + 1) * stride + x + 1] = sum_sq[y * stride + x + 1] + row_sq;
            }
        }
        Self { width: w, sum, sum_sq }
    }

    /// Sums over `[x0, x1) × [y0, y1)`.
    fn window(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (f64, f64) {
        let stride = self.width + 1;
        let pick = |t: &[f64]| {
            t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0]
        };
        (pick(&self.sum), pick(&self.sum_sq))
    }
}

/// Classical correspondence search: for each projected contour point, an
/// exhaustive integer-offset scan of the normalized cross-correlation between
/// the moving-image patch at `p` and fixed-image patches within the search
/// radius, refined to sub-pixel precision by 1D quadratic fits through the
/// NCC peak. A row is valid when the best NCC reaches `min_ncc` and the
/// template patch has non-zero variance.
pub fn patch_match_correspondences(
    i_drr: &Image2D,
    i_flr: &Image2D,
    contours: &ContourSet,
    cfg: &PatchMatchConfig,
) -> Result<CorrespondenceSet> {
    if i_drr.width() != i_flr.width() || i_drr.height() != i_flr.height() {
        return Err(invalid_arg!("patch matching requires images of identical geometry"));
    }
    if cfg.patch_radius_px == 0 {
        return Err(invalid_arg!("patch radius must be at least 1"));
    }

    let r = cfg.patch_radius_px as isize;
    let s = cfg.search_radius_px as isize;
    let side = (2 * r + 1) as usize;
    let patch_px = (side * side) as f64;
    let (w, h) = (i_flr.width() as isize, i_flr.height() as isize);
    let fixed_integral = IntegralImage::build(i_flr);

    let n = contours.len();
    let grid_side = (2 * s + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; grid_side * grid_side];
    let mut template = vec![0.0f64; side * side];

    let mut out = CorrespondenceSet {
        p: contours.p.clone(),
        p_prime: contours.p.clone(),
        valid: vec![false; n],
        score: vec![0.0; n],
    };

    for idx in 0..n {
        let p = contours.p[idx];
        // Integer pixel whose center is nearest to p (centers at i + 0.5).
        let cx = (p.x - 0.5).round() as isize;
        let cy = (p.y - 0.5).round() as isize;
        if cx - r < 0 || cy - r < 0 || cx + r >= w || cy + r >= h {
            continue; // template would leave the image
        }

        let mut t_sum = 0.0;
        let mut t_sum_sq = 0.0;
        for (ti, dy) in (-r..=r).enumerate() {
            for (tj, dx) in (-r..=r).enumerate() {
                let v = i_drr.at((cx + dx) as usize, (cy + dy) as usize) as f64;
                template[ti * side + tj] = v;
                t_sum += v;
                t_sum_sq += v * v;
            }
        }
        let t_var = t_sum_sq - t_sum * t_sum / patch_px;
        if t_var <= 1e-12 {
            continue; // flat template: no signal to match
        }

        scores.fill(f64::NEG_INFINITY);
        let mut best = f64::NEG_INFINITY;
        let mut best_off = (0isize, 0isize);
        for oy in -s..=s {
            for ox in -s..=s {
                let (bx, by) = (cx + ox, cy + oy);
                if bx - r < 0 || by - r < 0 || bx + r >= w || by + r >= h {
                    continue;
                }
                let (f_sum, f_sum_sq) = fixed_integral.window(
                    (bx - r) as usize,
                    (by - r) as usize,
                    (bx + r + 1) as usize,
                    (by + r + 1) as usize,
                );
                let f_var = f_sum_sq - f_sum * f_sum / patch_px;
                if f_var <= 1e-12 {
                    continue;
                }
                let mut cross = 0.0;
                for (ti, dy) in (-r..=r).enumerate() {
                    let fy = (by + dy) as usize;
                    for (tj, dx) in (-r..=r).enumerate() {
                        cross +=
                            template[ti * side + tj] * i_flr.at((bx + dx) as usize, fy) as f64;
                    }
                }
                let ncc = (cross - t_sum * f_sum / patch_px) / (t_var * f_var).sqrt();
                scores[((oy + s) * (2 * s + 1) + (ox + s)) as usize] = ncc;
                if ncc > best {
                    best = ncc;
                    best_off = (ox, oy);
                }
            }
        }

        if best < cfg.min_ncc {
            continue;
        }

        // Sub-pixel refinement: independent 1D parabola fits through the
        // integer peak along each axis, clamped to half a pixel.
        let grid_at = |ox: isize, oy: isize| -> Option<f64> {
            if ox < -s || ox > s || oy < -s || oy > s {
                return None;
            }
            let v = scores[((oy + s) * (2 * s + 1) + (ox + s)) as usize];
            if v.is_finite() { Some(v) } else { None }
        };
        let refine = |minus: Option<f64>, center: f64, plus: Option<f64>| -> f64 {
            match (minus, plus) {
                (Some(m), Some(pl)) => {
                    let denom = m - 2.0 * center + pl;
                    if denom < -1e-12 {
                        (0.5 * (m - pl) / denom).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            }
        };
        let (bx, by) = best_off;
        let dx = refine(grid_at(bx - 1, by), best, grid_at(bx + 1, by));
        let dy = refine(grid_at(bx, by - 1), best, grid_at(bx, by + 1));

        out.p_prime[idx] =
            p + Vector2::new(best_off.0 as f64 + dx, best_off.1 as f64 + dy);
        out.valid[idx] = true;
        out.score[idx] = best.max(0.0);
    }
    Ok(out)
}

/// Per-correspondence weighting strategies for the diagonal weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightStrategy {
    /// 1 for every valid row.
    Uniform,
    /// The estimator's confidence score.
    Score,
    /// Huber-style down-weighting of flows far from the consensus:
    /// `min(1, delta_px / ‖flow − reference‖)` with the per-axis median of
    /// valid flows as the reference (or a supplied prior).
    ResidualRobust { delta_px: f64 },
}

/// Diagonal of the correspondence weight matrix, one entry per contour point.
/// Invalid correspondences always get weight exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub diag: Vec<f64>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.diag.iter().filter(|&&w| w > 0.0).count()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite flows"));
    let n = values.len();
    if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) }
}

/// Builds correspondence weights; see [`WeightStrategy`]. `prior_flow`, when
/// given, replaces the median flow as the robust-weighting reference.
pub fn weight_correspondences(
    c: &CorrespondenceSet,
    strategy: WeightStrategy,
    prior_flow: Option<&[Vector2<f64>]>,
) -> WeightVector {
    let n = c.len();
    let mut diag = vec![0.0f64; n];
    match strategy {
        WeightStrategy::Uniform => {
            for (w, &valid) in diag.iter_mut().zip(&c.valid) {
                if valid {
                    *w = 1.0;
                }
            }
        }
        WeightStrategy::Score => {
            for ((w, &valid), &score) in diag.iter_mut().zip(&c.valid).zip(&c.score) {
                if valid {
                    *w = score.clamp(0.0, 1.0);
                }
            }
        }
        WeightStrategy::ResidualRobust { delta_px } => {
            let mut xs: Vec<f64> = Vec::new();
            let mut ys: Vec<f64> = Vec::new();
            for i in 0..n {
                if c.valid[i] {
                    let f = c.flow(i);
                    xs.push(f.x);
                    ys.push(f.y);
                }
            }
            let median_flow = if xs.is_empty() {
                Vector2::zeros()
            } else {
                Vector2::new(median(&mut xs), median(&mut ys))
            };
            for (i, w) in diag.iter_mut().enumerate() {
                if !c.valid[i] {
                    continue;
                }
                let reference = prior_flow.map_or(median_flow, |prior| prior[i]);
                let residual = (c.flow(i) - reference).norm();
                *w = if residual <= delta_px { 1.0 } else { delta_px / residual };
            }
        }
    }
    WeightVector { diag }
}

const EXCHANGE_HEADER: &str = "index,p_x,p_y,pprime_x,pprime_y,valid,score";

/// Serializes a correspondence set in the text exchange format (one row per
/// contour point, 17-significant-digit floats so parsing is lossless).
pub fn format_correspondences(c: &CorrespondenceSet) -> String {
    let mut out = String::from(EXCHANGE_HEADER);
    out.push('\n');
    for i in 0..c.len() {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e}\n",
            i,
            c.p[i].x,
            c.p[i].y,
            c.p_prime[i].x,
            c.p_prime[i].y,
            u8::from(c.valid[i]),
            c.score[i],
        ));
    }
    out
}

/// Parses the exchange format against the contour set it must describe.
///
/// Rows are matched to contour points by index, so the row count has to
/// equal the contour count and the `p` columns must reproduce the contour
/// projections. Malformed rows, non-finite values, index gaps, and count
/// mismatches are format errors naming the 1-based line.
pub fn parse_correspondences(text: &str, contours: &ContourSet) -> Result<CorrespondenceSet> {
    let fail = |line: usize, message: String| Error::Format { line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == EXCHANGE_HEADER => {}
        Some((_, header)) => {
            return Err(fail(1, format!("expected header `{EXCHANGE_HEADER}`, found `{header}`")))
        }
        None => return Err(fail(1, String::from("empty correspondence payload"))),
    }

    let n = contours.len();
    let mut out = CorrespondenceSet {
        p: Vec::with_capacity(n),
        p_prime: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        score: Vec::with_capacity(n),
    };
    let mut row = 0usize;
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(fail(line_no, format!("expected 7 fields, found {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| fail(line_no, format!("bad index `{}`", fields[0])))?;
        if index != row {
            return Err(fail(line_no, format!("expected index {row}, found {index}")));
        }
        if row >= n {
            return Err(fail(line_no, format!("more rows than the {n} contour points")));
        }
        let mut nums = [0.0f64; 5];
        for (slot, field) in nums.iter_mut().zip(&fields[1..6]) {
            let value: f64 = field
                .parse()
                .map_err(|_| fail(line_no, format!("bad number `{field}`")))?;
            if !value.is_finite() {
                return Err(fail(line_no, format!("non-finite value `{field}`")));
            }
            *slot = value;
        }
        let valid = match fields[5] {
            "0" => false,
            "1" => true,
            other => return Err(fail(line_no, format!("valid flag must be 0 or 1, found `{other}`"))),
        };
        let score: f64 = fields[6]
            .parse()
            .map_err(|_| fail(line_no, format!("bad score `{}`", fields[6])))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(fail(line_no, format!("score must be in [0,1], found `{}`", fields[6])));
        }
        if !valid && score != 0.0 {
            return Err(fail(line_no, String::from("invalid rows must carry score 0")));
        }
        let p = Vector2::new(nums[0], nums[1]);
        if (p - contours.p[row]).norm() > 1e-6 {
            return Err(fail(
                line_no,
                format!("p column does not match contour projection {}", contours.p[row]),
            ));
        }
        out.p.push(contours.p[row]);
        out.p_prime.push(Vector2::new(nums[2], nums[3]));
        out.valid.push(valid);
        out.score.push(score);
        row += 1;
    }
    if row != n {
        return Err(fail(row + 2, format!("expected {n} rows, found {row}")));
    }
    Ok(out)
}

/// A pluggable correspondence source for the registration loop. The oracle
/// and external sources never look at images, which lets the loop skip
/// rendering entirely when driven by them.
pub trait CorrespondenceEstimator {
    /// Whether [`CorrespondenceEstimator::estimate`] consumes the images.
    fn needs_images(&self) -> bool;

    fn estimate(
        &self,
        contours: &ContourSet,
        cam: &CameraModel,
        t_i: &RigidTransform,
        i_drr: Option<&Image2D>,
        i_flr: Option<&Image2D>,
        iteration: usize,
    ) -> Result<CorrespondenceSet>;
}

/// Ground-truth-driven estimator, optionally degraded with noise/outliers.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub t_gt: RigidTransform,
    pub noise: Option<NoiseConfig>,
}

impl OracleEstimator {
    pub fn exact(t_gt: RigidTransform) -> Self {
        Self { t_gt, noise: None }
    }
}

impl CorrespondenceEstimator for OracleEstimator {
    fn needs_images(&self) -> bool {
        false
    }

    fn estimate(
        &self,
        contours: &ContourSet,
        cam: &CameraModel,
        t_i: &RigidTransform,
        _i_drr: Option<&Image2D>,
        _i_flr: Option<&Image2D>,
        iteration: usize,
    ) -> Result<CorrespondenceSet> {
        let exact = oracle_correspondences(contours, t_i, &self.t_gt, cam);
        Ok(match self.noise {
            None => exact,
            Some(cfg) => add_correspondence_noise(
                &exact,
                cfg.sigma_px,
                cfg.outlier_frac,
                cfg.outlier_mag_px,
                crate::sampling::derive_seed(cfg.seed, iteration as u64),
            ),
        })
    }
}

/// NCC patch matching as the estimator.
#[derive(Debug, Clone, Default)]
pub struct PatchMatchEstimator {
    pub cfg: PatchMatchConfig,
}

impl CorrespondenceEstimator for PatchMatchEstimator {
    fn needs_images(&self) -> bool {
        true
    }

    fn estimate(
        &self,
        contours: &ContourSet,
        _cam: &CameraModel,
        _t_i: &RigidTransform,
        i_drr: Option<&Image2D>,
        i_flr: Option<&Image2D>,
        _iteration: usize,
    ) -> Result<CorrespondenceSet> {
        match (i_drr, i_flr) {
            (Some(drr), Some(flr)) => patch_match_correspondences(drr, flr, contours, &self.cfg),
            _ => Err(invalid_arg!("patch matching needs both images")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::{select_apparent_contours, ContourParams};
    use crate::geometry::{se3_exp, MotionVector};
    use crate::render::render_drr;
    use crate::volume::{extract_surface_points, make_phantom, PhantomKind};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn sphere_scene() -> (ContourSet, CameraModel, RigidTransform) {
        let v = make_phantom(
            &PhantomKind::Sphere { radius_mm: 20.0 },
            [64, 64, 64],
            Vector3::new(1.0, 1.0, 1.0),
            1.0,
        )
        .unwrap();
        let surface = extract_surface_points(&v, 0.25, 3000, 5).unwrap();
        let cam = CameraModel::default_c_arm();
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 600.0));
        let contours =
            select_apparent_contours(&surface, &pose, &cam, &ContourParams::default()).unwrap();
        (contours, cam, pose)
    }

    #[test]
    fn oracle_flow_is_zero_at_ground_truth() {
        let (contours, cam, pose) = sphere_scene();
        let c = oracle_correspondences(&contours, &pose, &pose, &cam);
        for i in 0..c.len() {
            assert!(c.valid[i]);
            assert!(c.flow(i).norm() <= 1e-9);
        }
    }

    #[test]
    fn oracle_translation_matches_first_order_projection() {
        let (contours, cam, pose) = sphere_scene();
        let delta = 2.0;
        let t_gt = RigidTransform::from_translation(Vector3::new(delta, 0.0, 0.0)).compose(&pose);
        let c = oracle_correspondences(&contours, &pose, &t_gt, &cam);
        for i in 0..c.len() {
            if !c.valid[i] {
                continue;
            }
            let w = contours.w_cam[i];
            // Exact projection of the shifted point, not just the first-order
            // flow: both must agree because the oracle is exact.
            let exact = cam.project(&(w + Vector3::new(delta, 0.0, 0.0))).unwrap();
            assert!((c.p_prime[i] - exact).norm() < 1e-9);
            let first_order = cam.focal_px().x * delta / w.z;
            assert!((c.flow(i).x - first_order).abs() < 0.05 * first_order.abs());
        }
    }

    #[test]
    fn oracle_invalidates_off_detector_targets() {
        let (contours, cam, pose) = sphere_scene();
        // Slide the truth far sideways so every target leaves the detector.
        let t_gt =
            RigidTransform::from_translation(Vector3::new(500.0, 0.0, 0.0)).compose(&pose);
        let c = oracle_correspondences(&contours, &pose, &t_gt, &cam);
        assert!(c.valid.iter().all(|&v| !v));
        assert!(c.score.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn oracle_backprojection_recovers_the_target() {
        let (contours, cam, pose) = sphere_scene();
        let dv = MotionVector::new(Vector3::new(0.02, -0.03, 0.01), Vector3::new(4.0, -2.0, 6.0));
        let t_gt = se3_exp(&dv).unwrap().compose(&pose);
        let rel = t_gt.compose(&pose.inverse());
        let c = oracle_correspondences(&contours, &pose, &t_gt, &cam);
        for i in 0..c.len() {
            if !c.valid[i] {
                continue;
            }
            let x_gt = rel.apply(&contours.w_cam[i]);
            let ray = cam.backproject_ray(&c.p_prime[i]);
            let recovered = ray * (x_gt.z / ray.z);
            assert!((recovered - x_gt).norm() < 1e-6);
        }
    }

    #[test]
    fn noise_free_copy_is_identical() {
        let (contours, cam, pose) = sphere_scene();
        let c = oracle_correspondences(&contours, &pose, &pose, &cam);
        assert_eq!(add_correspondence_noise(&c, 0.0, 0.0, 10.0, 3), c);
    }

    #[test]
    fn gaussian_noise_has_rayleigh_mean() {
        let n = 20_000;
        let p = vec![Vector2::new(100.0, 100.0); n];
        let c = CorrespondenceSet {
            p: p.clone(),
            p_prime: p,
            valid: vec![true; n],
            score: vec![1.0; n],
        };
        let sigma = 2.0;
        let noisy = add_correspondence_noise(&c, sigma, 0.0, 0.0, 99);
        let mean: f64 =
            (0..n).map(|i| (noisy.p_prime[i] - c.p_prime[i]).norm()).sum::<f64>() / n as f64;
        let rayleigh = sigma * (core::f64::consts::PI / 2.0).sqrt();
        assert!((mean - rayleigh).abs() / rayleigh < 0.05, "mean {mean} vs {rayleigh}");
    }

    #[test]
    fn outliers_displace_exactly_their_quota() {
        let n = 100;
        let p = vec![Vector2::new(50.0, 50.0); n];
        let c = CorrespondenceSet {
            p: p.clone(),
            p_prime: p,
            valid: vec![true; n],
            score: vec![1.0; n],
        };
        let noisy = add_correspondence_noise(&c, 0.0, 0.2, 30.0, 5);
        let displaced =
            (0..n).filter(|&i| (noisy.p_prime[i] - c.p_prime[i]).norm() > 0.0).count();
        assert_eq!(displaced, 20);
    }

    fn textured_pair(shift: (isize, isize)) -> (Image2D, Image2D) {
        // Deterministic smooth texture with structure at the ~4 px scale.
        let (w, h) = (96usize, 96usize);
        let value = |x: f64, y: f64| -> f32 {
            let a = (x * 0.37).sin() * (y * 0.23).cos();
            let b = (x * 0.11 + y * 0.31).sin();
            ((a + b + 2.0) * 10.0) as f32
        };
        let mut moving = Image2D::zeros(w, h, 1.0).unwrap();
        let mut fixed = Image2D::zeros(w, h, 1.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                moving.set(x, y, value(x as f64, y as f64));
                fixed.set(
                    x,
                    y,
                    value(x as f64 - shift.0 as f64, y as f64 - shift.1 as f64),
                );
            }
        }
        (moving, fixed)
    }

    fn grid_contours(w: usize, h: usize, margin: usize, step: usize) -> ContourSet {
        let mut p = Vec::new();
        for y in (margin..h - margin).step_by(step) {
            for x in (margin..w - margin).step_by(step) {
                p.push(Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        let n = p.len();
        ContourSet {
            w_cam: vec![Vector3::new(0.0, 0.0, 500.0); n],
            g_cam: vec![Vector3::new(1.0, 0.0, 0.0); n],
            p,
            surface_indices: (0..n).collect(),
        }
    }

    #[test]
    fn patch_match_self_is_near_exact() {
        let (moving, _) = textured_pair((0, 0));
        let contours = grid_contours(96, 96, 30, 7);
        let c = patch_match_correspondences(&moving, &moving, &contours, &PatchMatchConfig::default())
            .unwrap();
        for i in 0..c.len() {
            assert!(c.valid[i], "self-match must succeed on textured patches");
            assert!(c.flow(i).norm() <= 0.25, "flow {} too large", c.flow(i).norm());
        }
    }

    #[test]
    fn patch_match_recovers_integer_shift() {
        let shift = (5isize, 0isize);
        let (moving, fixed) = textured_pair(shift);
        let contours = grid_contours(96, 96, 30, 7);
        let c =
            patch_match_correspondences(&moving, &fixed, &contours, &PatchMatchConfig::default())
                .unwrap();
        let mut checked = 0;
        for i in 0..c.len() {
            if !c.valid[i] {
                continue;
            }
            let f = c.flow(i);
            assert!((f.x - shift.0 as f64).abs() <= 0.5, "x flow {}", f.x);
            assert!((f.y - shift.1 as f64).abs() <= 0.5, "y flow {}", f.y);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn patch_match_rejects_flat_patches() {
        let flat = Image2D::zeros(64, 64, 1.0).unwrap();
        let contours = grid_contours(64, 64, 20, 8);
        let c = patch_match_correspondences(&flat, &flat, &contours, &PatchMatchConfig::default())
            .unwrap();
        assert!(c.valid.iter().all(|&v| !v));
        assert!(c.score.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn patch_match_on_rendered_pair_tracks_the_shift() {
        // End-to-end sanity on actual DRRs: fixed image rendered at a pose
        // 3 mm off the moving one.
        let v = make_phantom(
            &PhantomKind::TwoSpheres {
                radius_a_mm: 16.0,
                center_a_mm: Vector3::new(-6.0, 0.0, 0.0),
                radius_b_mm: 10.0,
                center_b_mm: Vector3::new(12.0, 4.0, 2.0),
                density_ratio_b: 2.0,
            },
            [64, 64, 64],
            Vector3::new(1.0, 1.0, 1.0),
            1.0,
        )
        .unwrap();
        let cam = CameraModel::from_detector([160, 160], 1.5, 1000.0).unwrap();
        let surface = extract_surface_points(&v, 0.25, 3000, 5).unwrap();
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 600.0));
        let delta = Vector3::new(3.0, 0.0, 0.0);
        let t_gt = RigidTransform::from_translation(delta).compose(&pose);
        let contours = select_apparent_contours(&surface, &pose, &cam,
            &ContourParams { tau: 0.2, max_contour_points: 200 }).unwrap();
        let i_drr = render_drr(&v, &pose, &cam, 0.5).unwrap();
        let i_flr = render_drr(&v, &t_gt, &cam, 0.5).unwrap();
        let c = patch_match_correspondences(&i_drr, &i_flr, &contours,
            &PatchMatchConfig::default()).unwrap();
        let oracle = oracle_correspondences(&contours, &pose, &t_gt, &cam);
        let mut close = 0;
        let mut total = 0;
        for i in 0..c.len() {
            if c.valid[i] && oracle.valid[i] {
                total += 1;
                if (c.p_prime[i] - oracle.p_prime[i]).norm() < 1.5 {
                    close += 1;
                }
            }
        }
        assert!(total >= 50, "too few valid matches: {total}");
        assert!(close * 10 >= total * 7, "only {close}/{total} matches near oracle");
    }

    #[test]
    fn uniform_weights_follow_validity() {
        let c = CorrespondenceSet {
            p: vec![Vector2::zeros(); 3],
            p_prime: vec![Vector2::zeros(); 3],
            valid: vec![true, false, true],
            score: vec![0.9, 0.0, 0.4],
        };
        let w = weight_correspondences(&c, WeightStrategy::Uniform, None);
        assert_eq!(w.diag, vec![1.0, 0.0, 1.0]);
        let w = weight_correspondences(&c, WeightStrategy::Score, None);
        assert_eq!(w.diag, vec![0.9, 0.0, 0.4]);
    }

    #[test]
    fn residual_robust_downweights_the_outlier() {
        let n = 100;
        let mut p_prime = vec![Vector2::new(11.0, 10.0); n]; // flow (1, 0)
        p_prime[37] = Vector2::new(60.0, 10.0); // 50 px flow
        let c = CorrespondenceSet {
            p: vec![Vector2::new(10.0, 10.0); n],
            p_prime,
            valid: vec![true; n],
            score: vec![1.0; n],
        };
        let w = weight_correspondences(
            &c,
            WeightStrategy::ResidualRobust { delta_px: 3.0 },
            None,
        );
        for (i, &weight) in w.diag.iter().enumerate() {
            if i == 37 {
                assert!(weight <= 0.1, "outlier weight {weight}");
            } else {
                assert!(weight >= 0.9, "inlier weight {weight}");
            }
        }
    }

    #[test]
    fn exchange_format_roundtrips() {
        let (contours, cam, pose) = sphere_scene();
        let t_gt = RigidTransform::from_translation(Vector3::new(1.0, -2.0, 3.0)).compose(&pose);
        let c = oracle_correspondences(&contours, &pose, &t_gt, &cam);
        let text = format_correspondences(&c);
        let parsed = parse_correspondences(&text, &contours).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn exchange_format_rejects_bad_payloads() {
        let (contours, cam, pose) = sphere_scene();
        let c = oracle_correspondences(&contours, &pose, &pose, &cam);
        let text = format_correspondences(&c);

        // Truncated by one row: count mismatch.
        let truncated: String = {
            let mut lines: Vec<&str> = text.lines().collect();
            lines.pop();
            lines.join("\n")
        };
        assert!(matches!(
            parse_correspondences(&truncated, &contours),
            Err(Error::Format { .. })
        ));

        // A NaN value must be rejected with its line number.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let fields: Vec<String> = lines[3].split(',').map(String::from).collect();
        lines[3] = format!(
            "{},{},{},nan,{},{},{}",
            fields[0], fields[1], fields[2], fields[4], fields[5], fields[6]
        );
        let err = parse_correspondences(&lines.join("\n"), &contours);
        assert_eq!(
            err,
            Err(Error::Format { line: 4, message: String::from("non-finite value `nan`") })
        );
    }

    proptest! {
        #[test]
        fn weighting_never_rewards_invalid_rows(
            seed in 0u64..500,
            strategy_pick in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let mut c = CorrespondenceSet {
                p: vec![Vector2::zeros(); n],
                p_prime: vec![Vector2::zeros(); n],
                valid: vec![false; n],
                score: vec![0.0; n],
            };
            for i in 0..n {
                c.p[i] = Vector2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                c.p_prime[i] = c.p[i]
                    + Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                c.valid[i] = rng.random_range(0.0..1.0) > 0.4;
                c.score[i] = if c.valid[i] { rng.random_range(0.0..1.0) } else { 0.0 };
            }
            let strategy = match strategy_pick {
                0 => WeightStrategy::Uniform,
                1 => WeightStrategy::Score,
                _ => WeightStrategy::ResidualRobust { delta_px: 2.0 },
            };
            let w = weight_correspondences(&c, strategy, None);
            for i in 0..n {
                if !c.valid[i] {
                    prop_assert_eq!(w.diag[i], 0.0);
                }
                prop_assert!((0.0..=1.0).contains(&w.diag[i]));
            }
        }
    }
}
