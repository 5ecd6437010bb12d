//! The weighted point-to-plane constraint system and its closed-form solve.
//!
//! Each valid correspondence pins the displaced contour point `w + ω×w + t`
//! to a plane through the X-ray source spanned by `w × g` and the
//! back-projection ray of its 2D match `p′`. With unit plane normal `n` the
//! constraint reads `nᵀ(w + ω×w + t) = 0`, giving the row
//! `[(n×w)ᵀ, −nᵀ] · (ω; t) = nᵀw`. Stacking rows over correspondences and
//! weighting them yields a linear least-squares problem solved in closed
//! form; the solution map is differentiable in `b` and the weights, which is
//! what lets the solve sit inside learned pipelines as a known operator.

use crate::correspondence::{CorrespondenceSet, WeightVector};
use crate::error::{invalid_arg, Error, Result};
use crate::contour::ContourSet;
use crate::geometry::{se3_exp, CameraModel, MotionVector, RigidTransform};
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, Matrix6, RowVector6, Vector3, Vector6};

/// Cross products smaller than this make a degenerate plane; the row is
/// dropped rather than normalized into noise.
const DEGENERATE_PLANE_TOL: f64 = 1e-8;

/// The stacked constraint system `A dv = b` with per-row plane normals.
/// Rows flagged `used = false` (invalid correspondence or degenerate plane)
/// are zeroed and excluded from every downstream computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcSystem {
    a: DMatrix<f64>,
    b: DVector<f64>,
    normals: Vec<Vector3<f64>>,
    used: Vec<bool>,
    mean_point_norm: f64,
}

impl PpcSystem {
    /// Builds a system directly from rows; primarily for tests that need
    /// systems unconstrained by scene geometry.
    pub fn from_rows(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.ncols() != 6 || a.nrows() != b.len() {
            return Err(invalid_arg!("system must be N×6 with matching right-hand side"));
        }
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(invalid_arg!("non-finite system entries"));
        }
        let n = a.nrows();
        Ok(Self {
            a,
            b,
            normals: alloc::vec![Vector3::zeros(); n],
            used: alloc::vec![true; n],
            mean_point_norm: 1.0,
        })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn used(&self) -> &[bool] {
        &self.used
    }

    pub fn used_count(&self) -> usize {
        self.used.iter().filter(|&&u| u).count()
    }

    /// Overwrites one right-hand-side entry (finite-difference probes).
    pub fn set_b(&mut self, i: usize, value: f64) {
        self.b[i] = value;
    }

    fn row(&self, i: usize) -> Vector6<f64> {
        Vector6::from_fn(|k, _| self.a[(i, k)])
    }
}

/// Solver knobs: Tikhonov strength, the minimum usable row count, and the
/// length scale balancing rotational against translational columns in the
/// regularizer (`None` uses the system's mean contour-point norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tikhonov_lambda: f64,
    pub min_rows: usize,
    pub omega_scale: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tikhonov_lambda: 1e-6, min_rows: 6, omega_scale: None }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if self.tikhonov_lambda < 0.0 || !self.tikhonov_lambda.is_finite() {
            return Err(invalid_arg!("tikhonov_lambda must be non-negative"));
        }
        if self.min_rows < 6 {
            return Err(invalid_arg!("min_rows must be at least 6"));
        }
        Ok(())
    }

    fn balance(&self, sys: &PpcSystem) -> f64 {
        let scale = self.omega_scale.unwrap_or(sys.mean_point_norm);
        if scale > 0.0 && scale.is_finite() { scale } else { 1.0 }
    }
}

/// Assembles the constraint system from contours and their correspondences.
///
/// Per valid row: `r′` is the back-projection ray of `p′`, `s = w × g`, and
/// `n = normalize(s × r′)`. When the match is exact (`p′ = p`), `r′` is
/// parallel to `w`, so `n ⟂ w` and the right-hand side vanishes — the
/// already-registered pose is a fixed point of the update by construction.
pub fn build_ppc_system(
    contours: &ContourSet,
    c: &CorrespondenceSet,
    cam: &CameraModel,
) -> Result<PpcSystem> {
    let n = contours.len();
    if c.len() != n {
        return Err(invalid_arg!("correspondence count {} != contour count {n}", c.len()));
    }
    for i in 0..n {
        if (c.p[i] - contours.p[i]).norm() > 1e-9 {
            return Err(invalid_arg!("correspondence p does not match contour projections"));
        }
    }

    let mut a = DMatrix::<f64>::zeros(n, 6);
    let mut b = DVector::<f64>::zeros(n);
    let mut normals = alloc::vec![Vector3::zeros(); n];
    let mut used = alloc::vec![false; n];
    let mut norm_sum = 0.0;
    let mut used_rows = 0usize;

    for i in 0..n {
        if !c.valid[i] {
            continue;
        }
        let w = contours.w_cam[i];
        let g = contours.g_cam[i];
        let ray = cam.backproject_ray(&c.p_prime[i]);
        let span = w.cross(&g);
        let cross = span.cross(&ray);
        if cross.norm() < DEGENERATE_PLANE_TOL {
            continue;
        }
        let normal = cross / cross.norm();
        let n_cross_w = normal.cross(&w);
        a.set_row(
            i,
            &RowVector6::new(n_cross_w.x, n_cross_w.y, n_cross_w.z, -normal.x, -normal.y, -normal.z),
        );
        b[i] = normal.dot(&w);
        normals[i] = normal;
        used[i] = true;
        norm_sum += w.norm();
        used_rows += 1;
    }

    if used_rows < 6 {
        return Err(Error::InsufficientConstraints { rows: used_rows, needed: 6 });
    }
    Ok(PpcSystem { a, b, normals, used, mean_point_norm: norm_sum / used_rows as f64 })
}

/// Gathers the weighted, used rows of the system. Returns row indices so the
/// caller can map reduced quantities back to full-length outputs.
fn active_rows(sys: &PpcSystem, w: &WeightVector) -> Result<Vec<usize>> {
    if w.len() != sys.rows() {
        return Err(invalid_arg!("weight count {} != system rows {}", w.len(), sys.rows()));
    }
    if w.diag.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid_arg!("weights must be finite and non-negative"));
    }
    Ok((0..sys.rows()).filter(|&i| sys.used[i] && w.diag[i] > 0.0).collect())
}

/// Column-balancing diagonal: rotational columns scaled by `omega_scale`.
fn balance_diag(scale: f64) -> Vector6<f64> {
    Vector6::new(scale, scale, scale, 1.0, 1.0, 1.0)
}

/// Regularized normal-equations matrix and right-hand side over active rows.
fn normal_equations(
    sys: &PpcSystem,
    w: &WeightVector,
    active: &[usize],
    lambda: f64,
    scale: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut m = Matrix6::<f64>::zeros();
    let mut rhs = Vector6::<f64>::zeros();
    for &i in active {
        let wi2 = w.diag[i] * w.diag[i];
        let row = sys.row(i);
        m += row * row.transpose() * wi2;
        rhs += row * (wi2 * sys.b[i]);
    }
    if lambda > 0.0 {
        let d = balance_diag(scale);
        for k in 0..6 {
            m[(k, k)] += lambda * d[k] * d[k];
        }
    }
    (m, rhs)
}

/// Closed-form solve of the weighted constraint system.
///
/// Minimizes `‖diag(W)(A dv − b)‖² + λ‖D dv‖²` with `D` the column-balancing
/// diagonal. With `λ = 0` the solution comes from a QR factorization of the
/// weighted system (the least-squares solution); rank below 6 is then an
/// error. With `λ > 0` the regularized normal equations are solved by
/// Cholesky factorization.
pub fn solve_ppc(sys: &PpcSystem, w: &WeightVector, cfg: &SolverConfig) -> Result<MotionVector> {
    cfg.validate()?;
    let active = active_rows(sys, w)?;
    if active.len() < cfg.min_rows {
        return Err(Error::InsufficientConstraints { rows: active.len(), needed: cfg.min_rows });
    }

    if cfg.tikhonov_lambda == 0.0 {
        let m = active.len();
        let mut wa = DMatrix::<f64>::zeros(m, 6);
        let mut wb = DVector::<f64>::zeros(m);
        for (r, &i) in active.iter().enumerate() {
            let wi = w.diag[i];
            wa.set_row(r, &(sys.a.row(i) * wi));
            wb[r] = wi * sys.b[i];
        }
        let qr = wa.qr();
        let r = qr.r();
        let max_diag = r.diagonal().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if max_diag == 0.0
            || r.diagonal().iter().any(|x| x.abs() < 1e-12 * max_diag)
        {
            return Err(Error::RankDeficient);
        }
        let qtb = qr.q().transpose() * wb;
        let x = r.solve_upper_triangular(&qtb).ok_or(Error::RankDeficient)?;
        return Ok(MotionVector::from_vector6(&Vector6::from_column_slice(x.as_slice())));
    }

    let scale = cfg.balance(sys);
    let (m, rhs) = normal_equations(sys, w, &active, cfg.tikhonov_lambda, scale);
    let chol = m.cholesky().ok_or(Error::RankDeficient)?;
    Ok(MotionVector::from_vector6(&chol.solve(&rhs)))
}

/// Analytic derivatives of the solved motion with respect to the right-hand
/// side and the weight diagonal (columns of unused rows are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PpcJacobians {
    /// 6×N: column i is `∂dv/∂b_i`.
    pub d_dv_d_b: DMatrix<f64>,
    /// 6×N: column i is `∂dv/∂w_i`.
    pub d_dv_d_w: DMatrix<f64>,
}

/// Differentiates the closed-form solve by implicit differentiation of the
/// stationarity condition `(AᵀW²A + λD²) dv = AᵀW²b`:
///
/// `∂dv/∂b_i = w_i² M⁻¹ a_i` and `∂dv/∂w_i = 2 w_i r_i M⁻¹ a_i` with
/// `r_i = b_i − a_iᵀ dv` the row residual at the solution.
pub fn ppc_jacobians(sys: &PpcSystem, w: &WeightVector, cfg: &SolverConfig) -> Result<PpcJacobians> {
    let dv = solve_ppc(sys, w, cfg)?;
    let active = active_rows(sys, w)?;
    let scale = cfg.balance(sys);
    let (m, _) = normal_equations(sys, w, &active, cfg.tikhonov_lambda, scale);
    let chol = m.cholesky().ok_or(Error::RankDeficient)?;

    let n = sys.rows();
    let dv6 = dv.as_vector6();
    let mut d_b = DMatrix::<f64>::zeros(6, n);
    let mut d_w = DMatrix::<f64>::zeros(6, n);
    for i in 0..n {
        if !sys.used[i] || w.diag[i] == 0.0 {
            continue;
        }
        let row = sys.row(i);
        let m_inv_a = chol.solve(&row);
        let wi = w.diag[i];
        let residual = sys.b[i] - row.dot(&dv6);
        d_b.set_column(i, &(m_inv_a * (wi * wi)));
        d_w.set_column(i, &(m_inv_a * (2.0 * wi * residual)));
    }
    Ok(PpcJacobians { d_dv_d_b: d_b, d_dv_d_w: d_w })
}

/// Converts a solved motion increment into a rigid transform. Thin alias of
/// the SE(3) exponential so the update step reads `T_{i+1} = dv→T ∘ T_i`.
pub fn dv_to_transform(dv: &MotionVector) -> Result<RigidTransform> {
    se3_exp(dv)
}
