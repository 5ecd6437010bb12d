//! SE(3) poses, motion increments, and the pinhole projection model.
//!
//! Frames: the camera frame has the X-ray source at the origin and the
//! optical axis along +z toward the detector. Poses map object-frame points
//! into this camera frame. All angles are radians, all lengths millimetres;
//! degrees appear only at CLI boundaries.

use crate::error::{invalid_arg, Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3, Vector6};

/// Points closer to the source than this (mm along z) count as behind it.
pub const EPS_DEPTH: f64 = 1e-6;

/// Skew-symmetric cross-product matrix: `skew(a) * b == a × b`.
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A 6-DOF motion increment `(ω; t)` expressed in the camera frame.
///
/// `omega` is an axis-angle rotational increment (radians, ‖ω‖ < π) and
/// `trans` a translational increment (mm). The increment acts on camera-frame
/// points as `x ↦ x + ω×x + t` to first order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector {
    pub omega: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl MotionVector {
    pub fn new(omega: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { omega, trans }
    }

    pub fn zero() -> Self {
        Self { omega: Vector3::zeros(), trans: Vector3::zeros() }
    }

    pub fn from_vector6(v: &Vector6<f64>) -> Self {
        Self { omega: Vector3::new(v[0], v[1], v[2]), trans: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn as_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x, self.omega.y, self.omega.z, self.trans.x, self.trans.y, self.trans.z,
        )
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        (self.omega.norm_squared() + self.trans.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.trans.iter()).all(|x| x.is_finite())
    }

    /// SE(3) exponential of the increment; see [`se3_exp`].
    pub fn exp(&self) -> Result<RigidTransform> {
        se3_exp(self)
    }
}

impl core::ops::Neg for MotionVector {
    type Output = MotionVector;
    fn neg(self) -> MotionVector {
        MotionVector { omega: -self.omega, trans: -self.trans }
    }
}

/// A rigid object-to-camera transform: `x_cam = R x_obj + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Orthonormality / determinant tolerance for [`RigidTransform::new`].
    pub const ROTATION_TOL: f64 = 1e-9;

    /// Builds a transform, checking `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(invalid_arg!("non-finite transform entries"));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if defect > Self::ROTATION_TOL {
            return Err(invalid_arg!("rotation is not orthonormal (defect {defect:.3e})"));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > Self::ROTATION_TOL {
            return Err(invalid_arg!("rotation determinant {det} is not +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation from per-axis Euler angles (radians), applied as Rz·Ry·Rx.
    pub fn from_euler(angles: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let (cx, sx) = (angles.x.cos(), angles.x.sin());
        let (cy, sy) = (angles.y.cos(), angles.y.sin());
        let (cz, sz) = (angles.z.cos(), angles.z.sin());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        Self { rotation: rz * ry * rx, translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Applies the transform to a point: `R x + t`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Composition `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// SE(3) exponential map: converts a motion increment into a rigid transform.
///
/// Rodrigues' formula gives the rotation; the translation goes through the
/// SE(3) V-matrix so that `exp(dv)(x) = x + ω×x + t + O(‖dv‖²)`, matching
/// the linearization the constraint solver works with.
pub fn se3_exp(dv: &MotionVector) -> Result<RigidTransform> {
    if !dv.is_finite() {
        return Err(invalid_arg!("non-finite motion vector"));
    }
    let theta_sq = dv.omega.norm_squared();
    if theta_sq >= core::f64::consts::PI * core::f64::consts::PI {
        return Err(invalid_arg!("rotational increment magnitude must be below pi"));
    }

    // Series coefficients a = sinθ/θ, b = (1−cosθ)/θ², c = (θ−sinθ)/θ³,
    // with Taylor fallbacks below θ² = 1e-8 where the closed forms cancel.
    let (a, b, c) = if theta_sq < 1e-8 {
        (
            1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };

    let k = skew(&dv.omega);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Ok(RigidTransform { rotation, translation: v * dv.trans })
}

/// Pinhole intrinsics of the X-ray imaging geometry.
///
/// The detector lies perpendicular to +z at `source_to_detector` mm from the
/// source; pixel coordinates are continuous with the origin at the detector's
/// top-left corner, so pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    focal_px: Vector2<f64>,
    principal_point_px: Vector2<f64>,
    detector_res: [usize; 2],
    pixel_spacing: f64,
    source_to_detector: f64,
}

impl CameraModel {
    pub fn new(
        focal_px: Vector2<f64>,
        principal_point_px: Vector2<f64>,
        detector_res: [usize; 2],
        pixel_spacing: f64,
        source_to_detector: f64,
    ) -> Result<Self> {
        if focal_px.x <= 0.0 || focal_px.y <= 0.0 {
            return Err(invalid_arg!("focal length must be positive"));
        }
        if pixel_spacing <= 0.0 || source_to_detector <= 0.0 {
            return Err(invalid_arg!("pixel spacing and source-detector distance must be positive"));
        }
        if detector_res[0] == 0 || detector_res[1] == 0 {
            return Err(invalid_arg!("detector resolution must be nonzero"));
        }
        let inside = principal_point_px.x >= 0.0
            && principal_point_px.x <= detector_res[0] as f64
            && principal_point_px.y >= 0.0
            && principal_point_px.y <= detector_res[1] as f64;
        if !inside {
            return Err(invalid_arg!("principal point lies outside the detector"));
        }
        Ok(Self { focal_px, principal_point_px, detector_res, pixel_spacing, source_to_detector })
    }

    /// Geometry derived from detector resolution, pixel pitch, and
    /// source-to-detector distance, with the principal point at the detector
    /// center: focal length in pixels is `SID / pixel_spacing`.
    pub fn from_detector(
        detector_res: [usize; 2],
        pixel_spacing: f64,
        source_to_detector: f64,
    ) -> Result<Self> {
        let f = source_to_detector / pixel_spacing;
        Self::new(
            Vector2::new(f, f),
            Vector2::new(detector_res[0] as f64 / 2.0, detector_res[1] as f64 / 2.0),
            detector_res,
            pixel_spacing,
            source_to_detector,
        )
    }

    /// The 616×480 / 0.616 mm fluoroscopy detector at 1000 mm SID.
    pub fn default_c_arm() -> Self {
        Self::from_detector([616, 480], 0.616, 1000.0).expect("valid default geometry")
    }

    pub fn focal_px(&self) -> Vector2<f64> {
        self.focal_px
    }

    pub fn principal_point_px(&self) -> Vector2<f64> {
        self.principal_point_px
    }

    pub fn detector_res(&self) -> [usize; 2] {
        self.detector_res
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_detector
    }

    /// Projects a camera-frame point onto the detector (pixels).
    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x_cam.z <= EPS_DEPTH {
            return Err(Error::BehindCamera);
        }
        Ok(Vector2::new(
            self.principal_point_px.x + self.focal_px.x * x_cam.x / x_cam.z,
            self.principal_point_px.y + self.focal_px.y * x_cam.y / x_cam.z,
        ))
    }

    /// Unit direction of the ray from the source through pixel `p`.
    pub fn backproject_ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.principal_point_px.x) / self.focal_px.x,
            (p.y - self.principal_point_px.y) / self.focal_px.y,
            1.0,
        )
        .normalize()
    }

    /// Whether a continuous pixel coordinate falls on the detector.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= self.detector_res[0] as f64
            && p.y <= self.detector_res[1] as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dv(rng: &mut ChaCha8Rng, rot_scale: f64, trans_scale: f64) -> MotionVector {
        let u = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
        MotionVector::new(
            Vector3::new(u(rng, rot_scale), u(rng, rot_scale), u(rng, rot_scale)),
            Vector3::new(u(rng, trans_scale), u(rng, trans_scale), u(rng, trans_scale)),
        )
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        se3_exp(&random_dv(rng, 1.0, 100.0)).unwrap()
    }

    /// Truncated-series oracle: exp of the 4×4 twist matrix [[ω×, ρ], [0, 0]].
    fn matrix_exp_oracle(dv: &MotionVector) -> (Matrix3<f64>, Vector3<f64>) {
        let mut twist = Matrix4::<f64>::zeros();
        twist.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&dv.omega));
        twist.fixed_view_mut::<3, 1>(0, 3).copy_from(&dv.trans);
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..=20 {
            term = term * twist / k as f64;
            sum += term;
        }
        (sum.fixed_view::<3, 3>(0, 0).into_owned(), sum.fixed_view::<3, 1>(0, 3).into_owned())
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = se3_exp(&MotionVector::zero()).unwrap();
        assert_eq!(*t.rotation(), Matrix3::identity());
        assert_eq!(*t.translation(), Vector3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let dv = MotionVector::new(
            Vector3::new(0.0, 0.0, core::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let t = se3_exp(&dv).unwrap();
        let mapped = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(mapped, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(*t.translation(), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn exp_matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let dv = random_dv(&mut rng, 0.2, 0.2);
            let t = se3_exp(&dv).unwrap();
            let (r_ref, t_ref) = matrix_exp_oracle(&dv);
            assert!((t.rotation() - r_ref).norm() < 1e-10, "rotation off for {dv:?}");
            assert!((t.translation() - t_ref).norm() < 1e-10, "translation off for {dv:?}");
        }
    }

    #[test]
    fn exp_rejects_bad_input() {
        let nan = MotionVector::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(se3_exp(&nan), Err(Error::InvalidArgument(_))));
        let huge = MotionVector::new(Vector3::new(4.0, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(se3_exp(&huge), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn new_validates_rotation() {
        assert!(RigidTransform::new(Matrix3::identity() * 1.1, Vector3::zeros()).is_err());
        // Reflection: orthonormal but det = -1.
        let mut refl = Matrix3::identity();
        refl[(0, 0)] = -1.0;
        assert!(RigidTransform::new(refl, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).is_ok());
    }

    #[test]
    fn compose_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_transform(&mut rng);
        let composed = t.compose(&RigidTransform::identity());
        assert_relative_eq!(composed.rotation(), t.rotation(), epsilon = 1e-15);
        assert_relative_eq!(composed.translation(), t.translation(), epsilon = 1e-15);
    }

    #[test]
    fn compose_exp_with_inverse_increment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let dv = random_dv(&mut rng, 1.0, 100.0);
            let t = se3_exp(&dv).unwrap().compose(&se3_exp(&(-dv)).unwrap());
            assert!((t.rotation() - Matrix3::identity()).norm() < 1e-9);
            assert!(t.translation().norm() < 1e-9);
        }
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t1 = random_transform(&mut rng);
        let t2 = random_transform(&mut rng);
        let t12 = t1.compose(&t2);
        for _ in 0..100 {
            let x = Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            assert!((t12.apply(&x) - t1.apply(&t2.apply(&x))).norm() < 1e-9);
        }
    }

    #[test]
    fn apply_simple_cases() {
        let id = RigidTransform::identity();
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(id.apply(&x), x);

        let shift = RigidTransform::from_translation(Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(shift.apply(&Vector3::zeros()), Vector3::new(5.0, 0.0, 0.0));
    }

    #[test]
    fn apply_matches_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let x = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let expected = t.rotation() * x + t.translation();
            assert!((t.apply(&x) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_undoes_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_transform(&mut rng);
        let x = Vector3::new(3.0, -4.0, 12.0);
        assert!((t.inverse().apply(&t.apply(&x)) - x).norm() < 1e-12);
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let cam = CameraModel::default_c_arm();
        let p = cam.project(&Vector3::new(0.0, 0.0, 800.0)).unwrap();
        assert_relative_eq!(p, cam.principal_point_px(), epsilon = 1e-12);
    }

    #[test]
    fn project_similar_triangles() {
        let cam = CameraModel::new(
            Vector2::new(1000.0, 1000.0),
            Vector2::new(308.0, 240.0),
            [616, 480],
            0.616,
            616.0,
        )
        .unwrap();
        let p = cam.project(&Vector3::new(8.0, 0.0, 1000.0)).unwrap();
        assert_relative_eq!(p, Vector2::new(316.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_behind_source() {
        let cam = CameraModel::default_c_arm();
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, -5.0)), Err(Error::BehindCamera));
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, 1e-9)), Err(Error::BehindCamera));
    }

    #[test]
    fn backproject_principal_point_is_optical_axis() {
        let cam = CameraModel::default_c_arm();
        let d = cam.backproject_ray(&cam.principal_point_px());
        assert_relative_eq!(d, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn backproject_mirrored_pixels() {
        let cam = CameraModel::default_c_arm();
        let pp = cam.principal_point_px();
        let dl = cam.backproject_ray(&Vector2::new(pp.x - 40.0, pp.y));
        let dr = cam.backproject_ray(&Vector2::new(pp.x + 40.0, pp.y));
        assert_relative_eq!(dl.x, -dr.x, epsilon = 1e-15);
        assert_relative_eq!(dl.z, dr.z, epsilon = 1e-15);
    }

    #[test]
    fn camera_model_validation() {
        assert!(CameraModel::new(
            Vector2::new(-1.0, 1.0),
            Vector2::new(10.0, 10.0),
            [100, 100],
            1.0,
            1000.0
        )
        .is_err());
        assert!(CameraModel::new(
            Vector2::new(100.0, 100.0),
            Vector2::new(500.0, 10.0),
            [100, 100],
            1.0,
            1000.0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn project_backproject_roundtrip(
            px in 0.0..616.0f64,
            py in 0.0..480.0f64,
            z in 10.0..2000.0f64,
        ) {
            let cam = CameraModel::default_c_arm();
            let d = cam.backproject_ray(&Vector2::new(px, py));
            let x = d * (z / d.z);
            let p = cam.project(&x).unwrap();
            prop_assert!((p - Vector2::new(px, py)).norm() < 1e-9);
        }

        #[test]
        fn apply_preserves_distances(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            let x = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let y = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let before = (x - y).norm();
            let after = (t.apply(&x) - t.apply(&y)).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn exp_small_increment_matches_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dv = random_dv(&mut rng, 0.28, 0.28); // ‖dv‖ ≤ ~0.5 stacked
            let t = se3_exp(&dv).unwrap();
            let (r_ref, t_ref) = matrix_exp_oracle(&dv);
            prop_assert!((t.rotation() - r_ref).norm() < 1e-10);
            prop_assert!((t.translation() - t_ref).norm() < 1e-10);
        }
    }
}
