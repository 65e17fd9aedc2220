//! Ground-plane geometry: planar rotations, observer poses, relative
//! coordinate transforms and pinhole projection of pedestrians.
//!
//! Conventions used throughout the crate:
//!
//! * The world z-axis is the ground normal; everything else lives in the
//!   xy-plane.
//! * A pose `(c_x, c_y, theta)` maps world points into the camera frame as
//!   `x_cam = R(theta) * x + t` with `t = -R(theta) * c`.
//! * In the camera frame the local `+y` axis is the viewing direction
//!   (depth) and local `+x` is image right. Image `y` grows downwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 2-vector on the ground plane. Used for positions and per-frame velocities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

/// On-ground position of a pedestrian.
pub type GroundPoint<T> = Vec2<T>;

impl<T: Scalar> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> T {
        self.x * self.x + self.y * self.y
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Scalar> std::ops::Add for Vec2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Scalar> std::ops::Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<T: Scalar> std::ops::Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    if a > -T::PI() && a <= T::PI() {
        return a;
    }
    let two_pi = T::TAU();
    let r = a - two_pi * ((a + T::PI()) / two_pi).floor();
    if r <= -T::PI() {
        r + two_pi
    } else {
        r
    }
}

/// Planar rotation `[[cos, -sin], [sin, cos]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot2<T> {
    pub m: [[T; 2]; 2],
}

impl<T: Scalar> Rot2<T> {
    pub fn new(theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self { m: [[c, -s], [s, c]] }
    }

    pub fn identity() -> Self {
        Self {
            m: [[T::one(), T::zero()], [T::zero(), T::one()]],
        }
    }

    pub fn apply(&self, v: Vec2<T>) -> Vec2<T> {
        Vec2::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y,
            self.m[1][0] * v.x + self.m[1][1] * v.y,
        )
    }

    /// Applies the transpose (the inverse rotation).
    pub fn apply_transpose(&self, v: Vec2<T>) -> Vec2<T> {
        Vec2::new(
            self.m[0][0] * v.x + self.m[1][0] * v.y,
            self.m[0][1] * v.x + self.m[1][1] * v.y,
        )
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: [[self.m[0][0], self.m[1][0]], [self.m[0][1], self.m[1][1]]],
        }
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let a = &self.m;
        let b = &rhs.m;
        Self {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
        }
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1]
    }

    pub fn det(&self) -> T {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }
}

/// Rotation matrix for a heading angle.
pub fn rotation_matrix<T: Scalar>(theta: T) -> Result<Rot2<T>> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("rotation angle"));
    }
    Ok(Rot2::new(theta))
}

/// Observer camera pose on the ground plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub c_x: T,
    pub c_y: T,
    /// Heading about the ground normal, kept in `(-pi, pi]`.
    pub theta_z: T,
}

impl<T: Scalar> Pose<T> {
    pub fn new(c_x: T, c_y: T, theta_z: T) -> Self {
        Self {
            c_x,
            c_y,
            theta_z: normalize_angle(theta_z),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn center(&self) -> Vec2<T> {
        Vec2::new(self.c_x, self.c_y)
    }

    pub fn rotation(&self) -> Rot2<T> {
        Rot2::new(self.theta_z)
    }

    /// Camera translation `t = -R(theta) c`.
    pub fn translation(&self) -> Vec2<T> {
        -self.rotation().apply(self.center())
    }

    /// Recovers the pose from a heading and a camera translation.
    pub fn from_translation(t: Vec2<T>, theta_z: T) -> Self {
        let theta_z = normalize_angle(theta_z);
        let c = -Rot2::new(theta_z).apply_transpose(t);
        Self {
            c_x: c.x,
            c_y: c.y,
            theta_z,
        }
    }

    /// World point to camera-frame ground coordinates.
    pub fn to_camera(&self, x: Vec2<T>) -> Vec2<T> {
        self.rotation().apply(x - self.center())
    }

    /// Camera-frame ground coordinates back to world.
    pub fn to_world(&self, x_rel: Vec2<T>) -> Vec2<T> {
        self.rotation().apply_transpose(x_rel) + self.center()
    }

    pub fn is_finite(&self) -> bool {
        self.c_x.is_finite() && self.c_y.is_finite() && self.theta_z.is_finite()
    }
}

/// Frame-to-frame camera motion.
///
/// The translational part is the increment of the camera translation
/// `t`, so that `t_new = R(d_theta) t_prev + [d_cx, d_cy]`. Equivalently,
/// camera-frame coordinates evolve as `x_new = R(d_theta) x_prev + d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta<T> {
    pub d_cx: T,
    pub d_cy: T,
    pub d_theta: T,
}

impl<T: Scalar> PoseDelta<T> {
    pub fn new(d_cx: T, d_cy: T, d_theta: T) -> Self {
        Self { d_cx, d_cy, d_theta }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn translation(&self) -> Vec2<T> {
        Vec2::new(self.d_cx, self.d_cy)
    }

    pub fn is_finite(&self) -> bool {
        self.d_cx.is_finite() && self.d_cy.is_finite() && self.d_theta.is_finite()
    }

    /// The delta that carries `prev` onto `next`.
    pub fn between(prev: &Pose<T>, next: &Pose<T>) -> Self {
        let d_theta = normalize_angle(next.theta_z - prev.theta_z);
        let dt = next.translation() - Rot2::new(d_theta).apply(prev.translation());
        Self::new(dt.x, dt.y, d_theta)
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.d_cx, self.d_cy, self.d_theta]
    }
}

/// Pinhole camera mounted at a fixed height above the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    /// Row-major 3x3 intrinsic matrix in normalized image units.
    pub matrix_a: [[T; 3]; 3],
    pub height_cz: T,
    pub fov_deg: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    /// Zero-skew camera with the principal point at the image centre.
    pub fn generic(fov_deg: T, focal: T, height_cz: T) -> Result<Self> {
        let (z, o) = (T::zero(), T::one());
        let intr = Self {
            matrix_a: [[focal, z, z], [z, focal, z], [z, z, o]],
            height_cz,
            fov_deg,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let det = det3(&self.matrix_a);
        if !det.is_finite() || det.abs() < T::epsilon() {
            return Err(Error::InvalidArgument("intrinsic matrix is singular".into()));
        }
        if !(self.height_cz > T::zero()) {
            return Err(Error::InvalidArgument("camera height must be positive".into()));
        }
        if !(self.fov_deg > T::zero() && self.fov_deg < T::lit(180.0)) {
            return Err(Error::InvalidArgument("fov must lie in (0, 180) degrees".into()));
        }
        Ok(())
    }

    pub fn focal_x(&self) -> T {
        self.matrix_a[0][0]
    }

    pub fn focal_y(&self) -> T {
        self.matrix_a[1][1]
    }

    pub fn principal_point(&self) -> Vec2<T> {
        Vec2::new(self.matrix_a[0][2], self.matrix_a[1][2])
    }

    /// `tan(fov / 2)`: the largest visible lateral/depth ratio.
    pub fn half_fov_tan(&self) -> T {
        (self.fov_deg.to_radians() / T::lit(2.0)).tan()
    }

    /// Half-width of the image in normalized units implied by the FOV.
    pub fn image_half_width(&self) -> T {
        self.focal_x() * self.half_fov_tan()
    }

    /// Whether a camera-frame ground point lies strictly in front of the
    /// camera and inside the horizontal field of view.
    pub fn in_frustum(&self, x_cam: Vec2<T>) -> bool {
        x_cam.y > T::zero() && x_cam.x.abs() <= self.half_fov_tan() * x_cam.y
    }

    fn inverse(&self) -> Result<[[T; 3]; 3]> {
        inv3(&self.matrix_a).ok_or_else(|| Error::InvalidArgument("intrinsic matrix is singular".into()))
    }
}

impl Default for CameraIntrinsics<f64> {
    fn default() -> Self {
        Self::generic(DEFAULT_FOV_DEG, DEFAULT_FOCAL, DEFAULT_CAMERA_HEIGHT).expect("valid default camera")
    }
}

pub const DEFAULT_FOV_DEG: f64 = 120.0;
pub const DEFAULT_FOCAL: f64 = 2.46;
/// Mounted camera height in metres (eye level of an adult observer).
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;

fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3<T: Scalar>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let det = det3(m);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv_det = T::one() / det;
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    Some([
        [c(1, 1, 2, 2) * inv_det, -c(0, 1, 2, 2) * inv_det, c(0, 1, 1, 2) * inv_det],
        [-c(1, 0, 2, 2) * inv_det, c(0, 0, 2, 2) * inv_det, -c(0, 0, 1, 2) * inv_det],
        [c(1, 0, 2, 1) * inv_det, -c(0, 0, 2, 1) * inv_det, c(0, 0, 1, 1) * inv_det],
    ])
}

fn check_finite<T: Scalar>(v: Vec2<T>, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_pose<T: Scalar>(p: &Pose<T>) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("camera pose"))
    }
}

/// Expresses a world position and its last displacement in the camera frame.
///
/// Returns `(R x + t, R (x - x_prev))`.
pub fn relative_transform<T: Scalar>(
    x_world: GroundPoint<T>,
    x_prev_world: GroundPoint<T>,
    cam: &Pose<T>,
) -> Result<(GroundPoint<T>, Vec2<T>)> {
    check_finite(x_world, "position")?;
    check_finite(x_prev_world, "previous position")?;
    check_pose(cam)?;
    let r = cam.rotation();
    let x_rel = r.apply(x_world) + cam.translation();
    let v_rel = r.apply(x_world - x_prev_world);
    Ok((x_rel, v_rel))
}

/// Inverse of [`relative_transform`]: `(R^T (x_rel - t), R^T v_rel)`.
pub fn inverse_relative_transform<T: Scalar>(
    x_rel: GroundPoint<T>,
    v_rel: Vec2<T>,
    cam: &Pose<T>,
) -> Result<(GroundPoint<T>, Vec2<T>)> {
    check_finite(x_rel, "relative position")?;
    check_finite(v_rel, "relative velocity")?;
    check_pose(cam)?;
    let r = cam.rotation();
    Ok((r.apply_transpose(x_rel - cam.translation()), r.apply_transpose(v_rel)))
}

/// Applies a frame-to-frame delta: `theta' = theta + d_theta`,
/// `t' = R(d_theta) t + d_t`.
pub fn compose_pose<T: Scalar>(prev: &Pose<T>, delta: &PoseDelta<T>) -> Pose<T> {
    let t = Rot2::new(delta.d_theta).apply(prev.translation()) + delta.translation();
    Pose::from_translation(t, prev.theta_z + delta.d_theta)
}

/// World position of a point given in the camera frame of the pose obtained
/// by composing `delta` onto `prev_cam`.
pub fn compose_world_position<T: Scalar>(x_rel: GroundPoint<T>, prev_cam: &Pose<T>, delta: &PoseDelta<T>) -> GroundPoint<T> {
    let theta = prev_cam.theta_z + delta.d_theta;
    let t = Rot2::new(delta.d_theta).apply(prev_cam.translation()) + delta.translation();
    Rot2::new(theta).apply_transpose(x_rel - t)
}

/// Camera-frame 3D point of a pedestrian's mid-height: `(lateral, down, depth)`.
fn camera_point<T: Scalar>(x_cam: Vec2<T>, height_h: T, intr: &CameraIntrinsics<T>) -> [T; 3] {
    [x_cam.x, intr.height_cz - height_h / T::lit(2.0), x_cam.y]
}

/// Homogeneous projection `s A x` of a camera-frame ground point at
/// mid-height; the third coordinate is exactly one.
pub fn project_camera_point<T: Scalar>(x_cam: Vec2<T>, height_h: T, intr: &CameraIntrinsics<T>) -> Result<[T; 3]> {
    check_finite(x_cam, "camera point")?;
    if x_cam.y.abs() < T::lit(1e-9) {
        return Err(Error::NearPlane {
            depth: x_cam.y.to_f64().unwrap_or(f64::NAN),
        });
    }
    if x_cam.y < T::zero() {
        return Err(Error::BehindCamera {
            depth: x_cam.y.to_f64().unwrap_or(f64::NAN),
        });
    }
    let xc = camera_point(x_cam, height_h, intr);
    let a = &intr.matrix_a;
    let h = [0, 1, 2].map(|r| a[r][0] * xc[0] + a[r][1] * xc[1] + a[r][2] * xc[2]);
    Ok([h[0] / h[2], h[1] / h[2], h[2] / h[2]])
}

/// Projects the mid-height point of a pedestrian standing at `x_world`.
pub fn project_pedestrian<T: Scalar>(
    x_world: GroundPoint<T>,
    height_h: T,
    cam: &Pose<T>,
    intr: &CameraIntrinsics<T>,
) -> Result<Vec2<T>> {
    check_finite(x_world, "position")?;
    check_pose(cam)?;
    let p = project_camera_point(cam.to_camera(x_world), height_h, intr)?;
    Ok(Vec2::new(p[0], p[1]))
}

/// Intersects the viewing ray through `p` with the horizontal plane at the
/// pedestrian's mid-height and returns the camera-frame ground point.
pub fn back_project_camera<T: Scalar>(p: Vec2<T>, height_h: T, intr: &CameraIntrinsics<T>) -> Result<Vec2<T>> {
    check_finite(p, "image point")?;
    let inv = intr.inverse()?;
    let ray = [0, 1, 2].map(|r| inv[r][0] * p.x + inv[r][1] * p.y + inv[r][2]);
    let drop = intr.height_cz - height_h / T::lit(2.0);
    if ray[1] == T::zero() || drop == T::zero() {
        return Err(Error::InvalidArgument(
            "viewing ray parallel to the mid-height plane".into(),
        ));
    }
    let s = drop / ray[1];
    let depth = s * ray[2];
    if depth <= T::zero() {
        return Err(Error::BehindCamera {
            depth: depth.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(Vec2::new(s * ray[0], depth))
}

/// World-frame version of [`back_project_camera`].
pub fn back_project<T: Scalar>(p: Vec2<T>, height_h: T, cam: &Pose<T>, intr: &CameraIntrinsics<T>) -> Result<GroundPoint<T>> {
    check_pose(cam)?;
    Ok(cam.to_world(back_project_camera(p, height_h, intr)?))
}

/// Geodesic angle between two headings, via the trace of `R(a) R(b)^T`.
/// Result lies in `[0, pi]`.
pub fn rotation_error<T: Scalar>(theta_true: T, theta_est: T) -> T {
    // R(a) R(b)^T = R(a - b) in the plane; forming it directly keeps the
    // trace exact for equal angles. The trace is taken of the 3x3 rotation
    // about the ground normal, hence the extra unit z entry.
    let r = Rot2::new(theta_true - theta_est);
    let trace3 = r.trace() + T::one();
    let c = (trace3 - T::one()) / T::lit(2.0);
    c.max(-T::one()).min(T::one()).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: Vec2<f64>, b: Vec2<f64>, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn rotation_matrix_cases() {
        assert_eq!(rotation_matrix(0.0).unwrap(), Rot2::identity());
        let half = rotation_matrix(PI).unwrap();
        assert!((half.m[0][0] + 1.0).abs() < 1e-15 && (half.m[1][1] + 1.0).abs() < 1e-15);
        assert!(half.m[0][1].abs() < 1e-15 && half.m[1][0].abs() < 1e-15);
        let r = rotation_matrix(0.3_f64).unwrap();
        let rrt = r.mul(&r.transpose());
        assert!((rrt.m[0][0] - 1.0).abs() < 1e-12 && rrt.m[0][1].abs() < 1e-12);
        assert!((r.det() - 1.0).abs() < 1e-12);
        assert!(rotation_matrix(f64::NAN).is_err());
        assert!(rotation_matrix(f64::INFINITY).is_err());
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0_f64 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-0.5_f64) + 0.5).abs() < 1e-15);
        assert!((normalize_angle(2.0_f64 * PI + 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn relative_transform_examples() {
        let (x, v) = relative_transform(Vec2::new(1.0, 2.0), Vec2::new(1.0, 1.0), &Pose::identity()).unwrap();
        assert_eq!(x, Vec2::new(1.0, 2.0));
        assert_eq!(v, Vec2::new(0.0, 1.0));

        let cam = Pose::new(1.0, 0.0, FRAC_PI_2);
        let (x, v) = relative_transform(Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0), &cam).unwrap();
        assert!(close(x, Vec2::new(-1.0, 0.0), 1e-15));
        assert_eq!(v, Vec2::zero());

        let (w, _) = inverse_relative_transform(Vec2::new(-1.0, 0.0), Vec2::zero(), &cam).unwrap();
        assert!(close(w, Vec2::new(1.0, 1.0), 1e-15));

        let (w, v) = inverse_relative_transform(Vec2::new(3.0, -2.0), Vec2::new(0.5, 0.1), &Pose::identity()).unwrap();
        assert_eq!((w, v), (Vec2::new(3.0, -2.0), Vec2::new(0.5, 0.1)));
        assert!(inverse_relative_transform(Vec2::new(f64::NAN, 0.0), Vec2::zero(), &cam).is_err());
    }

    #[test]
    fn compose_pose_examples() {
        let prev = Pose::new(0.4_f64, -1.2, 0.7);
        let same = compose_pose(&prev, &PoseDelta::zero());
        assert!((same.c_x - prev.c_x).abs() < 1e-15 && (same.c_y - prev.c_y).abs() < 1e-15);
        assert_eq!(same.theta_z, prev.theta_z);

        let p = compose_pose(&Pose::identity(), &PoseDelta::new(1.0, 0.0, 0.0));
        assert_eq!(p.translation(), Vec2::new(1.0, 0.0));

        let wrapped = compose_pose(&Pose::new(0.0, 0.0, 3.0), &PoseDelta::new(0.0, 0.0, 0.5));
        assert!(wrapped.theta_z > -PI && wrapped.theta_z <= PI);
    }

    #[test]
    fn compose_world_position_examples() {
        let x = Vec2::new(0.3, 1.7);
        assert_eq!(compose_world_position(x, &Pose::identity(), &PoseDelta::zero()), x);
        let w = compose_world_position(Vec2::new(1.0, 0.0), &Pose::identity(), &PoseDelta::new(0.0, 0.0, PI));
        assert!(close(w, Vec2::new(-1.0, 0.0), 1e-15));
    }

    #[test]
    fn delta_between_inverts_compose() {
        let a = Pose::new(0.3_f64, 2.0, -2.9);
        let b = Pose::new(-1.0, 2.5, 2.8);
        let d = PoseDelta::between(&a, &b);
        let c = compose_pose(&a, &d);
        assert!((c.c_x - b.c_x).abs() < 1e-12 && (c.c_y - b.c_y).abs() < 1e-12);
        assert!(rotation_error(c.theta_z, b.theta_z) < 1e-12);
    }

    #[test]
    fn projection_on_axis_hits_principal_point() {
        let intr = CameraIntrinsics::default();
        let h = 2.0 * intr.height_cz;
        let p = project_pedestrian(Vec2::new(0.0, 5.0), h, &Pose::identity(), &intr).unwrap();
        assert_eq!(p, Vec2::new(0.0, 0.0));
    }

    #[test]
    fn projection_height_changes_only_vertical() {
        let intr = CameraIntrinsics::default();
        let cam = Pose::new(0.5, -0.5, 0.2);
        let x = Vec2::new(1.0, 4.0);
        let a = project_pedestrian(x, 1.6, &cam, &intr).unwrap();
        let b = project_pedestrian(x, 1.8, &cam, &intr).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn projection_errors() {
        let intr = CameraIntrinsics::default();
        let cam = Pose::identity();
        assert!(matches!(
            project_pedestrian(Vec2::new(0.0, -2.0), 1.7, &cam, &intr),
            Err(Error::BehindCamera { .. })
        ));
        assert!(matches!(
            project_pedestrian(Vec2::new(1.0, 1e-12), 1.7, &cam, &intr),
            Err(Error::NearPlane { .. })
        ));
        assert!(matches!(
            project_pedestrian(Vec2::new(1.0, 0.0), 1.7, &cam, &intr),
            Err(Error::NearPlane { .. })
        ));
    }

    #[test]
    fn homogeneous_output_is_normalized() {
        let intr = CameraIntrinsics::default();
        for i in 1..200 {
            let d = 0.37 * i as f64;
            let p = project_camera_point(Vec2::new(0.1 * i as f64 - 7.0, d), 1.7, &intr).unwrap();
            assert_eq!(p[2], 1.0);
        }
    }

    #[test]
    fn back_projection_inverts_projection() {
        let intr = CameraIntrinsics::default();
        let cam = Pose::new(2.0, 1.0, -0.4);
        let x = Vec2::new(3.0, 6.0);
        let p = project_pedestrian(x, 1.75, &cam, &intr).unwrap();
        let back = back_project(p, 1.75, &cam, &intr).unwrap();
        assert!(close(back, x, 1e-9));
    }

    #[test]
    fn rotation_error_examples() {
        assert_eq!(rotation_error(0.7_f64, 0.7), 0.0);
        assert!((rotation_error(0.0_f64, PI) - PI).abs() < 1e-12);
        // In the plane the trace formula reduces to |a - b| for |a - b| <= pi.
        assert!((rotation_error(0.1_f64, 0.3) - 0.2).abs() < 1e-12);
        assert!((rotation_error(0.3_f64, 0.1) - rotation_error(0.1_f64, 0.3)).abs() < 1e-15);
        assert!(rotation_error(0.5_f64, 0.5 + 2.0 * PI) < 1e-7);
    }

    #[test]
    fn works_in_single_precision() {
        let cam = Pose::<f32>::new(1.0, 0.0, std::f32::consts::FRAC_PI_2);
        let (x, _) = relative_transform(Vec2::new(1.0f32, 1.0), Vec2::new(1.0, 1.0), &cam).unwrap();
        assert!((x - Vec2::new(-1.0, 0.0)).norm() < 1e-6);
        let intr = CameraIntrinsics::<f32>::generic(120.0, 2.46, 1.6).unwrap();
        let p = project_pedestrian(Vec2::new(0.0f32, 3.0), 1.7, &Pose::identity(), &intr).unwrap();
        assert!(p.y > 0.0);
    }

    #[test]
    fn frustum_respects_fov() {
        let intr = CameraIntrinsics::default();
        assert!(intr.in_frustum(Vec2::new(0.0, 1.0)));
        assert!(intr.in_frustum(Vec2::new(1.7, 1.0)));
        assert!(!intr.in_frustum(Vec2::new(1.8, 1.0)));
        assert!(!intr.in_frustum(Vec2::new(0.0, -1.0)));
        assert!((intr.image_half_width() - 2.46 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::generic(120.0, 0.0, 1.6).is_err());
        assert!(CameraIntrinsics::generic(120.0, 2.46, 0.0).is_err());
        assert!(CameraIntrinsics::generic(190.0, 2.46, 1.6).is_err());
    }
}
