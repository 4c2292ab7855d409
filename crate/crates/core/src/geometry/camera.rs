//! Pinhole cameras and orbit trajectories.
//!
//! Camera frame: +Z forward, +X right, +Y down (image rows grow downward).
//! Poses are world-from-camera. Pixel `(u, v)` has its center at integer
//! coordinates, so pixel `(0, 0)` spans `[-0.5, 0.5)^2`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const WORLD_UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::invalid(format!("principal point ({cx}, {cy}) outside {width}x{height} image")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Square pixels, centered principal point, horizontal field of view in radians.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Result<Self> {
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::invalid(format!("field of view must lie in (0, pi), got {hfov}")));
        }
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    /// Camera-frame point to pixel coordinates; `None` at or behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame ray through pixel `(u, v)` with unit depth, `K^-1 [u, v, 1]`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// World-from-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(err <= 1e-9) || !(rotation.determinant() > 0.0) {
            return Err(Error::invalid("camera rotation must be a proper orthonormal matrix"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation"));
        }
        Ok(CameraPose { rotation, translation })
    }

    pub fn identity() -> Self {
        CameraPose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` looking at `center`, image up roughly along `up`.
    pub fn look_at(eye: Vec3, center: Vec3, up: Vec3) -> Result<Self> {
        let f = center - eye;
        if f.norm() < 1e-12 {
            return Err(Error::Degenerate("camera eye coincides with its target".into()));
        }
        let f = f.normalize();
        let r = f.cross(&up);
        if r.norm() < 1e-9 * up.norm().max(1.0) {
            return Err(Error::Degenerate("viewing direction is parallel to the up vector".into()));
        }
        let r = r.normalize();
        let d = f.cross(&r);
        CameraPose::new(Mat3::from_columns(&[r, d, f]), eye)
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Geodesic angle in radians between two camera orientations.
    pub fn relative_angle(&self, other: &CameraPose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }
}

/// Angle of a rotation matrix, computed robustly near 0 and pi.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitSpec {
    pub center: Vec3,
    pub radius: f64,
    pub elevation: f64,
    pub n_frames: usize,
    pub start_azimuth: f64,
}

impl OrbitSpec {
    /// Orbit around a bounding sphere: radius twice the sphere's, 15 degrees up.
    pub fn around(center: Vec3, bounding_radius: f64, n_frames: usize) -> Self {
        OrbitSpec { center, radius: 2.0 * bounding_radius, elevation: 15f64.to_radians(), n_frames, start_azimuth: 0.0 }
    }
}

pub fn orbit_trajectory(spec: &OrbitSpec) -> Result<Vec<CameraPose>> {
    if !(spec.radius > 0.0) {
        return Err(Error::invalid(format!("orbit radius must be positive, got {}", spec.radius)));
    }
    if spec.n_frames < 2 {
        return Err(Error::invalid(format!("orbit needs at least 2 frames, got {}", spec.n_frames)));
    }
    let (ce, se) = (spec.elevation.cos(), spec.elevation.sin());
    (0..spec.n_frames)
        .map(|i| {
            let theta = spec.start_azimuth + std::f64::consts::TAU * i as f64 / spec.n_frames as f64;
            let eye = spec.center + spec.radius * Vec3::new(theta.cos() * ce, theta.sin() * ce, se);
            CameraPose::look_at(eye, spec.center, WORLD_UP)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_frame_orbit_positions() {
        let spec = OrbitSpec { center: Vec3::zeros(), radius: 1.0, elevation: 0.0, n_frames: 4, start_azimuth: 0.0 };
        let poses = orbit_trajectory(&spec).unwrap();
        let want = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)];
        for (p, w) in poses.iter().zip(want) {
            assert!((p.center() - w).norm() < 1e-12);
        }
    }

    #[test]
    fn orbit_rejects_polar_and_bad_specs() {
        let mut spec = OrbitSpec::around(Vec3::zeros(), 1.0, 8);
        spec.elevation = std::f64::consts::FRAC_PI_2;
        assert!(orbit_trajectory(&spec).is_err());
        spec.elevation = 0.1;
        spec.n_frames = 1;
        assert!(orbit_trajectory(&spec).is_err());
        spec.n_frames = 3;
        spec.radius = 0.0;
        assert!(orbit_trajectory(&spec).is_err());
    }

    #[test]
    fn image_axes_follow_convention() {
        let pose = CameraPose::look_at(Vec3::new(-2.0, 0.0, 0.0), Vec3::zeros(), WORLD_UP).unwrap();
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 101, 81).unwrap();
        let above = k.project(&pose.to_camera(&Vec3::new(0.0, 0.0, 0.5))).unwrap();
        assert!(above.1 < 40.0);
        // Looking along +X with +Z up, world -Y is to the right.
        let right = k.project(&pose.to_camera(&Vec3::new(0.0, -0.5, 0.0))).unwrap();
        assert!(right.0 > 50.0);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let k = CameraIntrinsics::from_fov(64, 48, 1.0).unwrap();
        assert_eq!((k.cx, k.cy), (31.5, 23.5));
        assert!(k.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    proptest! {
        #[test]
        fn orbit_properties(
            k in 2usize..40,
            radius in 0.1f64..10.0,
            elev in -1.4f64..1.4,
            start in -3.0f64..3.0,
            cx in -2.0f64..2.0,
        ) {
            let spec = OrbitSpec { center: Vec3::new(cx, 0.5, -0.3), radius, elevation: elev, n_frames: k, start_azimuth: start };
            let poses = orbit_trajectory(&spec).unwrap();
            let intr = CameraIntrinsics::from_fov(65, 49, 0.9).unwrap();
            prop_assert_eq!(poses.len(), k);
            for p in &poses {
                let r = p.rotation;
                prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
                prop_assert!(((p.center() - spec.center).norm() - radius).abs() < 1e-9);
                let (u, v) = intr.project(&p.to_camera(&spec.center)).unwrap();
                prop_assert!((u - intr.cx).abs() < 1e-6 && (v - intr.cy).abs() < 1e-6);
            }
            let step = std::f64::consts::TAU / k as f64;
            for i in 0..k {
                let a = poses[i].relative_angle(&poses[(i + 1) % k]);
                let want = step.min(std::f64::consts::TAU - step);
                prop_assert!((a - want).abs() < 1e-6, "{} vs {}", a, want);
            }
        }
    }
}
