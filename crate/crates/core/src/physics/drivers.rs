//! Analytic driver fields: strike trajectory, vortex curl, steam rules and
//! the periodic wind impulse.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::camera::{Mat3, Vec3};
use crate::physics::mpm::ParticleSet;

/// `z0 + h - (h + d) s` with `s = (1 - cos 2 pi n t) / 2`.
pub fn strike_z(t: f64, z0: f64, h: f64, d: f64, n: f64) -> f64 {
    let s = 0.5 * (1.0 - (std::f64::consts::TAU * n * t).cos());
    z0 + h - (h + d) * s
}

/// Time derivative of [`strike_z`].
pub fn strike_vz(t: f64, h: f64, d: f64, n: f64) -> f64 {
    let w = std::f64::consts::TAU * n;
    -(h + d) * 0.5 * w * (w * t).sin()
}

pub const VORTEX_DECAY: f64 = 0.20;

/// Tangential swirl `c exp(-r / 0.2) sin(omega t) (-sin theta, cos theta, 0)`
/// about the vertical axis through `axis`.
pub fn vortex_force(pos: Vec3, t: f64, c: f64, omega: f64, axis: Vec3) -> Vec3 {
    let (dx, dy) = (pos.x - axis.x, pos.y - axis.y);
    let r = dx.hypot(dy);
    let theta = if r == 0.0 { 0.0 } else { dy.atan2(dx) };
    let k = c * (-r / VORTEX_DECAY).exp() * (omega * t).sin();
    Vec3::new(-theta.sin() * k, theta.cos() * k, 0.0)
}

/// Acceleration field applied to grid nodes and cloth particles.
#[derive(Clone, Debug, PartialEq)]
pub enum ForceField {
    Uniform(Vec3),
    Vortex { axis: Vec3, strength: f64, omega: f64 },
}

impl ForceField {
    pub fn accel(&self, pos: Vec3, t: f64) -> Vec3 {
        match *self {
            ForceField::Uniform(a) => a,
            ForceField::Vortex { axis, strength, omega } => vortex_force(pos, t, strength, omega, axis),
        }
    }
}

/// Kinematic sphere standing in for the robot end effector; its center
/// follows [`strike_z`] vertically above `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrikeCollider {
    pub x: f64,
    pub y: f64,
    pub z0: f64,
    pub h: f64,
    pub d: f64,
    pub n: f64,
    pub radius: f64,
}

impl StrikeCollider {
    pub fn center(&self, t: f64) -> Vec3 {
        Vec3::new(self.x, self.y, strike_z(t, self.z0, self.h, self.d, self.n))
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        Vec3::new(0.0, 0.0, strike_vz(t, self.h, self.d, self.n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteamParams {
    /// Lateral velocity jitter per step has standard deviation `jitter * z`.
    pub jitter: f64,
    pub damping_height: f64,
    pub damping: f64,
    pub recycle: bool,
    pub recycle_height: f64,
    pub source_center: Vec3,
    pub source_half_extent: Vec3,
    pub reset_velocity: Vec3,
}

impl Default for SteamParams {
    fn default() -> Self {
        SteamParams {
            jitter: 0.02,
            damping_height: 0.7,
            damping: 0.9,
            recycle: false,
            recycle_height: 0.85,
            source_center: Vec3::new(0.0, 0.0, 0.05),
            source_half_extent: Vec3::new(0.05, 0.05, 0.03),
            reset_velocity: Vec3::zeros(),
        }
    }
}

/// Lateral jitter, then damping of `v_z` above the damping height, then
/// recycling of particles above the recycle height into the source box.
pub fn steam_modifiers<R: Rng + ?Sized>(p: &mut ParticleSet, cfg: &SteamParams, rng: &mut R) {
    for i in 0..p.len() {
        let z = p.positions[i].z;
        let sigma = cfg.jitter * z.max(0.0);
        let (jx, jy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        p.velocities[i].x += sigma * jx;
        p.velocities[i].y += sigma * jy;
        if z > cfg.damping_height {
            p.velocities[i].z *= cfg.damping;
        }
        if cfg.recycle && z > cfg.recycle_height {
            let u = Vec3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
            p.positions[i] = cfg.source_center + cfg.source_half_extent.component_mul(&u);
            p.velocities[i] = cfg.reset_velocity;
            p.deformation_grad[i] = Mat3::identity();
            p.affine_c[i] = Mat3::zeros();
            p.plastic_j[i] = 1.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindImpulse {
    pub amplitude: f64,
    pub period_frames: usize,
    /// Frames per full sway cycle of the impulse sign and size.
    pub period_total: usize,
    pub direction: Vec3,
}

impl WindImpulse {
    pub fn new(amplitude: f64, direction: Vec3) -> Self {
        WindImpulse { amplitude, period_frames: 8, period_total: 64, direction }
    }

    /// Velocity kick for this frame, zero off the impulse frames.
    pub fn kick(&self, frame_index: usize) -> Vec3 {
        if self.period_frames == 0 || frame_index % self.period_frames != 0 {
            return Vec3::zeros();
        }
        let phase = std::f64::consts::TAU * frame_index as f64 / self.period_total.max(1) as f64;
        self.direction * (self.amplitude * phase.sin())
    }
}

/// Adds the frame's wind kick to every non-pinned velocity.
pub fn wind_impulse(velocities: &mut [Vec3], pinned: &[bool], frame_index: usize, wind: &WindImpulse) {
    let k = wind.kick(frame_index);
    if k == Vec3::zeros() {
        return;
    }
    for (v, &pin) in velocities.iter_mut().zip(pinned) {
        if !pin {
            *v += k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::material::MaterialParams;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strike_endpoints() {
        let (z0, h, d, n) = (0.3, 0.1, 0.05, 2.0);
        assert_eq!(strike_z(0.0, z0, h, d, n), z0 + h);
        assert!((strike_z(1.0 / (2.0 * n), z0, h, d, n) - (z0 - d)).abs() < 1e-15);
        assert!((strike_z(1.0 / n, z0, h, d, n) - (z0 + h)).abs() < 1e-15);
    }

    #[test]
    fn vortex_cases() {
        let f = vortex_force(Vec3::new(0.3, 0.0, 0.5), std::f64::consts::FRAC_PI_2, 2.0, 1.0, Vec3::zeros());
        assert!((f - Vec3::new(0.0, 2.0 * (-1.5f64).exp(), 0.0)).norm() < 1e-15);
        let f = vortex_force(Vec3::new(0.0, 0.2, 0.0), 0.7, 3.0, 2.0, Vec3::zeros());
        assert!((f.norm() - 3.0 * (-1.0f64).exp() * (1.4f64).sin().abs()).abs() < 1e-15);
        let at_axis = vortex_force(Vec3::new(1.0, 1.0, 0.0), 0.3, 1.0, 1.0, Vec3::new(1.0, 1.0, 5.0));
        assert!((at_axis - Vec3::new(0.0, (0.3f64).sin(), 0.0)).norm() < 1e-15);
    }

    fn particles(zs: &[f64]) -> ParticleSet {
        let pos: Vec<Vec3> = zs.iter().map(|&z| Vec3::new(0.1, -0.1, z)).collect();
        let mut p = ParticleSet::uniform(&pos, MaterialParams::steam(), 0.01).unwrap();
        for v in &mut p.velocities {
            *v = Vec3::new(0.0, 0.0, 1.0);
        }
        p
    }

    #[test]
    fn steam_rules_fire_at_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SteamParams { recycle: true, ..SteamParams::default() };
        let mut p = particles(&[0.5, 0.8, 0.9, 0.7, 0.85]);
        steam_modifiers(&mut p, &cfg, &mut rng);
        assert_eq!(p.velocities[0].z, 1.0);
        assert_eq!(p.velocities[1].z, 0.9);
        assert_eq!(p.velocities[3].z, 1.0);
        assert_eq!(p.velocities[4].z, 0.9);
        let rel = p.positions[2] - cfg.source_center;
        for a in 0..3 {
            assert!(rel[a].abs() <= cfg.source_half_extent[a]);
        }
        assert_eq!(p.velocities[2], cfg.reset_velocity);
        assert_eq!(p.positions[4].z, 0.85);
    }

    #[test]
    fn steam_jitter_is_lateral_and_height_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = particles(&[0.0]);
        steam_modifiers(&mut p, &SteamParams::default(), &mut rng);
        assert_eq!(p.velocities[0], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn wind_fires_on_period() {
        let w = WindImpulse::new(0.5, Vec3::x());
        let mut v = vec![Vec3::zeros(); 3];
        let pinned = [false, true, false];
        wind_impulse(&mut v, &pinned, 3, &w);
        assert!(v.iter().all(|x| *x == Vec3::zeros()));
        wind_impulse(&mut v, &pinned, 8, &w);
        assert_eq!(v[0], v[2]);
        assert!((v[0].x - 0.5 * std::f64::consts::FRAC_PI_4.sin()).abs() < 1e-15);
        assert_eq!(v[1], Vec3::zeros());
        for f in 0..100 {
            wind_impulse(&mut v, &pinned, f, &w);
        }
        assert_eq!(v[1], Vec3::zeros());
    }

    proptest! {
        #[test]
        fn strike_periodic_and_bounded(t in -5.0f64..5.0, n in 0.1f64..5.0, h in 0.0f64..1.0, d in 0.0f64..1.0) {
            let z = strike_z(t, 0.2, h, d, n);
            prop_assert!(z >= 0.2 - d - 1e-12 && z <= 0.2 + h + 1e-12);
            prop_assert!((strike_z(t + 1.0 / n, 0.2, h, d, n) - z).abs() < 1e-9);
        }

        #[test]
        fn vortex_is_tangent(x in -1.0f64..1.0, y in -1.0f64..1.0, t in 0.0f64..10.0) {
            let f = vortex_force(Vec3::new(x, y, 0.3), t, 1.5, 2.0, Vec3::zeros());
            let r = Vec3::new(x, y, 0.0);
            prop_assert!(f.dot(&r).abs() <= 1e-12 * r.norm().max(1.0));
            prop_assert_eq!(f.z, 0.0);
        }
    }
}
