//! Desk-scale physics: MLS-MPM continua, XPBD cloth and analytic drivers.

pub mod cloth;
pub mod drivers;
pub mod material;
pub mod mpm;
pub mod sim;

use crate::error::{Error, Result};
use crate::geometry::camera::Vec3;
use crate::geometry::ransac::Plane;

pub use cloth::{pbd_cloth_step, ClothState};
pub use drivers::{
    steam_modifiers, strike_vz, strike_z, vortex_force, wind_impulse, ForceField, SteamParams, StrikeCollider, WindImpulse,
};
pub use material::{lame_from_material, MaterialKind, MaterialParams};
pub use mpm::{mpm_step, MpmSolver, ParticleSet};
pub use sim::{simulate, Drivers, PointTrajectories, SimScene};

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Frame step in seconds.
    pub dt: f64,
    pub substeps: usize,
    pub grid_res: usize,
    pub grid_dx: f64,
    /// World position of grid node (0, 0, 0).
    pub grid_origin: Vec3,
    pub gravity: Vec3,
    pub ground: Option<Plane>,
    pub friction_mu: f64,
    pub coupling_friction: f64,
    /// XPBD constraint sweeps per substep.
    pub cloth_iterations: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    /// 64 cells of 2.5 cm spanning `[-0.8, 0.8]^2 x [-0.1, 1.5]`, ground at `z = 0`.
    fn default() -> Self {
        let n = material::DESK_GRID_RES;
        let dx = 1.6 / n as f64;
        SimConfig {
            dt: material::STEP_DT,
            substeps: material::SUBSTEPS,
            grid_res: n,
            grid_dx: dx,
            grid_origin: Vec3::new(-0.8, -0.8, -0.1),
            gravity: Vec3::from(material::GRAVITY),
            ground: Some(Plane::ground()),
            friction_mu: material::FRICTION,
            coupling_friction: material::COUPLING_FRICTION,
            cloth_iterations: 20,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("sim.dt", format!("must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::config("sim.substeps", "must be at least 1"));
        }
        if self.grid_res < 2 * mpm::WALL_NODES + 3 {
            return Err(Error::config("sim.grid_res", format!("too small: {}", self.grid_res)));
        }
        if !(self.grid_dx > 0.0 && self.grid_dx.is_finite()) {
            return Err(Error::config("sim.grid_dx", format!("must be positive, got {}", self.grid_dx)));
        }
        if !(self.friction_mu >= 0.0 && self.coupling_friction >= 0.0) {
            return Err(Error::config("sim.friction", "friction coefficients must be non-negative"));
        }
        if !self.gravity.iter().chain(self.grid_origin.iter()).all(|c| c.is_finite()) {
            return Err(Error::config("sim.gravity", "must be finite"));
        }
        Ok(())
    }

    /// Substep length `dt / substeps`.
    pub fn substep_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    /// Upper corner of the grid.
    pub fn grid_max(&self) -> Vec3 {
        self.grid_origin + Vec3::repeat((self.grid_res - 1) as f64 * self.grid_dx)
    }
}
