//! Material parameters and the tabulated simulation defaults.
//!
//! Liquids are not simulated; the SPH row (kinematic viscosity `5e-3`,
//! particle size `1.3e-2` on a regular lattice) is kept here only as
//! [`SPH_VISCOSITY`] and [`PARTICLE_SPACING`].

use crate::error::{Error, Result};

pub const STEP_DT: f64 = 4e-3;
pub const SUBSTEPS: usize = 10;
pub const PARTICLE_SPACING: f64 = 1.3e-2;
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];
pub const FRICTION: f64 = 0.2;
pub const COUPLING_FRICTION: f64 = 0.3;
pub const RIGID_DENSITY: f64 = 180.0;
pub const JOINT_STIFFNESS: [f64; 9] = [9000.0, 9000.0, 7000.0, 7000.0, 4000.0, 4000.0, 4000.0, 200.0, 200.0];
pub const JOINT_DAMPING: [f64; 9] = [700.0, 700.0, 600.0, 600.0, 350.0, 350.0, 350.0, 15.0, 15.0];
pub const SPH_VISCOSITY: f64 = 5e-3;
pub const PAPER_GRID_RES: usize = 128;
pub const DESK_GRID_RES: usize = 64;
pub const CLOTH_STRETCH_COMPLIANCE: f64 = 1e-7;
pub const CLOTH_BEND_COMPLIANCE: f64 = 1e-5;

/// Snow plasticity: singular values of the elastic deformation gradient are
/// clamped to `[1 - SNOW_COMPRESSION, 1 + SNOW_STRETCH]`, and the Lamé
/// parameters harden by `exp(SNOW_HARDENING (1 - J_p))`.
pub const SNOW_COMPRESSION: f64 = 2.5e-2;
pub const SNOW_STRETCH: f64 = 7.5e-3;
pub const SNOW_HARDENING: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaterialKind {
    Elastic,
    Snow,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialParams {
    pub youngs_e: f64,
    pub poisson_nu: f64,
    pub density_rho: f64,
    pub kind: MaterialKind,
}

impl MaterialParams {
    pub fn new(youngs_e: f64, poisson_nu: f64, density_rho: f64, kind: MaterialKind) -> Result<Self> {
        let m = MaterialParams { youngs_e, poisson_nu, density_rho, kind };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_e > 0.0 && self.youngs_e.is_finite()) {
            return Err(Error::invalid(format!("Young's modulus must be positive, got {}", self.youngs_e)));
        }
        if !(self.poisson_nu >= 0.0 && self.poisson_nu < 0.5) {
            return Err(Error::invalid(format!("Poisson ratio must lie in [0, 0.5), got {}", self.poisson_nu)));
        }
        if !(self.density_rho > 0.0 && self.density_rho.is_finite()) {
            return Err(Error::invalid(format!("density must be positive, got {}", self.density_rho)));
        }
        Ok(())
    }

    /// `E = 8e4`, `nu = 0.32`, `rho = 40`.
    pub fn mpm_default(kind: MaterialKind) -> Self {
        MaterialParams { youngs_e: 8e4, poisson_nu: 0.32, density_rho: 40.0, kind }
    }

    /// Light snow used for the steam plume.
    pub fn steam() -> Self {
        MaterialParams { youngs_e: 1e2, poisson_nu: 0.10, density_rho: 15.0, kind: MaterialKind::Snow }
    }
}

/// `(lambda, mu)` from Young's modulus and Poisson ratio.
pub fn lame_from_material(m: &MaterialParams) -> Result<(f64, f64)> {
    m.validate()?;
    let (e, nu) = (m.youngs_e, m.poisson_nu);
    let mu = e / (2.0 * (1.0 + nu));
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    Ok((lambda, mu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lame_values() {
        let (l, m) = lame_from_material(&MaterialParams::new(10.0, 0.0, 1.0, MaterialKind::Elastic).unwrap()).unwrap();
        assert_eq!((l, m), (0.0, 5.0));
        let (l, m) = lame_from_material(&MaterialParams::mpm_default(MaterialKind::Elastic)).unwrap();
        assert!((m - 30303.0303).abs() < 1e-3);
        assert!((l - 53872.0539).abs() < 1e-3);
        let (l, m) = lame_from_material(&MaterialParams::steam()).unwrap();
        assert!((m - 45.4545).abs() < 1e-3 && (l - 11.3636).abs() < 1e-3);
        assert!(MaterialParams::new(1.0, 0.5, 1.0, MaterialKind::Elastic).is_err());
        let bad = MaterialParams { poisson_nu: 0.6, ..MaterialParams::steam() };
        assert!(lame_from_material(&bad).is_err());
    }
}
