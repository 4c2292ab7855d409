//! Explicit MLS-MPM with quadratic B-splines and APIC transfers.
//!
//! Elastic particles use fixed-corotated stress. Snow particles additionally
//! clamp the singular values of their deformation gradient after every
//! update and harden with the accumulated plastic volume change `J_p`.

use nalgebra::Rotation3;

use crate::error::{Error, Result};
use crate::geometry::camera::{Mat3, Vec3};
use crate::geometry::image::Rgb;
use crate::physics::drivers::{ForceField, StrikeCollider};
use crate::physics::material::{
    lame_from_material, MaterialKind, MaterialParams, SNOW_COMPRESSION, SNOW_HARDENING, SNOW_STRETCH,
};
use crate::physics::SimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub deformation_grad: Vec<Mat3>,
    pub affine_c: Vec<Mat3>,
    pub masses: Vec<f64>,
    /// Rest volume per particle.
    pub volumes: Vec<f64>,
    pub material_id: Vec<usize>,
    pub plastic_j: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub object_ids: Vec<i32>,
    pub materials: Vec<MaterialParams>,
}

impl ParticleSet {
    pub fn empty() -> Self {
        ParticleSet {
            positions: vec![],
            velocities: vec![],
            deformation_grad: vec![],
            affine_c: vec![],
            masses: vec![],
            volumes: vec![],
            material_id: vec![],
            plastic_j: vec![],
            colors: vec![],
            object_ids: vec![],
            materials: vec![],
        }
    }

    /// Particles at rest on a lattice of the given spacing, one material.
    pub fn uniform(positions: &[Vec3], material: MaterialParams, spacing: f64) -> Result<Self> {
        let mut p = ParticleSet::empty();
        p.add_body(positions, &vec![[0.8; 3]; positions.len()], &vec![1; positions.len()], material, spacing, Vec3::zeros())?;
        Ok(p)
    }

    /// Appends a body of particles with rest volume `spacing^3` each.
    pub fn add_body(
        &mut self,
        positions: &[Vec3],
        colors: &[Rgb],
        ids: &[i32],
        material: MaterialParams,
        spacing: f64,
        velocity: Vec3,
    ) -> Result<()> {
        material.validate()?;
        if !(spacing > 0.0) || colors.len() != positions.len() || ids.len() != positions.len() {
            return Err(Error::invalid("body needs positive spacing and one color and id per particle"));
        }
        let mid = match self.materials.iter().position(|m| *m == material) {
            Some(i) => i,
            None => {
                self.materials.push(material);
                self.materials.len() - 1
            }
        };
        let vol = spacing.powi(3);
        for (i, p) in positions.iter().enumerate() {
            self.positions.push(*p);
            self.velocities.push(velocity);
            self.deformation_grad.push(Mat3::identity());
            self.affine_c.push(Mat3::zeros());
            self.masses.push(material.density_rho * vol);
            self.volumes.push(vol);
            self.material_id.push(mid);
            self.plastic_j.push(1.0);
            self.colors.push(colors[i]);
            self.object_ids.push(ids[i]);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.velocities.len(),
            self.deformation_grad.len(),
            self.affine_c.len(),
            self.masses.len(),
            self.volumes.len(),
            self.material_id.len(),
            self.plastic_j.len(),
            self.colors.len(),
            self.object_ids.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::invalid("particle arrays have inconsistent lengths"));
        }
        if !self.masses.iter().all(|&m| m > 0.0) || !self.volumes.iter().all(|&v| v > 0.0) {
            return Err(Error::invalid("particle masses and volumes must be positive"));
        }
        if let Some(&m) = self.material_id.iter().find(|&&m| m >= self.materials.len()) {
            return Err(Error::invalid(format!("material id {m} has no material")));
        }
        for (i, f) in self.deformation_grad.iter().enumerate() {
            if self.materials[self.material_id[i]].kind == MaterialKind::Elastic && !(f.determinant() > 0.0) {
                return Err(Error::invalid(format!("particle {i} has an inverted deformation gradient")));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn momentum(&self) -> Vec3 {
        self.masses.iter().zip(&self.velocities).map(|(m, v)| v * *m).sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.masses.iter().zip(&self.velocities).map(|(m, v)| 0.5 * m * v.norm_squared()).sum()
    }
}

/// Nodes within this many cells of the domain edge act as slip walls.
pub const WALL_NODES: usize = 2;

/// Reusable grid storage plus per-particle rotation guesses for the polar
/// decomposition.
#[derive(Clone, Debug, Default)]
pub struct MpmSolver {
    mass: Vec<f64>,
    mom: Vec<Vec3>,
    stamp: Vec<u32>,
    touched: Vec<usize>,
    generation: u32,
    rot_guess: Vec<Rotation3<f64>>,
    substep: usize,
    /// Grid mass after the most recent scatter.
    pub last_grid_mass: f64,
}

fn weights(fx: f64) -> [f64; 3] {
    [0.5 * (1.5 - fx).powi(2), 0.75 - (fx - 1.0).powi(2), 0.5 * (fx - 0.5).powi(2)]
}

impl MpmSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances one frame (`cfg.substeps` substeps of `cfg.dt / cfg.substeps`)
    /// starting at time `t`.
    pub fn step(
        &mut self,
        p: &mut ParticleSet,
        cfg: &SimConfig,
        fields: &[ForceField],
        colliders: &[StrikeCollider],
        t: f64,
    ) -> Result<()> {
        cfg.validate()?;
        let n = cfg.grid_res;
        let cells = n * n * n;
        if self.mass.len() != cells {
            self.mass = vec![0.0; cells];
            self.mom = vec![Vec3::zeros(); cells];
            self.stamp = vec![0; cells];
            self.touched.clear();
            self.generation = 0;
        }
        if self.rot_guess.len() != p.len() {
            self.rot_guess = vec![Rotation3::identity(); p.len()];
        }
        let lame: Vec<(f64, f64)> = p.materials.iter().map(lame_from_material).collect::<Result<_>>()?;
        let h = cfg.dt / cfg.substeps as f64;
        for k in 0..cfg.substeps {
            self.substep(p, cfg, fields, colliders, &lame, t + k as f64 * h, h)?;
            self.substep += 1;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn substep(
        &mut self,
        p: &mut ParticleSet,
        cfg: &SimConfig,
        fields: &[ForceField],
        colliders: &[StrikeCollider],
        lame: &[(f64, f64)],
        t: f64,
        h: f64,
    ) -> Result<()> {
        let (n, dx, origin) = (cfg.grid_res, cfg.grid_dx, cfg.grid_origin);
        let inv_dx = 1.0 / dx;
        let d_inv = 4.0 * inv_dx * inv_dx;
        let substep = self.substep;

        let vmax = p.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !vmax.is_finite() {
            return Err(Error::SolverNonFinite { substep, what: "velocity" });
        }
        if vmax * h >= dx {
            return Err(Error::Cfl { substep, travel: vmax * h, dx });
        }

        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        self.touched.clear();
        let node = |i: usize, j: usize, k: usize| (k * n + j) * n + i;

        let stencil = |x: &Vec3, particle: usize| -> Result<([usize; 3], Vec3)> {
            let g = (x - origin) * inv_dx;
            let base = g.map(|c| (c - 0.5).floor());
            if base.iter().any(|&b| b < 0.0 || b + 2.0 > (n - 1) as f64) {
                return Err(Error::OutOfGrid { particle, substep });
            }
            Ok(([base.x as usize, base.y as usize, base.z as usize], g - base))
        };

        // Particle to grid.
        for pi in 0..p.len() {
            let x = p.positions[pi];
            let (base, fx) = stencil(&x, pi)?;
            let w = [weights(fx.x), weights(fx.y), weights(fx.z)];
            let f = p.deformation_grad[pi];
            let mat = &p.materials[p.material_id[pi]];
            let (mut lambda, mut mu) = lame[p.material_id[pi]];
            if mat.kind == MaterialKind::Snow {
                let e = (SNOW_HARDENING * (1.0 - p.plastic_j[pi])).exp().clamp(0.1, 5.0);
                lambda *= e;
                mu *= e;
            }
            let rot = Rotation3::from_matrix_eps(&f, 1e-12, 64, self.rot_guess[pi]);
            self.rot_guess[pi] = rot;
            let r = *rot.matrix();
            let j = f.determinant();
            let kirchhoff = (f - r) * f.transpose() * (2.0 * mu) + Mat3::identity() * (lambda * j * (j - 1.0));
            let m = p.masses[pi];
            let affine = kirchhoff * (-h * p.volumes[pi] * d_inv) + p.affine_c[pi] * m;
            let mv = p.velocities[pi] * m;
            for (a, wa) in w[0].iter().enumerate() {
                for (b, wb) in w[1].iter().enumerate() {
                    for (c, wc) in w[2].iter().enumerate() {
                        let weight = wa * wb * wc;
                        let dpos = (Vec3::new(a as f64, b as f64, c as f64) - fx) * dx;
                        let id = node(base[0] + a, base[1] + b, base[2] + c);
                        if self.stamp[id] != self.generation {
                            self.stamp[id] = self.generation;
                            self.mass[id] = 0.0;
                            self.mom[id] = Vec3::zeros();
                            self.touched.push(id);
                        }
                        self.mass[id] += weight * m;
                        self.mom[id] += (mv + affine * dpos) * weight;
                    }
                }
            }
        }
        self.last_grid_mass = self.touched.iter().map(|&id| self.mass[id]).sum();

        // Grid update.
        for &id in &self.touched {
            let m = self.mass[id];
            if m <= 0.0 {
                self.mom[id] = Vec3::zeros();
                continue;
            }
            let (i, j, k) = (id % n, (id / n) % n, id / (n * n));
            let xi = origin + Vec3::new(i as f64, j as f64, k as f64) * dx;
            let mut v = self.mom[id] / m;
            let mut acc = cfg.gravity;
            for f in fields {
                acc += f.accel(xi, t);
            }
            v += acc * h;
            for c in colliders {
                let center = c.center(t);
                if (xi - center).norm() < c.radius {
                    let normal = (xi - center).try_normalize(1e-12).unwrap_or(Vec3::z());
                    let vc = c.velocity(t);
                    v = vc + frictional_contact(v - vc, normal, cfg.coupling_friction);
                }
            }
            if let Some(ground) = &cfg.ground {
                if ground.signed_distance(&xi) < 0.5 * dx {
                    v = frictional_contact(v, ground.normal, cfg.friction_mu);
                }
            }
            for (axis, idx) in [i, j, k].into_iter().enumerate() {
                if (idx < WALL_NODES && v[axis] < 0.0) || (idx + WALL_NODES >= n && v[axis] > 0.0) {
                    v[axis] = 0.0;
                }
            }
            self.mom[id] = v;
        }

        // Grid to particle.
        for pi in 0..p.len() {
            let x = p.positions[pi];
            let (base, fx) = stencil(&x, pi)?;
            let w = [weights(fx.x), weights(fx.y), weights(fx.z)];
            let mut v = Vec3::zeros();
            let mut b = Mat3::zeros();
            for (a, wa) in w[0].iter().enumerate() {
                for (bb, wb) in w[1].iter().enumerate() {
                    for (c, wc) in w[2].iter().enumerate() {
                        let weight = wa * wb * wc;
                        let dpos = (Vec3::new(a as f64, bb as f64, c as f64) - fx) * dx;
                        let vi = self.mom[node(base[0] + a, base[1] + bb, base[2] + c)];
                        v += vi * weight;
                        b += vi * dpos.transpose() * weight;
                    }
                }
            }
            let cmat = b * d_inv;
            p.velocities[pi] = v;
            p.affine_c[pi] = cmat;
            p.positions[pi] = x + v * h;
            let mut f = (Mat3::identity() + cmat * h) * p.deformation_grad[pi];
            if p.materials[p.material_id[pi]].kind == MaterialKind::Snow {
                let svd = f.svd(true, true);
                let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
                let mut sig = svd.singular_values;
                let old: f64 = sig.product();
                sig.apply(|s| *s = s.clamp(1.0 - SNOW_COMPRESSION, 1.0 + SNOW_STRETCH));
                p.plastic_j[pi] *= old / sig.product();
                f = u * Mat3::from_diagonal(&sig) * vt;
            } else if !(f.determinant() > 0.0) {
                return Err(Error::SolverNonFinite { substep, what: "inverted deformation gradient" });
            }
            p.deformation_grad[pi] = f;
            if !(p.positions[pi].iter().chain(v.iter()).all(|c| c.is_finite()) && f.iter().all(|c| c.is_finite())) {
                return Err(Error::SolverNonFinite { substep, what: "particle state" });
            }
        }
        Ok(())
    }
}

/// Removes the approaching normal component of `v` and applies Coulomb
/// friction to the tangential part; separating velocities pass unchanged.
fn frictional_contact(v: Vec3, normal: Vec3, mu: f64) -> Vec3 {
    let vn = v.dot(&normal);
    if vn >= 0.0 {
        return v;
    }
    let vt = v - normal * vn;
    let speed = vt.norm();
    if speed <= -mu * vn {
        Vec3::zeros()
    } else {
        vt * (1.0 + mu * vn / speed)
    }
}

/// One frame advance with fresh solver state.
pub fn mpm_step(p: &ParticleSet, cfg: &SimConfig, external: &[ForceField], t: f64) -> Result<ParticleSet> {
    let mut out = p.clone();
    MpmSolver::new().step(&mut out, cfg, external, &[], t)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::material::MaterialParams;

    fn block(center: Vec3, half: f64, spacing: f64) -> Vec<Vec3> {
        let n = (2.0 * half / spacing).round() as i32;
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let o = Vec3::new(i as f64, j as f64, k as f64) * spacing - Vec3::repeat(half - spacing / 2.0);
                    pts.push(center + o);
                }
            }
        }
        pts
    }

    fn free_space() -> SimConfig {
        SimConfig { gravity: Vec3::zeros(), ground: None, ..SimConfig::default() }
    }

    #[test]
    fn rest_state_is_equilibrium() {
        let mut p = ParticleSet::uniform(&block(Vec3::new(0.0, 0.0, 0.3), 0.05, 0.013), MaterialParams::mpm_default(MaterialKind::Elastic), 0.013).unwrap();
        let start = p.clone();
        let mut s = MpmSolver::new();
        for f in 0..100 {
            s.step(&mut p, &free_space(), &[], &[], f as f64 * 4e-3).unwrap();
        }
        for (a, b) in p.positions.iter().zip(&start.positions) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(p.velocities.iter().all(|v| v.norm() < 1e-9));
    }

    #[test]
    fn single_particle_symplectic_free_fall() {
        let cfg = SimConfig { ground: None, substeps: 1, dt: 4e-4, ..SimConfig::default() };
        let p = ParticleSet::uniform(&[Vec3::new(0.01, 0.02, 0.5)], MaterialParams::mpm_default(MaterialKind::Elastic), 0.013).unwrap();
        let out = mpm_step(&p, &cfg, &[], 0.0).unwrap();
        let h = 4e-4;
        assert!((out.velocities[0].z + 9.81 * h).abs() < 1e-12);
        assert!((out.positions[0].z - (0.5 - 9.81 * h * h)).abs() < 1e-12);
    }

    #[test]
    fn two_bodies_conserve_momentum() {
        let mat = MaterialParams::mpm_default(MaterialKind::Elastic);
        let mut p = ParticleSet::empty();
        let a = block(Vec3::new(-0.08, 0.0, 0.3), 0.04, 0.013);
        let b = block(Vec3::new(0.08, 0.01, 0.31), 0.04, 0.013);
        p.add_body(&a, &vec![[1.0, 0.0, 0.0]; a.len()], &vec![1; a.len()], mat, 0.013, Vec3::new(0.5, 0.0, 0.0)).unwrap();
        p.add_body(&b, &vec![[0.0, 0.0, 1.0]; b.len()], &vec![2; b.len()], mat, 0.013, Vec3::new(-0.5, 0.1, 0.0)).unwrap();
        let (m0, p0) = (p.total_mass(), p.momentum());
        let cfg = SimConfig { substeps: 20, ..free_space() };
        let mut s = MpmSolver::new();
        for f in 0..200 {
            s.step(&mut p, &cfg, &[], &[], f as f64 * cfg.dt).unwrap();
            assert!((s.last_grid_mass - m0).abs() <= 1e-9 * m0);
        }
        assert_eq!(p.total_mass(), m0);
        let scale = p.masses.iter().zip(&p.velocities).map(|(m, v)| m * v.norm()).sum::<f64>().max(p0.norm());
        assert!((p.momentum() - p0).norm() <= 1e-6 * scale, "{:?} vs {:?}", p.momentum(), p0);
    }

    #[test]
    fn cfl_and_grid_guards() {
        let mat = MaterialParams::mpm_default(MaterialKind::Elastic);
        let mut p = ParticleSet::uniform(&[Vec3::new(0.0, 0.0, 0.5)], mat, 0.013).unwrap();
        p.velocities[0] = Vec3::new(0.0, 0.0, 100.0);
        assert!(matches!(mpm_step(&p, &free_space(), &[], 0.0), Err(Error::Cfl { substep: 0, .. })));
        let p = ParticleSet::uniform(&[Vec3::new(5.0, 0.0, 0.5)], mat, 0.013).unwrap();
        assert!(matches!(mpm_step(&p, &free_space(), &[], 0.0), Err(Error::OutOfGrid { .. })));
        let mut p = ParticleSet::uniform(&[Vec3::new(0.0, 0.0, 0.5)], mat, 0.013).unwrap();
        p.velocities[0].x = f64::NAN;
        assert!(matches!(mpm_step(&p, &free_space(), &[], 0.0), Err(Error::SolverNonFinite { .. })));
    }

    #[test]
    fn snow_plasticity_clamps_singular_values() {
        let mut p = ParticleSet::uniform(&block(Vec3::new(0.0, 0.0, 0.3), 0.03, 0.013), MaterialParams::mpm_default(MaterialKind::Snow), 0.013).unwrap();
        for (x, v) in p.positions.iter().zip(p.velocities.iter_mut()) {
            *v = Vec3::new(0.0, 0.0, -200.0 * (x.z - 0.3));
        }
        let mut s = MpmSolver::new();
        s.step(&mut p, &free_space(), &[], &[], 0.0).unwrap();
        for f in &p.deformation_grad {
            for sv in f.singular_values().iter() {
                assert!(*sv >= 1.0 - SNOW_COMPRESSION - 1e-9 && *sv <= 1.0 + SNOW_STRETCH + 1e-9, "{sv}");
            }
        }
        assert!(p.plastic_j.iter().any(|&j| (j - 1.0).abs() > 1e-6));
    }
}
