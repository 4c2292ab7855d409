//! XPBD cloth with distance and dihedral bending constraints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::camera::Vec3;
use crate::geometry::image::Rgb;
use crate::physics::drivers::ForceField;
use crate::physics::material::{CLOTH_BEND_COMPLIANCE, CLOTH_STRETCH_COMPLIANCE};
use crate::physics::SimConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
}

/// Hinge across edge `(e0, e1)` with wing vertices `w0` and `w1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BendConstraint {
    pub w0: usize,
    pub w1: usize,
    pub e0: usize,
    pub e1: usize,
    pub rest_angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClothState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub inv_mass: Vec<f64>,
    pub edges: Vec<DistanceConstraint>,
    pub bends: Vec<BendConstraint>,
    pub pinned: Vec<bool>,
    pub anchors: Vec<Vec3>,
    pub stretch_compliance: f64,
    pub bend_compliance: f64,
    pub colors: Vec<Rgb>,
    pub object_ids: Vec<i32>,
}

impl ClothState {
    /// Builds constraints from a triangle mesh: one distance constraint per
    /// unique edge and one bend per interior edge.
    pub fn from_triangles(positions: Vec<Vec3>, triangles: &[[usize; 3]], particle_mass: f64) -> Result<Self> {
        let n = positions.len();
        if !(particle_mass > 0.0) {
            return Err(Error::invalid("cloth particle mass must be positive"));
        }
        let mut wings: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in triangles {
            if t.iter().any(|&i| i >= n) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::invalid(format!("bad cloth triangle {t:?}")));
            }
            for k in 0..3 {
                let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
                wings.entry((a.min(b), a.max(b))).or_default().push(c);
            }
        }
        let mut edges = Vec::new();
        let mut bends = Vec::new();
        for (&(a, b), w) in &wings {
            edges.push(DistanceConstraint { i: a, j: b, rest: (positions[a] - positions[b]).norm() });
            if let [w0, w1] = w[..] {
                let mut bend = BendConstraint { w0, w1, e0: a, e1: b, rest_angle: 0.0 };
                bend.rest_angle = dihedral(&positions, &bend).map(|(th, _)| th).unwrap_or(0.0);
                bends.push(bend);
            }
        }
        let c = ClothState {
            velocities: vec![Vec3::zeros(); n],
            inv_mass: vec![1.0 / particle_mass; n],
            pinned: vec![false; n],
            anchors: positions.clone(),
            positions,
            edges,
            bends,
            stretch_compliance: CLOTH_STRETCH_COMPLIANCE,
            bend_compliance: CLOTH_BEND_COMPLIANCE,
            colors: vec![[0.8; 3]; n],
            object_ids: vec![1; n],
        };
        c.validate()?;
        Ok(c)
    }

    /// Rectangular sheet of `nu x nv` particles spanned by `du` and `dv`
    /// from `origin`, with total mass `mass`.
    pub fn sheet(origin: Vec3, du: Vec3, dv: Vec3, nu: usize, nv: usize, mass: f64) -> Result<Self> {
        if nu < 2 || nv < 2 {
            return Err(Error::invalid("cloth sheet needs at least 2x2 particles"));
        }
        let mut pos = Vec::with_capacity(nu * nv);
        for j in 0..nv {
            for i in 0..nu {
                pos.push(origin + du * i as f64 + dv * j as f64);
            }
        }
        let id = |i: usize, j: usize| j * nu + i;
        let mut tris = Vec::new();
        for j in 0..nv - 1 {
            for i in 0..nu - 1 {
                tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        ClothState::from_triangles(pos, &tris, mass / (nu * nv) as f64)
    }

    /// Pins particle `i` at its current position.
    pub fn pin(&mut self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::invalid(format!("pin index {i} out of range")));
        }
        self.pinned[i] = true;
        self.anchors[i] = self.positions[i];
        self.velocities[i] = Vec3::zeros();
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
        if [self.velocities.len(), self.inv_mass.len(), self.pinned.len(), self.anchors.len(), self.colors.len(), self.object_ids.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::invalid("cloth arrays have inconsistent lengths"));
        }
        for e in &self.edges {
            if e.i >= n || e.j >= n || !(e.rest > 0.0) {
                return Err(Error::invalid(format!("bad cloth edge {e:?}")));
            }
        }
        if self.bends.iter().any(|b| [b.w0, b.w1, b.e0, b.e1].iter().any(|&i| i >= n)) {
            return Err(Error::invalid("bend constraint index out of range"));
        }
        if !(self.stretch_compliance >= 0.0 && self.bend_compliance >= 0.0) {
            return Err(Error::invalid("compliance must be non-negative"));
        }
        Ok(())
    }

    fn w(&self, i: usize) -> f64 {
        if self.pinned[i] {
            0.0
        } else {
            self.inv_mass[i]
        }
    }
}

/// Signed dihedral angle of a hinge and its gradient with respect to
/// `[w0, w1, e0, e1]`. `None` for degenerate triangles.
pub fn dihedral(x: &[Vec3], b: &BendConstraint) -> Option<(f64, [Vec3; 4])> {
    let (x1, x2, x3, x4) = (x[b.w0], x[b.w1], x[b.e0], x[b.e1]);
    let e = x4 - x3;
    let el = e.norm();
    let n1 = (x1 - x3).cross(&(x1 - x4));
    let n2 = (x2 - x4).cross(&(x2 - x3));
    let (l1, l2) = (n1.norm_squared(), n2.norm_squared());
    if el < 1e-12 || l1 < 1e-24 || l2 < 1e-24 {
        return None;
    }
    let (m1, m2) = (n1 / l1.sqrt(), n2 / l2.sqrt());
    let theta = m1.cross(&m2).dot(&(e / el)).atan2(m1.dot(&m2));
    let (a1, a2) = (n1 / l1, n2 / l2);
    let u1 = a1 * el;
    let u2 = a2 * el;
    let u3 = a1 * ((x1 - x4).dot(&e) / el) + a2 * ((x2 - x4).dot(&e) / el);
    let u4 = -(a1 * ((x1 - x3).dot(&e) / el)) - a2 * ((x2 - x3).dot(&e) / el);
    Some((theta, [-u1, -u2, -u3, -u4]))
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// Advances one frame of `cfg.substeps` XPBD substeps.
pub fn pbd_cloth_step(c: &mut ClothState, cfg: &SimConfig, fields: &[ForceField], t: f64) -> Result<()> {
    cfg.validate()?;
    let h = cfg.substep_dt();
    let n = c.len();
    let alpha_s = c.stretch_compliance / (h * h);
    let alpha_b = c.bend_compliance / (h * h);
    let mut lambda_s = vec![0.0; c.edges.len()];
    let mut lambda_b = vec![0.0; c.bends.len()];
    for k in 0..cfg.substeps {
        let tk = t + k as f64 * h;
        let prev = c.positions.clone();
        for i in 0..n {
            if c.pinned[i] {
                continue;
            }
            let mut a = cfg.gravity;
            for f in fields {
                a += f.accel(c.positions[i], tk);
            }
            c.velocities[i] += a * h;
            c.positions[i] += c.velocities[i] * h;
        }
        lambda_s.iter_mut().for_each(|l| *l = 0.0);
        lambda_b.iter_mut().for_each(|l| *l = 0.0);
        for _ in 0..cfg.cloth_iterations {
            for (e, lam) in c.edges.iter().zip(lambda_s.iter_mut()) {
                let (wi, wj) = (c.w(e.i), c.w(e.j));
                let d = c.positions[e.i] - c.positions[e.j];
                let len = d.norm();
                if wi + wj == 0.0 || len < 1e-12 {
                    continue;
                }
                let grad = d / len;
                let dl = (-(len - e.rest) - alpha_s * *lam) / (wi + wj + alpha_s);
                *lam += dl;
                c.positions[e.i] += grad * (wi * dl);
                c.positions[e.j] -= grad * (wj * dl);
            }
            for (b, lam) in c.bends.iter().zip(lambda_b.iter_mut()) {
                let Some((theta, g)) = dihedral(&c.positions, b) else { continue };
                let idx = [b.w0, b.w1, b.e0, b.e1];
                let denom: f64 = idx.iter().zip(&g).map(|(&i, gi)| c.w(i) * gi.norm_squared()).sum();
                if denom == 0.0 {
                    continue;
                }
                let cval = wrap_angle(theta - b.rest_angle);
                let dl = (-cval - alpha_b * *lam) / (denom + alpha_b);
                *lam += dl;
                for (&i, gi) in idx.iter().zip(&g) {
                    let wi = c.w(i);
                    c.positions[i] += gi * (wi * dl);
                }
            }
        }
        if let Some(ground) = &cfg.ground {
            for i in 0..n {
                let s = ground.signed_distance(&c.positions[i]);
                if s < 0.0 && !c.pinned[i] {
                    c.positions[i] -= ground.normal * s;
                }
            }
        }
        for i in 0..n {
            if c.pinned[i] {
                c.positions[i] = c.anchors[i];
                c.velocities[i] = Vec3::zeros();
            } else {
                c.velocities[i] = (c.positions[i] - prev[i]) / h;
            }
            if !c.positions[i].iter().chain(c.velocities[i].iter()).all(|v| v.is_finite()) {
                return Err(Error::SolverNonFinite { substep: k, what: "cloth particle" });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_gravity() -> SimConfig {
        SimConfig { gravity: Vec3::zeros(), ground: None, ..SimConfig::default() }
    }

    #[test]
    fn dihedral_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = BendConstraint { w0: 0, w1: 1, e0: 2, e1: 3, rest_angle: 0.0 };
        for _ in 0..50 {
            let x: Vec<Vec3> = (0..4).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let Some((_, g)) = dihedral(&x, &b) else { continue };
            let h = 1e-6;
            for v in 0..4 {
                for a in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[v][a] += h;
                    xm[v][a] -= h;
                    let fd = wrap_angle(dihedral(&xp, &b).unwrap().0 - dihedral(&xm, &b).unwrap().0) / (2.0 * h);
                    assert!((fd - g[v][a]).abs() < 1e-5 * (1.0 + fd.abs()), "vertex {v} axis {a}: {fd} vs {}", g[v][a]);
                }
            }
        }
    }

    #[test]
    fn flat_and_folded_angles() {
        let x = vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, -1.0, 0.0), Vec3::zeros(), Vec3::x()];
        let b = BendConstraint { w0: 0, w1: 1, e0: 2, e1: 3, rest_angle: 0.0 };
        assert!(dihedral(&x, &b).unwrap().0.abs() < 1e-12);
        let y = vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::zeros(), Vec3::x()];
        assert!((dihedral(&y, &b).unwrap().0.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn stretched_edge_recovers_rest_length() {
        let mut c = ClothState::from_triangles(vec![Vec3::zeros(), Vec3::x() * 0.1, Vec3::y() * 0.1], &[[0, 1, 2]], 0.01).unwrap();
        c.edges.retain(|e| (e.i, e.j) == (0, 1));
        c.positions[1] = Vec3::x() * 0.15;
        let cfg = no_gravity();
        for f in 0..100 {
            pbd_cloth_step(&mut c, &cfg, &[], f as f64 * cfg.dt).unwrap();
        }
        let len = (c.positions[1] - c.positions[0]).norm();
        assert!((len - 0.1).abs() / 0.1 < 1e-3, "length {len}");
    }

    #[test]
    fn rest_sheet_is_fixed_point_and_pins_hold() {
        let mut c = ClothState::sheet(Vec3::new(0.0, 0.0, 0.5), Vec3::x() * 0.05, Vec3::new(0.0, 0.03, 0.04), 6, 5, 0.2).unwrap();
        c.pin(0).unwrap();
        let start = c.clone();
        let cfg = no_gravity();
        for f in 0..50 {
            pbd_cloth_step(&mut c, &cfg, &[], f as f64 * cfg.dt).unwrap();
        }
        for (a, b) in c.positions.iter().zip(&start.positions) {
            assert!((a - b).norm() < 1e-9);
        }
        let mut g = start.clone();
        let cfg = SimConfig::default();
        for f in 0..50 {
            pbd_cloth_step(&mut g, &cfg, &[], f as f64 * cfg.dt).unwrap();
            assert_eq!(g.positions[0], start.positions[0]);
            assert_eq!(g.velocities[0], Vec3::zeros());
        }
        assert!(g.positions[29].z < start.positions[29].z);
    }

    #[test]
    fn bad_topology_rejected() {
        assert!(ClothState::from_triangles(vec![Vec3::zeros(); 2], &[[0, 1, 2]], 1.0).is_err());
        assert!(ClothState::from_triangles(vec![Vec3::zeros(); 3], &[[0, 1, 2]], 1.0).is_err());
    }
}
