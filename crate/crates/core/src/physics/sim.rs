//! Frame loop over MPM particles and cloths, plus the trajectory file.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::camera::Vec3;
use crate::geometry::cloud::PointCloud;
use crate::geometry::image::to_u8;
use crate::physics::cloth::{pbd_cloth_step, ClothState};
use crate::physics::drivers::{steam_modifiers, wind_impulse, ForceField, SteamParams, StrikeCollider, WindImpulse};
use crate::physics::mpm::{MpmSolver, ParticleSet};
use crate::physics::SimConfig;

const MAGIC: &[u8; 4] = b"CGTJ";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SimScene {
    pub particles: ParticleSet,
    pub cloths: Vec<ClothState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Drivers {
    pub fields: Vec<ForceField>,
    pub colliders: Vec<StrikeCollider>,
    pub steam: Option<SteamParams>,
    pub wind: Option<WindImpulse>,
}

/// Per-frame positions of every MPM particle followed by every cloth
/// particle, stored at file precision.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrajectories {
    pub frames: Vec<Vec<[f32; 3]>>,
    pub colors: Vec<[u8; 3]>,
    pub object_ids: Vec<u16>,
}

impl PointTrajectories {
    /// Number of frame advances `L`; there are `L + 1` stored frames.
    pub fn n_steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn n_points(&self) -> usize {
        self.colors.len()
    }

    pub fn position(&self, frame: usize, i: usize) -> Vec3 {
        let p = self.frames[frame][i];
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn frame_cloud(&self, frame: usize) -> PointCloud {
        PointCloud {
            positions: (0..self.n_points()).map(|i| self.position(frame, i)).collect(),
            colors: self.colors.iter().map(|c| c.map(|v| v as f64 / 255.0)).collect(),
            object_ids: self.object_ids.iter().map(|&i| i as i32).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.n_steps() as u32, self.n_points() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.n_points() * 17);
        for frame in &self.frames {
            buf.clear();
            for ((p, c), id) in frame.iter().zip(&self.colors).zip(&self.object_ids) {
                for v in p {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(c);
                buf.extend_from_slice(&id.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::format("trajectory", m);
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |k: usize| u32::from_le_bytes(head[4 * k..4 * k + 4].try_into().unwrap());
        if word(1) != VERSION {
            return Err(bad(&format!("unsupported version {}", word(1))));
        }
        let (steps, n) = (word(2) as usize, word(3) as usize);
        let mut frames = Vec::with_capacity(steps + 1);
        let mut colors = Vec::new();
        let mut ids = Vec::new();
        let mut rec = vec![0u8; n * 17];
        for f in 0..=steps {
            r.read_exact(&mut rec).map_err(|_| bad(&format!("truncated at frame {f}")))?;
            let mut pos = Vec::with_capacity(n);
            for (i, chunk) in rec.chunks_exact(17).enumerate() {
                let fl = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
                pos.push([fl(0), fl(1), fl(2)]);
                let c = [chunk[12], chunk[13], chunk[14]];
                let id = u16::from_le_bytes([chunk[15], chunk[16]]);
                if f == 0 {
                    colors.push(c);
                    ids.push(id);
                } else if colors[i] != c || ids[i] != id {
                    return Err(bad(&format!("point {i} changes color or id at frame {f}")));
                }
            }
            frames.push(pos);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(&e.to_string()))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(PointTrajectories { frames, colors, object_ids: ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("in-memory write");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn snapshot(scene: &SimScene) -> Vec<[f32; 3]> {
    let p = &scene.particles;
    p.positions
        .iter()
        .chain(scene.cloths.iter().flat_map(|c| c.positions.iter()))
        .map(|x| [x.x as f32, x.y as f32, x.z as f32])
        .collect()
}

/// Runs `n_frames` frame advances; frame `i` of the result is the state
/// after `i` advances. Also returns the final scene state.
pub fn simulate_scene(scene: &SimScene, cfg: &SimConfig, drivers: &Drivers, n_frames: usize) -> Result<(PointTrajectories, SimScene)> {
    cfg.validate()?;
    scene.particles.validate()?;
    for c in &scene.cloths {
        c.validate()?;
    }
    let mut state = scene.clone();
    let ids: Vec<i32> = state
        .particles
        .object_ids
        .iter()
        .chain(state.cloths.iter().flat_map(|c| c.object_ids.iter()))
        .copied()
        .collect();
    if let Some(bad) = ids.iter().find(|&&i| !(0..=u16::MAX as i32).contains(&i)) {
        return Err(Error::invalid(format!("object id {bad} does not fit the trajectory format")));
    }
    let colors: Vec<[u8; 3]> = state
        .particles
        .colors
        .iter()
        .chain(state.cloths.iter().flat_map(|c| c.colors.iter()))
        .map(|c| c.map(to_u8))
        .collect();
    let mut frames = Vec::with_capacity(n_frames + 1);
    frames.push(snapshot(&state));
    let mut solver = MpmSolver::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for f in 0..n_frames {
        let t = f as f64 * cfg.dt;
        if let Some(steam) = &drivers.steam {
            steam_modifiers(&mut state.particles, steam, &mut rng);
        }
        if !state.particles.is_empty() {
            solver.step(&mut state.particles, cfg, &drivers.fields, &drivers.colliders, t)?;
        }
        for c in &mut state.cloths {
            if let Some(w) = &drivers.wind {
                wind_impulse(&mut c.velocities, &c.pinned, f, w);
            }
            pbd_cloth_step(c, cfg, &drivers.fields, t)?;
        }
        frames.push(snapshot(&state));
    }
    Ok((PointTrajectories { frames, colors, object_ids: ids.iter().map(|&i| i as u16).collect() }, state))
}

pub fn simulate(scene: &SimScene, cfg: &SimConfig, drivers: &Drivers, n_frames: usize) -> Result<PointTrajectories> {
    simulate_scene(scene, cfg, drivers, n_frames).map(|(t, _)| t)
}

/// Kinetic energy per frame from finite differences of stored positions.
pub fn kinetic_energy_trace(traj: &PointTrajectories, masses: &[f64], dt: f64) -> Vec<f64> {
    (1..traj.frames.len())
        .map(|f| {
            masses
                .iter()
                .enumerate()
                .map(|(i, m)| 0.5 * m * ((traj.position(f, i) - traj.position(f - 1, i)) / dt).norm_squared())
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::material::{MaterialKind, MaterialParams};

    fn small_block() -> SimScene {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64) * 0.0125 + Vec3::new(0.0, 0.0, 0.2));
                }
            }
        }
        let mut p = ParticleSet::empty();
        let n = pts.len();
        p.add_body(&pts, &vec![[0.9, 0.2, 0.1]; n], &vec![3; n], MaterialParams::mpm_default(MaterialKind::Elastic), 0.0125, Vec3::zeros())
            .unwrap();
        SimScene { particles: p, cloths: vec![] }
    }

    #[test]
    fn zero_frames_is_initial_state() {
        let s = small_block();
        let t = simulate(&s, &SimConfig::default(), &Drivers::default(), 0).unwrap();
        assert_eq!(t.frames.len(), 1);
        assert_eq!(t.position(0, 5), s.particles.positions[5].map(|v| v as f32 as f64));
    }

    #[test]
    fn identity_preserved_and_file_round_trips() {
        let mut s = small_block();
        let mut cloth = ClothState::sheet(Vec3::new(0.3, 0.0, 0.4), Vec3::x() * 0.02, Vec3::y() * 0.02, 3, 3, 0.01).unwrap();
        cloth.object_ids = vec![7; 9];
        cloth.pin(0).unwrap();
        s.cloths.push(cloth);
        let drivers = Drivers { wind: Some(WindImpulse::new(0.3, Vec3::y())), ..Drivers::default() };
        let t = simulate(&s, &SimConfig::default(), &drivers, 12).unwrap();
        assert_eq!(t.frames.len(), 13);
        assert!(t.frames.iter().all(|f| f.len() == 64 + 9));
        assert_eq!(t.object_ids[0], 3);
        assert_eq!(t.object_ids[64], 7);
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 13 * 73 * 17);
        assert_eq!(PointTrajectories::read_from(&mut bytes.as_slice()).unwrap(), t);
        assert!(PointTrajectories::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let again = simulate(&s, &SimConfig::default(), &drivers, 12).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn block_falls_under_gravity() {
        let t = simulate(&small_block(), &SimConfig::default(), &Drivers::default(), 20).unwrap();
        assert!(t.position(20, 0).z < t.position(0, 0).z - 0.02);
    }
}
