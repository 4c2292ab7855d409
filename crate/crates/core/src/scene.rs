//! Scene description files and the ground-truth raycaster.
//!
//! A scene file is flat `key = value` text under `[section]` headers.
//! Objects live in `[object.<name>]` sections and drivers in
//! `[driver.<name>]` sections. Every key must be recognised; anything else is
//! a configuration error naming the key.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{TimePoint, TimeSchedule, DEFAULT_T_MIN};
use crate::geometry::camera::{CameraIntrinsics, CameraPose, OrbitSpec, Vec3, WORLD_UP};
use crate::geometry::cloud::PointCloud;
use crate::geometry::image::{DepthMap, Image, Rgb};
use crate::geometry::ransac::Plane;
use crate::physics::{Drivers, ForceField, MaterialKind, MaterialParams, SimConfig, SteamParams, StrikeCollider};
use crate::sde::{SdeConfig, Stage};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

/// Parsed `key = value` file with command-line overrides applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: Vec<Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').map(str::trim).filter(|s| !s.is_empty());
                section = name
                    .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("malformed section header `{line}`")))?
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            cfg.insert(&section, k.trim(), v.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    fn insert(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        if key.is_empty() {
            return Err(Error::config(format!("line {line}"), "empty key"));
        }
        if self.entries.iter().any(|e| e.section == section && e.key == key) {
            return Err(Error::config(qualified(section, key), format!("duplicate key on line {line}")));
        }
        self.entries.push(Entry { section: section.into(), key: key.into(), value: value.into(), line });
        Ok(())
    }

    /// Applies `section.key=value`, replacing any existing value.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) =
            spec.split_once('=').ok_or_else(|| Error::config(spec, "override must look like `section.key=value`"))?;
        let (section, key) =
            path.trim().rsplit_once('.').ok_or_else(|| Error::config(path.trim(), "override key needs a section prefix"))?;
        let value = value.trim();
        match self.entries.iter_mut().find(|e| e.section == section && e.key == key) {
            Some(e) => e.value = value.into(),
            None => self.insert(section, key, value, 0)?,
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.section == section && e.key == key).map(|e| e.value.as_str())
    }

    pub fn sections(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.section) {
                seen.push(e.section.clone());
            }
        }
        seen
    }

    /// Canonical text: sections in first-appearance order, keys in file order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in self.sections() {
            if !s.is_empty() {
                out.push_str(&format!("[{s}]\n"));
            }
            for e in self.entries.iter().filter(|e| e.section == s) {
                out.push_str(&format!("{} = {}\n", e.key, e.value));
            }
            out.push('\n');
        }
        out
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// Tracks which keys were consumed so leftovers can be rejected.
struct Reader<'a> {
    cfg: &'a ConfigFile,
    used: RefCell<BTreeSet<(String, String)>>,
}

impl<'a> Reader<'a> {
    fn new(cfg: &'a ConfigFile) -> Self {
        Reader { cfg, used: RefCell::new(BTreeSet::new()) }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&'a str> {
        let v = self.cfg.get(section, key)?;
        self.used.borrow_mut().insert((section.into(), key.into()));
        Some(v)
    }

    fn opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(qualified(section, key), format!("cannot parse `{v}`"))),
        }
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    fn req<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.opt(section, key)?.ok_or_else(|| Error::config(qualified(section, key), "missing required key"))
    }

    fn floats(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(section, key) else { return Ok(None) };
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| Error::config(qualified(section, key), format!("cannot parse `{v}`"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn vec3_opt(&self, section: &str, key: &str) -> Result<Option<Vec3>> {
        match self.floats(section, key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => Ok(Some(Vec3::new(v[0], v[1], v[2]))),
            Some(_) => Err(Error::config(qualified(section, key), "expected three finite numbers")),
        }
    }

    fn vec3(&self, section: &str, key: &str) -> Result<Vec3> {
        self.vec3_opt(section, key)?.ok_or_else(|| Error::config(qualified(section, key), "missing required key"))
    }

    fn vec3_or(&self, section: &str, key: &str, default: Vec3) -> Result<Vec3> {
        Ok(self.vec3_opt(section, key)?.unwrap_or(default))
    }

    fn color_or(&self, section: &str, key: &str, default: Rgb) -> Result<Rgb> {
        let c = self.vec3_or(section, key, Vec3::from(default))?;
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(qualified(section, key), "color channels must lie in [0, 1]"));
        }
        Ok([c.x, c.y, c.z])
    }

    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for e in &self.cfg.entries {
            if !used.contains(&(e.section.clone(), e.key.clone())) {
                let at = if e.line > 0 { format!(" (line {})", e.line) } else { " (override)".into() };
                return Err(Error::config(qualified(&e.section, &e.key), format!("unknown key{at}")));
            }
        }
        Ok(())
    }
}

fn check(ok: bool, key: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Box { center: Vec3, half_extent: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Primitive {
    /// Nearest hit distance along a unit ray and the outward normal.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 1e-9 { -b - s } else { -b + s };
                (t > 1e-9).then(|| (t, (origin + dir * t - center) / radius))
            }
            Primitive::Box { center, half_extent } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                for a in 0..3 {
                    let (lo, hi) = (center[a] - half_extent[a], center[a] + half_extent[a]);
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t0 <= 1e-9 {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis0] = -dir[axis0].signum();
                Some((t0, n))
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() <= radius,
            Primitive::Box { center, half_extent } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_extent[a]),
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Primitive::Sphere { center, radius } => (center - Vec3::repeat(radius), center + Vec3::repeat(radius)),
            Primitive::Box { center, half_extent } => (center - half_extent, center + half_extent),
        }
    }

    pub fn translated(&self, d: Vec3) -> Primitive {
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere { center: center + d, radius },
            Primitive::Box { center, half_extent } => Primitive::Box { center: center + d, half_extent },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    /// Positive; 0 is reserved for the ground.
    pub id: i32,
    pub parts: Vec<Primitive>,
    pub color: Rgb,
    pub material: MaterialParams,
    pub velocity: Vec3,
}

impl ObjectSpec {
    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.parts.iter().map(Primitive::bounds).fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), (a, b)| (lo.inf(&a), hi.sup(&b)),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.parts.iter().any(|q| q.contains(p))
    }

    /// Cubic lattice of points inside the object at the given spacing.
    pub fn lattice(&self, spacing: f64) -> Vec<Vec3> {
        let (lo, hi) = self.bounds();
        let n = ((hi - lo) / spacing).map(|e| e.floor() as usize + 1);
        let start = (lo + hi) / 2.0 - Vec3::new(n.x as f64 - 1.0, n.y as f64 - 1.0, n.z as f64 - 1.0) * (spacing / 2.0);
        let mut pts = Vec::new();
        for k in 0..n.z {
            for j in 0..n.y {
                for i in 0..n.x {
                    let p = start + Vec3::new(i as f64, j as f64, k as f64) * spacing;
                    if self.contains(&p) {
                        pts.push(p);
                    }
                }
            }
        }
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParams {
    pub tau: f64,
    pub gamma: f64,
    pub n_steps: usize,
    /// Defaults to the cancelling value `(1 - tau) / tau`.
    pub beta: Option<f64>,
}

impl StageParams {
    pub fn sde_config(&self, stage: Stage, seed: u64) -> Result<SdeConfig> {
        let tau = TimePoint::new(self.tau)?;
        match self.beta {
            Some(b) => SdeConfig::with_beta(tau, self.gamma, self.n_steps, b, stage, seed),
            None => SdeConfig::new(tau, self.gamma, self.n_steps, stage, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSpec {
    /// Jittered renders added next to the ground-truth target.
    pub jitter_samples: usize,
    pub pose_jitter_deg: f64,
    pub color_jitter: f64,
    /// Kernel bandwidth of the empirical oracle.
    pub bandwidth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineParams {
    pub splat_radius_px: f64,
    pub particle_spacing: f64,
    pub voxel_size: f64,
    pub coverage_voxel: f64,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
    pub schedule_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub orbit: OrbitSpec,
    pub orbit_background: Rgb,
    pub ground: Plane,
    pub ground_color: Rgb,
    pub checker_size: f64,
    pub sky_color: Rgb,
    pub objects: Vec<ObjectSpec>,
    pub sim: SimConfig,
    pub frames: usize,
    pub drivers: Drivers,
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub oracle: OracleSpec,
    pub pipeline: PipelineParams,
    /// Canonical text of the configuration the scene was built from.
    pub source: String,
}

impl SceneSpec {
    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ConfigFile::parse(&text)?;
        for o in overrides {
            cfg.set_override(o)?;
        }
        Self::from_config(&cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(&ConfigFile::parse(text)?)
    }

    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let r = Reader::new(cfg);
        let name = r.or("scene", "name", "scene".to_string())?;
        let seed = r.or("scene", "seed", 0u64)?;

        let width = r.or("camera", "width", 32usize)?;
        let height = r.or("camera", "height", 32usize)?;
        let hfov = r.or("camera", "hfov_deg", 60.0f64)?;
        check(hfov > 0.0 && hfov < 180.0, "camera.hfov_deg", "must lie in (0, 180)")?;
        let intrinsics = CameraIntrinsics::from_fov(width, height, hfov.to_radians())
            .map_err(|e| Error::config("camera.width", e.to_string()))?;
        let eye = r.vec3("camera", "eye")?;
        let target = r.vec3("camera", "target")?;
        let pose = CameraPose::look_at(eye, target, WORLD_UP).map_err(|e| Error::config("camera.eye", e.to_string()))?;

        let ground_normal = r.vec3_or("ground", "normal", Vec3::z())?;
        let ground_height = r.or("ground", "height", 0.0f64)?;
        let ground = Plane::new(ground_normal, -ground_height).map_err(|e| Error::config("ground.normal", e.to_string()))?;
        let ground_color = r.color_or("ground", "color", [0.45, 0.42, 0.38])?;
        let checker_size = r.or("ground", "checker_size", 0.1f64)?;
        check(checker_size > 0.0, "ground.checker_size", "must be positive")?;
        let sky_color = r.color_or("ground", "sky_color", [0.75, 0.82, 0.9])?;

        let mut objects = Vec::new();
        let mut drivers = Drivers::default();
        for section in cfg.sections() {
            if let Some(obj) = section.strip_prefix("object.") {
                objects.push(parse_object(&r, &section, obj, objects.len() as i32 + 1)?);
            } else if section.starts_with("driver.") {
                parse_driver(&r, &section, &mut drivers)?;
            }
        }
        check(!objects.is_empty(), "object", "scene needs at least one [object.<name>] section")?;
        let mut ids = BTreeSet::new();
        for o in &objects {
            check(ids.insert(o.id), &format!("object.{}.id", o.name), format!("duplicate object id {}", o.id))?;
        }

        let (lo, hi) = objects.iter().map(ObjectSpec::bounds).fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(a, b), (c, d)| (a.inf(&c), b.sup(&d)),
        );
        let center = (lo + hi) / 2.0;
        let k = r.or("orbit", "frames", 36usize)?;
        check(k >= 2, "orbit.frames", "an orbit needs at least 2 frames")?;
        let mut orbit = OrbitSpec::around(r.vec3_or("orbit", "center", center)?, (hi - lo).norm() / 2.0, k);
        if let Some(rad) = r.opt::<f64>("orbit", "radius")? {
            check(rad > 0.0, "orbit.radius", "must be positive")?;
            orbit.radius = rad;
        }
        if let Some(el) = r.opt::<f64>("orbit", "elevation_deg")? {
            check(el.abs() < 90.0, "orbit.elevation_deg", "look-at is degenerate at |elevation| >= 90 degrees")?;
            orbit.elevation = el.to_radians();
        }
        orbit.start_azimuth = r.or("orbit", "start_azimuth_deg", orbit.start_azimuth.to_degrees())?.to_radians();
        let orbit_background = r.color_or("orbit", "background", [0.5, 0.5, 0.5])?;

        let d = SimConfig::default();
        let sim = SimConfig {
            dt: r.or("sim", "dt", d.dt)?,
            substeps: r.or("sim", "substeps", d.substeps)?,
            grid_res: r.or("sim", "grid_res", d.grid_res)?,
            grid_dx: r.or("sim", "grid_dx", d.grid_dx)?,
            grid_origin: r.vec3_or("sim", "grid_origin", d.grid_origin)?,
            gravity: r.vec3_or("sim", "gravity", d.gravity)?,
            ground: Some(ground),
            friction_mu: r.or("sim", "friction", d.friction_mu)?,
            coupling_friction: r.or("sim", "coupling_friction", d.coupling_friction)?,
            cloth_iterations: r.or("sim", "cloth_iterations", d.cloth_iterations)?,
            seed,
        };
        sim.validate()?;
        let frames = r.or("sim", "frames", 48usize)?;
        check(frames >= 1, "sim.frames", "must be at least 1")?;

        let stage = |s: &str, tau: f64, gamma: f64, n: usize| -> Result<StageParams> {
            let p = StageParams {
                tau: r.or(s, "tau", tau)?,
                gamma: r.or(s, "gamma", gamma)?,
                n_steps: r.or(s, "n_steps", n)?,
                beta: r.opt(s, "beta")?,
            };
            p.sde_config(Stage::Stage1, 0).map_err(|e| match e {
                Error::Config { key, message } => Error::config(format!("{s}.{key}"), message),
                e => Error::config(format!("{s}.tau"), e.to_string()),
            })?;
            Ok(p)
        };
        let stage1 = stage("stage1", 0.8, 0.2, 10)?;
        let stage2 = stage("stage2", 0.8, 0.2, 10)?;

        let oracle = OracleSpec {
            jitter_samples: r.or("oracle", "jitter_samples", 3usize)?,
            pose_jitter_deg: r.or("oracle", "pose_jitter_deg", 3.0f64)?,
            color_jitter: r.or("oracle", "color_jitter", 0.05f64)?,
            bandwidth: r.or("oracle", "bandwidth", 0.01f64)?,
        };
        check(oracle.bandwidth >= 0.0, "oracle.bandwidth", "must be non-negative")?;
        check(oracle.pose_jitter_deg >= 0.0 && oracle.color_jitter >= 0.0, "oracle.pose_jitter_deg", "jitter must be non-negative")?;

        let pipeline = PipelineParams {
            splat_radius_px: r.or("pipeline", "splat_radius_px", 0.75f64)?,
            particle_spacing: r.or("pipeline", "particle_spacing", crate::physics::material::PARTICLE_SPACING)?,
            voxel_size: r.or("pipeline", "voxel_size", 0.02f64)?,
            coverage_voxel: r.or("pipeline", "coverage_voxel", 0.025f64)?,
            ransac_iters: r.or("pipeline", "ransac_iters", 200usize)?,
            ransac_thresh: r.or("pipeline", "ransac_thresh", 5e-3f64)?,
            schedule_steps: r.or("pipeline", "schedule_steps", 25usize)?,
        };
        check(pipeline.splat_radius_px >= 0.5, "pipeline.splat_radius_px", "must be at least 0.5")?;
        check(pipeline.particle_spacing > 0.0, "pipeline.particle_spacing", "must be positive")?;
        check(pipeline.voxel_size > 0.0, "pipeline.voxel_size", "must be positive")?;
        check(pipeline.coverage_voxel > 0.0, "pipeline.coverage_voxel", "must be positive")?;
        check(pipeline.ransac_iters >= 1, "pipeline.ransac_iters", "must be at least 1")?;
        check(pipeline.ransac_thresh > 0.0, "pipeline.ransac_thresh", "must be positive")?;
        check(pipeline.schedule_steps >= 1, "pipeline.schedule_steps", "must be at least 1")?;

        r.finish()?;
        Ok(SceneSpec {
            name,
            seed,
            intrinsics,
            pose,
            orbit,
            orbit_background,
            ground,
            ground_color,
            checker_size,
            sky_color,
            objects,
            sim,
            frames,
            drivers,
            stage1,
            stage2,
            oracle,
            pipeline,
            source: cfg.to_text(),
        })
    }

    pub fn schedule(&self, params: &StageParams) -> Result<TimeSchedule> {
        TimeSchedule::uniform(self.pipeline.schedule_steps, DEFAULT_T_MIN, params.tau)
    }

    pub fn object(&self, id: i32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Objects moved by `offsets[i]`, in object order.
    pub fn displaced(&self, offsets: &[Vec3]) -> Vec<ObjectSpec> {
        self.objects
            .iter()
            .zip(offsets)
            .map(|(o, d)| ObjectSpec { parts: o.parts.iter().map(|p| p.translated(*d)).collect(), ..o.clone() })
            .collect()
    }
}

fn parse_object(r: &Reader<'_>, section: &str, name: &str, default_id: i32) -> Result<ObjectSpec> {
    let key = |k: &str| format!("{section}.{k}");
    let id = r.or(section, "id", default_id)?;
    check(id >= 1 && id <= u16::MAX as i32, &key("id"), "object ids must lie in [1, 65535]")?;
    let shape: String = r.req(section, "shape")?;
    let center = r.vec3_opt(section, "center")?;
    let parts = match shape.as_str() {
        "box" => {
            let half_extent = r.vec3(section, "half_extent")?;
            check(half_extent.iter().all(|&h| h > 0.0), &key("half_extent"), "must be positive")?;
            vec![Primitive::Box { center: center.ok_or_else(|| Error::config(key("center"), "missing required key"))?, half_extent }]
        }
        "sphere" => {
            let radius: f64 = r.req(section, "radius")?;
            check(radius > 0.0, &key("radius"), "must be positive")?;
            vec![Primitive::Sphere { center: center.ok_or_else(|| Error::config(key("center"), "missing required key"))?, radius }]
        }
        "composite" => {
            let spec: String = r.req(section, "parts")?;
            let offset = center.unwrap_or_else(Vec3::zeros);
            spec.split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|p| parse_part(p, &key("parts")).map(|q| q.translated(offset)))
                .collect::<Result<Vec<_>>>()?
        }
        other => return Err(Error::config(key("shape"), format!("unknown shape `{other}` (box, sphere, composite)"))),
    };
    check(!parts.is_empty(), &key("parts"), "composite needs at least one part")?;
    let kind = match r.or(section, "material", "elastic".to_string())?.as_str() {
        "elastic" => MaterialKind::Elastic,
        "snow" => MaterialKind::Snow,
        other => return Err(Error::config(key("material"), format!("unknown material `{other}` (elastic, snow)"))),
    };
    let d = MaterialParams::mpm_default(kind);
    let material = MaterialParams::new(
        r.or(section, "youngs_e", d.youngs_e)?,
        r.or(section, "poisson_nu", d.poisson_nu)?,
        r.or(section, "density", d.density_rho)?,
        kind,
    )
    .map_err(|e| Error::config(key("material"), e.to_string()))?;
    Ok(ObjectSpec {
        name: name.to_string(),
        id,
        parts,
        color: r.color_or(section, "color", [0.8, 0.3, 0.2])?,
        material,
        velocity: r.vec3_or(section, "velocity", Vec3::zeros())?,
    })
}

fn parse_part(s: &str, key: &str) -> Result<Primitive> {
    let (kind, nums) = s.trim().split_once(':').ok_or_else(|| Error::config(key, format!("part `{s}` needs `kind: numbers`")))?;
    let v: Vec<f64> = nums
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::config(key, format!("cannot parse `{t}`"))))
        .collect::<Result<_>>()?;
    match (kind.trim(), v.as_slice()) {
        ("box", [cx, cy, cz, hx, hy, hz]) if *hx > 0.0 && *hy > 0.0 && *hz > 0.0 => {
            Ok(Primitive::Box { center: Vec3::new(*cx, *cy, *cz), half_extent: Vec3::new(*hx, *hy, *hz) })
        }
        ("sphere", [cx, cy, cz, rad]) if *rad > 0.0 => Ok(Primitive::Sphere { center: Vec3::new(*cx, *cy, *cz), radius: *rad }),
        _ => Err(Error::config(key, format!("bad part `{s}` (box: cx cy cz hx hy hz or sphere: cx cy cz r)"))),
    }
}

fn parse_driver(r: &Reader<'_>, section: &str, drivers: &mut Drivers) -> Result<()> {
    let key = |k: &str| format!("{section}.{k}");
    let kind: String = r.req(section, "type")?;
    match kind.as_str() {
        "uniform" => drivers.fields.push(ForceField::Uniform(r.vec3(section, "accel")?)),
        "vortex" => {
            let axis = r.vec3_or(section, "axis", Vec3::zeros())?;
            drivers.fields.push(ForceField::Vortex { axis, strength: r.req(section, "strength")?, omega: r.req(section, "omega")? });
        }
        "strike" => {
            let pos = r.vec3(section, "position")?;
            let c = StrikeCollider {
                x: pos.x,
                y: pos.y,
                z0: pos.z,
                h: r.req(section, "lift")?,
                d: r.req(section, "depth")?,
                n: r.req(section, "frequency")?,
                radius: r.req(section, "radius")?,
            };
            check(c.radius > 0.0 && c.n > 0.0, &key("radius"), "radius and frequency must be positive")?;
            drivers.colliders.push(c);
        }
        "steam" => {
            let d = SteamParams::default();
            drivers.steam = Some(SteamParams {
                jitter: r.or(section, "jitter", d.jitter)?,
                damping_height: r.or(section, "damping_height", d.damping_height)?,
                damping: r.or(section, "damping", d.damping)?,
                recycle: r.or(section, "recycle", d.recycle)?,
                recycle_height: r.or(section, "recycle_height", d.recycle_height)?,
                source_center: r.vec3_or(section, "source_center", d.source_center)?,
                source_half_extent: r.vec3_or(section, "source_half_extent", d.source_half_extent)?,
                reset_velocity: r.vec3_or(section, "reset_velocity", d.reset_velocity)?,
            });
        }
        other => return Err(Error::config(key("type"), format!("unknown driver `{other}` (uniform, vortex, strike, steam)"))),
    }
    Ok(())
}

/// What a ray sees when it misses every object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backdrop {
    Flat(Rgb),
    /// Checkered ground plane under a flat sky.
    Ground,
}

/// Exact view of the primitives: flat object colors, camera depth and
/// object ids (0 ground, -1 sky or flat backdrop).
#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub image: Image,
    pub depth: DepthMap,
    pub ids: Vec<i32>,
}

impl GtView {
    pub fn object_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i > 0).collect()
    }
}

pub fn raycast(scene: &SceneSpec, objects: &[ObjectSpec], intr: &CameraIntrinsics, pose: &CameraPose, backdrop: Backdrop) -> GtView {
    let (w, h) = (intr.width, intr.height);
    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut depth = DepthMap::empty(w, h);
    let mut ids = vec![-1; w * h];
    let origin = pose.center();
    for y in 0..h {
        for x in 0..w {
            let ray_cam = intr.ray(x as f64, y as f64);
            let dir = pose.rotation * ray_cam.normalize();
            let mut best: Option<(f64, Rgb, i32)> = None;
            for o in objects {
                for p in &o.parts {
                    if let Some((t, _)) = p.intersect(&origin, &dir) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, o.color, o.id));
                        }
                    }
                }
            }
            if backdrop == Backdrop::Ground {
                let denom = scene.ground.normal.dot(&dir);
                if denom < -1e-12 {
                    let t = -scene.ground.signed_distance(&origin) / denom;
                    if t > 1e-9 && best.is_none_or(|(bt, _, _)| t < bt) {
                        let p = origin + dir * t;
                        let cell = (p.x / scene.checker_size).floor() as i64 + (p.y / scene.checker_size).floor() as i64;
                        let k = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.8 };
                        best = Some((t, scene.ground_color.map(|c| c * k), 0));
                    }
                }
            }
            match best {
                Some((t, c, id)) => {
                    image.set(x, y, c);
                    depth.set(x, y, t * dir.dot(&pose.optical_axis()));
                    ids[y * w + x] = id;
                }
                None => image.set(
                    x,
                    y,
                    match backdrop {
                        Backdrop::Flat(c) => c,
                        Backdrop::Ground => scene.sky_color,
                    },
                ),
            }
        }
    }
    GtView { image, depth, ids }
}

/// Background plate: the ground and sky without any object.
pub fn background_image(scene: &SceneSpec) -> Image {
    raycast(scene, &[], &scene.intrinsics, &scene.pose, Backdrop::Ground).image
}

/// Surface points of the objects seen from the given views.
pub fn visible_surface(scene: &SceneSpec, objects: &[ObjectSpec], poses: &[CameraPose]) -> Result<PointCloud> {
    let mut cloud = PointCloud::default();
    for pose in poses {
        let v = raycast(scene, objects, &scene.intrinsics, pose, Backdrop::Flat(scene.orbit_background));
        for (i, &id) in v.ids.iter().enumerate() {
            if id > 0 {
                let (x, y) = (i % scene.intrinsics.width, i / scene.intrinsics.width);
                let p = pose.to_world(&(scene.intrinsics.ray(x as f64, y as f64) * v.depth.get(x, y)));
                cloud.push(p, v.image.get(x, y), id);
            }
        }
    }
    Ok(cloud)
}

/// Scene files shipped with the crate, by name.
pub fn builtin_scene(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub const BUILTIN: &[(&str, &str)] = &[("falling_block", include_str!("../scenes/falling_block.cfg"))];

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> SceneSpec {
        SceneSpec::parse(builtin_scene("falling_block").unwrap()).unwrap()
    }

    #[test]
    fn golden_scene_parses() {
        let s = golden();
        assert_eq!(s.objects.len(), 1);
        assert_eq!(s.objects[0].id, 1);
        assert_eq!(s.intrinsics.width, 32);
        assert_eq!(s.orbit.n_frames, 36);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let text = builtin_scene("falling_block").unwrap();
        let e = SceneSpec::parse(&format!("{text}\n[sim]\nbogus = 1\n")).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "sim.bogus"), "{e}");
        let e = SceneSpec::parse(&text.replace("substeps = 20", "substeps = ten")).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "sim.substeps"), "{e}");
        let e = SceneSpec::parse(&format!("{text}\n[sim]\ndt = 1\n")).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "sim.dt"), "{e}");
        assert!(ConfigFile::parse("[a\nx = 1").is_err());
        assert!(ConfigFile::parse("[a]\nnovalue").is_err());
    }

    #[test]
    fn overrides_replace_and_validate() {
        let mut cfg = ConfigFile::parse(builtin_scene("falling_block").unwrap()).unwrap();
        cfg.set_override("sim.substeps=20").unwrap();
        cfg.set_override("object.block.color = 0.1 0.2 0.3").unwrap();
        let s = SceneSpec::from_config(&cfg).unwrap();
        assert_eq!(s.sim.substeps, 20);
        assert_eq!(s.objects[0].color, [0.1, 0.2, 0.3]);
        cfg.set_override("orbit.elevation_deg=90").unwrap();
        let e = SceneSpec::from_config(&cfg).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "orbit.elevation_deg"));
        assert!(cfg.set_override("nosection=1").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let strip = |mut c: ConfigFile| {
            c.entries.iter_mut().for_each(|e| e.line = 0);
            c
        };
        let cfg = ConfigFile::parse(builtin_scene("falling_block").unwrap()).unwrap();
        let again = ConfigFile::parse(&cfg.to_text()).unwrap();
        assert_eq!(strip(again), strip(cfg));
    }

    #[test]
    fn primitive_intersections() {
        let b = Primitive::Box { center: Vec3::zeros(), half_extent: Vec3::new(1.0, 2.0, 3.0) };
        let (t, n) = b.intersect(&Vec3::new(-5.0, 0.5, 0.5), &Vec3::x()).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(n, -Vec3::x());
        assert!(b.intersect(&Vec3::new(-5.0, 2.5, 0.0), &Vec3::x()).is_none());
        let s = Primitive::Sphere { center: Vec3::new(0.0, 0.0, 1.0), radius: 0.5 };
        let (t, n) = s.intersect(&Vec3::zeros(), &Vec3::z()).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!((n + Vec3::z()).norm() < 1e-12);
        assert!(s.intersect(&Vec3::zeros(), &-Vec3::z()).is_none());
    }

    #[test]
    fn raycast_depth_matches_geometry() {
        let s = golden();
        let v = raycast(&s, &s.objects, &s.intrinsics, &s.pose, Backdrop::Ground);
        let mut hits = 0;
        for (i, &id) in v.ids.iter().enumerate() {
            let (x, y) = (i % 32, i / 32);
            let p = s.pose.to_world(&(s.intrinsics.ray(x as f64, y as f64) * v.depth.get(x, y)));
            match id {
                0 => assert!(s.ground.signed_distance(&p).abs() < 1e-9),
                1 => {
                    hits += 1;
                    let (lo, hi) = s.objects[0].bounds();
                    assert!((0..3).all(|a| p[a] > lo[a] - 1e-9 && p[a] < hi[a] + 1e-9));
                }
                _ => assert_eq!(v.depth.get(x, y), f64::INFINITY),
            }
        }
        assert!(hits > 10);
    }

    #[test]
    fn lattice_fills_object() {
        let o = ObjectSpec {
            name: "b".into(),
            id: 1,
            parts: vec![Primitive::Box { center: Vec3::zeros(), half_extent: Vec3::repeat(0.05) }],
            color: [1.0; 3],
            material: MaterialParams::mpm_default(MaterialKind::Elastic),
            velocity: Vec3::zeros(),
        };
        assert_eq!(o.lattice(0.0125).len(), 9 * 9 * 9);
    }
}
