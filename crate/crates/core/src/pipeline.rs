//! The two-stage pipeline on synthetic scenes.
//!
//! Stage 1 lifts the input view to a partial cloud, renders it along an
//! orbit, completes the orbit video with the consistency-guided SDE and
//! unprojects the result. Orbit latents carry a fourth channel holding
//! camera depth (0 off the objects), so completed pixels come with the depth
//! needed to unproject them.
//!
//! Stage 2 fills the objects with particles, simulates, splats the
//! particles over the background plate and refines the video with the SDE.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, StageTag};
use crate::geometry::camera::{orbit_trajectory, CameraIntrinsics, CameraPose, OrbitSpec, Vec3, WORLD_UP};
use crate::geometry::cloud::PointCloud;
use crate::geometry::image::{stack_masks, DepthMap, Image};
use crate::geometry::ransac::{ransac_plane, Plane};
use crate::geometry::render::{render_points, unproject};
use crate::geometry::volume::volumetric_sample;
use crate::latent::{LatentVideo, Shape, VideoMask};
use crate::metrics;
use crate::oracle::{Sample, VelocityOracle};
use crate::physics::{simulate, ParticleSet, PointTrajectories, SimConfig, SimScene};
use crate::scene::{background_image, raycast, visible_surface, Backdrop, ObjectSpec, SceneSpec};
use crate::sde::{run_phi_cf_detailed, PhiCfInputs, SdeTrace, Stage};

/// Condition key of the scene's own input view.
pub const COND_KEY: &str = "input";
/// Depth-channel values at or below this are treated as empty.
pub const DEPTH_THRESHOLD: f64 = 0.1;

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// One `H x W x 4` frame: color plus depth where `fg` is set.
pub fn rgbd_frame(image: &Image, depth: &DepthMap, fg: &[bool]) -> LatentVideo {
    let (w, h) = (image.width(), image.height());
    LatentVideo::from_fn(Shape::new(1, h, w, 4), |_, y, x, c| {
        if c < 3 {
            image.get(x, y)[c]
        } else if fg[y * w + x] {
            depth.get(x, y)
        } else {
            0.0
        }
    })
    .expect("rendered values are finite")
}

/// Color image and depth map of frame `f` of an RGBD latent.
pub fn split_rgbd(z: &LatentVideo, f: usize) -> Result<(Image, DepthMap)> {
    let s = z.shape();
    if s.channels != 4 || f >= s.frames {
        return Err(Error::invalid(format!("cannot take RGBD frame {f} from latent {s}")));
    }
    let image = Image::from_fn(s.width, s.height, |x, y| std::array::from_fn(|c| z.get(f, y, x, c).clamp(0.0, 1.0)));
    let depth = (0..s.height * s.width).map(|i| z.get(f, i / s.width, i % s.width, 3)).collect();
    Ok((image, DepthMap::from_vec(s.width, s.height, depth)?))
}

/// Ground-truth view of the input camera.
#[derive(Clone, Debug)]
pub struct InputView {
    pub image: Image,
    pub depth: DepthMap,
    pub ids: Vec<i32>,
    /// Every pixel with finite depth lifted to world space, ground included.
    pub cloud: PointCloud,
    pub rgbd: LatentVideo,
}

pub fn input_view(scene: &SceneSpec) -> Result<InputView> {
    let v = raycast(scene, &scene.objects, &scene.intrinsics, &scene.pose, Backdrop::Ground);
    let (w, h) = (scene.intrinsics.width, scene.intrinsics.height);
    let fg = VideoMask::new(1, h, w, v.ids.iter().map(|&i| (i >= 0) as u8).collect())?;
    let cloud = unproject(&v.depth, &scene.intrinsics, &scene.pose, &v.image, &fg, Some(&v.ids))?;
    let rgbd = rgbd_frame(&v.image, &v.depth, &v.object_mask());
    Ok(InputView { image: v.image, depth: v.depth, ids: v.ids, cloud, rgbd })
}

pub fn orbit_poses(scene: &SceneSpec) -> Result<Vec<CameraPose>> {
    orbit_trajectory(&scene.orbit)
}

/// Splat render of `cloud` along `poses` over the flat orbit backdrop.
pub fn render_orbit(scene: &SceneSpec, cloud: &PointCloud, poses: &[CameraPose], threads: usize) -> Result<(LatentVideo, VideoMask)> {
    let bg = Image::filled(scene.intrinsics.width, scene.intrinsics.height, scene.orbit_background);
    let frames = par_map(threads, poses, |pose| {
        let r = render_points(cloud, &scene.intrinsics, pose, scene.pipeline.splat_radius_px, &bg)?;
        let fg: Vec<bool> = r.ids.iter().map(|&i| i >= 0).collect();
        Ok((rgbd_frame(&r.frame, &r.depth, &fg), r.mask))
    })?;
    let (videos, masks): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    Ok((LatentVideo::concat_frames(&videos)?, stack_masks(&masks)?))
}

/// Exact RGBD orbit video of the given objects.
pub fn gt_orbit_video(scene: &SceneSpec, objects: &[ObjectSpec], poses: &[CameraPose], threads: usize) -> Result<LatentVideo> {
    let frames = par_map(threads, poses, |pose| {
        let v = raycast(scene, objects, &scene.intrinsics, pose, Backdrop::Flat(scene.orbit_background));
        Ok(rgbd_frame(&v.image, &v.depth, &v.object_mask()))
    })?;
    LatentVideo::concat_frames(&frames)
}

fn jittered_objects(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    let cj = scene.oracle.color_jitter;
    scene
        .objects
        .iter()
        .map(|o| ObjectSpec {
            color: o.color.map(|c| (c + if cj > 0.0 { rng.random_range(-cj..=cj) } else { 0.0 }).clamp(0.0, 1.0)),
            ..o.clone()
        })
        .collect()
}

fn jitter_deg(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (scene.oracle.pose_jitter_deg * z).to_radians()
}

fn build_oracle(scene: &SceneSpec, samples: Vec<LatentVideo>, cond: LatentVideo) -> Result<VelocityOracle> {
    let samples = samples.into_iter().map(|s| Sample::new(s, COND_KEY)).collect();
    let mut oracle = if scene.oracle.bandwidth > 0.0 {
        VelocityOracle::empirical_smoothed(samples, scene.oracle.bandwidth)?
    } else {
        VelocityOracle::empirical(samples)?
    };
    oracle.register_condition(COND_KEY, cond)?;
    Ok(oracle)
}

/// Orbit prior: the exact orbit renders plus jittered variants, keyed by
/// the input view.
pub fn orbit_oracle(scene: &SceneSpec, threads: usize) -> Result<VelocityOracle> {
    let view = input_view(scene)?;
    let poses = orbit_poses(scene)?;
    let mut samples = vec![gt_orbit_video(scene, &scene.objects, &poses, threads)?];
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add(2));
    for _ in 0..scene.oracle.jitter_samples {
        let objects = jittered_objects(scene, &mut rng);
        let spec = OrbitSpec {
            start_azimuth: scene.orbit.start_azimuth + jitter_deg(scene, &mut rng),
            elevation: scene.orbit.elevation + jitter_deg(scene, &mut rng),
            ..scene.orbit
        };
        samples.push(gt_orbit_video(scene, &objects, &orbit_trajectory(&spec)?, threads)?);
    }
    build_oracle(scene, samples, view.rgbd)
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub poses: Vec<CameraPose>,
    pub input_cloud: PointCloud,
    /// Orbit renders of the input-view object points.
    pub orbit_render: LatentVideo,
    pub mask: VideoMask,
    /// Completed orbit video.
    pub orbit_video: LatentVideo,
    /// Input-view cloud plus the unprojected completed orbit.
    pub cloud: PointCloud,
    pub trace: SdeTrace,
    pub z_inv: LatentVideo,
}

fn nearest_label(objects: &PointCloud, p: &Vec3) -> i32 {
    let mut best = (f64::INFINITY, 0);
    for (q, &id) in objects.positions.iter().zip(&objects.object_ids) {
        let d = (q - p).norm_squared();
        if d < best.0 {
            best = (d, id);
        }
    }
    best.1
}

/// Lifts the foreground (depth above threshold) of each RGBD frame,
/// labelling points by their nearest labelled object point.
pub fn unproject_orbit(
    video: &LatentVideo,
    intr: &CameraIntrinsics,
    poses: &[CameraPose],
    labelled: &PointCloud,
) -> Result<PointCloud> {
    if video.shape().frames != poses.len() {
        return Err(Error::invalid(format!("{} poses for {} frames", poses.len(), video.shape().frames)));
    }
    let mut out = PointCloud::default();
    for (f, pose) in poses.iter().enumerate() {
        let (image, depth) = split_rgbd(video, f)?;
        let fg = VideoMask::from_fn(1, intr.height, intr.width, |_, y, x| depth.get(x, y) > DEPTH_THRESHOLD);
        let mut pts = unproject(&depth, intr, pose, &image, &fg, None)?;
        for (p, id) in pts.positions.iter().zip(pts.object_ids.iter_mut()) {
            *id = nearest_label(labelled, p);
        }
        out.extend(&pts);
    }
    Ok(out)
}

pub fn stage1(scene: &SceneSpec, oracle: &VelocityOracle, threads: usize) -> Result<Stage1Output> {
    let view = input_view(scene)?;
    let objects = view.cloud.filter_ids(|i| i > 0);
    if objects.is_empty() {
        return Err(Error::Degenerate("no object is visible in the input view".into()));
    }
    let poses = orbit_poses(scene)?;
    let (orbit_render, mask) = render_orbit(scene, &objects, &poses, threads)?;
    let cfg = scene.stage1.sde_config(Stage::Stage1, scene.seed)?;
    let schedule = scene.schedule(&scene.stage1)?;
    let inputs = PhiCfInputs { input_video: &orbit_render, cond_image: &view.rgbd, bg_image: None, mask: &mask };
    let out = run_phi_cf_detailed(inputs, oracle, &schedule, &cfg)?;
    let mut cloud = view.cloud.clone();
    cloud.extend(&unproject_orbit(&out.output, &scene.intrinsics, &poses, &objects)?);
    Ok(Stage1Output {
        poses,
        input_cloud: view.cloud,
        orbit_render,
        mask,
        orbit_video: out.output,
        cloud,
        trace: out.trace,
        z_inv: out.z_inv,
    })
}

/// Fraction of the orbit-visible ground-truth surface voxels that hold a
/// reconstructed object point.
pub fn orbit_coverage(scene: &SceneSpec, cloud: &PointCloud) -> Result<f64> {
    let gt = visible_surface(scene, &scene.objects, &orbit_poses(scene)?)?;
    metrics::coverage(&cloud.filter_ids(|i| i > 0), &gt, scene.pipeline.coverage_voxel)
}

/// Particles for every object in the cloud and the ground plane fitted to
/// the ground-labelled points.
pub fn build_particles(scene: &SceneSpec, cloud: &PointCloud) -> Result<(ParticleSet, Plane)> {
    let ground = cloud.filter_ids(|i| i == 0);
    if ground.len() < 3 {
        return Err(Error::Degenerate("fewer than 3 ground points to fit a plane".into()));
    }
    let p = &scene.pipeline;
    let (plane, _) = ransac_plane(&ground, p.ransac_iters, p.ransac_thresh, scene.seed)?;
    let mut ids: Vec<i32> = cloud.ids().into_iter().filter(|&i| i > 0).collect();
    ids.sort_unstable();
    let mut particles = ParticleSet::empty();
    for id in ids {
        let spec = scene.object(id).ok_or_else(|| Error::invalid(format!("cloud holds unknown object id {id}")))?;
        let filled = volumetric_sample(&cloud.filter_ids(|i| i == id), p.voxel_size, p.particle_spacing)?;
        particles.add_body(&filled.positions, &filled.colors, &filled.object_ids, spec.material, p.particle_spacing, spec.velocity)?;
    }
    Ok((particles, plane))
}

/// Particles sampled directly from the scene primitives.
pub fn gt_particles(scene: &SceneSpec, objects: &[ObjectSpec]) -> Result<ParticleSet> {
    let s = scene.pipeline.particle_spacing;
    let mut particles = ParticleSet::empty();
    for o in objects {
        let pts = o.lattice(s);
        particles.add_body(&pts, &vec![o.color; pts.len()], &vec![o.id; pts.len()], o.material, s, o.velocity)?;
    }
    Ok(particles)
}

/// Splats frames `1..=L` of a trajectory over `bg`.
pub fn render_trajectory(
    scene: &SceneSpec,
    traj: &PointTrajectories,
    pose: &CameraPose,
    bg: &Image,
    threads: usize,
) -> Result<(LatentVideo, VideoMask)> {
    let frames: Vec<usize> = (1..traj.frames.len()).collect();
    if frames.is_empty() {
        return Err(Error::invalid("trajectory has no simulated frames"));
    }
    let out = par_map(threads, &frames, |&f| {
        let r = render_points(&traj.frame_cloud(f), &scene.intrinsics, pose, scene.pipeline.splat_radius_px, bg)?;
        Ok((r.frame.to_latent(), r.mask))
    })?;
    let (videos, masks): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((LatentVideo::concat_frames(&videos)?, stack_masks(&masks)?))
}

fn sim_config(scene: &SceneSpec, ground: Plane) -> SimConfig {
    SimConfig { ground: Some(ground), ..scene.sim.clone() }
}

/// Simulation prior: splat renders of the ground-truth simulation plus
/// jittered variants, keyed by the input view.
pub fn sim_oracle(scene: &SceneSpec, threads: usize) -> Result<VelocityOracle> {
    let view = input_view(scene)?;
    let cfg = sim_config(scene, scene.ground);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add(3));
    let mut samples = Vec::new();
    for k in 0..=scene.oracle.jitter_samples {
        let (objects, pose) = if k == 0 {
            (scene.objects.clone(), scene.pose)
        } else {
            let objects = jittered_objects(scene, &mut rng);
            let target = scene.pose.center() + scene.pose.optical_axis();
            let yaw = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(WORLD_UP), jitter_deg(scene, &mut rng));
            let eye = target + yaw * (scene.pose.center() - target);
            (objects, CameraPose::look_at(eye, target, WORLD_UP)?)
        };
        let particles = gt_particles(scene, &objects)?;
        let traj = simulate(&SimScene { particles, cloths: vec![] }, &cfg, &scene.drivers, scene.frames)?;
        let bg = raycast(scene, &[], &scene.intrinsics, &pose, Backdrop::Ground).image;
        samples.push(render_trajectory(scene, &traj, &pose, &bg, threads)?.0);
    }
    build_oracle(scene, samples, view.image.to_latent())
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub plane: Plane,
    pub particles: ParticleSet,
    pub trajectories: PointTrajectories,
    /// Splat renders over the background plate.
    pub sim_video: LatentVideo,
    pub mask: VideoMask,
    pub background: Image,
    pub video: LatentVideo,
    pub trace: SdeTrace,
    pub z_noisy: LatentVideo,
    pub z_start: LatentVideo,
}

pub fn stage2(scene: &SceneSpec, cloud: &PointCloud, oracle: &VelocityOracle, threads: usize) -> Result<Stage2Output> {
    if cloud.is_empty() {
        return Err(Error::invalid("stage 2 needs a nonempty cloud"));
    }
    let (particles, plane) = build_particles(scene, cloud)?;
    let trajectories = simulate(&SimScene { particles: particles.clone(), cloths: vec![] }, &sim_config(scene, plane), &scene.drivers, scene.frames)?;
    let background = background_image(scene);
    let (sim_video, mask) = render_trajectory(scene, &trajectories, &scene.pose, &background, threads)?;
    let view = input_view(scene)?;
    let cond = view.image.to_latent();
    let bg = background.to_latent();
    let cfg = scene.stage2.sde_config(Stage::Stage2, scene.seed.wrapping_add(1))?;
    let schedule = scene.schedule(&scene.stage2)?;
    let inputs = PhiCfInputs { input_video: &sim_video, cond_image: &cond, bg_image: Some(&bg), mask: &mask };
    let out = run_phi_cf_detailed(inputs, oracle, &schedule, &cfg)?;
    Ok(Stage2Output {
        plane,
        particles,
        trajectories,
        sim_video,
        mask,
        background,
        video: out.output,
        trace: out.trace,
        z_noisy: out.z_noisy,
        z_start: out.z_start,
    })
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// sha-256 of `manifest.txt`.
    pub manifest_hash: String,
    pub coverage: f64,
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes bytes under `dir`, recording `(relative path, sha-256)`, and
/// closes the run with `manifest.txt`.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    entries: Vec<(String, String)>,
}

impl RunWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunWriter { dir, entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn put_image(&mut self, rel: &str, image: &Image) -> Result<()> {
        let mut buf = Vec::new();
        image.write_ppm(&mut buf).expect("in-memory write");
        self.put(rel, &buf)
    }

    /// One `frame_%04d.ppm` per frame of a 3-channel video.
    pub fn put_rgb_video(&mut self, dir: &str, video: &LatentVideo) -> Result<()> {
        for f in 0..video.shape().frames {
            self.put_image(&format!("{dir}/frame_{f:04}.ppm"), &Image::from_latent_frame(video, f)?)?;
        }
        Ok(())
    }

    pub fn put_trajectories(&mut self, rel: &str, traj: &PointTrajectories) -> Result<()> {
        let mut buf = Vec::new();
        traj.write_to(&mut buf).expect("in-memory write");
        self.put(rel, &buf)
    }

    /// Writes the manifest (config hash, then `hash  path` sorted by path)
    /// and returns its sha-256 with the sorted entries.
    pub fn finish(self, config: &str) -> Result<(String, Vec<(String, String)>)> {
        let mut entries = self.entries;
        entries.sort();
        let mut manifest = format!("config_sha256 {}\n", sha256_hex(config.as_bytes()));
        for (path, hash) in &entries {
            let _ = writeln!(manifest, "{hash}  {path}");
        }
        let path = self.dir.join("manifest.txt");
        fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
        Ok((sha256_hex(manifest.as_bytes()), entries))
    }
}

/// Writes the stage-1 artifacts: orbit frames, orbit mask, cloud and trace.
pub fn write_stage1(w: &mut RunWriter, s1: &Stage1Output) -> Result<()> {
    for f in 0..s1.orbit_video.shape().frames {
        w.put_image(&format!("orbit/frame_{f:04}.ppm"), &split_rgbd(&s1.orbit_video, f)?.0)?;
    }
    w.put("orbit/mask.cgfl", &s1.mask.to_bytes())?;
    w.put("cloud.ply", s1.cloud.to_ply().as_bytes())?;
    w.put("trace_stage1.txt", s1.trace.to_table().as_bytes())
}

/// Runs both stages and writes the run directory.
pub fn end_to_end(scene: &SceneSpec, dir: impl AsRef<Path>, threads: usize) -> Result<RunSummary> {
    let out = |e: Error| e.at_stage(StageTag::Output);
    let mut w = RunWriter::create(dir).map_err(out)?;
    w.put("config.txt", scene.source.as_bytes()).map_err(out)?;

    let s1 = orbit_oracle(scene, threads).and_then(|o| stage1(scene, &o, threads)).map_err(|e| e.at_stage(StageTag::Stage1))?;
    let coverage = orbit_coverage(scene, &s1.cloud).map_err(|e| e.at_stage(StageTag::Stage1))?;
    let s2 = sim_oracle(scene, threads)
        .and_then(|o| stage2(scene, &s1.cloud, &o, threads))
        .map_err(|e| e.at_stage(StageTag::Stage2))?;

    (|| -> Result<()> {
        write_stage1(&mut w, &s1)?;
        w.put_trajectories("traj.cgtj", &s2.trajectories)?;
        w.put_rgb_video("sim", &s2.sim_video)?;
        w.put_rgb_video("final", &s2.video)?;
        w.put("trace_stage2.txt", s2.trace.to_table().as_bytes())
    })()
    .map_err(out)?;

    let dir = w.dir().to_path_buf();
    let (manifest_hash, artifacts) = w.finish(&scene.source).map_err(out)?;
    Ok(RunSummary { dir, manifest_hash, coverage, artifacts })
}
