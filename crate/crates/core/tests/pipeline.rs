use cgflow::geometry::PointCloud;
use cgflow::latent::{LatentVideo, VideoMask};
use cgflow::metrics::masked_mse;
use cgflow::physics::PointTrajectories;
use cgflow::pipeline::{end_to_end, orbit_oracle, sim_oracle, stage1, stage2};
use cgflow::scene::{builtin_scene, ConfigFile, SceneSpec};

fn golden(overrides: &[&str]) -> SceneSpec {
    let mut cfg = ConfigFile::parse(builtin_scene("falling_block").unwrap()).unwrap();
    for o in overrides {
        cfg.set_override(o).unwrap();
    }
    SceneSpec::from_config(&cfg).unwrap()
}

fn reversed(v: &LatentVideo) -> LatentVideo {
    let n = v.shape().frames;
    LatentVideo::concat_frames(&(0..n).rev().map(|f| v.frame(f)).collect::<Vec<_>>()).unwrap()
}

#[test]
fn refined_video_follows_the_simulation() {
    let s = golden(&[]);
    let s1 = stage1(&s, &orbit_oracle(&s, 2).unwrap(), 2).unwrap();
    let s2 = stage2(&s, &s1.cloud, &sim_oracle(&s, 2).unwrap(), 2).unwrap();
    let m = &s2.mask;
    let own = masked_mse(&s2.video, &s2.sim_video, m).unwrap();
    let shuffled = masked_mse(&s2.video, &reversed(&s2.sim_video), m).unwrap();
    println!("masked mse {own:.4e}, reversed-frame control {shuffled:.4e}");
    assert!(own <= 0.5 * shuffled);
}

#[test]
fn two_frame_orbit_keeps_the_input_cloud() {
    let s = golden(&["orbit.frames=2", "oracle.jitter_samples=1"]);
    let out = stage1(&s, &orbit_oracle(&s, 1).unwrap(), 1).unwrap();
    let n = out.input_cloud.len();
    assert!(n > 0);
    assert_eq!(&out.cloud.positions[..n], &out.input_cloud.positions[..]);
    assert_eq!(&out.cloud.object_ids[..n], &out.input_cloud.object_ids[..]);
}

#[test]
fn static_scene_renders_identical_frames() {
    let s = golden(&["sim.gravity=0 0 0", "sim.frames=6", "orbit.frames=8", "oracle.jitter_samples=1"]);
    let s1 = stage1(&s, &orbit_oracle(&s, 1).unwrap(), 1).unwrap();
    let s2 = stage2(&s, &s1.cloud, &sim_oracle(&s, 1).unwrap(), 1).unwrap();
    let first = s2.sim_video.frame(0);
    for f in 1..s2.sim_video.shape().frames {
        assert_eq!(s2.sim_video.frame(f), first);
    }
    let one = |v: &LatentVideo, f: usize| v.frame(f);
    let mask0 = VideoMask::new(1, s2.mask.height(), s2.mask.width(), s2.mask.frame_slice(0).to_vec()).unwrap();
    let drift = (1..s2.video.shape().frames).map(|f| masked_mse(&one(&s2.video, f), &one(&s2.video, 0), &mask0).unwrap()).fold(0.0, f64::max);
    println!("static scene: largest frame-to-frame masked mse {drift:.4e}");
}

#[test]
fn run_directory_round_trips() {
    let s = golden(&["sim.frames=8", "orbit.frames=8", "oracle.jitter_samples=1"]);
    let dir = tempfile::tempdir().unwrap();
    let run = end_to_end(&s, dir.path(), 2).unwrap();
    let d = &run.dir;
    for f in ["config.txt", "orbit/frame_0007.ppm", "orbit/mask.cgfl", "cloud.ply", "traj.cgtj", "sim/frame_0007.ppm", "final/frame_0007.ppm", "trace_stage1.txt", "trace_stage2.txt", "manifest.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), run.artifacts.len() + 1);

    let cloud = PointCloud::load_ply(d.join("cloud.ply")).unwrap();
    let traj = PointTrajectories::load(d.join("traj.cgtj")).unwrap();
    let mut bytes = Vec::new();
    traj.write_to(&mut bytes).unwrap();
    assert_eq!(bytes, std::fs::read(d.join("traj.cgtj")).unwrap());
    assert_eq!(cloud.to_ply(), std::fs::read_to_string(d.join("cloud.ply")).unwrap());
    let mask = VideoMask::load(d.join("orbit/mask.cgfl")).unwrap();
    assert_eq!(mask.frames(), 8);
}

#[test]
fn corrupt_scene_names_the_key() {
    let text = builtin_scene("falling_block").unwrap().replace("youngs_e = 8e4", "youngs_e = soft");
    let e = SceneSpec::parse(&text).unwrap_err();
    assert!(e.to_string().contains("object.block.youngs_e"), "{e}");
}
