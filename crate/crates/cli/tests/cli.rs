use std::path::PathBuf;
use std::process::{Command, Output};

fn scene() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/scenes/falling_block.cfg")
}

fn cgflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgflow")).args(args).env_remove("CGFLOW_THREADS").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(out: &str, key: &str) -> f64 {
    let line = out.lines().find(|l| l.split_whitespace().next() == Some(key)).unwrap_or_else(|| panic!("no {key} in {out}"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

fn manifest_hash(out: &str) -> String {
    out.lines().find_map(|l| l.strip_prefix("manifest_sha256 ")).expect("manifest line").to_string()
}

#[test]
fn help_lists_every_flag() {
    for (cmd, flags) in [
        ("simulate", &["--scene", "--seed", "--out", "--set", "--threads"][..]),
        ("orbit", &["--scene", "--seed", "--out", "--set", "--threads"]),
        ("pipeline", &["--scene", "--seed", "--out", "--set", "--threads"]),
        ("verify", &["--threads"]),
    ] {
        let o = cgflow(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
    assert!(stdout(&cgflow(&["--help"])).contains("CGFLOW_THREADS"));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = cgflow(&["simulate", "--scene", s.to_str().unwrap(), "--seed", "1", "--set", "sim.frames=12", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("sim/frame_0011.ppm").exists());
        let text = stdout(&o);
        assert_eq!(value(&text, "mass_initial"), value(&text, "mass_final"));
        hashes.push(std::fs::read(out.join("traj.cgtj")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn config_errors_exit_2() {
    let o = cgflow(&["simulate", "--scene", "/no/such/dir/missing_scene.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing_scene.cfg"));

    let s = scene();
    let o = cgflow(&["orbit", "--scene", s.to_str().unwrap(), "--set", "orbit.elevation_deg=90"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("orbit.elevation_deg"));

    let o = cgflow(&["simulate", "--scene", s.to_str().unwrap(), "--set", "sim.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.bogus"));

    let o = cgflow(&["verify", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oversized_step_exits_3_naming_the_substep() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    let o = cgflow(&["simulate", "--scene", s.to_str().unwrap(), "--set", "sim.dt=0.2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("substep"), "{}", stderr(&o));
}

#[test]
fn verify_sde_passes() {
    let o = cgflow(&["verify", "sde"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("cancellation"));
}

#[test]
fn orbit_reports_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    let o = cgflow(&["orbit", "--scene", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cov = value(&stdout(&o), "coverage");
    assert!((0.95..=1.0).contains(&cov), "{cov}");
    assert!(dir.path().join("cloud.ply").exists());
    assert!(dir.path().join("orbit/frame_0035.ppm").exists());
}

#[test]
fn pipeline_hash_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = cgflow(&["--threads", threads, "pipeline", "--scene", s.to_str().unwrap(), "--set", "sim.frames=10", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("manifest.txt").exists());
        manifest_hash(&stdout(&o))
    };
    let a = run("1", "a");
    let b = run("3", "b");
    assert_eq!(a, b);

    let out = dir.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_cgflow"))
        .args(["pipeline", "--scene", s.to_str().unwrap(), "--set", "sim.frames=10", "--out", out.to_str().unwrap()])
        .env("CGFLOW_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(manifest_hash(&stdout(&o)), a);
}
