use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cgflow::metrics::Report;
use cgflow::physics::sim::{kinetic_energy_trace, simulate_scene};
use cgflow::physics::SimScene;
use cgflow::pipeline::{self, RunWriter};
use cgflow::scene::{background_image, SceneSpec};
use cgflow::verify::{self, Kernels, Suite};
use cgflow::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Consistency-guided flow sampling on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "cgflow", version)]
struct Cli {
    /// Worker threads for per-frame rendering. Results do not depend on it.
    #[arg(long, global = true, env = "CGFLOW_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the scene's ground-truth objects; writes traj.cgtj and sim/ frames.
    Simulate(RunArgs),
    /// Stage 1: orbit render, completion and unprojection; reports coverage.
    Orbit(RunArgs),
    /// Run a property suite: sde, oracle, mpm, geometry or all.
    Verify {
        suite: String,
    },
    /// Both stages end to end; writes the full run directory.
    Pipeline(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scene config file.
    #[arg(long)]
    scene: PathBuf,

    /// Overrides `scene.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,

    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<SceneSpec, Error> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("scene.seed={seed}"));
        }
        SceneSpec::from_file(&self.scene, &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Orbit(a) => cmd_orbit(a, threads),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Pipeline(a) => cmd_pipeline(a, threads),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn print_report(r: &Report) {
    print!("{}", r.to_table());
}

fn cmd_simulate(a: &RunArgs) -> Result<ExitCode, Error> {
    let scene = a.load()?;
    let particles = pipeline::gt_particles(&scene, &scene.objects)?;
    let masses = particles.masses.clone();
    let (m0, p0) = (particles.total_mass(), particles.momentum());
    let start = Instant::now();
    let (traj, last) = simulate_scene(&SimScene { particles, cloths: vec![] }, &scene.sim, &scene.drivers, scene.frames)?;
    let secs = start.elapsed().as_secs_f64();

    let mut w = RunWriter::create(&a.out)?;
    w.put("config.txt", scene.source.as_bytes())?;
    w.put_trajectories("traj.cgtj", &traj)?;
    let (video, _) = pipeline::render_trajectory(&scene, &traj, &scene.pose, &background_image(&scene), 1)?;
    w.put_rgb_video("sim", &video)?;
    let (hash, _) = w.finish(&scene.source)?;

    let ke = kinetic_energy_trace(&traj, &masses, scene.sim.dt);
    let peak = ke.iter().cloned().fold(0.0, f64::max);
    let lowest = traj.frames.iter().flatten().map(|q| q[2] as f64).fold(f64::INFINITY, f64::min);
    let p1 = last.particles.momentum();
    let mut r = Report::default();
    r.value("particles", last.particles.len() as f64);
    r.value("frames", scene.frames as f64);
    r.value("mass_initial", m0);
    r.value("mass_final", last.particles.total_mass());
    r.value("momentum_initial_norm", p0.norm());
    r.value("momentum_final_norm", p1.norm());
    r.value("kinetic_energy_peak", peak);
    r.value("kinetic_energy_final", ke.last().copied().unwrap_or(0.0));
    r.value("lowest_z", lowest);
    r.value("seconds", secs);
    print_report(&r);
    println!("manifest_sha256 {hash}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_orbit(a: &RunArgs, threads: usize) -> Result<ExitCode, Error> {
    let scene = a.load()?;
    let oracle = pipeline::orbit_oracle(&scene, threads)?;
    let s1 = pipeline::stage1(&scene, &oracle, threads)?;
    let coverage = pipeline::orbit_coverage(&scene, &s1.cloud)?;
    let mut w = RunWriter::create(&a.out)?;
    w.put("config.txt", scene.source.as_bytes())?;
    pipeline::write_stage1(&mut w, &s1)?;
    let (hash, _) = w.finish(&scene.source)?;
    let mut r = Report::default();
    r.value("orbit_frames", s1.poses.len() as f64);
    r.value("input_points", s1.input_cloud.len() as f64);
    r.value("cloud_points", s1.cloud.len() as f64);
    r.value("coverage", coverage);
    print_report(&r);
    println!("manifest_sha256 {hash}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str) -> Result<ExitCode, Error> {
    let suite: Suite = suite.parse()?;
    let r = verify::run_suite(suite, &Kernels::default())?;
    print_report(&r);
    Ok(if r.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY) })
}

fn cmd_pipeline(a: &RunArgs, threads: usize) -> Result<ExitCode, Error> {
    let scene = a.load()?;
    let start = Instant::now();
    let s = pipeline::end_to_end(&scene, &a.out, threads)?;
    let mut r = Report::default();
    r.value("coverage", s.coverage);
    r.value("artifacts", s.artifacts.len() as f64);
    r.value("seconds", start.elapsed().as_secs_f64());
    print_report(&r);
    println!("run_dir {}", display(&s.dir));
    println!("manifest_sha256 {}", s.manifest_hash);
    Ok(ExitCode::SUCCESS)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
