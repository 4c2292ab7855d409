use cgflow::latent::LatentVideo;
use cgflow::sde::cf_sde_step;
use cgflow::verify::{run_suite, Kernels, Suite};
use cgflow::{Result, TimePoint};

fn flipped_cancellation(z: &LatentVideo, v: &LatentVideo, tau: TimePoint, gamma: f64, noise: &LatentVideo) -> Result<LatentVideo> {
    cf_sde_step(z, &v.scale(-1.0), tau, gamma, noise)
}

#[test]
fn sde_suite_passes_on_the_real_kernels() {
    let r = run_suite(Suite::Sde, &Kernels::default()).unwrap();
    assert!(r.passed(), "{}", r.to_table());
}

#[test]
fn sign_flipped_cancellation_is_named() {
    let k = Kernels { cf_step: flipped_cancellation, ..Kernels::default() };
    let r = run_suite(Suite::Sde, &k).unwrap();
    assert!(!r.passed());
    let failed: Vec<&str> = r.rows.iter().filter(|row| row.2 == Some(false)).map(|row| row.0.as_str()).collect();
    assert_eq!(failed, ["cancellation.max_abs_diff"]);
}
