//! The consistency-guided flow SDE and the Langevin machinery behind it.
//!
//! At a fixed flow time `tau` the sampler runs Euler-Maruyama on a Langevin
//! SDE whose drift is the tilted score `beta * grad C + grad log q`. Writing
//! `grad C` as the consistency bias `v_theta - v_eps` and the score of `q`
//! through the denoiser gives
//!
//! ```text
//! z <- (1 - gamma/tau) z + beta gamma v_theta - (beta - (1-tau)/tau) gamma v_eps + sqrt(2 gamma) xi
//! ```
//!
//! and at `beta = (1 - tau) / tau` the `v_eps` term drops out.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{self, TimePoint, TimeSchedule, VelocityField};
use crate::latent::{LatentVideo, VideoMask};

/// Norm above which a Langevin chain is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Keep the inverted latent inside the mask, optimize outside it.
    Stage1,
    /// Optimize inside the mask, keep the background outside it.
    Stage2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeConfig {
    pub tau: TimePoint,
    pub gamma: f64,
    pub n_steps: usize,
    pub beta: f64,
    pub stage: Stage,
    pub seed: u64,
}

impl SdeConfig {
    /// Config with `beta` at its cancelling value.
    pub fn new(tau: TimePoint, gamma: f64, n_steps: usize, stage: Stage, seed: u64) -> Result<Self> {
        let beta = beta_for_tau(tau)?;
        Self::with_beta(tau, gamma, n_steps, beta, stage, seed)
    }

    pub fn with_beta(tau: TimePoint, gamma: f64, n_steps: usize, beta: f64, stage: Stage, seed: u64) -> Result<Self> {
        let cfg = SdeConfig { tau, gamma, n_steps, beta, stage, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < self.tau.value()) {
            return Err(Error::config(
                "gamma",
                format!("step size must satisfy 0 < gamma < tau = {}, got {}", self.tau.value(), self.gamma),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    fn cancels_v_eps(&self) -> bool {
        beta_for_tau(self.tau).is_ok_and(|b| b == self.beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub norm: f64,
    pub proxy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdeTrace {
    pub records: Vec<TraceRecord>,
}

impl SdeTrace {
    pub fn norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.norm).collect()
    }

    /// Whitespace-separated table: iteration, norm, proxy (`-` if absent).
    pub fn to_table(&self) -> String {
        let mut out = String::from("# iteration norm proxy\n");
        for r in &self.records {
            let proxy = r.proxy.map_or("-".to_string(), |p| format!("{p:.9e}"));
            let _ = writeln!(out, "{} {:.9e} {}", r.iteration, r.norm, proxy);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormReport {
    pub max_rel_deviation: f64,
    pub diverging: bool,
}

/// `(1 - tau) / tau`, the step weight at which `v_eps` cancels.
pub fn beta_for_tau(tau: TimePoint) -> Result<f64> {
    let t = tau.value();
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("beta is defined for tau in (0, 1), got {t}")));
    }
    Ok((1.0 - t) / t)
}

/// `v_c = v_theta - v_eps`
pub fn consistency_bias(v_theta: &LatentVideo, v_eps: &LatentVideo) -> Result<LatentVideo> {
    v_theta.sub(v_eps)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("step size must be > 0, got {gamma}")));
    }
    Ok(())
}

pub fn cf_sde_step(
    z: &LatentVideo,
    v_theta: &LatentVideo,
    tau: TimePoint,
    gamma: f64,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    check_gamma(gamma)?;
    z.ensure_same_shape(v_theta)?;
    z.ensure_same_shape(noise)?;
    let t = tau.value();
    let a = 1.0 - gamma / t;
    let b = (1.0 - t) / t * gamma;
    let c = (2.0 * gamma).sqrt();
    let data = z
        .data()
        .iter()
        .zip(v_theta.data())
        .zip(noise.data())
        .map(|((&z, &v), &e)| a * z + b * v + c * e)
        .collect();
    LatentVideo::new(z.shape(), data)
}

#[allow(clippy::too_many_arguments)]
pub fn general_sde_step(
    z: &LatentVideo,
    v_theta: &LatentVideo,
    v_eps: &LatentVideo,
    tau: TimePoint,
    gamma: f64,
    beta: f64,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    check_gamma(gamma)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    z.ensure_same_shape(v_theta)?;
    z.ensure_same_shape(v_eps)?;
    z.ensure_same_shape(noise)?;
    let t = tau.value();
    let a = 1.0 - gamma / t;
    let b = beta * gamma;
    let d = (beta - (1.0 - t) / t) * gamma;
    let c = (2.0 * gamma).sqrt();
    let data = z
        .data()
        .iter()
        .zip(v_theta.data())
        .zip(v_eps.data())
        .zip(noise.data())
        .map(|(((&z, &vt), &ve), &e)| a * z + b * vt - d * ve + c * e)
        .collect();
    LatentVideo::new(z.shape(), data)
}

/// Score of the noisy marginal at `tau` recovered from the
/// condition-agnostic velocity through the denoised estimate `z + tau v_eps`.
pub fn score_from_v_eps(z: &LatentVideo, v_eps: &LatentVideo, tau: TimePoint) -> Result<LatentVideo> {
    let t = tau.value();
    z.zip_map(v_eps, |z, v| -(z - (1.0 - t) * (z + t * v)) / (t * t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltConfig {
    pub beta: f64,
    pub gamma: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// One Euler-Maruyama step of the tilted Langevin SDE with explicit noise.
pub fn langevin_tilt_step(
    z: &LatentVideo,
    mu: &LatentVideo,
    tau: TimePoint,
    grad_c: &LatentVideo,
    beta: f64,
    gamma: f64,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    let score = crate::oracle::analytic_score_q(z, tau, mu)?;
    let c = (2.0 * gamma).sqrt();
    let data = z
        .data()
        .iter()
        .zip(grad_c.data())
        .zip(score.data())
        .zip(noise.data())
        .map(|(((&z, &g), &s), &e)| z + gamma * (beta * g + s) + c * e)
        .collect();
    LatentVideo::new(z.shape(), data)
}

/// Samples `p* ∝ q exp(beta C)` by Langevin dynamics started at the mode of
/// `q`. Returns `n_samples` consecutive post-burn-in states.
pub fn langevin_tilt_sample(
    mu: &LatentVideo,
    tau: TimePoint,
    grad_c: &dyn Fn(&LatentVideo) -> LatentVideo,
    cfg: &TiltConfig,
) -> Result<Vec<LatentVideo>> {
    let t = tau.value();
    check_gamma(cfg.gamma)?;
    if !(cfg.beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {}", cfg.beta)));
    }
    let limit = t * t * f64::min(1.0, 1.0 / cfg.beta);
    if cfg.gamma >= limit {
        return Err(Error::invalid(format!("Langevin step {} must be below tau^2 min(1, 1/beta) = {limit}", cfg.gamma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = mu.scale(1.0 - t);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for step in 0..cfg.burn_in + cfg.n_samples {
        let g = grad_c(&z);
        let noise = LatentVideo::standard_normal(z.shape(), &mut rng);
        z = langevin_tilt_step(&z, mu, tau, &g, cfg.beta, cfg.gamma, &noise)?;
        let norm = z.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Diverged { step, norm });
        }
        if step >= cfg.burn_in {
            out.push(z.clone());
        }
    }
    Ok(out)
}

/// Maximum relative norm deviation from the first record, and whether the
/// chain is running away: non-finite, or ten times its initial norm while
/// still growing over the last five iterations.
pub fn latent_norm_trace(trace: &SdeTrace) -> Result<NormReport> {
    let norms = trace.norms();
    let first = *norms.first().ok_or_else(|| Error::invalid("empty trace"))?;
    if norms.iter().any(|n| !n.is_finite()) {
        return Ok(NormReport { max_rel_deviation: f64::INFINITY, diverging: true });
    }
    let scale = if first > 0.0 { first } else { 1.0 };
    let max_rel_deviation = norms.iter().map(|n| (n - first).abs() / scale).fold(0.0, f64::max);
    let tail = &norms[norms.len().saturating_sub(6)..];
    let growing = tail.len() >= 2 && tail.windows(2).all(|w| w[1] > w[0]);
    let last = *norms.last().unwrap();
    let diverging = growing && last > 10.0 * scale;
    Ok(NormReport { max_rel_deviation, diverging })
}

/// Runs `n` SDE iterations at `tau` without the step-size guard or any
/// masking, recording norms. A non-finite iterate ends the chain early with
/// an infinite norm entry.
#[allow(clippy::too_many_arguments)]
pub fn run_sde_chain(
    z0: &LatentVideo,
    cond: Option<&LatentVideo>,
    field: &dyn VelocityField,
    tau: TimePoint,
    gamma: f64,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<(LatentVideo, SdeTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cancels = beta_for_tau(tau).is_ok_and(|b| b == beta);
    let mut z = z0.clone();
    let mut trace = SdeTrace { records: vec![TraceRecord { iteration: 0, norm: z.norm(), proxy: None }] };
    for i in 1..=n {
        let noise = LatentVideo::standard_normal(z.shape(), &mut rng);
        let v = field.velocity(&z, tau, cond)?;
        let next = if cancels {
            cf_sde_step(&z, &v, tau, gamma, &noise)?
        } else {
            let v_eps = field.velocity(&z, tau, None)?;
            general_sde_step(&z, &v, &v_eps, tau, gamma, beta, &noise)?
        };
        if !next.is_finite() {
            trace.records.push(TraceRecord { iteration: i, norm: f64::INFINITY, proxy: None });
            break;
        }
        z = next;
        trace.records.push(TraceRecord { iteration: i, norm: z.norm(), proxy: None });
    }
    Ok((z, trace))
}

/// Inputs to one consistency-guided SDE run. Videos are latents under the
/// identity codec.
#[derive(Clone, Copy, Debug)]
pub struct PhiCfInputs<'a> {
    pub input_video: &'a LatentVideo,
    pub cond_image: &'a LatentVideo,
    pub bg_image: Option<&'a LatentVideo>,
    pub mask: &'a VideoMask,
}

/// Output of [`run_phi_cf_detailed`] with the intermediate latents at `tau`.
#[derive(Clone, Debug)]
pub struct PhiCfOutput {
    pub output: LatentVideo,
    pub trace: SdeTrace,
    /// Inverted input at `tau`.
    pub z_inv: LatentVideo,
    /// Forward-noised input (stage 1) or background (stage 2) at `tau`.
    pub z_noisy: LatentVideo,
    /// Mask mix of the two, the chain's starting point.
    pub z_start: LatentVideo,
    /// Chain state after the last iteration.
    pub z_star: LatentVideo,
}

pub fn run_phi_cf(
    inputs: PhiCfInputs<'_>,
    field: &dyn VelocityField,
    schedule: &TimeSchedule,
    cfg: &SdeConfig,
) -> Result<(LatentVideo, SdeTrace)> {
    let out = run_phi_cf_detailed(inputs, field, schedule, cfg)?;
    Ok((out.output, out.trace))
}

fn frames_like(x: &LatentVideo, like: &LatentVideo) -> Result<LatentVideo> {
    if x.shape() == like.shape() {
        Ok(x.clone())
    } else if x.shape().frames == 1 {
        let b = x.broadcast_frames(like.shape().frames)?;
        like.ensure_same_shape(&b)?;
        Ok(b)
    } else {
        Err(Error::ShapeMismatch(x.shape(), like.shape()))
    }
}

pub fn run_phi_cf_detailed(
    inputs: PhiCfInputs<'_>,
    field: &dyn VelocityField,
    schedule: &TimeSchedule,
    cfg: &SdeConfig,
) -> Result<PhiCfOutput> {
    cfg.validate()?;
    if schedule.tau() != cfg.tau {
        return Err(Error::config(
            "tau",
            format!("schedule tau {} differs from config tau {}", schedule.tau().value(), cfg.tau.value()),
        ));
    }
    let z = inputs.input_video.clone();
    z.ensure_finite("input video")?;
    inputs.mask.ensure_matches(z.shape())?;
    let z_cond = frames_like(inputs.cond_image, &z)?;
    let base = match (cfg.stage, inputs.bg_image) {
        (Stage::Stage1, _) => z.clone(),
        (Stage::Stage2, Some(bg)) => frames_like(bg, &z)?,
        (Stage::Stage2, None) => return Err(Error::invalid("stage 2 needs a background image")),
    };
    let cond = Some(&z_cond);
    let tau = cfg.tau;
    let mask = inputs.mask;

    let z_inv = flow::invert_to_tau(&z, &z_cond, schedule, field)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = LatentVideo::standard_normal(z.shape(), &mut rng);
    let z_noisy = flow::forward_noise(&base, tau, &eps)?;
    let z_start = flow::mask_mix(&z_inv, &z_noisy, mask)?;

    let cancels = cfg.cancels_v_eps();
    let mut cur = z_start.clone();
    let mut v = field.velocity(&cur, tau, cond)?;
    let proxy = |v: &LatentVideo| -(tau.value() * tau.value()) * v.norm_sq();
    let mut trace = SdeTrace { records: vec![TraceRecord { iteration: 0, norm: cur.norm(), proxy: Some(proxy(&v)) }] };
    for n in 1..=cfg.n_steps {
        let noise = LatentVideo::standard_normal(z.shape(), &mut rng);
        let stepped = if cancels {
            cf_sde_step(&cur, &v, tau, cfg.gamma, &noise)?
        } else {
            let v_eps = field.velocity(&cur, tau, None)?;
            general_sde_step(&cur, &v, &v_eps, tau, cfg.gamma, cfg.beta, &noise)?
        };
        if !stepped.is_finite() {
            return Err(Error::SdeNonFinite { iteration: n });
        }
        cur = match cfg.stage {
            Stage::Stage1 => flow::mask_mix(&cur, &stepped, mask)?,
            Stage::Stage2 => flow::mask_mix(&stepped, &cur, mask)?,
        };
        v = field.velocity(&cur, tau, cond)?;
        trace.records.push(TraceRecord { iteration: n, norm: cur.norm(), proxy: Some(proxy(&v)) });
    }
    let z_star = cur;
    let output = flow::generate_with_first_velocity(&z_star, cond, schedule, field, Some(v))?;
    if !output.is_finite() {
        return Err(Error::NonFinite("generated video"));
    }
    Ok(PhiCfOutput { output, trace, z_inv, z_noisy, z_start, z_star })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::DEFAULT_T_MIN;
    use crate::latent::Shape;
    use crate::oracle::{analytic_score_q, dirac_velocity, Sample, VelocityOracle};
    use proptest::prelude::*;
    use rand::Rng;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    fn scalar(v: f64) -> LatentVideo {
        LatentVideo::new(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    fn vec_latent(v: &[f64]) -> LatentVideo {
        LatentVideo::new(Shape::new(1, 1, v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta_for_tau(tp(0.5)).unwrap(), 1.0);
        assert!((beta_for_tau(tp(0.8)).unwrap() - 0.25).abs() < 1e-15);
        assert!((beta_for_tau(tp(1.0 / 1.0357)).unwrap() - 0.0357).abs() < 1e-4);
        assert!(beta_for_tau(TimePoint::ONE).is_err());
    }

    #[test]
    fn step_arithmetic() {
        let out = cf_sde_step(&vec_latent(&[0.0, 0.0]), &vec_latent(&[0.0, 0.0]), tp(0.8), 0.2, &vec_latent(&[1.0, 0.0]))
            .unwrap();
        assert!((out.data()[0] - 0.4f64.sqrt()).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
        let out =
            general_sde_step(&scalar(1.0), &scalar(3.0), &scalar(1.0), tp(0.5), 0.1, 2.0, &scalar(0.0)).unwrap();
        assert!((out.data()[0] - 1.3).abs() < 1e-12);
        assert!(cf_sde_step(&scalar(1.0), &scalar(1.0), tp(0.5), 0.0, &scalar(0.0)).is_err());
        let tiny = cf_sde_step(&scalar(1.7), &scalar(3.0), tp(0.5), 1e-12, &scalar(0.0)).unwrap();
        assert!((tiny.data()[0] - 1.7).abs() < 1e-10);
    }

    #[test]
    fn small_beta_is_pure_langevin_on_q() {
        let (z, vt, ve, e) = (scalar(0.7), scalar(-2.0), scalar(1.3), scalar(0.4));
        let (tau, gamma) = (tp(0.6), 0.1);
        let got = general_sde_step(&z, &vt, &ve, tau, gamma, 1e-9, &e).unwrap().data()[0];
        let want = (1.0 - gamma / 0.6) * 0.7 + (0.4 / 0.6) * gamma * 1.3 + (2.0 * gamma).sqrt() * 0.4;
        assert!((got - want).abs() <= 1e-6 * want.abs());
    }

    #[test]
    fn score_cases() {
        let tau = tp(0.4);
        let z = vec_latent(&[1.0, -2.0]);
        let s = score_from_v_eps(&z, &LatentVideo::zeros(z.shape()), tau).unwrap();
        assert!(s.max_abs_diff(&z.scale(-1.0 / 0.4)).unwrap() < 1e-12);
        let v = vec_latent(&[0.5, 3.0]);
        let s = score_from_v_eps(&LatentVideo::zeros(v.shape()), &v, tau).unwrap();
        assert!(s.max_abs_diff(&v.scale(0.6 / 0.4)).unwrap() < 1e-12);
    }

    #[test]
    fn consistency_bias_points_to_conditioned_sample() {
        let a = vec_latent(&[2.0, -1.0]);
        let b = vec_latent(&[-1.0, 1.5]);
        let mut o = VelocityOracle::empirical(vec![Sample::new(a.clone(), "a"), Sample::new(b.clone(), "b")]).unwrap();
        o.register_condition("a", a.clone()).unwrap();
        o.register_condition("b", b.clone()).unwrap();
        let (z, t) = (vec_latent(&[0.2, 0.1]), tp(0.6));
        let vt = o.velocity(&z, t, Some(&a)).unwrap();
        let ve = o.velocity(&z, t, None).unwrap();
        let vc = consistency_bias(&vt, &ve).unwrap();
        // Brute-force unconditional mean.
        let w: Vec<f64> = [&a, &b]
            .iter()
            .map(|x| (-(z.distance_sq(&x.scale(0.4)).unwrap()) / (2.0 * 0.36)).exp())
            .collect();
        let mean: Vec<f64> = (0..2).map(|i| (w[0] * a.data()[i] + w[1] * b.data()[i]) / (w[0] + w[1])).collect();
        for i in 0..2 {
            let dir = a.data()[i] - mean[i];
            assert_eq!(vc.data()[i].signum(), dir.signum());
            assert!((vc.data()[i] - dir / 0.6).abs() < 1e-12);
        }
        assert_eq!(consistency_bias(&vt, &vt).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn noiseless_langevin_contracts_to_mode() {
        let mu = vec_latent(&[1.0, -3.0]);
        let tau = tp(0.5);
        let zero = LatentVideo::zeros(mu.shape());
        let mode = mu.scale(0.5);
        let mut z = vec_latent(&[10.0, 10.0]);
        let mut prev = z.sub(&mode).unwrap().norm();
        for _ in 0..20 {
            z = langevin_tilt_step(&z, &mu, tau, &zero, 1.0, 0.1, &zero).unwrap();
            let d = z.sub(&mode).unwrap().norm();
            assert!((d / prev - 0.6).abs() < 1e-9);
            prev = d;
        }
    }

    #[test]
    fn langevin_guards() {
        let mu = scalar(0.0);
        let g = |z: &LatentVideo| LatentVideo::zeros(z.shape());
        let cfg = TiltConfig { beta: 1.0, gamma: 0.3, burn_in: 1, n_samples: 1, seed: 0 };
        assert!(langevin_tilt_sample(&mu, tp(0.5), &g, &cfg).is_err());
        // An expanding C drives the chain away.
        let blow = |z: &LatentVideo| z.scale(1e4);
        let cfg = TiltConfig { beta: 1.0, gamma: 0.2, burn_in: 1000, n_samples: 1, seed: 0 };
        assert!(matches!(langevin_tilt_sample(&mu, tp(0.5), &blow, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn near_zero_beta_samples_q() {
        let tau = tp(0.6);
        let mu = scalar(2.0);
        let g = |z: &LatentVideo| LatentVideo::zeros(z.shape());
        let cfg = TiltConfig { beta: 1e-9, gamma: 0.01, burn_in: 2000, n_samples: 50_000, seed: 1 };
        let s = langevin_tilt_sample(&mu, tau, &g, &cfg).unwrap();
        let xs: Vec<f64> = s.iter().map(|z| z.data()[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((m - 0.8).abs() < 0.05 * 0.8, "{m}");
        assert!((v - 0.36).abs() < 0.05 * 0.36, "{v}");
    }

    #[test]
    fn norm_report_cases() {
        let flat = SdeTrace {
            records: (0..5).map(|i| TraceRecord { iteration: i, norm: 3.0, proxy: None }).collect(),
        };
        let r = latent_norm_trace(&flat).unwrap();
        assert_eq!(r.max_rel_deviation, 0.0);
        assert!(!r.diverging);
        assert!(latent_norm_trace(&SdeTrace::default()).is_err());
    }

    #[test]
    fn chain_stability_at_small_gamma_and_divergence_beyond_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(4, 16, 16, 4);
        let mu = LatentVideo::standard_normal(s, &mut rng);
        let oracle = VelocityOracle::dirac(mu.clone());
        let tau = tp(0.8);
        let beta = beta_for_tau(tau).unwrap();
        let eps = LatentVideo::standard_normal(s, &mut rng);
        let z0 = flow::forward_noise(&mu, tau, &eps).unwrap();
        let (_, trace) = run_sde_chain(&z0, None, &oracle, tau, 0.2, beta, 50, 7).unwrap();
        let r = latent_norm_trace(&trace).unwrap();
        assert!(r.max_rel_deviation <= 0.15, "{r:?}");
        assert!(!r.diverging);
        let (_, trace) = run_sde_chain(&z0, None, &oracle, tau, 2.0, beta, 50, 7).unwrap();
        assert!(latent_norm_trace(&trace).unwrap().diverging);
    }

    fn two_condition_oracle() -> (VelocityOracle, LatentVideo, LatentVideo) {
        let s = Shape::new(2, 2, 2, 1);
        let a = LatentVideo::from_fn(s, |f, y, x, _| if (x + y + f) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let b = a.scale(-1.0);
        let mut o = VelocityOracle::empirical(vec![Sample::new(a.clone(), "a"), Sample::new(b.clone(), "b")]).unwrap();
        o.register_condition("a", a.frame(0)).unwrap();
        o.register_condition("b", b.frame(0)).unwrap();
        (o, a, b)
    }

    #[test]
    fn phi_cf_reconstructs_with_full_mask_and_no_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape::new(2, 4, 4, 3);
        let mu = LatentVideo::standard_normal(s, &mut rng);
        let oracle = VelocityOracle::dirac(mu.clone());
        let schedule = TimeSchedule::uniform(25, DEFAULT_T_MIN, 0.8).unwrap();
        let cfg = SdeConfig::new(tp(0.8), 0.2, 0, Stage::Stage1, 1).unwrap();
        let mask = VideoMask::ones(2, 4, 4);
        let inputs = PhiCfInputs { input_video: &mu, cond_image: &mu.frame(0), bg_image: None, mask: &mask };
        let (out, trace) = run_phi_cf(inputs, &oracle, &schedule, &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert!(out.sub(&mu).unwrap().norm() <= 0.02 * mu.norm());
    }

    #[test]
    fn phi_cf_stage_contracts_and_determinism() {
        let (oracle, a, _) = two_condition_oracle();
        let schedule = TimeSchedule::uniform(25, DEFAULT_T_MIN, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = LatentVideo::standard_normal(a.shape(), &mut rng);
        let bg = LatentVideo::standard_normal(a.shape().with_frames(1), &mut rng);
        let mask = VideoMask::from_fn(2, 2, 2, |_, _, _| rng.random_bool(0.5));
        for stage in [Stage::Stage1, Stage::Stage2] {
            let cfg = SdeConfig::new(tp(0.8), 0.2, 6, stage, 3).unwrap();
            let inputs = PhiCfInputs { input_video: &input, cond_image: &a.frame(0), bg_image: Some(&bg), mask: &mask };
            let r = run_phi_cf_detailed(inputs, &oracle, &schedule, &cfg).unwrap();
            let (keep, reference) = match stage {
                Stage::Stage1 => (mask.clone(), &r.z_inv),
                Stage::Stage2 => (mask.complement(), &r.z_start),
            };
            for (i, (x, y)) in r.z_star.data().iter().zip(reference.data()).enumerate() {
                if keep.data()[i] == 1 {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(r.trace.records.len(), 7);
            let again = run_phi_cf_detailed(inputs, &oracle, &schedule, &cfg).unwrap();
            assert_eq!(again.output, r.output);
        }
    }

    #[test]
    fn stage2_requires_background_and_empty_mask_ignores_input() {
        let (oracle, a, _) = two_condition_oracle();
        let schedule = TimeSchedule::uniform(25, DEFAULT_T_MIN, 0.8).unwrap();
        let cfg = SdeConfig::new(tp(0.8), 0.2, 5, Stage::Stage2, 9).unwrap();
        let mask = VideoMask::zeros(2, 2, 2);
        let inputs = PhiCfInputs { input_video: &a, cond_image: &a.frame(0), bg_image: None, mask: &mask };
        assert!(run_phi_cf(inputs, &oracle, &schedule, &cfg).is_err());
        let bg = a.frame(0).scale(0.3);
        let other = a.scale(-2.0);
        let run = |input: &LatentVideo| {
            let inputs = PhiCfInputs { input_video: input, cond_image: &a.frame(0), bg_image: Some(&bg), mask: &mask };
            run_phi_cf_detailed(inputs, &oracle, &schedule, &cfg).unwrap()
        };
        let (r1, r2) = (run(&a), run(&other));
        assert_eq!(r1.output, r2.output);
        let plain = flow::generate_from_tau(&r1.z_noisy, Some(&a), &schedule, &oracle).unwrap();
        assert_eq!(r1.output, plain);
    }

    #[test]
    fn config_guards() {
        assert!(SdeConfig::new(tp(0.5), 0.5, 1, Stage::Stage1, 0).is_err());
        assert!(SdeConfig::with_beta(tp(0.5), 0.1, 1, 0.0, Stage::Stage1, 0).is_err());
        let cfg = SdeConfig::new(tp(0.5), 0.1, 1, Stage::Stage1, 0).unwrap();
        let schedule = TimeSchedule::uniform(25, DEFAULT_T_MIN, 0.8).unwrap();
        let z = scalar(1.0);
        let mask = VideoMask::ones(1, 1, 1);
        let inputs = PhiCfInputs { input_video: &z, cond_image: &z, bg_image: None, mask: &mask };
        assert!(run_phi_cf(inputs, &VelocityOracle::dirac(z.clone()), &schedule, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn v_eps_cancels(
            z in proptest::collection::vec(-5.0f64..5.0, 4),
            vt in proptest::collection::vec(-5.0f64..5.0, 4),
            ve in proptest::collection::vec(-50.0f64..50.0, 4),
            e in proptest::collection::vec(-3.0f64..3.0, 4),
            tau in 0.1f64..0.95,
        ) {
            let tau = tp(tau);
            let beta = beta_for_tau(tau).unwrap();
            let (z, vt, ve, e) = (vec_latent(&z), vec_latent(&vt), vec_latent(&ve), vec_latent(&e));
            let a = general_sde_step(&z, &vt, &ve, tau, 0.05, beta, &e).unwrap();
            let b = cf_sde_step(&z, &vt, tau, 0.05, &e).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn dirac_score_is_exact(
            z in proptest::collection::vec(-5.0f64..5.0, 3),
            mu in proptest::collection::vec(-5.0f64..5.0, 3),
            tau in 0.01f64..1.0,
        ) {
            let tau = tp(tau);
            let (z, mu) = (vec_latent(&z), vec_latent(&mu));
            let v = dirac_velocity(&z, tau, &mu).unwrap();
            let a = score_from_v_eps(&z, &v, tau).unwrap();
            let b = analytic_score_q(&z, tau, &mu).unwrap();
            let scale = 1.0 / (tau.value() * tau.value());
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10 * scale.max(1.0) * 10.0);
        }
    }
}
