//! Flow-matching time conventions and the Euler steps everything else is
//! built from.
//!
//! The noising path is `z_t = (1 - t) x + t eps`, so `t = 1` is pure noise and
//! `t -> 0` is data. Velocities point from noise to data, `v = x - eps`, which
//! makes the denoised estimate `x_hat = z_t + t v`. Generation therefore
//! *adds* `(t - t_next) v` while stepping toward smaller `t`.

use crate::error::{Error, Result};
use crate::latent::{LatentVideo, VideoMask};

pub const DEFAULT_T_MIN: f64 = 1e-3;

/// A flow time in `[t_min, 1]`. `t = 0` is excluded because exact oracle
/// velocities carry a `1/t` factor.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub const ONE: TimePoint = TimePoint(1.0);

    pub fn new(t: f64) -> Result<Self> {
        Self::with_floor(t, DEFAULT_T_MIN)
    }

    pub fn with_floor(t: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0) || !(t >= floor && t <= 1.0) {
            return Err(Error::InvalidTime { t, floor });
        }
        Ok(TimePoint(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Velocity source for the flow ODE. `cond = None` asks for the
/// condition-agnostic field.
pub trait VelocityField {
    fn velocity(&self, z: &LatentVideo, t: TimePoint, cond: Option<&LatentVideo>) -> Result<LatentVideo>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn velocity(&self, z: &LatentVideo, t: TimePoint, cond: Option<&LatentVideo>) -> Result<LatentVideo> {
        (**self).velocity(z, t, cond)
    }
}

/// Strictly decreasing times from 1 down to `t_min`, with one node marked as
/// the SDE time `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSchedule {
    steps: Vec<TimePoint>,
    tau_index: usize,
}

impl TimeSchedule {
    pub fn new(steps: Vec<TimePoint>, tau_index: usize) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::invalid("schedule needs at least two times"));
        }
        if steps.windows(2).any(|w| w[1].0 >= w[0].0) {
            return Err(Error::invalid("schedule must be strictly decreasing"));
        }
        if tau_index >= steps.len() {
            return Err(Error::invalid(format!("tau index {tau_index} out of range for {} steps", steps.len())));
        }
        Ok(TimeSchedule { steps, tau_index })
    }

    /// `n_steps` uniformly spaced times on `[t_min, 1]` with `tau` inserted
    /// as an exact node (unless it already coincides with one).
    pub fn uniform(n_steps: usize, t_min: f64, tau: f64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        let tau = TimePoint::with_floor(tau, t_min)?;
        let dt = (1.0 - t_min) / (n_steps - 1) as f64;
        let mut times: Vec<f64> = (0..n_steps).map(|i| 1.0 - i as f64 * dt).collect();
        times[n_steps - 1] = t_min;
        let tau_index = match times.iter().position(|&t| (t - tau.0).abs() <= 1e-12) {
            Some(i) => {
                times[i] = tau.0;
                i
            }
            None => {
                let i = times.iter().position(|&t| t < tau.0).expect("tau >= t_min");
                times.insert(i, tau.0);
                i
            }
        };
        let steps = times.into_iter().map(|t| TimePoint::with_floor(t, t_min)).collect::<Result<_>>()?;
        TimeSchedule::new(steps, tau_index)
    }

    pub fn steps(&self) -> &[TimePoint] {
        &self.steps
    }

    pub fn tau_index(&self) -> usize {
        self.tau_index
    }

    pub fn tau(&self) -> TimePoint {
        self.steps[self.tau_index]
    }

    pub fn t_min(&self) -> TimePoint {
        *self.steps.last().unwrap()
    }

    /// Number of Euler steps between the data end and `tau`.
    pub fn steps_below_tau(&self) -> usize {
        self.steps.len() - 1 - self.tau_index
    }
}

/// `(1 - tau) z + tau eps`
pub fn forward_noise(z: &LatentVideo, tau: TimePoint, eps: &LatentVideo) -> Result<LatentVideo> {
    z.ensure_finite("forward_noise input")?;
    eps.ensure_finite("forward_noise noise")?;
    let t = tau.0;
    z.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

/// One generation step toward data: `z + (t - t_next) v`.
pub fn euler_generate_step(z: &LatentVideo, v: &LatentVideo, t: TimePoint, t_next: TimePoint) -> Result<LatentVideo> {
    if t.0 <= t_next.0 {
        return Err(Error::invalid(format!("generation needs t > t_next, got {} -> {}", t.0, t_next.0)));
    }
    let h = t.0 - t_next.0;
    z.zip_map(v, |a, b| a + h * b)
}

/// One inversion step toward noise: `z - (t_next - t) v`.
pub fn euler_invert_step(z: &LatentVideo, v: &LatentVideo, t: TimePoint, t_next: TimePoint) -> Result<LatentVideo> {
    if t.0 >= t_next.0 {
        return Err(Error::invalid(format!("inversion needs t < t_next, got {} -> {}", t.0, t_next.0)));
    }
    let h = t_next.0 - t.0;
    z.zip_map(v, |a, b| a - h * b)
}

/// Final step from `t` to the data end `t = 0`, i.e. the denoised estimate
/// `z + t v`.
pub fn euler_final_step(z: &LatentVideo, v: &LatentVideo, t: TimePoint) -> Result<LatentVideo> {
    let h = t.0;
    z.zip_map(v, |a, b| a + h * b)
}

/// `m a + (1 - m) b` with the mask broadcast over channels.
pub fn mask_mix(a: &LatentVideo, b: &LatentVideo, m: &VideoMask) -> Result<LatentVideo> {
    a.ensure_same_shape(b)?;
    m.ensure_matches(a.shape())?;
    let c = a.shape().channels;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| if m.at_latent_index(i, c) { x } else { y })
        .collect();
    LatentVideo::new(a.shape(), data)
}

/// Naive Euler inversion from the data end of `schedule` up to `tau`,
/// re-evaluating the conditional velocity at every node.
pub fn invert_to_tau(
    z: &LatentVideo,
    cond: &LatentVideo,
    schedule: &TimeSchedule,
    field: &dyn VelocityField,
) -> Result<LatentVideo> {
    let steps = schedule.steps();
    let mut cur = z.clone();
    for i in (schedule.tau_index() + 1..steps.len()).rev() {
        let (t, t_next) = (steps[i], steps[i - 1]);
        let v = field.velocity(&cur, t, Some(cond))?;
        cur = euler_invert_step(&cur, &v, t, t_next)?;
    }
    Ok(cur)
}

/// Euler generation from `tau` down the schedule, finishing with the jump to
/// `t = 0`.
pub fn generate_from_tau(
    z_tau: &LatentVideo,
    cond: Option<&LatentVideo>,
    schedule: &TimeSchedule,
    field: &dyn VelocityField,
) -> Result<LatentVideo> {
    generate_with_first_velocity(z_tau, cond, schedule, field, None)
}

pub(crate) fn generate_with_first_velocity(
    z_tau: &LatentVideo,
    cond: Option<&LatentVideo>,
    schedule: &TimeSchedule,
    field: &dyn VelocityField,
    mut first: Option<LatentVideo>,
) -> Result<LatentVideo> {
    let steps = schedule.steps();
    let mut cur = z_tau.clone();
    for i in schedule.tau_index()..steps.len() {
        let t = steps[i];
        let v = match first.take() {
            Some(v) => v,
            None => field.velocity(&cur, t, cond)?,
        };
        cur = match steps.get(i + 1) {
            Some(&t_next) => euler_generate_step(&cur, &v, t, t_next)?,
            None => euler_final_step(&cur, &v, t)?,
        };
    }
    Ok(cur)
}
