//! Closed-form velocity fields standing in for a trained video model.
//!
//! The empirical oracle is the exact flow-matching marginal velocity of a
//! finite dataset, optionally smoothed by an isotropic Gaussian kernel of
//! width `bandwidth` around each sample. With zero bandwidth the data law is
//! a mixture of diracs and posterior weights are
//! `w_k ∝ prior_k exp(-|z - (1-t) x_k|^2 / (2 t^2))`.
//!
//! Conditioning works through the prior: each sample carries a condition key,
//! and a condition latent selects samples by the key of the nearest
//! registered condition image. Evaluating without a condition uses a uniform
//! prior over the whole dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{TimePoint, VelocityField, DEFAULT_T_MIN};
use crate::latent::LatentVideo;

#[derive(Clone, Debug)]
pub struct Sample {
    pub latent: LatentVideo,
    pub key: String,
}

impl Sample {
    pub fn new(latent: LatentVideo, key: impl Into<String>) -> Self {
        Sample { latent, key: key.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionWeighting {
    /// `prior_k = 1` when the sample key matches the condition, else 0.
    Hard,
    /// `prior_k ∝ exp(-|c - c_k|^2 / (2 bandwidth^2))` where `c_k` is the
    /// registered condition image for the sample's key.
    Soft { bandwidth: f64 },
}

#[derive(Clone, Debug)]
pub enum OracleMode {
    Empirical { dataset: Vec<Sample>, bandwidth: f64 },
    Dirac { mu: LatentVideo },
    Gaussian { mu: LatentVideo, s: f64 },
}

#[derive(Clone, Debug)]
pub struct VelocityOracle {
    mode: OracleMode,
    weighting: ConditionWeighting,
    conditions: BTreeMap<String, LatentVideo>,
    t_min: f64,
}

impl VelocityOracle {
    pub fn empirical(dataset: Vec<Sample>) -> Result<Self> {
        Self::empirical_smoothed(dataset, 0.0)
    }

    pub fn empirical_smoothed(dataset: Vec<Sample>, bandwidth: f64) -> Result<Self> {
        let first = dataset.first().ok_or(Error::EmptyDataset)?;
        for s in &dataset {
            first.latent.ensure_same_shape(&s.latent)?;
        }
        if !(bandwidth >= 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("kernel bandwidth must be >= 0, got {bandwidth}")));
        }
        Ok(VelocityOracle {
            mode: OracleMode::Empirical { dataset, bandwidth },
            weighting: ConditionWeighting::Hard,
            conditions: BTreeMap::new(),
            t_min: DEFAULT_T_MIN,
        })
    }

    pub fn dirac(mu: LatentVideo) -> Self {
        VelocityOracle {
            mode: OracleMode::Dirac { mu },
            weighting: ConditionWeighting::Hard,
            conditions: BTreeMap::new(),
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn gaussian(mu: LatentVideo, s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("data std must be >= 0, got {s}")));
        }
        Ok(VelocityOracle {
            mode: OracleMode::Gaussian { mu, s },
            weighting: ConditionWeighting::Hard,
            conditions: BTreeMap::new(),
            t_min: DEFAULT_T_MIN,
        })
    }

    pub fn with_weighting(mut self, weighting: ConditionWeighting) -> Result<Self> {
        if let ConditionWeighting::Soft { bandwidth } = weighting {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::invalid(format!("soft weighting bandwidth must be > 0, got {bandwidth}")));
            }
        }
        self.weighting = weighting;
        Ok(self)
    }

    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::invalid(format!("t_min must lie in (0, 1), got {t_min}")));
        }
        self.t_min = t_min;
        Ok(self)
    }

    /// Registers the condition image that stands for `key`.
    pub fn register_condition(&mut self, key: impl Into<String>, image: LatentVideo) -> Result<()> {
        image.ensure_finite("condition image")?;
        if let Some(other) = self.conditions.values().next() {
            let (a, b) = (other.shape(), image.shape());
            if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
                return Err(Error::ShapeMismatch(a, b));
            }
        }
        self.conditions.insert(key.into(), image);
        Ok(())
    }

    pub fn mode(&self) -> &OracleMode {
        &self.mode
    }

    pub fn weighting(&self) -> &ConditionWeighting {
        &self.weighting
    }

    pub fn dataset(&self) -> &[Sample] {
        match &self.mode {
            OracleMode::Empirical { dataset, .. } => dataset,
            _ => &[],
        }
    }

    /// Key of the registered condition image closest to `cond`.
    pub fn resolve_key(&self, cond: &LatentVideo) -> Result<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (k, img) in &self.conditions {
            let d = condition_distance(cond, img)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k)
            .ok_or_else(|| Error::invalid("conditional evaluation needs at least one registered condition"))
    }

    /// Per-sample prior weights for the given condition; `None` is uniform.
    pub fn priors(&self, cond: Option<&LatentVideo>) -> Result<Vec<f64>> {
        let data = self.dataset();
        let Some(cond) = cond else {
            return Ok(vec![1.0; data.len()]);
        };
        match self.weighting {
            ConditionWeighting::Hard => {
                let key = self.resolve_key(cond)?;
                Ok(data.iter().map(|s| if s.key == key { 1.0 } else { 0.0 }).collect())
            }
            ConditionWeighting::Soft { bandwidth } => {
                let mut logs = Vec::with_capacity(data.len());
                for s in data {
                    let img = self.conditions.get(&s.key).ok_or_else(|| {
                        Error::invalid(format!("no condition image registered for key `{}`", s.key))
                    })?;
                    logs.push(-condition_distance(cond, img)? / (2.0 * bandwidth * bandwidth));
                }
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Ok(logs.iter().map(|l| (l - m).exp()).collect())
            }
        }
    }

    /// Normalized posterior weights over the dataset at `(z, t)`.
    pub fn posterior_weights(&self, z: &LatentVideo, t: TimePoint, cond: Option<&LatentVideo>) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let OracleMode::Empirical { dataset, bandwidth } = &self.mode else {
            return Err(Error::invalid("posterior weights exist only for the empirical oracle"));
        };
        let priors = self.priors(cond)?;
        let t = t.value();
        let var = (1.0 - t).powi(2) * bandwidth * bandwidth + t * t;
        let mut logs = Vec::with_capacity(dataset.len());
        for (s, &p) in dataset.iter().zip(&priors) {
            if p <= 0.0 {
                logs.push(f64::NEG_INFINITY);
                continue;
            }
            z.ensure_same_shape(&s.latent)?;
            let d2: f64 = z.data().iter().zip(s.latent.data()).map(|(a, x)| (a - (1.0 - t) * x).powi(2)).sum();
            logs.push(p.ln() - d2 / (2.0 * var));
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::EmptyDataset);
        }
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }

    fn check_time(&self, t: TimePoint) -> Result<()> {
        if t.value() < self.t_min {
            return Err(Error::InvalidTime { t: t.value(), floor: self.t_min });
        }
        Ok(())
    }

    /// Loads an empirical oracle from a text manifest. Each non-comment line
    /// is either `<sample path> <key>` or `condition <key> <image path>`;
    /// relative paths resolve against the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut samples = Vec::new();
        let mut conditions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["condition", key, p] => conditions.push((key.to_string(), LatentVideo::load(resolve(p))?)),
                [p, key] => samples.push(Sample::new(LatentVideo::load(resolve(p))?, *key)),
                _ => {
                    return Err(Error::format(
                        "dataset manifest",
                        format!("line {}: expected `<path> <key>` or `condition <key> <path>`", lineno + 1),
                    ))
                }
            }
        }
        let mut oracle = VelocityOracle::empirical(samples)?;
        for (k, img) in conditions {
            oracle.register_condition(k, img)?;
        }
        Ok(oracle)
    }
}

impl VelocityField for VelocityOracle {
    fn velocity(&self, z: &LatentVideo, t: TimePoint, cond: Option<&LatentVideo>) -> Result<LatentVideo> {
        match &self.mode {
            OracleMode::Empirical { .. } => empirical_velocity(z, t, self, cond),
            OracleMode::Dirac { mu } => {
                self.check_time(t)?;
                dirac_velocity(z, t, mu)
            }
            OracleMode::Gaussian { mu, s } => {
                self.check_time(t)?;
                gaussian_velocity(z, t, mu, *s)
            }
        }
    }
}

fn condition_distance(a: &LatentVideo, b: &LatentVideo) -> Result<f64> {
    if a.shape() == b.shape() {
        return a.distance_sq(b);
    }
    a.frame(0).distance_sq(&b.frame(0))
}

/// Exact marginal velocity of the (possibly kernel-smoothed) dataset.
pub fn empirical_velocity(
    z: &LatentVideo,
    t: TimePoint,
    oracle: &VelocityOracle,
    cond: Option<&LatentVideo>,
) -> Result<LatentVideo> {
    z.ensure_finite("oracle input")?;
    let w = oracle.posterior_weights(z, t, cond)?;
    let OracleMode::Empirical { dataset, bandwidth } = &oracle.mode else {
        unreachable!("posterior_weights checked the mode");
    };
    let t = t.value();
    let var = (1.0 - t).powi(2) * bandwidth * bandwidth + t * t;
    let shrink = (1.0 - t) * bandwidth * bandwidth / var;
    let mut mean = vec![0.0; z.shape().len()];
    for (s, &wk) in dataset.iter().zip(&w) {
        if wk == 0.0 {
            continue;
        }
        for ((m, &x), &zi) in mean.iter_mut().zip(s.latent.data()).zip(z.data()) {
            *m += wk * (x + shrink * (zi - (1.0 - t) * x));
        }
    }
    let v = mean.iter().zip(z.data()).map(|(m, zi)| (m - zi) / t).collect();
    LatentVideo::new(z.shape(), v)
}

/// `(mu - z) / t`
pub fn dirac_velocity(z: &LatentVideo, t: TimePoint, mu: &LatentVideo) -> Result<LatentVideo> {
    let t = t.value();
    mu.zip_map(z, |m, x| (m - x) / t)
}

/// Velocity for Gaussian data `N(mu, s^2 I)`.
pub fn gaussian_velocity(z: &LatentVideo, t: TimePoint, mu: &LatentVideo, s: f64) -> Result<LatentVideo> {
    if !(s >= 0.0) {
        return Err(Error::invalid(format!("data std must be >= 0, got {s}")));
    }
    let t = t.value();
    let k = (1.0 - t) * s * s / ((1.0 - t).powi(2) * s * s + t * t);
    mu.zip_map(z, |m, x| (m + k * (x - (1.0 - t) * m) - x) / t)
}

/// Score of `q = N((1 - tau) mu, tau^2 I)`.
pub fn analytic_score_q(z: &LatentVideo, tau: TimePoint, mu: &LatentVideo) -> Result<LatentVideo> {
    let t = tau.value();
    z.zip_map(mu, |x, m| -(x - (1.0 - t) * m) / (t * t))
}
