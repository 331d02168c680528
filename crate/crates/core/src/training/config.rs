use std::fmt;
use std::str::FromStr;

use crate::corpus::NoiseConfig;
use crate::error::{Error, Result};

/// Weights of the three generator losses. The style weight is set per
/// target direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    /// Style weight when transferring into style X.
    pub beta_x: f64,
    /// Style weight when transferring into style Y.
    pub beta_y: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta_x: 1.0, beta_y: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { alpha: 0.0, beta_x: 0.0, beta_y: 0.0, gamma: 0.0 }
    }

    pub fn cycle_only() -> Self {
        LossWeights { gamma: 1.0, ..Self::zero() }
    }

    pub fn uses_style(&self) -> bool {
        self.beta_x > 0.0 || self.beta_y > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("alpha", self.alpha), ("beta_x", self.beta_x), ("beta_y", self.beta_y), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{k} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// How gradients cross the discrete output of the first pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradApproxMode {
    /// Gumbel-perturbed softmax. With `straight_through` the forward value
    /// is the one-hot argmax and the backward pass uses the relaxed sample.
    GumbelSoftmax { temperature: f64, straight_through: bool },
    /// Expected embedding under the output distribution.
    SoftEmbedding,
    /// Sampled tokens with no gradient into the first pass of the cycle.
    /// The style loss still uses Gumbel samples.
    StopGradient,
}

impl Default for GradApproxMode {
    fn default() -> Self {
        GradApproxMode::GumbelSoftmax { temperature: 1.0, straight_through: true }
    }
}

impl GradApproxMode {
    pub fn gumbel(temperature: f64) -> Self {
        GradApproxMode::GumbelSoftmax { temperature, straight_through: true }
    }

    /// Temperature used wherever Gumbel samples are drawn.
    pub fn temperature(&self) -> f64 {
        match self {
            GradApproxMode::GumbelSoftmax { temperature, .. } => *temperature,
            _ => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GradApproxMode::GumbelSoftmax { .. } => "gumbel",
            GradApproxMode::SoftEmbedding => "soft",
            GradApproxMode::StopGradient => "stop",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let GradApproxMode::GumbelSoftmax { temperature, .. } = self {
            if !(*temperature > 0.0) {
                return Err(Error::Config(format!("gumbel temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GradApproxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradApproxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gumbel" | "gumbel-softmax" => Ok(GradApproxMode::default()),
            "soft" | "soft-embedding" => Ok(GradApproxMode::SoftEmbedding),
            "stop" | "stop-gradient" => Ok(GradApproxMode::StopGradient),
            _ => Err(Error::Config(format!("unknown gradient approximation {s:?} (gumbel|soft|stop)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub disc_lr: f64,
    /// Sentences drawn per style for every update.
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub grad_approx: GradApproxMode,
    pub weights: LossWeights,
    /// Generator steps between evaluations (0 disables them).
    pub eval_every: usize,
    /// Discriminator updates run before every block of `gen_steps`
    /// generator updates.
    pub disc_steps: usize,
    pub gen_steps: usize,
    pub clip: f64,
    pub disc_layers: usize,
    pub disc_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            disc_lr: 1e-4,
            batch_size: 64,
            max_steps: 10_000,
            seed: 1,
            noise: NoiseConfig::default(),
            grad_approx: GradApproxMode::default(),
            weights: LossWeights::default(),
            eval_every: 1000,
            disc_steps: 10,
            gen_steps: 5,
            clip: 1.0,
            disc_layers: 1,
            disc_dim: 32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("train.max_steps must be positive".into()));
        }
        if self.batch_size == 0 || self.gen_steps == 0 || self.disc_dim == 0 {
            return Err(Error::Config("train.batch_size, train.gen_steps and train.disc_dim must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("train.clip must be positive".into()));
        }
        self.weights.validate()?;
        self.grad_approx.validate()?;
        self.noise.validate()
    }

    /// Sets `train.*` and `noise.*` keys (given without the section prefix
    /// for `train`, with it for `noise`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "disc_lr" => self.disc_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "grad_approx" => {
                let t = self.grad_approx.temperature();
                self.grad_approx = match value.parse()? {
                    GradApproxMode::GumbelSoftmax { straight_through, .. } => GradApproxMode::GumbelSoftmax { temperature: t, straight_through },
                    other => other,
                }
            }
            "temperature" => {
                let t: f64 = parse(key, value)?;
                if let GradApproxMode::GumbelSoftmax { temperature, .. } = &mut self.grad_approx {
                    *temperature = t;
                }
            }
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta_x" => self.weights.beta_x = parse(key, value)?,
            "beta_y" => self.weights.beta_y = parse(key, value)?,
            "gamma" => self.weights.gamma = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "disc_steps" => self.disc_steps = parse(key, value)?,
            "gen_steps" => self.gen_steps = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "disc_layers" => self.disc_layers = parse(key, value)?,
            "disc_dim" => self.disc_dim = parse(key, value)?,
            "noise.drop_prob" => self.noise.drop_prob = parse(key, value)?,
            "noise.mask_prob" => self.noise.mask_prob = parse(key, value)?,
            "noise.insert_prob" => self.noise.insert_prob = parse(key, value)?,
            "noise.max_insertions" => self.noise.max_insertions = parse(key, value)?,
            "noise.substitute_prob" => self.noise.substitute_prob = parse(key, value)?,
            _ if key.starts_with("noise.") => return Err(Error::Config(format!("unknown key {key}"))),
            _ => return Err(Error::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs accepted by [`TrainConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("disc_lr", self.disc_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_approx", self.grad_approx.to_string()),
            ("temperature", self.grad_approx.temperature().to_string()),
            ("alpha", self.weights.alpha.to_string()),
            ("beta_x", self.weights.beta_x.to_string()),
            ("beta_y", self.weights.beta_y.to_string()),
            ("gamma", self.weights.gamma.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("disc_steps", self.disc_steps.to_string()),
            ("gen_steps", self.gen_steps.to_string()),
            ("clip", self.clip.to_string()),
            ("disc_layers", self.disc_layers.to_string()),
            ("disc_dim", self.disc_dim.to_string()),
            ("noise.drop_prob", self.noise.drop_prob.to_string()),
            ("noise.mask_prob", self.noise.mask_prob.to_string()),
            ("noise.insert_prob", self.noise.insert_prob.to_string()),
            ("noise.max_insertions", self.noise.max_insertions.to_string()),
            ("noise.substitute_prob", self.noise.substitute_prob.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut c = TrainConfig { lr: 3e-3, seed: 9, grad_approx: GradApproxMode::SoftEmbedding, ..TrainConfig::default() };
        c.weights.beta_y = 0.5;
        c.noise.drop_prob = 0.0;
        let mut d = TrainConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig { max_steps: 0, ..TrainConfig::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.gamma = -1.0;
        assert!(c.validate().is_err());
        assert!(GradApproxMode::GumbelSoftmax { temperature: 0.0, straight_through: true }.validate().is_err());
        assert!(c.set("lrr", "1").is_err());
        assert!(c.set("lr", "fast").is_err());
        assert!("bogus".parse::<GradApproxMode>().is_err());
    }
}
