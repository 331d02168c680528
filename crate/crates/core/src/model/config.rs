use std::fmt;
use std::str::FromStr;

use crate::corpus::NUM_RESERVED;
use crate::error::{Error, Result};

/// How target lengths and decoder inputs are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentMode {
    /// Output length equals input length; position `i` reads source word `i`.
    Simple,
    /// A pointer decoder predicts the alignment, and with it the length.
    Learnable,
}

impl FromStr for AlignmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(AlignmentMode::Simple),
            "learnable" => Ok(AlignmentMode::Learnable),
            _ => Err(Error::Config(format!("unknown alignment mode {s:?} (simple|learnable)"))),
        }
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignmentMode::Simple => "simple",
            AlignmentMode::Learnable => "learnable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Smooth everywhere, which keeps finite-difference checks meaningful.
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!("unknown activation {s:?} (relu|tanh)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub feedforward_dim: usize,
    pub max_len: usize,
    pub predictor_layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub alignment: AlignmentMode,
    /// Extra pointer-decoder steps allowed past the source length.
    pub max_slack: usize,
    /// Decoder sees positions and style only, not the aligned words.
    pub no_aligned_input: bool,
    /// Decoder positions neither attend to each other nor to the encoder.
    pub no_cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 256,
            feedforward_dim: 1024,
            max_len: 64,
            predictor_layers: 1,
            dropout: 0.0,
            activation: Activation::Relu,
            alignment: AlignmentMode::Simple,
            max_slack: 5,
            no_aligned_input: false,
            no_cross_attention: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    /// A small model suited to the synthetic tasks.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 32,
            feedforward_dim: 64,
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("feedforward_dim", self.feedforward_dim),
            ("max_len", self.max_len),
            ("predictor_layers", self.predictor_layers),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{k} must be positive")));
            }
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!("model.vocab_size must exceed the {NUM_RESERVED} reserved tokens")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.hidden_dim {} is not divisible by model.num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "feedforward_dim" => self.feedforward_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "predictor_layers" => self.predictor_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "activation" => self.activation = value.parse()?,
            "alignment" => self.alignment = value.parse()?,
            "max_slack" => self.max_slack = parse(key, value)?,
            "no_aligned_input" => self.no_aligned_input = parse(key, value)?,
            "no_cross_attention" => self.no_cross_attention = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("feedforward_dim", self.feedforward_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("predictor_layers", self.predictor_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("activation", self.activation.to_string()),
            ("alignment", self.alignment.to_string()),
            ("max_slack", self.max_slack.to_string()),
            ("no_aligned_input", self.no_aligned_input.to_string()),
            ("no_cross_attention", self.no_cross_attention.to_string()),
        ]
    }
}
