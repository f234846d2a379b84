use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hashing::hash64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Shape of one transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetroConfig {
    pub vocab_size: usize,
    /// Chunk length.
    pub m: usize,
    /// Neighbors per chunk.
    pub k: usize,
    pub max_len: usize,
    pub encoder: StackConfig,
    /// 1-based encoder layers with cross-attention to the decoder.
    pub ca_layers: Vec<usize>,
    pub decoder: StackConfig,
    /// 1-based decoder layers with chunked cross-attention.
    pub cca_layers: Vec<usize>,
    pub activation: Activation,
}

pub const PRESETS: [&str; 2] = ["desk", "paper-425m"];

impl RetroConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            vocab_size: 512,
            m: 8,
            k: 2,
            max_len: 64,
            encoder: StackConfig {
                layers: 1,
                heads: 2,
                hidden: 64,
                ffn: 128,
            },
            ca_layers: vec![1],
            decoder: StackConfig {
                layers: 4,
                heads: 2,
                hidden: 64,
                ffn: 128,
            },
            cca_layers: vec![2, 3, 4],
            activation: Activation::Gelu,
        }
    }

    /// The 425M-parameter configuration (T5 tokenizer vocabulary size).
    pub fn paper_425m() -> Self {
        Self {
            vocab_size: 32128,
            m: 64,
            k: 2,
            max_len: 1024,
            encoder: StackConfig {
                layers: 2,
                heads: 14,
                hidden: 896,
                ffn: 3584,
            },
            ca_layers: vec![2],
            decoder: StackConfig {
                layers: 12,
                heads: 12,
                hidden: 1536,
                ffn: 6144,
            },
            cca_layers: vec![6, 9, 12],
            activation: Activation::Gelu,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-425m" => Ok(Self::paper_425m()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return bad(format!("vocab size {} too small", self.vocab_size));
        }
        if self.m < 2 || self.k == 0 {
            return bad(format!("need m >= 2 and k >= 1, got m={} k={}", self.m, self.k));
        }
        if self.max_len == 0 || !self.max_len.is_multiple_of(self.m) {
            return bad(format!("max_len {} must be a positive multiple of m={}", self.max_len, self.m));
        }
        for (name, s) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if s.layers == 0 || s.heads == 0 || s.ffn == 0 || s.hidden % s.heads != 0 || s.hidden == 0 {
                return bad(format!("{name}: hidden must be a positive multiple of heads"));
            }
        }
        if self.cca_layers.is_empty() {
            return bad("cca_layers must not be empty".into());
        }
        if !strictly_increasing_within(&self.cca_layers, self.decoder.layers) {
            return bad(format!(
                "cca_layers {:?} must be increasing and within 1..={}",
                self.cca_layers, self.decoder.layers
            ));
        }
        if !strictly_increasing_within(&self.ca_layers, self.encoder.layers) {
            return bad(format!(
                "ca_layers {:?} must be increasing and within 1..={}",
                self.ca_layers, self.encoder.layers
            ));
        }
        Ok(())
    }

    pub fn neighbor_len(&self) -> usize {
        2 * self.m
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "m={}", self.m);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "activation={}", self.activation.as_str());
        for (name, st) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            let _ = writeln!(s, "{name}.layers={}", st.layers);
            let _ = writeln!(s, "{name}.heads={}", st.heads);
            let _ = writeln!(s, "{name}.hidden={}", st.hidden);
            let _ = writeln!(s, "{name}.ffn={}", st.ffn);
        }
        let _ = writeln!(s, "encoder.ca_layers={}", list(&self.ca_layers));
        let _ = writeln!(s, "decoder.cca_layers={}", list(&self.cca_layers));
        s
    }

    /// Parses `key=value` lines over the desk defaults; blank lines and `#`
    /// comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("{key}: not an integer: {value:?}")))
            };
            let list = || -> Result<Vec<usize>> {
                if value.is_empty() {
                    return Ok(Vec::new());
                }
                value
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("{key}: bad list {value:?}")))
                    })
                    .collect()
            };
            match key {
                "vocab_size" => cfg.vocab_size = num()?,
                "m" => cfg.m = num()?,
                "k" => cfg.k = num()?,
                "max_len" => cfg.max_len = num()?,
                "activation" => cfg.activation = value.parse()?,
                "encoder.layers" => cfg.encoder.layers = num()?,
                "encoder.heads" => cfg.encoder.heads = num()?,
                "encoder.hidden" => cfg.encoder.hidden = num()?,
                "encoder.ffn" => cfg.encoder.ffn = num()?,
                "encoder.ca_layers" => cfg.ca_layers = list()?,
                "decoder.layers" => cfg.decoder.layers = num()?,
                "decoder.heads" => cfg.decoder.heads = num()?,
                "decoder.hidden" => cfg.decoder.hidden = num()?,
                "decoder.ffn" => cfg.decoder.ffn = num()?,
                "decoder.cca_layers" => cfg.cca_layers = list()?,
                _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> u64 {
        hash64(self.to_text().as_bytes())
    }
}

fn strictly_increasing_within(layers: &[usize], max: usize) -> bool {
    layers.iter().all(|&l| (1..=max).contains(&l)) && layers.windows(2).all(|w| w[0] < w[1])
}
