//! Parameter inventory, initialization and checkpoint conversion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{RetroConfig, StackConfig};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, NamedTensor, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Indices of one attention sublayer's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIdx {
    pub attn: AttnIdx,
    /// Cross-attention sublayer: CCA in the decoder, CA in the encoder.
    pub cross: Option<AttnIdx>,
    pub ffn: FfnIdx,
}

/// Where every named tensor lives in [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub(crate) struct ParamIndex {
    pub dec_emb: usize,
    pub dec_layers: Vec<LayerIdx>,
    pub dec_ln_g: usize,
    pub dec_ln_b: usize,
    pub out_proj: usize,
    pub enc_emb: usize,
    pub enc_layers: Vec<LayerIdx>,
    pub enc_ln_g: usize,
    pub enc_ln_b: usize,
    pub ctx_ln_g: usize,
    pub ctx_ln_b: usize,
    pub dec_self_bias: usize,
    pub cca_bias: usize,
    pub enc_self_bias: usize,
    pub enc_ca_bias: usize,
}

/// Relative-offset table sizes per attention geometry.
pub(crate) struct BiasGeometry {
    pub dec_self: usize,
    pub cca: usize,
    pub enc_self: usize,
    pub enc_ca: usize,
}

impl BiasGeometry {
    pub fn of(cfg: &RetroConfig) -> Self {
        let (l, m) = (cfg.max_len, cfg.m);
        Self {
            // key - query in [-(L-1), L-1]
            dec_self: 2 * l - 1,
            // neighbor position - decoder position in [-(L-1), 2m-1]
            cca: l - 1 + 2 * m,
            // within a 2m neighbor: [-(2m-1), 2m-1]
            enc_self: 4 * m - 1,
            // chunk position - neighbor position in [-(2m-1), m-1]
            enc_ca: 3 * m - 1,
        }
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.ln.g"), vec![d], Init::Ones),
            self.add(format!("{prefix}.ln.b"), vec![d], Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d_query: usize, d_kv: usize) -> AttnIdx {
        let (ln_g, ln_b) = self.ln(prefix, d_query);
        AttnIdx {
            ln_g,
            ln_b,
            wq: self.add(format!("{prefix}.wq"), vec![d_query, d_query], Init::Normal),
            wk: self.add(format!("{prefix}.wk"), vec![d_kv, d_query], Init::Normal),
            wv: self.add(format!("{prefix}.wv"), vec![d_kv, d_query], Init::Normal),
            wo: self.add(format!("{prefix}.wo"), vec![d_query, d_query], Init::Normal),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        let (ln_g, ln_b) = self.ln(prefix, d);
        FfnIdx {
            ln_g,
            ln_b,
            w1: self.add(format!("{prefix}.w1"), vec![d, f], Init::Normal),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![f, d], Init::Normal),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }

    fn stack(
        &mut self,
        side: &str,
        st: &StackConfig,
        cross_layers: &[usize],
        cross_name: &str,
        d_cross: usize,
    ) -> Vec<LayerIdx> {
        (1..=st.layers)
            .map(|l| {
                let p = format!("{side}.{l}");
                LayerIdx {
                    attn: self.attn(&format!("{p}.self"), st.hidden, st.hidden),
                    cross: cross_layers
                        .contains(&l)
                        .then(|| self.attn(&format!("{p}.{cross_name}"), st.hidden, d_cross)),
                    ffn: self.ffn(&format!("{p}.ffn"), st.hidden, st.ffn),
                }
            })
            .collect()
    }
}

impl ParamIndex {
    pub fn build(cfg: &RetroConfig) -> (Self, Vec<ParamSpec>) {
        let (d, de, v) = (cfg.decoder.hidden, cfg.encoder.hidden, cfg.vocab_size);
        let geo = BiasGeometry::of(cfg);
        let mut b = Builder { specs: Vec::new() };
        let dec_emb = b.add("dec.embed".into(), vec![v, d], Init::Normal);
        let dec_self_bias = b.add(
            "dec.self.rel_bias".into(),
            vec![cfg.decoder.heads, geo.dec_self],
            Init::Zeros,
        );
        let dec_layers = b.stack("dec", &cfg.decoder, &cfg.cca_layers, "cca", de);
        let (dec_ln_g, dec_ln_b) = b.ln("dec.final", d);
        let out_proj = b.add("dec.out_proj".into(), vec![d, v], Init::Normal);
        // CCA keys/values are projected from encoder outputs, but the table
        // sits with the decoder: it is indexed by decoder query heads.
        let cca_bias = b.add("dec.cca.rel_bias".into(), vec![cfg.decoder.heads, geo.cca], Init::Zeros);

        let enc_emb = b.add("enc.embed".into(), vec![v, de], Init::Normal);
        let enc_self_bias = b.add(
            "enc.self.rel_bias".into(),
            vec![cfg.encoder.heads, geo.enc_self],
            Init::Zeros,
        );
        let enc_ca_bias = b.add("enc.ca.rel_bias".into(), vec![cfg.encoder.heads, geo.enc_ca], Init::Zeros);
        let (ctx_ln_g, ctx_ln_b) = b.ln("enc.ctx", d);
        let enc_layers = b.stack("enc", &cfg.encoder, &cfg.ca_layers, "ca", d);
        let (enc_ln_g, enc_ln_b) = b.ln("enc.final", de);
        (
            Self {
                dec_emb,
                dec_layers,
                dec_ln_g,
                dec_ln_b,
                out_proj,
                enc_emb,
                enc_layers,
                enc_ln_g,
                enc_ln_b,
                ctx_ln_g,
                ctx_ln_b,
                dec_self_bias,
                cca_bias,
                enc_self_bias,
                enc_ca_bias,
            },
            b.specs,
        )
    }
}

/// All trainable tensors θ, in a fixed order derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated normal (±2σ, σ = 0.02) for weight matrices and embeddings;
    /// zeros for biases and relative-position tables; ones for layer-norm
    /// gains.
    pub fn init(cfg: &RetroConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (_, specs) = ParamIndex::build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::from_fn(spec.shape, |_| T::one()),
                Init::Normal => Tensor::from_fn(spec.shape, |_| {
                    T::from_f64(truncated_normal(&mut rng) * INIT_STD)
                }),
            };
            names.push(spec.name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check(&self, cfg: &RetroConfig) -> Result<()> {
        let (_, specs) = ParamIndex::build(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if &spec.name != name || spec.shape != t.shape {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    pub fn to_checkpoint(&self, cfg: &RetroConfig, step: u64) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.hash(),
            step,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, tensor)| NamedTensor {
                    name: name.clone(),
                    tensor: tensor.clone(),
                })
                .collect(),
        }
    }

    /// Extracts the model tensors (ignoring optimizer state stored under
    /// other names) and validates them against `cfg`.
    pub fn from_checkpoint(cfg: &RetroConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match {:016x}",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        let (_, specs) = ParamIndex::build(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = ckpt
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", spec.name)))?;
            names.push(spec.name);
            tensors.push(t.clone());
        }
        let params = Self { names, tensors };
        params.check(cfg)?;
        Ok(params)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
