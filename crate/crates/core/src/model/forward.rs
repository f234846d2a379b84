//! Graph construction for the decoder, the neighbor encoder and chunked
//! cross-attention.

use std::sync::Arc;

use super::config::{Activation, RetroConfig};
use super::neighbors::NeighborBatch;
use super::params::{AttnIdx, BiasGeometry, FfnIdx, ModelParams, ParamIndex};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, RelativePositions, Scalar, Tape, Tensor, Var};
use crate::tokenizer::PAD;

/// RETRO[on] conditions on retrieved neighbors; RETRO[off] is the same
/// weights with every CCA sublayer bypassed.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    On(&'a NeighborBatch),
    Off,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[T, V]`; row `t` scores the token at `t + 1`.
    pub logits: Tensor<T>,
    /// Cross-entropy in nats of predicting `tokens[t + 1]` at row `t`; the
    /// last row has no target and scores zero.
    pub losses: Vec<T>,
}

pub(crate) struct Graph {
    pub params: Vec<Var>,
    pub logits: Var,
    pub losses: Var,
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    tokens: &[u32],
    mode: Mode<'_>,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let g = build(&mut tape, params, cfg, tokens, mode)?;
    Ok(ForwardOutput {
        logits: tape.value(g.logits).clone(),
        losses: tape.value(g.losses).data.clone(),
    })
}

pub fn forward_on<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    tokens: &[u32],
    neighbors: &NeighborBatch,
) -> Result<ForwardOutput<T>> {
    forward(params, cfg, tokens, Mode::On(neighbors))
}

pub fn forward_off<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    tokens: &[u32],
) -> Result<ForwardOutput<T>> {
    forward(params, cfg, tokens, Mode::Off)
}

/// Per-token losses and the gradient of their sum for every parameter
/// tensor (zeros for tensors the pass never touches).
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    tokens: &[u32],
    mode: Mode<'_>,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let g = build(&mut tape, params, cfg, tokens, mode)?;
    let total = tape.sum(g.losses);
    let mut grads = tape.backward(total);
    let losses = tape.value(g.losses).data.clone();
    let per_param = g
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();
    Ok((losses, per_param))
}

pub(crate) fn build<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    tokens: &[u32],
    mode: Mode<'_>,
) -> Result<Graph> {
    let len = tokens.len();
    if len == 0 {
        return Err(Error::Config("empty input sequence".into()));
    }
    if len > cfg.max_len {
        return Err(Error::TooLong {
            len,
            max: cfg.max_len,
        });
    }
    let (idx, specs) = ParamIndex::build(cfg);
    if specs.len() != params.len() || specs.iter().zip(&params.tensors).any(|(s, t)| s.shape != t.shape) {
        return Err(Error::Config("parameter shapes do not match the model config".into()));
    }
    let neighbors = match mode {
        Mode::On(nb) => {
            nb.check_for(len, cfg.m, cfg.k)?;
            (nb.blocks() > 0).then_some(nb)
        }
        Mode::Off => None,
    };
    let p: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let geo = BiasGeometry::of(cfg);
    let act = cfg.activation;

    let dec_self = Arc::new(decoder_self_layout(cfg, len, geo.dec_self));
    let mut x = tape.embedding(p[idx.dec_emb], tokens)?;
    let mut encoded: Option<Var> = None;
    for layer in &idx.dec_layers {
        x = attn_sublayer(tape, &p, &layer.attn, x, None, p[idx.dec_self_bias], dec_self.clone())?;
        if let (Some(cca), Some(nb)) = (&layer.cross, neighbors) {
            let enc = match encoded {
                Some(e) => e,
                // encoder CA reads decoder states just before the first CCA
                None => *encoded.insert(encode(tape, &p, &idx, cfg, nb, x, len)?),
            };
            let layout = Arc::new(cca_layout(cfg, nb, len, geo.cca));
            x = attn_sublayer(tape, &p, cca, x, Some(enc), p[idx.cca_bias], layout)?;
        }
        x = ffn_sublayer(tape, &p, &layer.ffn, x, act)?;
    }
    let h = tape.layer_norm(x, p[idx.dec_ln_g], p[idx.dec_ln_b])?;
    let logits = tape.matmul(h, p[idx.out_proj])?;
    let mut targets = tokens[1..].to_vec();
    targets.push(PAD);
    let losses = tape.softmax_ce(logits, &targets, PAD)?;
    Ok(Graph {
        params: p,
        logits,
        losses,
    })
}

fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    idx: &ParamIndex,
    cfg: &RetroConfig,
    nb: &NeighborBatch,
    ctx: Var,
    len: usize,
) -> Result<Var> {
    let geo = BiasGeometry::of(cfg);
    let self_layout = Arc::new(encoder_self_layout(cfg, nb, geo.enc_self));
    let ca_layout = Arc::new(encoder_ca_layout(cfg, nb, len, geo.enc_ca));
    let ctx = tape.layer_norm(ctx, p[idx.ctx_ln_g], p[idx.ctx_ln_b])?;
    let mut e = tape.embedding(p[idx.enc_emb], &nb.tokens)?;
    for layer in &idx.enc_layers {
        e = attn_sublayer(tape, p, &layer.attn, e, None, p[idx.enc_self_bias], self_layout.clone())?;
        if let Some(ca) = &layer.cross {
            e = attn_sublayer(tape, p, ca, e, Some(ctx), p[idx.enc_ca_bias], ca_layout.clone())?;
        }
        e = ffn_sublayer(tape, p, &layer.ffn, e, cfg.activation)?;
    }
    tape.layer_norm(e, p[idx.enc_ln_g], p[idx.enc_ln_b])
}

/// Pre-norm attention with residual. Keys and values come from `kv` when
/// given (already normalized), otherwise from the normalized input.
fn attn_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    a: &AttnIdx,
    x: Var,
    kv: Option<Var>,
    bias: Var,
    layout: Arc<AttentionLayout>,
) -> Result<Var> {
    let h = tape.layer_norm(x, p[a.ln_g], p[a.ln_b])?;
    let src = kv.unwrap_or(h);
    let q = tape.matmul(h, p[a.wq])?;
    let k = tape.matmul(src, p[a.wk])?;
    let v = tape.matmul(src, p[a.wv])?;
    let o = tape.attention(q, k, v, Some(bias), layout)?;
    let o = tape.matmul(o, p[a.wo])?;
    tape.add(x, o)
}

fn ffn_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    f: &FfnIdx,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let h = tape.layer_norm(x, p[f.ln_g], p[f.ln_b])?;
    let u = tape.matmul(h, p[f.w1])?;
    let u = tape.add_bias(u, p[f.b1])?;
    let u = match act {
        Activation::Gelu => tape.gelu(u),
        Activation::Relu => tape.relu(u),
    };
    let o = tape.matmul(u, p[f.w2])?;
    let o = tape.add_bias(o, p[f.b2])?;
    tape.add(x, o)
}

fn decoder_self_layout(cfg: &RetroConfig, len: usize, buckets: usize) -> AttentionLayout {
    let pos: Vec<i64> = (0..len as i64).collect();
    AttentionLayout::causal(cfg.decoder.heads, len).with_relative(RelativePositions {
        query_pos: pos.clone(),
        key_pos: pos,
        min_offset: -(cfg.max_len as i64 - 1),
        buckets,
    })
}

/// Block used by decoder row `p` (0-based): row `p` predicts the token at
/// 1-based position `p + 2`, whose chunk `c` conditions on `RET(C_{c-1})`,
/// stored at block `c - 2`.
pub fn cca_block(p: usize, m: usize) -> Option<usize> {
    ((p + 1) / m).checked_sub(1)
}

fn neighbor_key_valid(nb: &NeighborBatch) -> Vec<bool> {
    let n = 2 * nb.m;
    nb.tokens
        .iter()
        .enumerate()
        .map(|(r, &t)| t != PAD && nb.valid[r / n])
        .collect()
}

fn cca_layout(cfg: &RetroConfig, nb: &NeighborBatch, len: usize, buckets: usize) -> AttentionLayout {
    let n = 2 * cfg.m;
    let per_block = cfg.k * n;
    let rows = nb.tokens.len();
    AttentionLayout {
        heads: cfg.decoder.heads,
        queries: len,
        keys: rows,
        row_keys: (0..len)
            .map(|p| match cca_block(p, cfg.m) {
                Some(b) if b < nb.blocks() => b * per_block..(b + 1) * per_block,
                _ => 0..0,
            })
            .collect(),
        key_valid: neighbor_key_valid(nb),
        mask: None,
        relative: Some(RelativePositions {
            query_pos: (0..len as i64).collect(),
            key_pos: (0..rows).map(|r| (r % n) as i64).collect(),
            min_offset: -(cfg.max_len as i64 - 1),
            buckets,
        }),
    }
}

/// Each neighbor attends only within itself.
fn encoder_self_layout(cfg: &RetroConfig, nb: &NeighborBatch, buckets: usize) -> AttentionLayout {
    let n = 2 * cfg.m;
    let rows = nb.tokens.len();
    let pos: Vec<i64> = (0..rows).map(|r| (r % n) as i64).collect();
    AttentionLayout {
        heads: cfg.encoder.heads,
        queries: rows,
        keys: rows,
        row_keys: (0..rows).map(|r| (r / n) * n..(r / n + 1) * n).collect(),
        key_valid: neighbor_key_valid(nb),
        mask: None,
        relative: Some(RelativePositions {
            query_pos: pos.clone(),
            key_pos: pos,
            min_offset: -(n as i64 - 1),
            buckets,
        }),
    }
}

/// Neighbors of `RET(C_u)` attend to the decoder positions of `C_u`.
fn encoder_ca_layout(
    cfg: &RetroConfig,
    nb: &NeighborBatch,
    len: usize,
    buckets: usize,
) -> AttentionLayout {
    let (m, n) = (cfg.m, 2 * cfg.m);
    let per_block = cfg.k * n;
    let rows = nb.tokens.len();
    AttentionLayout {
        heads: cfg.encoder.heads,
        queries: rows,
        keys: len,
        row_keys: (0..rows)
            .map(|r| {
                let b = r / per_block;
                if nb.valid[r / n] {
                    b * m..(b + 1) * m
                } else {
                    0..0
                }
            })
            .collect(),
        key_valid: vec![true; len],
        mask: None,
        relative: Some(RelativePositions {
            query_pos: (0..rows).map(|r| (r % n) as i64).collect(),
            key_pos: (0..len).map(|j| (j % m) as i64).collect(),
            min_offset: -(n as i64 - 1),
            buckets,
        }),
    }
}
