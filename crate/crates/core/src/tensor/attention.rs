//! Fused multi-head attention kernel.
//!
//! Which keys a query row may see is described by an [`AttentionLayout`]:
//! a contiguous key range per row, a per-key validity flag and an optional
//! dense mask. Rows left with no visible key produce a zero output vector.

use std::ops::Range;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Relative-position bias lookup: the bias for (query i, key j) is
/// `table[h, key_pos[j] - query_pos[i] - min_offset]`, one scalar per head
/// per distinct offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePositions {
    pub query_pos: Vec<i64>,
    pub key_pos: Vec<i64>,
    pub min_offset: i64,
    pub buckets: usize,
}

impl RelativePositions {
    fn bucket(&self, i: usize, j: usize) -> usize {
        let off = self.key_pos[j] - self.query_pos[i] - self.min_offset;
        off.clamp(0, self.buckets as i64 - 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub row_keys: Vec<Range<usize>>,
    pub key_valid: Vec<bool>,
    /// Optional `[queries, keys]` mask; `false` hides the pair.
    pub mask: Option<Vec<bool>>,
    pub relative: Option<RelativePositions>,
}

impl AttentionLayout {
    /// Every query sees every key.
    pub fn full(heads: usize, queries: usize, keys: usize) -> Self {
        Self {
            heads,
            queries,
            keys,
            row_keys: vec![0..keys; queries],
            key_valid: vec![true; keys],
            mask: None,
            relative: None,
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(heads: usize, len: usize) -> Self {
        Self {
            row_keys: (0..len).map(|i| 0..i + 1).collect(),
            ..Self::full(heads, len, len)
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.queries * self.keys {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![self.queries, self.keys],
                rhs: vec![mask.len()],
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_relative(mut self, relative: RelativePositions) -> Self {
        self.relative = Some(relative);
        self
    }

    fn visible(&self, i: usize, j: usize) -> bool {
        self.key_valid[j] && self.mask.as_ref().is_none_or(|m| m[i * self.keys + j])
    }

    /// Start of each row's slice in the probability buffer, plus the total.
    fn prob_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.queries);
        let mut total = 0;
        for r in &self.row_keys {
            offsets.push(total);
            total += r.len();
        }
        (offsets, total)
    }

    fn validate<T>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<usize> {
        let shape_err = |lhs: &[usize], rhs: &[usize]| Error::Shape {
            op: "attention",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if q.shape.len() != 2 || k.shape.len() != 2 || v.shape != k.shape {
            return Err(shape_err(&q.shape, &k.shape));
        }
        let width = q.shape[1];
        if k.shape[1] != width || self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(shape_err(&q.shape, &k.shape));
        }
        if q.shape[0] != self.queries || k.shape[0] != self.keys {
            return Err(shape_err(&[q.shape[0], k.shape[0]], &[self.queries, self.keys]));
        }
        if self.row_keys.len() != self.queries
            || self.key_valid.len() != self.keys
            || self.row_keys.iter().any(|r| r.end > self.keys)
        {
            return Err(shape_err(&[self.row_keys.len(), self.key_valid.len()], &[self.queries, self.keys]));
        }
        match (&self.relative, bias) {
            (None, None) => {}
            (Some(rel), Some(b)) => {
                if b.shape != [self.heads, rel.buckets]
                    || rel.query_pos.len() != self.queries
                    || rel.key_pos.len() != self.keys
                {
                    return Err(shape_err(&b.shape, &[self.heads, rel.buckets]));
                }
            }
            (rel, b) => {
                return Err(shape_err(
                    &b.map(|b| b.shape.clone()).unwrap_or_default(),
                    &[self.heads, rel.as_ref().map_or(0, |r| r.buckets)],
                ))
            }
        }
        Ok(width / self.heads)
    }
}

pub(super) fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    layout: &AttentionLayout,
) -> Result<(Tensor<T>, Vec<T>)> {
    let dh = layout.validate(q, k, v, bias)?;
    let width = q.shape[1];
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (offsets, total) = layout.prob_offsets();
    let mut probs = vec![T::zero(); layout.heads * total];
    let mut out = vec![T::zero(); layout.queries * width];
    for h in 0..layout.heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, range) in layout.row_keys.iter().enumerate() {
            let p = &mut probs[h * total + offsets[i]..h * total + offsets[i] + range.len()];
            let qi = &q.data[i * width..][cols.clone()];
            let mut max = T::neg_infinity();
            let mut any = false;
            for (slot, j) in p.iter_mut().zip(range.clone()) {
                if !layout.visible(i, j) {
                    continue;
                }
                let kj = &k.data[j * width..][cols.clone()];
                let mut s = dot(qi, kj) * scale;
                if let (Some(rel), Some(b)) = (&layout.relative, bias) {
                    s += b.data[h * rel.buckets + rel.bucket(i, j)];
                }
                *slot = s;
                max = max.max(s);
                any = true;
            }
            if !any {
                continue;
            }
            let mut sum = T::zero();
            for (slot, j) in p.iter_mut().zip(range.clone()) {
                if layout.visible(i, j) {
                    *slot = (*slot - max).exp();
                    sum += *slot;
                } else {
                    *slot = T::zero();
                }
            }
            let oi = &mut out[i * width..][cols.clone()];
            for (slot, j) in p.iter_mut().zip(range.clone()) {
                *slot = *slot / sum;
                if *slot != T::zero() {
                    let vj = &v.data[j * width..][cols.clone()];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += *slot * x;
                    }
                }
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![layout.queries, width],
            data: out,
        },
        probs,
    ))
}

pub(super) struct AttentionGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub(super) fn backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    layout: &AttentionLayout,
    probs: &[T],
    g_out: &[T],
) -> AttentionGrads<T> {
    let width = q.shape[1];
    let dh = width / layout.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (offsets, total) = layout.prob_offsets();
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gv = vec![T::zero(); v.numel()];
    let mut gb = bias.map(|b| vec![T::zero(); b.numel()]);
    let mut dscore = Vec::new();
    for h in 0..layout.heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, range) in layout.row_keys.iter().enumerate() {
            let p = &probs[h * total + offsets[i]..h * total + offsets[i] + range.len()];
            let go = &g_out[i * width..][cols.clone()];
            // dP_j = dO . v_j ; dS_j = P_j (dP_j - sum_l P_l dP_l)
            dscore.clear();
            let mut weighted = T::zero();
            for (&pj, j) in p.iter().zip(range.clone()) {
                if pj == T::zero() {
                    dscore.push(T::zero());
                    continue;
                }
                let vj = &v.data[j * width..][cols.clone()];
                let dp = dot(go, vj);
                dscore.push(dp);
                weighted += pj * dp;
                let gvj = &mut gv[j * width..][cols.clone()];
                for (acc, &x) in gvj.iter_mut().zip(go) {
                    *acc += pj * x;
                }
            }
            let qi = &q.data[i * width..][cols.clone()];
            for ((&pj, ds), j) in p.iter().zip(dscore.iter_mut()).zip(range.clone()) {
                if pj == T::zero() {
                    continue;
                }
                *ds = pj * (*ds - weighted);
                if let (Some(rel), Some(gb)) = (&layout.relative, gb.as_mut()) {
                    gb[h * rel.buckets + rel.bucket(i, j)] += *ds;
                }
                let s = *ds * scale;
                let kj = &k.data[j * width..][cols.clone()];
                let gqi = &mut gq[i * width..][cols.clone()];
                for (acc, &x) in gqi.iter_mut().zip(kj) {
                    *acc += s * x;
                }
                let gkj = &mut gk[j * width..][cols.clone()];
                for (acc, &x) in gkj.iter_mut().zip(qi) {
                    *acc += s * x;
                }
            }
        }
    }
    AttentionGrads {
        q: gq,
        k: gk,
        v: gv,
        bias: gb,
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
