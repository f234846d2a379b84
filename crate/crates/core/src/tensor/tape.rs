use std::sync::Arc;

use super::attention::{self, AttentionLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<usize>,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of executed operations. Node order is a valid
/// topological order, so backward is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[..., p, q] x [q, r]` or `[..., p, q] x [..., q, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if q != q2 || (!shared_b && lead_a != lead_b) {
            return Err(self.mismatch("matmul", a, b));
        }
        let batch: usize = lead_a.iter().product();
        let mut shape = lead_a.to_vec();
        shape.extend([p, r]);
        let mut out = vec![T::zero(); batch * p * r];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            if shared_b {
                T::gemm(batch * p, q, r, av, (q as isize, 1), bv, (r as isize, 1), &mut out, r as isize, false);
            } else {
                for i in 0..batch {
                    T::gemm(
                        p,
                        q,
                        r,
                        &av[i * p * q..(i + 1) * p * q],
                        (q as isize, 1),
                        &bv[i * q * r..(i + 1) * q * r],
                        (r as isize, 1),
                        &mut out[i * p * r..(i + 1) * p * r],
                        r as isize,
                        false,
                    );
                }
            }
        }
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                p,
                q,
                r,
                shared_b,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(bias) != [d] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let data = xv
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bv.data).map(|(&a, &b)| a + b))
            .collect();
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v * factor).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale { x: x.0, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| gelu(v)).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu { x: x.0 })
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dt = T::from_f64(d as f64);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut data = Vec::with_capacity(xv.numel());
        let mut rstds = Vec::with_capacity(xv.rows());
        for row in xv.data.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rstd = (var + eps).sqrt().recip();
            rstds.push(rstd);
            data.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
        }
        let shape = xv.shape.clone();
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                rstd: rstds,
            },
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tv.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::InvalidTokenId { id, size: v });
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention with optional relative
    /// position bias. `q` is `[Tq, H*dh]`, `k` and `v` are `[Tk, H*dh]`, and
    /// `bias` is `[H, buckets]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let (out, probs) = attention::forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            &layout,
        )?;
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                bias: bias.map(|b| b.0),
                layout,
                probs,
            },
        ))
    }

    /// Per-position cross-entropy (nats) of `[T, V]` logits. Positions whose
    /// target equals `ignore` get zero loss and zero gradient.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let classes = lv.last_dim();
        if lv.shape.len() != 2 || lv.shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "softmax_ce",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&target) = targets
            .iter()
            .find(|&&t| t != ignore && t as usize >= classes)
        {
            return Err(Error::TargetOutOfRange { target, classes });
        }
        let mut probs = super::softmax_rows(&lv.data, classes);
        let mut losses = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let row = &mut probs[t * classes..(t + 1) * classes];
            if target == ignore {
                row.iter_mut().for_each(|p| *p = T::zero());
                losses.push(T::zero());
            } else {
                // log-sum-exp form keeps saturated rows finite
                let logits_row = lv.row(t);
                let max = logits_row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + logits_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                losses.push(lse - logits_row[target as usize]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![targets.len()],
                data: losses,
            },
            Op::SoftmaxCe {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data.iter().copied().sum();
        self.push(
            Tensor {
                shape: vec![],
                data: vec![total],
            },
            Op::Sum { x: x.0 },
        )
    }

    /// Reverse sweep from `output`, seeded with ones. Gradients are kept for
    /// leaf nodes only.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one(); self.nodes[output.0].value.numel()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                shared_b,
            } => {
                let (av, bv) = (&val(a).data, &val(b).data);
                let ga = slot(grads, a, av.len());
                if shared_b {
                    T::gemm(batch * p, r, q, g, (r as isize, 1), bv, (1, r as isize), ga, q as isize, true);
                } else {
                    for i in 0..batch {
                        T::gemm(
                            p,
                            r,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            (r as isize, 1),
                            &bv[i * q * r..(i + 1) * q * r],
                            (1, r as isize),
                            &mut ga[i * p * q..(i + 1) * p * q],
                            q as isize,
                            true,
                        );
                    }
                }
                let gb = slot(grads, b, bv.len());
                if shared_b {
                    T::gemm(q, batch * p, r, av, (1, q as isize), g, (r as isize, 1), gb, r as isize, true);
                } else {
                    for i in 0..batch {
                        T::gemm(
                            q,
                            p,
                            r,
                            &av[i * p * q..(i + 1) * p * q],
                            (1, q as isize),
                            &g[i * p * r..(i + 1) * p * r],
                            (r as isize, 1),
                            &mut gb[i * q * r..(i + 1) * q * r],
                            r as isize,
                            true,
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                for src in [a, b] {
                    add_into(slot(grads, src, g.len()), g);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&val(a).data, &val(b).data);
                let ga = slot(grads, a, g.len());
                for ((acc, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *acc += gi * y;
                }
                let gb = slot(grads, b, g.len());
                for ((acc, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *acc += gi * x;
                }
            }
            &Op::AddBias { x, bias } => {
                add_into(slot(grads, x, g.len()), g);
                let d = val(bias).numel();
                let gb = slot(grads, bias, d);
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
            &Op::Scale { x, factor } => {
                let gx = slot(grads, x, g.len());
                for (acc, &gi) in gx.iter_mut().zip(g) {
                    *acc += gi * factor;
                }
            }
            &Op::Gelu { x } => {
                let xv = &val(x).data;
                let gx = slot(grads, x, g.len());
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *acc += gi * gelu_grad(xi);
                }
            }
            &Op::Relu { x } => {
                let xv = &val(x).data;
                let gx = slot(grads, x, g.len());
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *acc += gi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = &val(x).data;
                let gv = &val(gain).data;
                let d = gv.len();
                let dt = T::from_f64(d as f64);
                let mut g_gain = vec![T::zero(); d];
                let mut g_bias = vec![T::zero(); d];
                let mut g_x = vec![T::zero(); xv.len()];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = row.iter().copied().sum::<T>() / dt;
                    let s = rstd[r];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * s;
                        dxhat[j] = grow[j] * gv[j];
                        g_gain[j] += grow[j] * xhat[j];
                        g_bias[j] += grow[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat = mean_dxhat / dt;
                    mean_dxhat_xhat = mean_dxhat_xhat / dt;
                    let out = &mut g_x[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                add_into(slot(grads, x, xv.len()), &g_x);
                add_into(slot(grads, gain, d), &g_gain);
                add_into(slot(grads, bias, d), &g_bias);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.last_dim();
                let gt = slot(grads, *table, tv.numel());
                for (row, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut gt[id as usize * d..(id as usize + 1) * d], row);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let bv = bias.map(&val);
                let back = attention::backward(qv, kv, vv, bv, layout, probs, g);
                add_into(slot(grads, *q, qv.numel()), &back.q);
                add_into(slot(grads, *k, kv.numel()), &back.k);
                add_into(slot(grads, *v, vv.numel()), &back.v);
                if let (Some(b), Some(gb)) = (bias, back.bias) {
                    add_into(slot(grads, *b, gb.len()), &gb);
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                ignore,
                probs,
            } => {
                let classes = val(*logits).last_dim();
                let gl = slot(grads, *logits, probs.len());
                for (t, &target) in targets.iter().enumerate() {
                    if target == *ignore {
                        continue;
                    }
                    let row = &mut gl[t * classes..(t + 1) * classes];
                    let p = &probs[t * classes..(t + 1) * classes];
                    for (acc, &pi) in row.iter_mut().zip(p) {
                        *acc += g[t] * pi;
                    }
                    row[target as usize] -= g[t];
                }
            }
            &Op::Sum { x } => {
                let n = val(x).numel();
                let gx = slot(grads, x, n);
                for acc in gx.iter_mut() {
                    *acc += g[0];
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
