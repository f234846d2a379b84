#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_lab::model::{loss_and_grads, ModelParams, Mode, NeighborBatch, RetroConfig};
use retro_lab::corpus::{Category, Split, TokenSequence};
use retro_lab::retrieval::{ChunkDatabase, ChunkingConfig};
use retro_lab::tensor::{AttentionLayout, RelativePositions, Tape, Tensor, Var};
use retro_lab::tokenizer::PAD;

pub const FD_STEP: f64 = 1e-5;

pub fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite-difference check of every input element. The graph output
/// is reduced to a scalar with fixed random weights. Returns the max
/// relative error.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |inputs: &[Tensor<f64>], want_grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape.clone();
        let w = weights
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
            })
            .clone();
        let wv = tape.leaf(w);
        let weighted = tape.mul(out, wv).unwrap();
        let total = tape.sum(weighted);
        let value = tape.value(total).data[0];
        let grads = want_grads.then(|| {
            let g = tape.backward(total);
            vars.iter()
                .zip(inputs)
                .map(|(&v, t)| g.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data[j];
            probe[i].data[j] = orig + FD_STEP;
            let (up, _) = eval(&probe, false);
            probe[i].data[j] = orig - FD_STEP;
            let (down, _) = eval(&probe, false);
            probe[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`
/// (layer-norm gains around 1) so that no tensor sits at a special point.
pub fn scramble(params: &mut ModelParams<f64>, rng: &mut impl Rng, scale: f64) {
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        let center = if name.ends_with(".ln.g") { 1.0 } else { 0.0 };
        t.data.iter_mut().for_each(|x| *x = center + rng.random_range(-scale..scale));
    }
}

/// Central finite differences of the summed token loss on `per_tensor`
/// coordinates of every parameter tensor: the largest-gradient coordinate
/// plus random ones. Returns (max relative error, coordinates checked).
pub fn model_fd_check(
    params: &ModelParams<f64>,
    cfg: &RetroConfig,
    tokens: &[u32],
    mode: Mode<'_>,
    per_tensor: usize,
    seed: u64,
) -> (f64, usize) {
    let total = |p: &ModelParams<f64>| -> f64 {
        let (losses, _) = loss_and_grads(p, cfg, tokens, mode).unwrap();
        losses.iter().sum()
    };
    let (_, grads) = loss_and_grads(params, cfg, tokens, mode).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (ti, g) in grads.iter().enumerate() {
        let argmax = (0..g.len())
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap();
        let mut coords = vec![argmax];
        coords.extend((1..per_tensor).map(|_| rng.random_range(0..g.len())));
        for j in coords {
            let orig = probe.tensors[ti].data[j];
            probe.tensors[ti].data[j] = orig + FD_STEP;
            let up = total(&probe);
            probe.tensors[ti].data[j] = orig - FD_STEP;
            let down = total(&probe);
            probe.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(g[j], numeric);
            if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    (worst, checked)
}

/// Worst finite-difference error of every tape operation over at least 20
/// random shapes each, as `(op, max relative error, cases)`.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        out.push((name, errs.iter().copied().fold(0.0, f64::max), errs.len()));
    };
    const CASES: usize = 20;
    let dims = |rng: &mut ChaCha8Rng| (rng.random_range(1..6), rng.random_range(2..8));

    let mut errs = Vec::new();
    for i in 0..CASES {
        let (p, q, r) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let b = rng.random_range(1..4);
        let (sa, sb) = match i % 3 {
            0 => (vec![p, q], vec![q, r]),
            1 => (vec![b, p, q], vec![q, r]),
            _ => (vec![b, p, q], vec![b, q, r]),
        };
        let inputs = [rand_tensor(&mut rng, sa), rand_tensor(&mut rng, sb)];
        errs.push(fd_check(&inputs, 1, |t, v| t.matmul(v[0], v[1]).unwrap()));
    }
    record("matmul", errs);

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Var;
    let binaries: [(&'static str, Binary); 2] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
    ];
    for (name, op) in binaries {
        let errs = (0..CASES)
            .map(|_| {
                let (r, d) = dims(&mut rng);
                let inputs = [rand_tensor(&mut rng, vec![r, d]), rand_tensor(&mut rng, vec![r, d])];
                fd_check(&inputs, 2, |t, v| op(t, v[0], v[1]))
            })
            .collect();
        record(name, errs);
    }

    let errs = (0..CASES)
        .map(|_| {
            let (r, d) = dims(&mut rng);
            let inputs = [rand_tensor(&mut rng, vec![r, d]), rand_tensor(&mut rng, vec![d])];
            fd_check(&inputs, 3, |t, v| t.add_bias(v[0], v[1]).unwrap())
        })
        .collect();
    record("add_bias", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (r, d) = dims(&mut rng);
            let factor = rng.random_range(-2.0..2.0);
            fd_check(&[rand_tensor(&mut rng, vec![r, d])], 4, |t, v| t.scale(v[0], factor))
        })
        .collect();
    record("scale", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (r, d) = dims(&mut rng);
            fd_check(&[rand_tensor(&mut rng, vec![r, d])], 5, |t, v| t.gelu(v[0]))
        })
        .collect();
    record("gelu", errs);

    let errs = (0..CASES)
        .map(|_| {
            // keep inputs away from the kink at zero
            let (r, d) = dims(&mut rng);
            let x = Tensor::from_fn(vec![r, d], |_| {
                let mag = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { mag } else { -mag }
            });
            fd_check(&[x], 6, |t, v| t.relu(v[0]))
        })
        .collect();
    record("relu", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (r, d) = dims(&mut rng);
            let inputs = [
                rand_tensor(&mut rng, vec![r, d]),
                rand_tensor(&mut rng, vec![d]),
                rand_tensor(&mut rng, vec![d]),
            ];
            fd_check(&inputs, 7, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())
        })
        .collect();
    record("layer_norm", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (v, d) = (rng.random_range(2..8), rng.random_range(1..6));
            let ids: Vec<u32> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..v as u32)).collect();
            fd_check(&[rand_tensor(&mut rng, vec![v, d])], 8, |t, x| t.embedding(x[0], &ids).unwrap())
        })
        .collect();
    record("embedding", errs);

    let errs = (0..CASES)
        .map(|_| {
            let heads = rng.random_range(1..4);
            let dh = rng.random_range(1..4);
            let (tq, tk) = (rng.random_range(1..6), rng.random_range(1..6));
            let row_keys = (0..tq)
                .map(|_| {
                    let lo = rng.random_range(0..tk);
                    lo..rng.random_range(lo..=tk)
                })
                .collect();
            let key_valid = (0..tk).map(|_| rng.random_bool(0.8)).collect();
            let relative = RelativePositions {
                query_pos: (0..tq as i64).collect(),
                key_pos: (0..tk as i64).collect(),
                min_offset: -(tq as i64 - 1),
                buckets: tq + tk - 1,
            };
            let layout = Arc::new(
                AttentionLayout {
                    row_keys,
                    key_valid,
                    ..AttentionLayout::full(heads, tq, tk)
                }
                .with_relative(relative),
            );
            let w = heads * dh;
            let inputs = [
                rand_tensor(&mut rng, vec![tq, w]),
                rand_tensor(&mut rng, vec![tk, w]),
                rand_tensor(&mut rng, vec![tk, w]),
                rand_tensor(&mut rng, vec![heads, tq + tk - 1]),
            ];
            fd_check(&inputs, 9, |t, v| t.attention(v[0], v[1], v[2], Some(v[3]), layout.clone()).unwrap())
        })
        .collect();
    record("attention", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (t, v) = (rng.random_range(1..8), rng.random_range(2..12));
            let targets: Vec<u32> = (0..t).map(|_| rng.random_range(0..v as u32)).collect();
            fd_check(&[rand_tensor(&mut rng, vec![t, v])], 10, |tape, x| {
                tape.softmax_ce(x[0], &targets, 0).unwrap()
            })
        })
        .collect();
    record("softmax_ce", errs);

    let errs = (0..CASES)
        .map(|_| {
            let (r, d) = dims(&mut rng);
            fd_check(&[rand_tensor(&mut rng, vec![r, d])], 11, |t, v| t.sum(v[0]))
        })
        .collect();
    record("sum", errs);
    out
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(4..vocab as u32)).collect()
}

/// Random `[N, F]` neighbors for `blocks` chunks, some with PAD tails.
pub fn random_neighbors(rng: &mut impl Rng, cfg: &RetroConfig, blocks: usize) -> NeighborBatch {
    let n = 2 * cfg.m;
    let mut tokens = Vec::new();
    let mut valid = Vec::new();
    for _ in 0..blocks * cfg.k {
        // a short tail of PAD mimics F at the end of a document
        let pad_from = if rng.random_bool(0.3) { rng.random_range(cfg.m..n) } else { n };
        tokens.extend((0..n).map(|j| if j < pad_from { rng.random_range(4..cfg.vocab_size as u32) } else { PAD }));
        valid.push(true);
    }
    NeighborBatch::new(cfg.m, cfg.k, tokens, valid).unwrap()
}

/// Weights with enough spread that cross-attention visibly moves logits.
pub fn lively_params(cfg: &RetroConfig, seed: u64) -> ModelParams<f32> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    scramble(&mut p, &mut ChaCha8Rng::seed_from_u64(seed), 0.2);
    p.cast()
}

/// Database of `n` pairs with uniform random embeddings; about three pairs
/// per document.
pub fn random_pair_db(rng: &mut impl Rng, n: usize, d: usize, m: usize) -> ChunkDatabase {
    let docs = n.div_ceil(3).max(1) as u32;
    let doc_ids = (0..n).map(|i| (i as u32 * 7) % docs).collect();
    let tokens = (0..n * 2 * m).map(|i| i as u32 % 100 + 4).collect();
    let embeddings = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    ChunkDatabase::from_parts(m, d, 1, 0, tokens, doc_ids, embeddings).unwrap()
}

/// Full scan with f64 distances, sorted by (distance, index).
pub fn brute_force_knn(db: &ChunkDatabase, q: &[f32], doc: u32, k: usize, exclude: bool) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..db.len())
        .filter(|&i| !(exclude && db.doc_ids()[i] == doc))
        .map(|i| {
            let d: f64 = db
                .embedding(i)
                .iter()
                .zip(q)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Tries every suffix length from longest to shortest against every window
/// of every neighbor.
pub fn brute_force_bucket(seq: &[u32], i: usize, m: usize, neighbors: &[Vec<u32>]) -> usize {
    if i.div_ceil(m) == 1 {
        return 0;
    }
    for n in (1..=i.min(2 * m)).rev() {
        let suffix = &seq[i - n..i];
        if suffix.contains(&PAD) {
            continue;
        }
        if neighbors.iter().any(|nb| nb.windows(n).any(|w| w == suffix)) {
            return n;
        }
    }
    0
}

/// A sequence and neighbors over a tiny alphabet (so matches are common),
/// with PAD tails and copied spans.
pub fn bucket_fixture(rng: &mut impl Rng) -> (Vec<u32>, usize, Vec<Vec<u32>>) {
    let m = rng.random_range(2..=8);
    let k = rng.random_range(1..=3);
    let len = rng.random_range(1..=5 * m);
    let alphabet = rng.random_range(2..6u32);
    let mut seq: Vec<u32> = (0..len).map(|_| rng.random_range(0..alphabet) + 4).collect();
    if rng.random_bool(0.2) {
        let tail = rng.random_range(0..=len.min(3));
        seq[len - tail..].iter_mut().for_each(|t| *t = PAD);
    }
    let neighbors = (0..k)
        .map(|_| {
            let mut nb: Vec<u32> = (0..2 * m).map(|_| rng.random_range(0..alphabet) + 4).collect();
            if rng.random_bool(0.4) && len > 1 {
                // copy a span of the sequence so long overlaps occur
                let a = rng.random_range(0..len);
                let b = rng.random_range(a..=len.min(a + 2 * m));
                let at = rng.random_range(0..=2 * m - (b - a));
                nb[at..at + b - a].copy_from_slice(&seq[a..b]);
            }
            if rng.random_bool(0.3) {
                let from = rng.random_range(m..2 * m);
                nb[from..].iter_mut().for_each(|t| *t = PAD);
            }
            nb
        })
        .collect();
    (seq, m, neighbors)
}

/// Database over `docs` random 40-token training documents.
pub fn random_token_db(seed: u64, docs: usize, cfg: &RetroConfig) -> ChunkDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<_> = (0..docs as u32)
        .map(|i| TokenSequence {
            tokens: random_tokens(&mut rng, 40, cfg.vocab_size),
            doc_id: i,
            category: Category::Synthetic,
            split: Split::Train,
            vocab_hash: 1,
        })
        .collect();
    ChunkDatabase::build(&corpus, ChunkingConfig::new(cfg.m).unwrap(), 32, seed).unwrap()
}
