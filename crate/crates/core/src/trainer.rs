//! Next-token training with retrieval from the training database.
//!
//! Data order is a pure function of `(seed, step)`, so a run resumed from
//! a checkpoint replays exactly the batches an uninterrupted run would see.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Split, TokenSequence};
use crate::error::{Error, IoContext, Result};
use crate::io_util::write_atomic;
use crate::model::{loss_and_grads, ModelParams, Mode, NeighborBatch, RetroConfig};
use crate::retrieval::{mix64, ChunkDatabase, RetrievalConfig};
use crate::tensor::{adam_step, write_checkpoint, AdamConfig, AdamState, Checkpoint, NamedTensor, Tensor};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub preset: String,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            checkpoint_every: 1000,
            clip_norm: Some(1.0),
            preset: "desk".into(),
        }
    }

    pub fn paper_425m() -> Self {
        Self {
            steps: 140_000,
            batch_size: 16,
            checkpoint_every: 10_000,
            preset: "paper-425m".into(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-425m" => Ok(Self::paper_425m()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One training sequence: a document prefix of at most `L` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the training document list.
    pub doc_index: usize,
    pub doc_id: u32,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub samples: Vec<Sample>,
}

impl Batch {
    /// Row-major `[batch, L]` token matrix, PAD-filled past each sequence.
    pub fn padded(&self, max_len: usize) -> Vec<u32> {
        let mut out = vec![PAD; self.samples.len() * max_len];
        for (row, s) in out.chunks_mut(max_len).zip(&self.samples) {
            row[..s.tokens.len()].copy_from_slice(&s.tokens);
        }
        out
    }
}

/// Seeded per-epoch permutations of the training documents. Batches are
/// consecutive slices of the concatenated epoch stream; a fresh shuffle
/// starts only once every document has been used.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    docs: &'a [TokenSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    next_step: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

pub fn make_batches<'a>(
    docs: &'a [TokenSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchStream<'a>> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch size and max length must be at least 1".into()));
    }
    Ok(BatchStream {
        docs,
        batch_size,
        max_len,
        seed,
        next_step: 0,
        epoch: None,
    })
}

impl BatchStream<'_> {
    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.docs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(epoch)));
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().unwrap().1
    }

    /// The batch for 0-based `step`, independent of what was drawn before.
    pub fn batch(&mut self, step: u64) -> Batch {
        let n = self.docs.len() as u64;
        let mut samples = Vec::with_capacity(self.batch_size);
        for slot in 0..self.batch_size as u64 {
            let pos = step * self.batch_size as u64 + slot;
            let doc_index = self.order(pos / n)[(pos % n) as usize];
            let doc = &self.docs[doc_index];
            samples.push(Sample {
                doc_index,
                doc_id: doc.doc_id,
                tokens: doc.tokens[..doc.tokens.len().min(self.max_len)].to_vec(),
            });
        }
        Batch { step, samples }
    }

    pub fn skip_to(&mut self, step: u64) {
        self.next_step = step;
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch(self.next_step);
        self.next_step += 1;
        Some(b)
    }
}

/// Same-document-filtered neighbors for the truncated prefix of every
/// training document. The database is frozen during training, so these are
/// computed once up front instead of per step.
pub fn precompute_neighbors(
    db: &ChunkDatabase,
    docs: &[TokenSequence],
    max_len: usize,
    retrieval: &RetrievalConfig,
) -> Result<Vec<NeighborBatch>> {
    if !retrieval.exclude_same_doc {
        return Err(Error::Config("training retrieval must exclude same-document neighbors".into()));
    }
    docs.par_iter()
        .map(|doc| {
            let tokens = &doc.tokens[..doc.tokens.len().min(max_len)];
            NeighborBatch::retrieve(db, tokens, doc.doc_id, retrieval)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn fresh(params: ModelParams<f32>) -> Self {
        let adam = AdamState::zeros_like(&params.tensors);
        Self { step: 0, params, adam }
    }

    /// Model tensors plus Adam moments under `adam.m/<name>` and
    /// `adam.v/<name>`.
    pub fn to_checkpoint(&self, cfg: &RetroConfig) -> Checkpoint {
        let mut ckpt = self.params.to_checkpoint(cfg, self.step);
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((name, t), buf) in self.params.names.iter().zip(&self.params.tensors).zip(moments) {
                ckpt.tensors.push(NamedTensor {
                    name: format!("{prefix}/{name}"),
                    tensor: Tensor {
                        shape: t.shape.clone(),
                        data: buf.clone(),
                    },
                });
            }
        }
        ckpt
    }

    /// Restores a training checkpoint; a checkpoint without optimizer state
    /// resumes with zeroed moments.
    pub fn from_checkpoint(cfg: &RetroConfig, ckpt: &Checkpoint) -> Result<Self> {
        let params = ModelParams::from_checkpoint(cfg, ckpt)?;
        let mut adam = AdamState::zeros_like(&params.tensors);
        let has_moments = ckpt.tensors.iter().any(|t| t.name.starts_with("adam."));
        if has_moments {
            for (i, name) in params.names.iter().enumerate() {
                for (prefix, dst) in [("adam.m", &mut adam.m[i]), ("adam.v", &mut adam.v[i])] {
                    let t = ckpt
                        .get(&format!("{prefix}/{name}"))
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks {prefix}/{name}")))?;
                    if t.numel() != dst.len() {
                        return Err(Error::Config(format!("{prefix}/{name} has the wrong size")));
                    }
                    dst.copy_from_slice(&t.data);
                }
            }
        }
        Ok(Self {
            step: ckpt.step,
            params,
            adam,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: TrainState,
    /// `(step, mean token loss)` for every step run in this call.
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step}.rck1")
}

/// Runs steps `state.step + 1 ..= cfg.steps`. Each step draws a batch,
/// evaluates every sequence on its own tape in parallel, averages the
/// summed token losses over non-PAD targets, clips, and applies Adam.
/// Checkpoints go to `out_dir` when one is given.
pub fn train(
    model: &RetroConfig,
    mut state: TrainState,
    db: &ChunkDatabase,
    docs: &[TokenSequence],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    state.params.check(model)?;
    let first = docs.first().ok_or(Error::EmptyCorpus)?;
    if let Some(doc) = docs.iter().find(|d| d.split != Split::Train) {
        return Err(Error::Config(format!("document {} is not in the training split", doc.doc_id)));
    }
    if db.vocab_hash() != first.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: db.vocab_hash(),
            found: first.vocab_hash,
        });
    }
    if let Some(doc) = docs.iter().find(|d| d.vocab_hash != first.vocab_hash) {
        return Err(Error::VocabMismatch {
            expected: first.vocab_hash,
            found: doc.vocab_hash,
        });
    }
    if db.m() != model.m {
        return Err(Error::Config(format!("database m={} but model m={}", db.m(), model.m)));
    }
    let retrieval = RetrievalConfig::exact(model.k);
    let neighbors = precompute_neighbors(db, docs, model.max_len, &retrieval)?;
    let mut stream = make_batches(docs, cfg.batch_size, model.max_len, cfg.seed)?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut report = TrainReport {
        state: state.clone(),
        losses: Vec::new(),
        checkpoints: Vec::new(),
    };
    while state.step < cfg.steps {
        let step = state.step + 1;
        let batch = stream.batch(step - 1);
        for s in &batch.samples {
            if neighbors[s.doc_index].sources.contains(&s.doc_id) {
                return Err(Error::NeighborLeak { doc_id: s.doc_id });
            }
        }
        let results: Vec<(Vec<f32>, Vec<Vec<f32>>)> = batch
            .samples
            .par_iter()
            .map(|s| loss_and_grads(&state.params, model, &s.tokens, Mode::On(&neighbors[s.doc_index])))
            .collect::<Result<_>>()?;
        let targets: usize = batch.samples.iter().map(|s| s.tokens.len().saturating_sub(1)).sum();
        let mut total = 0f64;
        let mut grads: Vec<Vec<f32>> = state.params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        for (losses, g) in &results {
            total += losses.iter().map(|&l| l as f64).sum::<f64>();
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, &x)| *a += x);
            }
        }
        let denom = targets.max(1) as f64;
        let loss = total / denom;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut scale = 1.0 / denom;
        if let Some(clip) = cfg.clip_norm {
            scale *= clip_factor(global_norm(&grads) * scale, clip);
        }
        let scale = scale as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        adam_step(&mut state.params.tensors, &grads, &mut state.adam, &adam_cfg, step)
            .map_err(|e| match e {
                Error::NonFiniteGradient(i) => Error::NonFiniteGradient(format!("{i} at step {step}")),
                other => other,
            })?;
        state.step = step;
        report.losses.push((step, loss));
        if step.is_multiple_of(100) || step == 1 {
            info!("step {step}: loss {loss:.4}");
        }
        let due = (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) || step == cfg.steps;
        if let (true, Some(dir)) = (due, out_dir) {
            let path = dir.join(checkpoint_name(step));
            write_checkpoint(&path, &state.to_checkpoint(model))?;
            report.checkpoints.push(path);
        }
    }
    report.state = state;
    Ok(report)
}

/// L2 norm of all gradient buffers taken together.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt()
}

/// Multiplier that brings a gradient of norm `norm` down to at most `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

pub fn loss_csv(losses: &[(u64, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        let _ = writeln!(s, "{step},{loss}");
    }
    s
}

pub fn write_loss_csv(path: &Path, losses: &[(u64, f64)]) -> Result<()> {
    write_atomic(path, loss_csv(losses).as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let bad = |line: &str| Error::Format {
        kind: "loss csv",
        msg: format!("bad line {line:?}"),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (s, l) = line.split_once(',').ok_or_else(|| bad(line))?;
            Ok((s.parse().map_err(|_| bad(line))?, l.parse().map_err(|_| bad(line))?))
        })
        .collect()
}

/// Mean of the first and last `window` losses.
pub fn window_means(losses: &[(u64, f64)], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let w = window.min(losses.len());
    let mean = |xs: &[(u64, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}
