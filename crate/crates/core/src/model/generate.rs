use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RetroConfig;
use super::forward::{forward, Mode};
use super::neighbors::NeighborBatch;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::retrieval::{ChunkDatabase, RetrievalConfig, NO_DOC};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Autoregressive decoding. With a database, `RET(C_u)` is fetched once
/// chunk `u` is complete, i.e. exactly when decoding crosses into chunk
/// `u + 1`; without one the model runs with CCA bypassed. Generation stops
/// early at the maximum sequence length.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &RetroConfig,
    db: Option<&ChunkDatabase>,
    retrieval: &RetrievalConfig,
    prompt: &[u32],
    steps: usize,
    sampling: Sampling,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Config("generation needs a non-empty prompt".into()));
    }
    if prompt.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: prompt.len(),
            max: cfg.max_len,
        });
    }
    if let Some(db) = db {
        if db.m() != cfg.m {
            return Err(Error::Config(format!(
                "database chunk length {} differs from model m={}",
                db.m(),
                cfg.m
            )));
        }
    }
    let mut rng = match sampling {
        Sampling::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::Config("temperature must be positive".into()));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampling::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    let mut neighbors: Option<NeighborBatch> = None;
    for _ in 0..steps {
        if tokens.len() >= cfg.max_len {
            break;
        }
        let complete = tokens.len() / cfg.m;
        if let Some(db) = db {
            let stale = neighbors.as_ref().is_none_or(|nb| nb.blocks() < complete);
            if stale {
                // only the newly completed chunk is queried; earlier blocks are kept
                let mut nb = neighbors.take().unwrap_or_else(|| NeighborBatch::sentinels(0, cfg.m, retrieval.k));
                let start = nb.blocks() * cfg.m;
                let fresh =
                    NeighborBatch::retrieve_chunks(db, &tokens[start..complete * cfg.m], NO_DOC, retrieval)?;
                nb.extend(fresh);
                neighbors = Some(nb);
            }
        }
        let mode = match (&neighbors, db) {
            (Some(nb), _) => Mode::On(nb),
            (None, Some(_)) => unreachable!("neighbors are fetched whenever a database is given"),
            (None, None) => Mode::Off,
        };
        let out = forward(params, cfg, &tokens, mode)?;
        let last = out.logits.row(tokens.len() - 1);
        let next = match (&mut rng, sampling) {
            (Some(rng), Sampling::Temperature { temperature, .. }) => sample(last, temperature, rng),
            _ => argmax(last),
        };
        tokens.push(next);
    }
    Ok(tokens)
}

/// Lowest index wins ties.
fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample<T: Scalar>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(Scalar::to_f64(*v)));
    let weights: Vec<f64> = row
        .iter()
        .map(|v| ((Scalar::to_f64(*v) - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (row.len() - 1) as u32
}
