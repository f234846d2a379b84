use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::overlap::overlap_bucket;
use crate::corpus::{Category, Split, TokenSequence};
use crate::error::{Error, IoContext, Result};
use crate::io_util::write_atomic;
use crate::model::{forward_off, forward_on, ModelParams, NeighborBatch, RetroConfig};
use crate::retrieval::{ChunkDatabase, RetrievalConfig};
use crate::tokenizer::PAD;

/// Loss of one validation token under both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossRecord {
    pub doc_id: u32,
    /// 1-based position of the token in its (truncated) sequence.
    pub pos: usize,
    pub token: u32,
    pub category: Category,
    /// Nats with retrieval.
    pub loss_on: f64,
    /// Nats with CCA bypassed.
    pub loss_off: f64,
    /// Consecutive-overlap bucket `n`.
    pub bucket: usize,
    /// `loss_off - loss_on`; positive when retrieval helps.
    pub delta: f64,
}

pub const RECORD_HEADER: &str = "doc_id,pos,token,category,loss_on,loss_off,bucket,delta";

/// Scores every validation token (position 2 onward, PAD excluded) with
/// RETRO[on] and RETRO[off] on identical weights. Neighbors come from the
/// train∪validation database with same-document filtering and also set each
/// token's overlap bucket. Records are ordered by `(doc_id, pos)`.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &RetroConfig,
    db: &ChunkDatabase,
    val: &[TokenSequence],
) -> Result<Vec<TokenLossRecord>> {
    if val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(doc) = val.iter().find(|d| d.split != Split::Validation) {
        return Err(Error::Config(format!("document {} is not in the validation split", doc.doc_id)));
    }
    if let Some(doc) = val.iter().find(|d| d.vocab_hash != db.vocab_hash()) {
        return Err(Error::VocabMismatch {
            expected: db.vocab_hash(),
            found: doc.vocab_hash,
        });
    }
    if db.m() != cfg.m {
        return Err(Error::Config(format!("database m={} but model m={}", db.m(), cfg.m)));
    }
    let in_db: HashSet<u32> = db.doc_ids().iter().copied().collect();
    if val.iter().any(|d| !in_db.contains(&d.doc_id)) {
        return Err(Error::ValidationPairsAbsent);
    }
    let retrieval = RetrievalConfig::exact(cfg.k);
    let mut order: Vec<&TokenSequence> = val.iter().collect();
    order.sort_by_key(|d| d.doc_id);
    let per_doc: Vec<Vec<TokenLossRecord>> = order
        .par_iter()
        .map(|doc| {
            let tokens = &doc.tokens[..doc.tokens.len().min(cfg.max_len)];
            let nb = NeighborBatch::retrieve(db, tokens, doc.doc_id, &retrieval)?;
            let on = forward_on(params, cfg, tokens, &nb)?;
            let off = forward_off(params, cfg, tokens)?;
            let mut out = Vec::with_capacity(tokens.len());
            for pos in 2..=tokens.len() {
                let token = tokens[pos - 1];
                if token == PAD {
                    continue;
                }
                let chunk = pos.div_ceil(cfg.m);
                let bucket = if chunk == 1 {
                    0
                } else {
                    overlap_bucket(tokens, pos, cfg.m, nb.block(chunk - 2))?
                };
                let loss_on = on.losses[pos - 2] as f64;
                let loss_off = off.losses[pos - 2] as f64;
                out.push(TokenLossRecord {
                    doc_id: doc.doc_id,
                    pos,
                    token,
                    category: doc.category,
                    loss_on,
                    loss_off,
                    bucket,
                    delta: loss_off - loss_on,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

pub fn records_csv(records: &[TokenLossRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 48);
    s.push_str(RECORD_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.doc_id, r.pos, r.token, r.category, r.loss_on, r.loss_off, r.bucket, r.delta
        );
    }
    s
}

pub fn write_records(path: &Path, records: &[TokenLossRecord]) -> Result<()> {
    write_atomic(path, records_csv(records).as_bytes())
}

pub fn parse_records(text: &str) -> Result<Vec<TokenLossRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RECORD_HEADER) {
        return Err(Error::Format {
            kind: "records csv",
            msg: format!("expected header {RECORD_HEADER:?}"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Format {
                kind: "records csv",
                msg: format!("line {}: {what}", n + 2),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(f[i]));
            Ok(TokenLossRecord {
                doc_id: f[0].parse().map_err(|_| bad(f[0]))?,
                pos: f[1].parse().map_err(|_| bad(f[1]))?,
                token: f[2].parse().map_err(|_| bad(f[2]))?,
                category: f[3].parse().map_err(|_| bad(f[3]))?,
                loss_on: num(4)?,
                loss_off: num(5)?,
                bucket: f[6].parse().map_err(|_| bad(f[6]))?,
                delta: num(7)?,
            })
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<TokenLossRecord>> {
    parse_records(&std::fs::read_to_string(path).at(path)?)
}
