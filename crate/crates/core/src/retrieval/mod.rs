//! Chunking, chunk embeddings, and the `[N, F]` neighbor database with exact
//! and IVF k-nearest-neighbor search.

mod database;
mod embed;
mod ivf;

pub use database::{ChunkDatabase, Neighbor, NeighborPair, NO_DOC};
pub use embed::{embed_chunk, l2_distance_sq, mix64};
pub use ivf::IvfIndex;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkingConfig {
    /// Tokens per chunk.
    pub m: usize,
}

impl ChunkingConfig {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("chunk size {m} must be at least 2")));
        }
        Ok(Self { m })
    }

    /// Length of a neighbor `[N, F]`.
    pub fn neighbor_len(&self) -> usize {
        2 * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: Vec<u32>,
    pub doc_id: u32,
    /// 0-based position of the chunk within its document.
    pub index_in_doc: usize,
}

/// 1-based chunk index of 1-based token position `i`: `ceil(i / m)`.
pub fn chunk_index(i: usize, m: usize) -> Result<usize> {
    if i == 0 {
        return Err(Error::ZeroPosition);
    }
    if m == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    Ok(i.div_ceil(m))
}

/// Splits a document into `ceil(len / m)` chunks, PAD-padding the tail.
pub fn chunk_document(doc: &TokenSequence, cfg: &ChunkingConfig) -> Result<Vec<Chunk>> {
    if doc.tokens.is_empty() {
        return Err(Error::EmptyDocument(doc.doc_id));
    }
    Ok(doc
        .tokens
        .chunks(cfg.m)
        .enumerate()
        .map(|(j, c)| {
            let mut tokens = c.to_vec();
            tokens.resize(cfg.m, PAD);
            Chunk {
                tokens,
                doc_id: doc.doc_id,
                index_in_doc: j,
            }
        })
        .collect())
}

/// Inverse of [`chunk_document`]: concatenates chunks and drops tail padding.
pub fn dechunk(chunks: &[Chunk]) -> Vec<u32> {
    let mut out: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.iter().copied()).collect();
    while out.last() == Some(&PAD) {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Ivf { nprobe: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalConfig {
    pub k: usize,
    pub exclude_same_doc: bool,
    pub mode: SearchMode,
}

impl RetrievalConfig {
    pub fn exact(k: usize) -> Self {
        Self {
            k,
            exclude_same_doc: true,
            mode: SearchMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let SearchMode::Ivf { nprobe: 0 } = self.mode {
            return Err(Error::Config("nprobe must be at least 1".into()));
        }
        Ok(())
    }
}
