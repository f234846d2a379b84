use crate::error::{Error, Result};
use crate::retrieval::{ChunkDatabase, Neighbor, RetrievalConfig, NO_DOC};
use crate::tokenizer::PAD;

/// Retrieved `[N, F]` pairs for one sequence. Block `b` (0-based) holds
/// `RET(C_{b+1})` and conditions the positions that predict tokens of
/// chunk `b + 2`, so a sequence with `n` chunks carries `n - 1` blocks and
/// the first chunk has none.
///
/// When `T` is a multiple of `m` the final position predicts the first
/// token of a chunk that is not in the sequence yet. It bypasses
/// cross-attention unless the batch carries one extra block for the last
/// chunk ([`NeighborBatch::retrieve_chunks`] over every complete chunk),
/// which is what generation does.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborBatch {
    pub m: usize,
    pub k: usize,
    /// `blocks × k × 2m` tokens.
    pub tokens: Vec<u32>,
    /// `blocks × k`; `false` marks a sentinel pair.
    pub valid: Vec<bool>,
    /// Source document of each pair (`NO_DOC` when unknown or sentinel).
    pub sources: Vec<u32>,
}

impl NeighborBatch {
    /// Blocks needed by a sequence of `len` tokens (chunks after the first).
    pub fn blocks_for_len(len: usize, m: usize) -> usize {
        len.div_ceil(m).saturating_sub(1)
    }

    pub fn new(m: usize, k: usize, tokens: Vec<u32>, valid: Vec<bool>) -> Result<Self> {
        if !valid.len().is_multiple_of(k.max(1)) || tokens.len() != valid.len() * 2 * m {
            return Err(Error::NeighborMisaligned(format!(
                "{} tokens and {} validity flags for k={k}, m={m}",
                tokens.len(),
                valid.len()
            )));
        }
        let sources = vec![NO_DOC; valid.len()];
        Ok(Self {
            m,
            k,
            tokens,
            valid,
            sources,
        })
    }

    pub fn from_neighbors(m: usize, k: usize, blocks: &[Vec<Neighbor>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(blocks.len() * k * 2 * m);
        let mut valid = Vec::with_capacity(blocks.len() * k);
        let mut sources = Vec::with_capacity(blocks.len() * k);
        for block in blocks {
            if block.len() != k {
                return Err(Error::NeighborMisaligned(format!(
                    "block has {} neighbors, expected {k}",
                    block.len()
                )));
            }
            for n in block {
                if n.tokens.len() != 2 * m {
                    return Err(Error::NeighborMisaligned(format!(
                        "neighbor has {} tokens, expected {}",
                        n.tokens.len(),
                        2 * m
                    )));
                }
                tokens.extend_from_slice(&n.tokens);
                valid.push(!n.is_sentinel());
                sources.push(n.doc_id);
            }
        }
        Ok(Self {
            m,
            k,
            tokens,
            valid,
            sources,
        })
    }

    /// Every pair a masked sentinel.
    pub fn sentinels(blocks: usize, m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            tokens: vec![PAD; blocks * k * 2 * m],
            valid: vec![false; blocks * k],
            sources: vec![NO_DOC; blocks * k],
        }
    }

    /// `RET(C_u)` for every chunk but the last.
    pub fn retrieve(
        db: &ChunkDatabase,
        tokens: &[u32],
        doc_id: u32,
        cfg: &RetrievalConfig,
    ) -> Result<Self> {
        let blocks = Self::blocks_for_len(tokens.len(), db.m());
        Self::retrieve_chunks(db, &tokens[..blocks * db.m()], doc_id, cfg)
    }

    /// `RET(C_u)` for every complete chunk of `tokens`.
    pub fn retrieve_chunks(
        db: &ChunkDatabase,
        tokens: &[u32],
        doc_id: u32,
        cfg: &RetrievalConfig,
    ) -> Result<Self> {
        let m = db.m();
        let blocks: Vec<Vec<Neighbor>> = tokens
            .chunks_exact(m)
            .map(|chunk| db.retrieve_embedded(&db.embed_query(chunk), doc_id, cfg))
            .collect::<Result<_>>()?;
        Self::from_neighbors(m, cfg.k, &blocks)
    }

    /// Appends the blocks of `other`.
    pub fn extend(&mut self, other: NeighborBatch) {
        self.tokens.extend(other.tokens);
        self.valid.extend(other.valid);
        self.sources.extend(other.sources);
    }

    pub fn blocks(&self) -> usize {
        self.valid.len() / self.k
    }

    pub fn pair_tokens(&self, block: usize, j: usize) -> &[u32] {
        let n = 2 * self.m;
        let at = (block * self.k + j) * n;
        &self.tokens[at..at + n]
    }

    /// The `k` pairs of one block.
    pub fn block(&self, block: usize) -> impl Iterator<Item = &[u32]> {
        (0..self.k).map(move |j| self.pair_tokens(block, j))
    }

    pub fn check_for(&self, len: usize, m: usize, k: usize) -> Result<()> {
        let want = Self::blocks_for_len(len, m);
        let extended = len / m;
        if self.m != m || self.k != k || (self.blocks() != want && self.blocks() != extended) {
            return Err(Error::NeighborMisaligned(format!(
                "sequence of {len} tokens needs {want} blocks of k={k}, m={m}; got {} blocks of k={}, m={}",
                self.blocks(),
                self.k,
                self.m
            )));
        }
        Ok(())
    }
}
