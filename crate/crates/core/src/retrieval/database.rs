use std::path::Path;

use rayon::prelude::*;

use super::embed::{embed_chunk, l2_distance_sq};
use super::ivf::IvfIndex;
use super::{chunk_document, Chunk, ChunkingConfig, RetrievalConfig, SearchMode};
use crate::corpus::TokenSequence;
use crate::error::{Error, IoContext, Result};
use crate::io_util::{put_f32s, put_u32s, write_atomic, ByteReader};
use crate::tokenizer::PAD;

const MAGIC: &[u8; 4] = b"RDB1";
pub(super) const IVF_MAGIC: &[u8; 4] = b"IVF1";

/// Doc id carried by sentinel neighbors and by queries with no source
/// document.
pub const NO_DOC: u32 = u32::MAX;

/// Key-value store mapping the embedding of a chunk `N` to the pair `[N, F]`,
/// where `F` is the chunk that follows `N` in its document (all PAD at the
/// end of a document).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDatabase {
    m: usize,
    d: usize,
    vocab_hash: u64,
    embed_seed: u64,
    /// `len × 2m` tokens, `N` then `F` per row.
    tokens: Vec<u32>,
    doc_ids: Vec<u32>,
    /// `len × d`, row-major.
    embeddings: Vec<f32>,
    ivf: Option<IvfIndex>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborPair<'a> {
    pub n_tokens: &'a [u32],
    pub f_tokens: &'a [u32],
    pub doc_id: u32,
    pub embedding: &'a [f32],
}

/// A retrieved `[N, F]` pair, or an all-PAD sentinel when fewer than `k`
/// pairs survive filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: Option<usize>,
    pub doc_id: u32,
    /// `N` followed by `F`, length `2m`.
    pub tokens: Vec<u32>,
    pub distance: f64,
}

impl Neighbor {
    pub fn sentinel(m: usize) -> Self {
        Self {
            index: None,
            doc_id: NO_DOC,
            tokens: vec![PAD; 2 * m],
            distance: f64::INFINITY,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.index.is_none()
    }
}

impl ChunkDatabase {
    /// One pair per chunk of every document, in input order.
    pub fn build(
        corpus: &[TokenSequence],
        cfg: ChunkingConfig,
        d: usize,
        embed_seed: u64,
    ) -> Result<Self> {
        let first = corpus.first().ok_or(Error::EmptyCorpus)?;
        if d < 2 {
            return Err(Error::Config(format!("embedding dimension {d} must be at least 2")));
        }
        if let Some(other) = corpus.iter().find(|s| s.vocab_hash != first.vocab_hash) {
            return Err(Error::VocabMismatch {
                expected: first.vocab_hash,
                found: other.vocab_hash,
            });
        }
        let m = cfg.m;
        let per_doc: Vec<(Vec<u32>, Vec<u32>, Vec<f32>)> = corpus
            .par_iter()
            .map(|doc| {
                let chunks = chunk_document(doc, &cfg)?;
                let mut tokens = Vec::with_capacity(chunks.len() * 2 * m);
                let mut embeddings = Vec::with_capacity(chunks.len() * d);
                for (j, c) in chunks.iter().enumerate() {
                    tokens.extend_from_slice(&c.tokens);
                    match chunks.get(j + 1) {
                        Some(next) => tokens.extend_from_slice(&next.tokens),
                        None => tokens.extend(std::iter::repeat_n(PAD, m)),
                    }
                    embeddings.extend(embed_chunk(&c.tokens, d, embed_seed));
                }
                Ok((tokens, vec![doc.doc_id; chunks.len()], embeddings))
            })
            .collect::<Result<_>>()?;
        let mut db = Self {
            m,
            d,
            vocab_hash: first.vocab_hash,
            embed_seed,
            tokens: Vec::new(),
            doc_ids: Vec::new(),
            embeddings: Vec::new(),
            ivf: None,
        };
        for (t, ids, e) in per_doc {
            db.tokens.extend(t);
            db.doc_ids.extend(ids);
            db.embeddings.extend(e);
        }
        Ok(db)
    }

    /// Database over caller-supplied rows; used for fixtures with hand-set
    /// embeddings.
    pub fn from_parts(
        m: usize,
        d: usize,
        vocab_hash: u64,
        embed_seed: u64,
        tokens: Vec<u32>,
        doc_ids: Vec<u32>,
        embeddings: Vec<f32>,
    ) -> Result<Self> {
        let n = doc_ids.len();
        if tokens.len() != n * 2 * m || embeddings.len() != n * d {
            return Err(Error::Shape {
                op: "ChunkDatabase::from_parts",
                lhs: vec![n, 2 * m, d],
                rhs: vec![tokens.len(), embeddings.len()],
            });
        }
        Ok(Self {
            m,
            d,
            vocab_hash,
            embed_seed,
            tokens,
            doc_ids,
            embeddings,
            ivf: None,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn embed_seed(&self) -> u64 {
        self.embed_seed
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn doc_ids(&self) -> &[u32] {
        &self.doc_ids
    }

    pub fn pair_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[i * 2 * self.m..(i + 1) * 2 * self.m]
    }

    pub fn pair(&self, i: usize) -> NeighborPair<'_> {
        let t = self.pair_tokens(i);
        NeighborPair {
            n_tokens: &t[..self.m],
            f_tokens: &t[self.m..],
            doc_id: self.doc_ids[i],
            embedding: self.embedding(i),
        }
    }

    pub fn contains_doc(&self, doc_id: u32) -> bool {
        self.doc_ids.contains(&doc_id)
    }

    pub fn ivf(&self) -> Option<&IvfIndex> {
        self.ivf.as_ref()
    }

    /// Clusters the embeddings with seeded k-means and attaches the index.
    pub fn with_ivf(mut self, n_centroids: usize, iters: usize, seed: u64) -> Result<Self> {
        self.ivf = Some(IvfIndex::build(&self.embeddings, self.d, n_centroids, iters, seed)?);
        Ok(self)
    }

    pub fn embed_query(&self, chunk: &[u32]) -> Vec<f32> {
        embed_chunk(chunk, self.d, self.embed_seed)
    }

    /// `RET(C)`: the `k` pairs nearest to `R(C)`.
    pub fn retrieve(&self, query: &Chunk, cfg: &RetrievalConfig) -> Result<Vec<Neighbor>> {
        let q = self.embed_query(&query.tokens);
        self.retrieve_embedded(&q, query.doc_id, cfg)
    }

    /// Nearest pairs by ascending L2 distance, ties to the lower index.
    /// Pairs from `query_doc` are skipped when `exclude_same_doc` is set;
    /// missing slots are filled with sentinels.
    pub fn retrieve_embedded(
        &self,
        query: &[f32],
        query_doc: u32,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<Neighbor>> {
        cfg.validate()?;
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if query.len() != self.d {
            return Err(Error::Shape {
                op: "retrieve",
                lhs: vec![query.len()],
                rhs: vec![self.d],
            });
        }
        let keep = |i: usize| !(cfg.exclude_same_doc && self.doc_ids[i] == query_doc);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(cfg.k + 1);
        let mut consider = |i: usize| {
            if !keep(i) {
                return;
            }
            let dist = l2_distance_sq(query, self.embedding(i));
            let cand = (dist, i);
            if best.len() == cfg.k && !before(cand, best[cfg.k - 1]) {
                return;
            }
            let at = best.partition_point(|&b| before(b, cand));
            best.insert(at, cand);
            best.truncate(cfg.k);
        };
        match cfg.mode {
            SearchMode::Exact => (0..self.len()).for_each(&mut consider),
            SearchMode::Ivf { nprobe } => {
                let ivf = self.ivf.as_ref().ok_or_else(|| {
                    Error::Config("IVF search requested but the database has no IVF index".into())
                })?;
                for list in ivf.probe(query, nprobe) {
                    ivf.list(list).iter().for_each(|&i| consider(i as usize));
                }
            }
        }
        let mut out: Vec<Neighbor> = best
            .into_iter()
            .map(|(distance, i)| Neighbor {
                index: Some(i),
                doc_id: self.doc_ids[i],
                tokens: self.pair_tokens(i).to_vec(),
                distance,
            })
            .collect();
        out.resize_with(cfg.k, || Neighbor::sentinel(self.m));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            40 + 4 * (self.tokens.len() + self.doc_ids.len() + self.embeddings.len()),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&self.embed_seed.to_le_bytes());
        put_u32s(&mut out, &self.tokens);
        put_u32s(&mut out, &self.doc_ids);
        put_f32s(&mut out, &self.embeddings);
        if let Some(ivf) = &self.ivf {
            out.extend_from_slice(IVF_MAGIC);
            ivf.write(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "database");
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let n = r.u64()? as usize;
        let vocab_hash = r.u64()?;
        let embed_seed = r.u64()?;
        let tokens = r.u32s(n * 2 * m)?;
        let doc_ids = r.u32s(n)?;
        let embeddings = r.f32s(n * d)?;
        let ivf = if r.is_empty() {
            None
        } else if r.take(4)? == IVF_MAGIC {
            Some(IvfIndex::read(&mut r, d, n)?)
        } else {
            return Err(r.error("unknown trailing section"));
        };
        if !r.is_empty() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            m,
            d,
            vocab_hash,
            embed_seed,
            tokens,
            doc_ids,
            embeddings,
            ivf,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

fn before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}
