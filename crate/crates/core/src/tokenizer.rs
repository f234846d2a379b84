//! Byte-level BPE tokenizer.
//!
//! Ids 0..4 are reserved specials, ids 4..260 map raw bytes, and every id
//! past that is a learned merge. Any byte string can be encoded, so `encode`
//! is total and `decode(encode(s)) == s` for valid UTF-8.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::hashing::hash64;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const BYTE_LEVEL_SIZE: usize = 256 + NUM_SPECIALS as usize;

const HEADER: &str = "bytebpe v1";

/// Id of a raw byte.
pub const fn byte_id(b: u8) -> u32 {
    b as u32 + NUM_SPECIALS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    /// Byte expansion of every id; empty for specials.
    pieces: Vec<Vec<u8>>,
}

impl Vocab {
    /// Pure byte-level vocabulary with no merges.
    pub fn byte_level() -> Self {
        let mut pieces = vec![Vec::new(); NUM_SPECIALS as usize];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        Self {
            merges: Vec::new(),
            pieces,
        }
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut vocab = Self::byte_level();
        for (left, right) in merges {
            vocab.push_merge(left, right)?;
        }
        Ok(vocab)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> Result<u32> {
        let next = self.pieces.len() as u32;
        for id in [left, right] {
            if id < NUM_SPECIALS || id >= next {
                return Err(Error::InvalidVocab(format!(
                    "merge ({left}, {right}) refers to undefined symbol {id}"
                )));
            }
        }
        let mut piece = self.pieces[left as usize].clone();
        piece.extend_from_slice(&self.pieces[right as usize]);
        self.pieces.push(piece);
        self.merges.push((left, right));
        Ok(next)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Bytes produced by decoding a single id.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(byte_id).collect();
        for (rank, &(left, right)) in self.merges.iter().enumerate() {
            if ids.len() < 2 {
                break;
            }
            let merged = BYTE_LEVEL_SIZE as u32 + rank as u32;
            merge_pair(&mut ids, left, right, merged);
        }
        ids
    }

    /// Decodes ids back to text. Specials decode to nothing; byte sequences
    /// that are not valid UTF-8 (only possible for hand-built id lists) are
    /// replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::InvalidTokenId {
                id,
                size: self.size(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.size());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { kind: "vocab", msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::parse::<u32>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => return Err(bad(format!("bad merge on line {}", n + 2))),
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != size {
            return Err(bad(format!(
                "header declares {size} entries, merges define {}",
                vocab.size()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).at(path)?)
    }

    /// Stable 64-bit fingerprint of the serialized vocab.
    pub fn hash(&self) -> u64 {
        hash64(self.to_text().as_bytes())
    }
}

fn merge_pair(ids: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < ids.len() {
        if read + 1 < ids.len() && ids[read] == left && ids[read + 1] == right {
            ids[write] = merged;
            read += 2;
        } else {
            ids[write] = ids[read];
            read += 1;
        }
        write += 1;
    }
    ids.truncate(write);
}

/// Pair counts; dense for small vocabularies, hashed otherwise.
enum PairCounts {
    Dense { width: usize, counts: Vec<u64> },
    Sparse(HashMap<(u32, u32), u64>),
}

impl PairCounts {
    fn new(target_size: usize) -> Self {
        if target_size <= 2048 {
            Self::Dense {
                width: target_size,
                counts: vec![0; target_size * target_size],
            }
        } else {
            Self::Sparse(HashMap::new())
        }
    }

    fn clear(&mut self) {
        match self {
            Self::Dense { counts, .. } => counts.iter_mut().for_each(|c| *c = 0),
            Self::Sparse(map) => map.clear(),
        }
    }

    fn add(&mut self, l: u32, r: u32) {
        match self {
            Self::Dense { width, counts } => counts[l as usize * *width + r as usize] += 1,
            Self::Sparse(map) => *map.entry((l, r)).or_default() += 1,
        }
    }

    /// Most frequent pair; ties go to the smallest (left, right).
    fn best(&self) -> Option<(u32, u32)> {
        match self {
            Self::Dense { width, counts } => {
                let mut best: Option<(usize, u64)> = None;
                for (i, &c) in counts.iter().enumerate() {
                    if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
                        best = Some((i, c));
                    }
                }
                best.map(|(i, _)| ((i / width) as u32, (i % width) as u32))
            }
            Self::Sparse(map) => map
                .iter()
                .filter(|(_, &c)| c > 0)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
                .map(|(&p, _)| p),
        }
    }
}

/// Learns `target_size - 260` merges from `corpus` by repeatedly merging the
/// most frequent adjacent pair. Pairs never cross document boundaries.
pub fn train_bpe<I, S>(corpus: I, target_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_size < BYTE_LEVEL_SIZE {
        return Err(Error::InvalidVocab(format!(
            "target size {target_size} below byte-level minimum {BYTE_LEVEL_SIZE}"
        )));
    }
    let mut seqs: Vec<Vec<u32>> = corpus
        .into_iter()
        .map(|t| t.as_ref().bytes().map(byte_id).collect())
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab = Vocab::byte_level();
    let mut counts = PairCounts::new(target_size);
    while vocab.size() < target_size {
        counts.clear();
        for seq in &seqs {
            for w in seq.windows(2) {
                counts.add(w[0], w[1]);
            }
        }
        let Some((l, r)) = counts.best() else {
            return Err(Error::InvalidVocab(format!(
                "corpus exhausted after {} merges; cannot reach {target_size} entries",
                vocab.merges.len()
            )));
        };
        let merged = vocab.push_merge(l, r)?;
        for seq in &mut seqs {
            merge_pair(seq, l, r, merged);
        }
    }
    Ok(vocab)
}
