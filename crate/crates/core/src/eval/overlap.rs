//! Consecutive-overlap bucketing: how many tokens, ending at `x_i`, a
//! prediction shares verbatim with one of the neighbors it conditioned on.

use crate::error::{Error, Result};
use crate::tokenizer::PAD;

/// `n` such that `x_{i-n+1..=i}` is the longest suffix ending at 1-based
/// position `i` that occurs contiguously inside some neighbor, capped at
/// `2m` and at the available left context. Positions in the first chunk
/// have no neighbors and return 0; PAD never matches.
///
/// `neighbors` are the `[N, F]` pairs retrieved for chunk `c(i) - 1`.
pub fn overlap_bucket<'a>(
    sequence: &[u32],
    i: usize,
    m: usize,
    neighbors: impl IntoIterator<Item = &'a [u32]>,
) -> Result<usize> {
    if i == 0 {
        return Err(Error::ZeroPosition);
    }
    if i > sequence.len() {
        return Err(Error::PositionOutOfRange {
            pos: i,
            len: sequence.len(),
        });
    }
    if i <= m {
        return Ok(0);
    }
    let cap = i.min(2 * m);
    // 0-based index of x_i
    let end = i - 1;
    let mut best = 0;
    for nb in neighbors {
        for s in 0..nb.len() {
            // extend leftwards from the alignment of x_i with nb[s]
            let mut len = 0;
            while len < cap && len <= s {
                let (a, b) = (sequence[end - len], nb[s - len]);
                if a != b || a == PAD {
                    break;
                }
                len += 1;
            }
            best = best.max(len);
            if best == cap {
                return Ok(best);
            }
        }
    }
    Ok(best)
}
