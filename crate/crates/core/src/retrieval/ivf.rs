//! Inverted-file index: k-means centroids plus one posting list per
//! centroid. A query scans only the lists of its `nprobe` nearest centroids.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embed::l2_distance_sq;
use crate::error::{Error, Result};
use crate::io_util::{put_f32s, put_u32s, ByteReader};

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    d: usize,
    /// `n_centroids × d`.
    centroids: Vec<f32>,
    /// Row indices per centroid, ascending.
    lists: Vec<Vec<u32>>,
}

impl IvfIndex {
    /// Lloyd iterations from `n_centroids` distinct seeded rows. Clusters
    /// that empty out keep their previous centroid.
    pub fn build(
        embeddings: &[f32],
        d: usize,
        n_centroids: usize,
        iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = embeddings.len().checked_div(d).unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyDatabase);
        }
        if n_centroids == 0 || n_centroids > n {
            return Err(Error::Config(format!(
                "n_centroids must be in 1..={n}, got {n_centroids}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, n, n_centroids).into_vec();
        picks.sort_unstable();
        let mut centroids: Vec<f32> = picks
            .iter()
            .flat_map(|&i| embeddings[i * d..(i + 1) * d].iter().copied())
            .collect();
        let row = |i: usize| &embeddings[i * d..(i + 1) * d];
        let mut assign = vec![0usize; n];
        for _ in 0..iters {
            for (i, a) in assign.iter_mut().enumerate() {
                *a = nearest(&centroids, d, row(i));
            }
            let mut sums = vec![0f64; n_centroids * d];
            let mut counts = vec![0usize; n_centroids];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                    *s += x as f64;
                }
            }
            for c in 0..n_centroids {
                if counts[c] > 0 {
                    for (dst, s) in centroids[c * d..(c + 1) * d]
                        .iter_mut()
                        .zip(&sums[c * d..(c + 1) * d])
                    {
                        *dst = (s / counts[c] as f64) as f32;
                    }
                }
            }
        }
        let mut lists = vec![Vec::new(); n_centroids];
        for i in 0..n {
            lists[nearest(&centroids, d, row(i))].push(i as u32);
        }
        Ok(Self { d, centroids, lists })
    }

    pub fn n_centroids(&self) -> usize {
        self.lists.len()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn list(&self, c: usize) -> &[u32] {
        &self.lists[c]
    }

    /// The `nprobe` centroids nearest to `query`, nearest first.
    pub fn probe(&self, query: &[f32], nprobe: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = (0..self.n_centroids())
            .map(|c| (l2_distance_sq(query, self.centroid(c)), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(nprobe).map(|(_, c)| c).collect()
    }

    pub(super) fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.n_centroids() as u32).to_le_bytes());
        put_f32s(out, &self.centroids);
        for list in &self.lists {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            put_u32s(out, list);
        }
    }

    pub(super) fn read(r: &mut ByteReader<'_>, d: usize, rows: usize) -> Result<Self> {
        let n_centroids = r.u32()? as usize;
        let centroids = r.f32s(n_centroids * d)?;
        let mut lists = Vec::with_capacity(n_centroids);
        let mut total = 0;
        for _ in 0..n_centroids {
            let len = r.u32()? as usize;
            let list = r.u32s(len)?;
            if list.iter().any(|&i| i as usize >= rows) {
                return Err(r.error("IVF list entry out of range"));
            }
            total += len;
            lists.push(list);
        }
        if total != rows {
            return Err(r.error("IVF lists do not cover every row"));
        }
        Ok(Self { d, centroids, lists })
    }
}

fn nearest(centroids: &[f32], d: usize, x: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.chunks_exact(d).enumerate() {
        let dist = l2_distance_sq(x, centroid);
        if dist < best.0 {
            best = (dist, c);
        }
    }
    best.1
}
