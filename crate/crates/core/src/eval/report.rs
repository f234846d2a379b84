//! Aggregations over token records: per-bucket means, loss-difference
//! decomposition, histograms and per-category summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::records::TokenLossRecord;
use crate::corpus::Category;
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Arithmetic mean of `loss_on` per bucket; empty buckets are absent.
pub fn bucket_mean_loss(records: &[TokenLossRecord]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (CompensatedSum, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.bucket).or_default();
        e.0.add(r.loss_on);
        e.1 += 1;
    }
    acc.into_iter().map(|(n, (s, c))| (n, s.value() / c as f64)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DeltaSums {
    /// Sum of `max(0, delta)`.
    pub positive: f64,
    /// Sum of `min(0, delta)`.
    pub negative: f64,
    /// Sum of `delta`, accumulated independently of the two parts.
    pub total: f64,
}

pub fn delta_decomposition(records: &[TokenLossRecord]) -> BTreeMap<usize, DeltaSums> {
    let mut acc: BTreeMap<usize, [CompensatedSum; 3]> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.bucket).or_default();
        e[0].add(r.delta.max(0.0));
        e[1].add(r.delta.min(0.0));
        e[2].add(r.delta);
    }
    acc.into_iter()
        .map(|(n, [p, q, t])| {
            (
                n,
                DeltaSums {
                    positive: p.value(),
                    negative: q.value(),
                    total: t.value(),
                },
            )
        })
        .collect()
}

pub fn bucket_histogram(records: &[TokenLossRecord]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in records {
        *h.entry(r.bucket).or_insert(0) += 1;
    }
    h
}

/// One row of the per-bucket report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub n: usize,
    pub count: usize,
    pub mean_loss_on: f64,
    pub pos_delta: f64,
    pub neg_delta: f64,
    pub total_delta: f64,
}

pub const REPORT_HEADER: &str = "n,count,mean_loss_on,pos_delta,neg_delta,total_delta";

pub fn bucket_report(records: &[TokenLossRecord]) -> Vec<BucketReport> {
    let means = bucket_mean_loss(records);
    let deltas = delta_decomposition(records);
    bucket_histogram(records)
        .into_iter()
        .map(|(n, count)| {
            let d = deltas[&n];
            BucketReport {
                n,
                count,
                mean_loss_on: means[&n],
                pos_delta: d.positive,
                neg_delta: d.negative,
                total_delta: d.total,
            }
        })
        .collect()
}

pub fn report_csv(rows: &[BucketReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.n, r.count, r.mean_loss_on, r.pos_delta, r.neg_delta, r.total_delta
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: Category,
    pub count: usize,
    pub mean_loss_on: f64,
    pub mean_loss_off: f64,
    /// `1 - on/off`.
    pub reduction: f64,
}

pub const CATEGORY_HEADER: &str = "category,count,mean_loss_on,mean_loss_off,reduction";

/// Mean loss per category under both modes, in [`Category::ALL`] order.
pub fn category_table(records: &[TokenLossRecord]) -> Vec<CategoryRow> {
    Category::ALL
        .iter()
        .filter_map(|&category| {
            let rs: Vec<&TokenLossRecord> = records.iter().filter(|r| r.category == category).collect();
            if rs.is_empty() {
                return None;
            }
            let on = rs.iter().map(|r| r.loss_on).collect::<CompensatedSum>().value() / rs.len() as f64;
            let off = rs.iter().map(|r| r.loss_off).collect::<CompensatedSum>().value() / rs.len() as f64;
            Some(CategoryRow {
                category,
                count: rs.len(),
                mean_loss_on: on,
                mean_loss_off: off,
                reduction: 1.0 - on / off,
            })
        })
        .collect()
}

pub fn category_csv(rows: &[CategoryRow]) -> String {
    let mut s = String::from(CATEGORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.category, r.count, r.mean_loss_on, r.mean_loss_off, r.reduction
        );
    }
    s
}

/// Headline numbers for a record set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub tokens: usize,
    pub mean_loss_on: f64,
    pub mean_loss_off: f64,
    /// `(mean_off - mean_on) * tokens`.
    pub aggregate_gap: f64,
    /// Sum over buckets of `total_delta`.
    pub bucket_delta_total: f64,
    pub bits_per_byte_on: Option<f64>,
    pub bits_per_byte_off: Option<f64>,
}

pub fn summarize(records: &[TokenLossRecord], vocab: Option<&Vocab>) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Config("no records to summarize".into()));
    }
    let n = records.len() as f64;
    let on = records.iter().map(|r| r.loss_on).collect::<CompensatedSum>().value();
    let off = records.iter().map(|r| r.loss_off).collect::<CompensatedSum>().value();
    let (mean_on, mean_off) = (on / n, off / n);
    let bucket_delta_total = delta_decomposition(records)
        .values()
        .map(|d| d.total)
        .collect::<CompensatedSum>()
        .value();
    let (bpb_on, bpb_off) = match vocab {
        Some(v) => {
            let (a, b) = bits_per_byte(records, v)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    Ok(Summary {
        tokens: records.len(),
        mean_loss_on: mean_on,
        mean_loss_off: mean_off,
        aggregate_gap: (mean_off - mean_on) * n,
        bucket_delta_total,
        bits_per_byte_on: bpb_on,
        bits_per_byte_off: bpb_off,
    })
}

/// Total loss in bits divided by the UTF-8 bytes of the scored tokens.
pub fn bits_per_byte(records: &[TokenLossRecord], vocab: &Vocab) -> Result<(f64, f64)> {
    let mut bytes = 0usize;
    for r in records {
        bytes += vocab
            .piece(r.token)
            .ok_or(Error::InvalidTokenId {
                id: r.token,
                size: vocab.size(),
            })?
            .len();
    }
    if bytes == 0 {
        return Err(Error::Config("scored tokens cover no bytes".into()));
    }
    let on = records.iter().map(|r| r.loss_on).collect::<CompensatedSum>().value();
    let off = records.iter().map(|r| r.loss_off).collect::<CompensatedSum>().value();
    let denom = bytes as f64 * std::f64::consts::LN_2;
    Ok((on / denom, off / denom))
}
