//! Dual-mode evaluation and overlap attribution.
//!
//! Every validation token is scored with retrieval on and off, assigned to
//! the bucket `Φ(n)` of its longest verbatim leftward overlap with the
//! neighbors it conditioned on, and the loss differences are decomposed by
//! bucket.

mod overlap;
mod plots;
mod records;
mod report;

use std::path::{Path, PathBuf};

pub use overlap::overlap_bucket;
pub use plots::{Chart, Series, Style};
pub use records::{evaluate, parse_records, read_records, records_csv, write_records, TokenLossRecord, RECORD_HEADER};
pub use report::{
    bits_per_byte, bucket_histogram, bucket_mean_loss, bucket_report, category_csv, category_table,
    delta_decomposition, report_csv, summarize, BucketReport, CategoryRow, CompensatedSum, DeltaSums,
    Summary, CATEGORY_HEADER, REPORT_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io_util::write_atomic;
use crate::tokenizer::Vocab;

pub const REPORT_FILE: &str = "report.csv";
pub const CATEGORY_FILE: &str = "categories.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOSS_PLOT: &str = "loss_by_bucket.svg";
pub const DELTA_PLOT: &str = "delta_by_bucket.svg";
pub const HIST_PLOT: &str = "bucket_hist.svg";
pub const CATEGORY_PLOT: &str = "category_loss.svg";

/// Writes the bucket report, category table, summary and the four charts
/// into `out`. Returns the written paths.
pub fn analyze(records: &[TokenLossRecord], vocab: Option<&Vocab>, out: &Path, log_y: bool) -> Result<Vec<PathBuf>> {
    let rows = bucket_report(records);
    let cats = category_table(records);
    let summary = summarize(records, vocab)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out.join(name);
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(REPORT_FILE, report_csv(&rows).as_bytes())?;
    put(CATEGORY_FILE, category_csv(&cats).as_bytes())?;
    put(SUMMARY_FILE, (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    put(LOSS_PLOT, loss_chart(records).render().as_bytes())?;
    put(DELTA_PLOT, delta_chart(&rows).render().as_bytes())?;
    put(HIST_PLOT, hist_chart(&rows, log_y).render().as_bytes())?;
    put(CATEGORY_PLOT, category_chart(&cats).render().as_bytes())?;
    Ok(written)
}

fn loss_chart(records: &[TokenLossRecord]) -> Chart {
    let on = bucket_mean_loss(records);
    let off_records: Vec<TokenLossRecord> = records
        .iter()
        .map(|r| TokenLossRecord {
            loss_on: r.loss_off,
            ..r.clone()
        })
        .collect();
    let off = bucket_mean_loss(&off_records);
    let pts = |m: &std::collections::BTreeMap<usize, f64>| m.iter().map(|(&n, &v)| (n as f64, v)).collect();
    Chart {
        title: "Mean token loss by consecutive overlap".into(),
        x_label: "overlap n".into(),
        y_label: "loss (nats)".into(),
        series: vec![
            Series {
                name: "retrieval on".into(),
                points: pts(&on),
            },
            Series {
                name: "retrieval off".into(),
                points: pts(&off),
            },
        ],
        style: Style::Lines,
        log_y: false,
        x_names: None,
    }
}

fn delta_chart(rows: &[BucketReport]) -> Chart {
    let series = |name: &str, f: fn(&BucketReport) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.n as f64, f(r))).collect(),
    };
    Chart {
        title: "Loss difference (off - on) summed per bucket".into(),
        x_label: "overlap n".into(),
        y_label: "summed delta (nats)".into(),
        series: vec![
            series("positive", |r| r.pos_delta),
            series("negative", |r| r.neg_delta),
            series("all", |r| r.total_delta),
        ],
        style: Style::Lines,
        log_y: false,
        x_names: None,
    }
}

fn hist_chart(rows: &[BucketReport], log_y: bool) -> Chart {
    Chart {
        title: "Validation tokens per overlap bucket".into(),
        x_label: "overlap n".into(),
        y_label: "tokens".into(),
        series: vec![Series {
            name: "tokens".into(),
            points: rows.iter().map(|r| (r.n as f64, r.count as f64)).collect(),
        }],
        style: Style::Bars,
        log_y,
        x_names: None,
    }
}

fn category_chart(rows: &[CategoryRow]) -> Chart {
    let series = |name: &str, f: fn(&CategoryRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().enumerate().map(|(i, r)| (i as f64, f(r))).collect(),
    };
    Chart {
        title: "Mean token loss by category".into(),
        x_label: "category".into(),
        y_label: "loss (nats)".into(),
        series: vec![
            series("retrieval on", |r| r.mean_loss_on),
            series("retrieval off", |r| r.mean_loss_off),
        ],
        style: Style::Bars,
        log_y: false,
        x_names: Some(rows.iter().map(|r| r.category.to_string()).collect()),
    }
}

/// The four qualitative outcomes of the overlap-attribution experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionChecks {
    pub mean_loss_on: f64,
    pub mean_loss_off: f64,
    /// Pooled mean `loss_on` over tokens with `n >= 4`.
    pub high_overlap_mean: Option<f64>,
    pub zero_overlap_mean: Option<f64>,
    pub overlapping_delta: f64,
    pub zero_overlap_delta: f64,
    /// Tokens with `n` in `m+1 ..= 2m`.
    pub upper_bucket_tokens: usize,
}

impl ReproductionChecks {
    pub fn compute(records: &[TokenLossRecord], m: usize) -> Self {
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, c) = it.fold((CompensatedSum::default(), 0usize), |(mut s, c), x| {
                s.add(x);
                (s, c + 1)
            });
            (c > 0).then(|| s.value() / c as f64)
        };
        let deltas = delta_decomposition(records);
        Self {
            mean_loss_on: mean(&mut records.iter().map(|r| r.loss_on)).unwrap_or(f64::NAN),
            mean_loss_off: mean(&mut records.iter().map(|r| r.loss_off)).unwrap_or(f64::NAN),
            high_overlap_mean: mean(&mut records.iter().filter(|r| r.bucket >= 4).map(|r| r.loss_on)),
            zero_overlap_mean: mean(&mut records.iter().filter(|r| r.bucket == 0).map(|r| r.loss_on)),
            overlapping_delta: deltas.range(1..).map(|(_, d)| d.total).collect::<CompensatedSum>().value(),
            zero_overlap_delta: deltas.get(&0).map_or(0.0, |d| d.total),
            upper_bucket_tokens: records.iter().filter(|r| (m + 1..=2 * m).contains(&r.bucket)).count(),
        }
    }

    /// Retrieval lowers the mean loss.
    pub fn retrieval_helps(&self) -> bool {
        self.mean_loss_on < self.mean_loss_off
    }

    /// High-overlap tokens cost at most half of non-overlapping ones.
    pub fn overlap_loss_drop(&self) -> bool {
        matches!((self.high_overlap_mean, self.zero_overlap_mean), (Some(h), Some(z)) if h <= 0.5 * z)
    }

    /// Overlapping tokens account for more of the gain than bucket 0.
    pub fn gain_from_overlap(&self) -> bool {
        self.overlapping_delta > self.zero_overlap_delta
    }

    /// Planted duplicates reach the upper half of the bucket range.
    pub fn duplicate_jump(&self) -> bool {
        self.upper_bucket_tokens > 0
    }
}
