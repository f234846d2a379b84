//! Overlap bucketing against a brute-force matcher, aggregation identities,
//! and end-to-end evaluation on a tiny corpus.

mod common;

use std::collections::BTreeMap;

use common::{brute_force_bucket, bucket_fixture};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_lab::corpus::{Category, Split, TokenSequence};
use retro_lab::eval::{
    bucket_histogram, bucket_mean_loss, bucket_report, delta_decomposition, evaluate,
    overlap_bucket, parse_records, records_csv, summarize, ReproductionChecks, TokenLossRecord,
};
use retro_lab::model::{ModelParams, RetroConfig};
use retro_lab::retrieval::{ChunkDatabase, ChunkingConfig};
use retro_lab::Error;

#[test]
fn bucketing_matches_brute_force_on_500_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut upper = 0;
    for _ in 0..500 {
        let (seq, m, neighbors) = bucket_fixture(&mut rng);
        for i in 1..=seq.len() {
            let got = overlap_bucket(&seq, i, m, neighbors.iter().map(Vec::as_slice)).unwrap();
            assert_eq!(got, brute_force_bucket(&seq, i, m, &neighbors), "seq {seq:?} i {i} m {m}");
            upper += (got > m) as usize;
        }
    }
    assert!(upper > 0, "fixtures never exercised buckets above m");
}

proptest! {
    #[test]
    fn matches_are_monotone(seed in any::<u64>()) {
        // every shorter suffix of a matched suffix matches the same neighbor
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (seq, m, neighbors) = bucket_fixture(&mut rng);
        for i in 1..=seq.len() {
            let n = overlap_bucket(&seq, i, m, neighbors.iter().map(Vec::as_slice)).unwrap();
            prop_assert!(n <= 2 * m);
            if n > 0 {
                let full = &seq[i - n..i];
                let owner = neighbors.iter().find(|nb| nb.windows(n).any(|w| w == full));
                prop_assert!(owner.is_some());
                let owner = owner.unwrap();
                for short in 1..n {
                    let s = &seq[i - short..i];
                    prop_assert!(owner.windows(short).any(|w| w == s));
                }
            }
        }
    }
}

fn record(bucket: usize, loss_on: f64, loss_off: f64) -> TokenLossRecord {
    TokenLossRecord {
        doc_id: 0,
        pos: 2,
        token: 5,
        category: Category::Web,
        loss_on,
        loss_off,
        bucket,
        delta: loss_off - loss_on,
    }
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenLossRecord> {
    (0..n)
        .map(|i| {
            let mut r = record(
                rng.random_range(0..=16),
                rng.random_range(0.0..8.0),
                rng.random_range(0.0..8.0),
            );
            r.doc_id = (i / 50) as u32;
            r.pos = i % 50 + 2;
            r.category = Category::ALL[i % 6];
            r
        })
        .collect()
}

#[test]
fn bucket_means_hand_cases() {
    let means = bucket_mean_loss(&[record(0, 2.0, 1.0), record(0, 4.0, 1.0), record(3, 1.5, 1.0)]);
    assert_eq!(means[&0], 3.0);
    assert_eq!(means[&3], 1.5);
    assert!(!means.contains_key(&1));
}

#[test]
fn bucket_means_match_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records = random_records(&mut rng, 1000);
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.bucket).or_default().push(r.loss_on);
    }
    let means = bucket_mean_loss(&records);
    assert_eq!(means.len(), groups.len());
    for (n, xs) in groups {
        let naive = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((means[&n] - naive).abs() <= 1e-12 * naive.abs().max(1.0));
    }
}

#[test]
fn decomposition_hand_cases() {
    let d = delta_decomposition(&[record(2, 1.0, 1.5), record(2, 1.0, 0.8)]);
    let b = d[&2];
    assert!((b.positive - 0.5).abs() < 1e-15);
    assert!((b.negative + 0.2).abs() < 1e-15);
    assert!((b.total - 0.3).abs() < 1e-15);
    let zero = delta_decomposition(&[record(0, 1.0, 1.0), record(5, 2.0, 2.0)]);
    for s in zero.values() {
        assert_eq!((s.positive, s.negative, s.total), (0.0, 0.0, 0.0));
    }
}

#[test]
fn decomposition_reconciles_with_aggregate_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let records = random_records(&mut rng, 500 + trial * 300);
        let rows = bucket_report(&records);
        for r in &rows {
            let scale = r.pos_delta.abs().max(r.neg_delta.abs()).max(1.0);
            assert!((r.total_delta - (r.pos_delta + r.neg_delta)).abs() <= 1e-9 * scale);
        }
        let s = summarize(&records, None).unwrap();
        let rel = (s.bucket_delta_total - s.aggregate_gap).abs() / s.aggregate_gap.abs().max(1e-300);
        assert!(rel <= 1e-9, "relative mismatch {rel}");
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), records.len());
    }
}

#[test]
fn histogram_partitions_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records = random_records(&mut rng, 777);
    let h = bucket_histogram(&records);
    assert_eq!(h.values().sum::<usize>(), 777);
    assert!(h.keys().all(|&n| n <= 16));
}

#[test]
fn record_csv_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records = random_records(&mut rng, 200);
    let text = records_csv(&records);
    assert!(text.starts_with("doc_id,pos,token,category,loss_on,loss_off,bucket,delta\n"));
    let back = parse_records(&text).unwrap();
    assert_eq!(back, records);
    for r in &back {
        assert_eq!(r.delta.to_bits(), (r.loss_off - r.loss_on).to_bits());
    }
}

#[test]
fn reproduction_checks_on_constructed_records() {
    let records = vec![
        record(0, 4.0, 4.5),
        record(0, 4.0, 3.9),
        record(5, 1.0, 3.0),
        record(12, 0.5, 3.0),
    ];
    let c = ReproductionChecks::compute(&records, 8);
    assert!(c.retrieval_helps() && c.overlap_loss_drop() && c.gain_from_overlap() && c.duplicate_jump());
    let flat = vec![record(0, 4.0, 4.0), record(1, 4.0, 4.0)];
    let c = ReproductionChecks::compute(&flat, 8);
    assert!(!c.retrieval_helps() && !c.overlap_loss_drop() && !c.duplicate_jump());
}

fn tiny_cfg() -> RetroConfig {
    let mut cfg = RetroConfig::desk();
    cfg.vocab_size = 64;
    cfg.m = 4;
    cfg.max_len = 24;
    cfg
}

fn doc(id: u32, split: Split, tokens: Vec<u32>) -> TokenSequence {
    TokenSequence {
        tokens,
        doc_id: id,
        category: Category::ALL[id as usize % 5],
        split,
        vocab_hash: 3,
    }
}

fn tiny_corpus() -> (Vec<TokenSequence>, Vec<TokenSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train: Vec<_> = (0..12)
        .map(|i| doc(i, Split::Train, (0..20).map(|_| rng.random_range(4..64)).collect()))
        .collect();
    let val: Vec<_> = (12..16)
        .map(|i| {
            let mut t: Vec<u32> = (0..30).map(|_| rng.random_range(4..64)).collect();
            // plant a copy of a training span
            t[4..14].copy_from_slice(&train[i as usize - 12].tokens[2..12]);
            doc(i, Split::Validation, t)
        })
        .collect();
    (train, val)
}

fn tiny_db(docs: &[TokenSequence], cfg: &RetroConfig) -> ChunkDatabase {
    ChunkDatabase::build(docs, ChunkingConfig::new(cfg.m).unwrap(), 16, 0).unwrap()
}

#[test]
fn evaluate_orders_and_scores_validation_tokens() {
    let cfg = tiny_cfg();
    let (train, val) = tiny_corpus();
    let all: Vec<_> = train.iter().chain(&val).cloned().collect();
    let db = tiny_db(&all, &cfg);
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut reversed = val.clone();
    reversed.reverse();
    let records = evaluate(&params, &cfg, &db, &reversed).unwrap();
    // positions 2..=24 of each truncated validation sequence
    assert_eq!(records.len(), val.len() * (cfg.max_len - 1));
    let keys: Vec<_> = records.iter().map(|r| (r.doc_id, r.pos)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for r in &records {
        assert!(r.loss_on.is_finite() && r.loss_on >= 0.0 && r.loss_off >= 0.0);
        assert_eq!(r.delta, r.loss_off - r.loss_on);
        assert!(r.bucket <= 2 * cfg.m);
        if r.pos <= cfg.m {
            assert_eq!(r.bucket, 0);
            assert_eq!(r.loss_on, r.loss_off);
        }
    }
    assert!(records.iter().any(|r| r.bucket > cfg.m), "planted spans should overlap");
    let again = evaluate(&params, &cfg, &db, &val).unwrap();
    assert_eq!(records_csv(&records), records_csv(&again));
}

#[test]
fn zeroed_cca_gives_equal_losses() {
    let cfg = tiny_cfg();
    let (train, val) = tiny_corpus();
    let all: Vec<_> = train.iter().chain(&val).cloned().collect();
    let db = tiny_db(&all, &cfg);
    let mut params = ModelParams::<f32>::init(&cfg, 1).unwrap();
    for l in &cfg.cca_layers {
        params.get_mut(&format!("dec.{l}.cca.wo")).unwrap().data.fill(0.0);
    }
    for r in evaluate(&params, &cfg, &db, &val).unwrap() {
        assert_eq!(r.loss_on, r.loss_off);
        assert_eq!(r.delta, 0.0);
    }
}

#[test]
fn evaluate_requires_validation_pairs() {
    let cfg = tiny_cfg();
    let (train, val) = tiny_corpus();
    let db = tiny_db(&train, &cfg);
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let err = evaluate(&params, &cfg, &db, &val).unwrap_err();
    assert!(matches!(err, Error::ValidationPairsAbsent));
    assert_eq!(err.to_string(), "validation pairs absent from the retrieval database");
}
