//! Structural properties of the encoder–decoder: shapes, causality,
//! on/off equivalences and end-to-end gradients.

mod common;

use common::{model_fd_check, random_neighbors, random_tokens, scramble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_lab::model::{
    forward, forward_off, forward_on, generate, loss_and_grads, ModelParams, Mode, NeighborBatch,
    RetroConfig, Sampling,
};
use retro_lab::retrieval::{ChunkDatabase, RetrievalConfig};
use retro_lab::tokenizer::PAD;
use retro_lab::Error;

fn desk() -> RetroConfig {
    RetroConfig::desk()
}

fn lively_params(seed: u64) -> ModelParams<f32> {
    common::lively_params(&desk(), seed)
}

#[test]
fn three_chunk_shapes_and_finite_losses() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let tokens = random_tokens(&mut rng, 3 * cfg.m, cfg.vocab_size);
    let nb = random_neighbors(&mut rng, &cfg, 2);
    let out = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    assert_eq!(out.logits.shape, vec![tokens.len(), cfg.vocab_size]);
    assert_eq!(out.losses.len(), tokens.len());
    assert!(out.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert_eq!(*out.losses.last().unwrap(), 0.0);
}

#[test]
fn initial_loss_is_near_uniform() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::<f32>::init(&cfg, 2).unwrap();
    let tokens = random_tokens(&mut rng, cfg.max_len, cfg.vocab_size);
    let nb = random_neighbors(&mut rng, &cfg, 7);
    let out = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    let mean = out.losses[..tokens.len() - 1].iter().sum::<f32>() as f64 / (tokens.len() - 1) as f64;
    let uniform = (cfg.vocab_size as f64).ln();
    assert!((mean - uniform).abs() / uniform < 0.05, "mean {mean} vs ln V {uniform}");
}

#[test]
fn length_and_alignment_errors() {
    let cfg = desk();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let long = vec![5u32; cfg.max_len + 1];
    assert!(matches!(forward_off(&params, &cfg, &long), Err(Error::TooLong { .. })));
    let tokens = vec![5u32; 3 * cfg.m];
    let wrong = NeighborBatch::sentinels(1, cfg.m, cfg.k);
    assert!(matches!(
        forward_on(&params, &cfg, &tokens, &wrong),
        Err(Error::NeighborMisaligned(_))
    ));
    assert!(NeighborBatch::new(cfg.m, cfg.k, vec![PAD; 5], vec![true]).is_err());
}

#[test]
fn one_chunk_on_equals_off() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = lively_params(3);
    for len in [1, cfg.m / 2, cfg.m] {
        let tokens = random_tokens(&mut rng, len, cfg.vocab_size);
        let nb = NeighborBatch::sentinels(NeighborBatch::blocks_for_len(len, cfg.m), cfg.m, cfg.k);
        assert_eq!(nb.blocks(), 0);
        let on = forward_on(&params, &cfg, &tokens, &nb).unwrap();
        let off = forward_off(&params, &cfg, &tokens).unwrap();
        assert_eq!(on.logits.data, off.logits.data);
        assert_eq!(on.losses, off.losses);
    }
}

#[test]
fn all_sentinel_neighbors_equal_off() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = lively_params(4);
    let tokens = random_tokens(&mut rng, 5 * cfg.m + 3, cfg.vocab_size);
    let nb = NeighborBatch::sentinels(5, cfg.m, cfg.k);
    let on = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    let off = forward_off(&params, &cfg, &tokens).unwrap();
    assert_eq!(on.logits.data, off.logits.data);
}

#[test]
fn zeroed_cca_output_equals_off() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = lively_params(5);
    for l in &cfg.cca_layers {
        params
            .get_mut(&format!("dec.{l}.cca.wo"))
            .unwrap()
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let tokens = random_tokens(&mut rng, 4 * cfg.m, cfg.vocab_size);
    let nb = random_neighbors(&mut rng, &cfg, 3);
    let on = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    let off = forward_off(&params, &cfg, &tokens).unwrap();
    assert_eq!(on.losses, off.losses);
}

#[test]
fn token_causality() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = lively_params(6);
    let tokens = random_tokens(&mut rng, 4 * cfg.m, cfg.vocab_size);
    let nb = random_neighbors(&mut rng, &cfg, 3);
    let base = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    let v = cfg.vocab_size;
    for j in [0, 5, cfg.m, 2 * cfg.m + 1, tokens.len() - 1] {
        let mut changed = tokens.clone();
        changed[j] = if tokens[j] == 7 { 8 } else { 7 };
        let out = forward_on(&params, &cfg, &changed, &nb).unwrap();
        assert_eq!(&out.logits.data[..j * v], &base.logits.data[..j * v], "perturbing {j}");
        assert_ne!(&out.logits.data[j * v..(j + 1) * v], &base.logits.data[j * v..(j + 1) * v]);
    }
}

#[test]
fn cca_causality() {
    let cfg = desk();
    let m = cfg.m;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = lively_params(7);
    let tokens = random_tokens(&mut rng, cfg.max_len, cfg.vocab_size);
    let blocks = NeighborBatch::blocks_for_len(tokens.len(), m);
    let nb = random_neighbors(&mut rng, &cfg, blocks);
    let base = forward_on(&params, &cfg, &tokens, &nb).unwrap();
    let v = cfg.vocab_size;
    for u in 1..=blocks {
        let mut changed = nb.clone();
        let block = (u - 1) * cfg.k * 2 * m;
        for t in &mut changed.tokens[block..block + cfg.k * 2 * m] {
            *t = rng.random_range(4..v as u32);
        }
        let out = forward_on(&params, &cfg, &tokens, &changed).unwrap();
        // 1-based positions t < u*m are 0-based rows < u*m - 1
        let safe = (u * m - 1) * v;
        assert_eq!(&out.logits.data[..safe], &base.logits.data[..safe], "RET(C_{u})");
        assert_ne!(&out.logits.data[safe..safe + v], &base.logits.data[safe..safe + v]);
    }
}

fn random_db(seed: u64, docs: usize, cfg: &RetroConfig) -> ChunkDatabase {
    common::random_token_db(seed, docs, cfg)
}

#[test]
fn off_mode_ignores_database() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = lively_params(8);
    let tokens = random_tokens(&mut rng, 5 * cfg.m, cfg.vocab_size);
    let rcfg = RetrievalConfig::exact(cfg.k);
    let (db_a, db_b) = (random_db(1, 30, &cfg), random_db(2, 50, &cfg));
    let nb_a = NeighborBatch::retrieve(&db_a, &tokens, 999, &rcfg).unwrap();
    let nb_b = NeighborBatch::retrieve(&db_b, &tokens, 999, &rcfg).unwrap();
    assert_ne!(nb_a, nb_b);
    let on_a = forward(&params, &cfg, &tokens, Mode::On(&nb_a)).unwrap();
    let on_b = forward(&params, &cfg, &tokens, Mode::On(&nb_b)).unwrap();
    assert_ne!(on_a.logits.data, on_b.logits.data);
    let off_a = forward_off(&params, &cfg, &tokens).unwrap();
    let off_b = forward_off(&params, &cfg, &tokens).unwrap();
    assert_eq!(off_a.logits.data, off_b.logits.data);
}

#[test]
fn off_mode_encoder_gradients_are_zero() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = lively_params(9);
    let tokens = random_tokens(&mut rng, 3 * cfg.m, cfg.vocab_size);
    let (_, grads) = loss_and_grads(&params, &cfg, &tokens, Mode::Off).unwrap();
    let mut encoder = 0;
    for (name, g) in params.names.iter().zip(&grads) {
        let cca = name.contains(".cca.");
        if name.starts_with("enc.") || cca {
            encoder += 1;
            assert!(g.iter().all(|&x| x == 0.0), "{name}");
        } else if name.ends_with(".wq") {
            assert!(g.iter().any(|&x| x != 0.0), "{name}");
        }
    }
    assert!(encoder > 10);
    let nb = random_neighbors(&mut rng, &cfg, 2);
    let (_, grads) = loss_and_grads(&params, &cfg, &tokens, Mode::On(&nb)).unwrap();
    let enc_emb = params.names.iter().position(|n| n == "enc.embed").unwrap();
    assert!(grads[enc_emb].iter().any(|&x| x != 0.0));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParams::<f64>::init(&cfg, 10).unwrap();
    scramble(&mut params, &mut rng, 0.15);
    let tokens = random_tokens(&mut rng, 3 * cfg.m - 2, cfg.vocab_size);
    let mut nb = random_neighbors(&mut rng, &cfg, 2);
    nb.valid[1] = false;
    let (worst, checked) = model_fd_check(&params, &cfg, &tokens, Mode::On(&nb), 3, 10);
    eprintln!("checked {checked} coordinates, max relative error {worst:e}");
    assert!(checked > 200);
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn generation_basics() {
    let cfg = desk();
    let params = lively_params(11);
    let db = random_db(3, 40, &cfg);
    let rcfg = RetrievalConfig::exact(cfg.k);
    let prompt = vec![1, 40, 41, 42, 43, 44];
    let same = generate(&params, &cfg, Some(&db), &rcfg, &prompt, 0, Sampling::Greedy).unwrap();
    assert_eq!(same, prompt);
    let a = generate(&params, &cfg, Some(&db), &rcfg, &prompt, 20, Sampling::Greedy).unwrap();
    let b = generate(&params, &cfg, Some(&db), &rcfg, &prompt, 20, Sampling::Greedy).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), prompt.len() + 20);
    assert_eq!(&a[..prompt.len()], &prompt[..]);
    let sampled = Sampling::Temperature {
        temperature: 1.0,
        seed: 4,
    };
    let c = generate(&params, &cfg, Some(&db), &rcfg, &prompt, 20, sampled).unwrap();
    assert_eq!(c, generate(&params, &cfg, Some(&db), &rcfg, &prompt, 20, sampled).unwrap());
    let capped = generate(&params, &cfg, None, &rcfg, &prompt, 500, Sampling::Greedy).unwrap();
    assert_eq!(capped.len(), cfg.max_len);
    assert!(generate(&params, &cfg, None, &rcfg, &[], 3, Sampling::Greedy).is_err());
}

#[test]
fn generation_matches_full_forward() {
    // each greedy step equals the argmax of a full forward over the prefix
    // with neighbors for every complete chunk
    let cfg = desk();
    let params = lively_params(12);
    let db = random_db(4, 40, &cfg);
    let rcfg = RetrievalConfig::exact(cfg.k);
    let prompt: Vec<u32> = (0..cfg.m as u32 - 2).map(|i| 10 + i).collect();
    let out = generate(&params, &cfg, Some(&db), &rcfg, &prompt, 2 * cfg.m, Sampling::Greedy).unwrap();
    for t in prompt.len()..out.len() {
        let prefix = &out[..t];
        let nb = NeighborBatch::retrieve_chunks(&db, &prefix[..(t / cfg.m) * cfg.m], u32::MAX, &rcfg).unwrap();
        let full = forward_on(&params, &cfg, prefix, &nb).unwrap();
        let row = full.logits.row(t - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(out[t], best as u32, "step {t}");
    }
}
