//! Staged end-to-end runs: corpus → vocab → training database → training →
//! evaluation database → evaluation → analysis.
//!
//! Every stage records a marker holding a fingerprint of its inputs and the
//! hashes of its outputs; a rerun skips stages whose marker still matches,
//! so an interrupted run resumes at the first incomplete stage. All
//! randomness flows from one seed through named sub-seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, split_of, synth_corpus, tokenize_all, write_jsonl, Split, SynthSpec, TokenSequence};
use crate::error::{Error, IoContext, Result};
use crate::eval::{analyze, evaluate, read_records, write_records, ReproductionChecks};
use crate::hashing::{hash64, sha256_hex};
use crate::io_util::write_atomic;
use crate::model::{ModelParams, RetroConfig};
use crate::retrieval::{ChunkDatabase, ChunkingConfig};
use crate::tensor::read_checkpoint;
use crate::tokenizer::{train_bpe, Vocab};
use crate::trainer::{checkpoint_name, train, write_loss_csv, TrainConfig, TrainState};

pub const STAGES: [&str; 7] = ["corpus", "vocab", "db-train", "train", "db-eval", "eval", "analyze"];

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_DB_FILE: &str = "db_train.rdb";
pub const MODEL_FILE: &str = "model.cfg";
pub const TRAIN_DIR: &str = "train";
pub const LOSS_FILE: &str = "train/loss.csv";
pub const EVAL_DB_FILE: &str = "db_eval.rdb";
pub const RECORDS_FILE: &str = "records.csv";
pub const ANALYSIS_DIR: &str = "analysis";
pub const CHECKS_FILE: &str = "analysis/checks.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const MARKER_DIR: &str = ".stages";

/// Derives an independent seed for one consumer of randomness.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    hash64(format!("{seed}/{name}").as_bytes())
}

/// Model-shape overrides applied on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub max_len: Option<usize>,
}

/// Training overrides applied on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub clip_norm: Option<f64>,
    /// Disables gradient clipping.
    pub no_clip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: String,
    /// Existing JSONL corpus. When absent the corpus is synthesized from
    /// `synth`, whose own seed is replaced by the `corpus` sub-seed.
    pub corpus: Option<PathBuf>,
    pub synth: SynthSpec,
    pub vocab_size: usize,
    /// Embedding dimension of the retrieval key.
    pub embed_dim: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    /// Log-scale y axis on the bucket histogram.
    pub log_y: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "desk".into(),
            corpus: None,
            synth: SynthSpec::default(),
            vocab_size: 512,
            embed_dim: 64,
            model: ModelSection::default(),
            train: TrainSection::default(),
            log_y: false,
        }
    }
}

impl PipelineConfig {
    /// The reproduction experiment: default synthetic corpus (about 2,000
    /// training documents, half planted), 512-token vocabulary, desk model
    /// with `m = 8`, `k = 2`, `L = 64`, and the preset's training schedule.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            kind: "pipeline config",
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config always serializes")
    }

    /// Preset plus overrides; the vocabulary size is filled in once the
    /// tokenizer is trained.
    pub fn model_config(&self, vocab_size: usize) -> Result<RetroConfig> {
        let mut cfg = RetroConfig::preset(&self.preset)?;
        cfg.vocab_size = vocab_size;
        cfg.m = self.model.m.unwrap_or(cfg.m);
        cfg.k = self.model.k.unwrap_or(cfg.k);
        cfg.max_len = self.model.max_len.unwrap_or(cfg.max_len);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        let t = &self.train;
        cfg.steps = t.steps.unwrap_or(cfg.steps);
        cfg.batch_size = t.batch_size.unwrap_or(cfg.batch_size);
        cfg.lr = t.lr.unwrap_or(cfg.lr);
        cfg.checkpoint_every = t.checkpoint_every.unwrap_or(cfg.checkpoint_every);
        cfg.clip_norm = if t.no_clip { None } else { t.clip_norm.or(cfg.clip_norm) };
        cfg.seed = sub_seed(self.seed, "shuffle");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: sub_seed(self.seed, "corpus"),
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.vocab_size)?;
        self.train_config()?;
        if self.corpus.is_none() {
            self.synth.validate()?;
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest always serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Marker {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

/// Run directory plus what has been hashed so far.
struct Run<'a> {
    dir: &'a Path,
    config: &'a PipelineConfig,
    /// `(stage, path, sha256, bytes)` in stage order.
    artifacts: Vec<ArtifactEntry>,
    /// Hashes of every output so far, keyed by path; part of each
    /// downstream stage's fingerprint.
    upstream: BTreeMap<String, String>,
    executed: Vec<&'static str>,
}

/// The configuration fields a stage reads; upstream artifacts are covered
/// by their hashes.
fn stage_inputs(c: &PipelineConfig, stage: &str) -> serde_json::Value {
    use serde_json::json;
    match stage {
        "corpus" => json!([c.seed, c.corpus, c.synth]),
        "vocab" => json!(c.vocab_size),
        "db-train" | "db-eval" => json!([c.seed, c.embed_dim, c.preset, c.model]),
        "train" => json!([c.seed, c.preset, c.model, c.train]),
        "eval" => json!([c.preset, c.model]),
        _ => json!([c.log_y, c.preset, c.model]),
    }
}

fn hash_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).at(path)?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

impl Run<'_> {
    fn marker_path(&self, stage: &str) -> PathBuf {
        self.dir.join(MARKER_DIR).join(format!("{stage}.json"))
    }

    fn fingerprint(&self, stage: &str) -> String {
        let mut text = format!("{stage}\n{}\n", stage_inputs(self.config, stage));
        for (path, sha) in &self.upstream {
            text.push_str(&format!("{path}={sha}\n"));
        }
        sha256_hex(text.as_bytes())
    }

    /// Outputs of a completed stage, if its marker matches the current
    /// inputs and every output is still on disk unchanged.
    fn completed(&self, stage: &str, fingerprint: &str) -> Option<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(self.marker_path(stage)).ok()?;
        let marker: Marker = serde_json::from_str(&text).ok()?;
        if marker.fingerprint != fingerprint {
            return None;
        }
        for (path, sha) in &marker.outputs {
            if hash_file(&self.dir.join(path)).ok()?.0 != *sha {
                return None;
            }
        }
        Some(marker.outputs)
    }

    /// Runs `body` unless the stage is already complete. `body` returns the
    /// relative paths it wrote.
    fn stage(&mut self, stage: &'static str, body: impl FnOnce(&Path) -> Result<Vec<String>>) -> Result<()> {
        let fingerprint = self.fingerprint(stage);
        let outputs = match self.completed(stage, &fingerprint) {
            Some(outputs) => {
                info!("stage {stage}: up to date");
                outputs
            }
            None => {
                info!("stage {stage}: running");
                let wrap = |e: Error| Error::Stage {
                    stage,
                    source: Box::new(e),
                };
                let _ = std::fs::remove_file(self.marker_path(stage));
                let mut paths = body(self.dir).map_err(wrap)?;
                paths.sort();
                let mut outputs = BTreeMap::new();
                for p in paths {
                    let (sha, _) = hash_file(&self.dir.join(&p)).map_err(wrap)?;
                    outputs.insert(p, sha);
                }
                let marker = Marker { fingerprint, outputs };
                let json = serde_json::to_string_pretty(&marker)?;
                write_atomic(&self.marker_path(stage), json.as_bytes()).map_err(wrap)?;
                self.executed.push(stage);
                marker.outputs
            }
        };
        for (path, sha) in outputs {
            let (_, bytes) = hash_file(&self.dir.join(&path))?;
            self.artifacts.push(ArtifactEntry {
                stage: stage.into(),
                path: path.clone(),
                sha256: sha.clone(),
                bytes,
            });
            self.upstream.insert(path, sha);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Stages that actually ran (the rest were up to date).
    pub executed: Vec<&'static str>,
}

fn load_tokens(dir: &Path) -> Result<(Vocab, Vec<TokenSequence>)> {
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let docs = read_jsonl(&dir.join(CORPUS_FILE))?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let seqs = tokenize_all(&docs, &vocab);
    Ok((vocab, seqs))
}

fn rel(path: &Path, dir: &Path) -> String {
    path.strip_prefix(dir)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Runs (or resumes) every stage into `dir` and writes `manifest.json`.
pub fn run_pipeline(config: &PipelineConfig, dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    std::fs::create_dir_all(dir).at(dir)?;
    let config_text = config.to_toml();
    write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
    let mut run = Run {
        dir,
        config,
        artifacts: Vec::new(),
        upstream: BTreeMap::new(),
        executed: Vec::new(),
    };
    let embed_seed = sub_seed(config.seed, "embedder");

    run.stage("corpus", |dir| {
        let docs = match &config.corpus {
            Some(path) => read_jsonl(path)?,
            None => synth_corpus(&config.synth_spec())?,
        };
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        write_jsonl(&dir.join(CORPUS_FILE), &docs)?;
        Ok(vec![CORPUS_FILE.into()])
    })?;

    run.stage("vocab", |dir| {
        let docs = read_jsonl(&dir.join(CORPUS_FILE))?;
        let texts = docs.iter().filter(|d| d.split == Split::Train).map(|d| d.text.as_str());
        let vocab = train_bpe(texts, config.vocab_size)?;
        vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(vec![VOCAB_FILE.into()])
    })?;

    run.stage("db-train", |dir| {
        let (vocab, seqs) = load_tokens(dir)?;
        let model = config.model_config(vocab.size())?;
        let train_docs = split_of(&seqs, Split::Train);
        let db = ChunkDatabase::build(&train_docs, ChunkingConfig::new(model.m)?, config.embed_dim, embed_seed)?;
        db.save(&dir.join(TRAIN_DB_FILE))?;
        Ok(vec![TRAIN_DB_FILE.into()])
    })?;

    run.stage("train", |dir| {
        let (vocab, seqs) = load_tokens(dir)?;
        let model = config.model_config(vocab.size())?;
        let tc = config.train_config()?;
        write_atomic(&dir.join(MODEL_FILE), model.to_text().as_bytes())?;
        let db = ChunkDatabase::load(&dir.join(TRAIN_DB_FILE))?;
        let train_docs = split_of(&seqs, Split::Train);
        let params = ModelParams::<f32>::init(&model, sub_seed(config.seed, "init"))?;
        let out = dir.join(TRAIN_DIR);
        // stale checkpoints from an earlier configuration must not linger
        if out.exists() {
            std::fs::remove_dir_all(&out).at(&out)?;
        }
        let report = train(&model, TrainState::fresh(params), &db, &train_docs, &tc, Some(&out))?;
        write_loss_csv(&dir.join(LOSS_FILE), &report.losses)?;
        let mut written = vec![MODEL_FILE.to_string(), LOSS_FILE.to_string()];
        written.extend(report.checkpoints.iter().map(|p| rel(p, dir)));
        Ok(written)
    })?;

    run.stage("db-eval", |dir| {
        let (_, seqs) = load_tokens(dir)?;
        let model = RetroConfig::from_text(&std::fs::read_to_string(dir.join(MODEL_FILE)).at(dir.join(MODEL_FILE))?)?;
        let db = ChunkDatabase::build(&seqs, ChunkingConfig::new(model.m)?, config.embed_dim, embed_seed)?;
        db.save(&dir.join(EVAL_DB_FILE))?;
        Ok(vec![EVAL_DB_FILE.into()])
    })?;

    run.stage("eval", |dir| {
        let (_, seqs) = load_tokens(dir)?;
        let model = RetroConfig::from_text(&std::fs::read_to_string(dir.join(MODEL_FILE)).at(dir.join(MODEL_FILE))?)?;
        let tc = config.train_config()?;
        let ckpt = read_checkpoint(&dir.join(TRAIN_DIR).join(checkpoint_name(tc.steps)))?;
        let params = ModelParams::from_checkpoint(&model, &ckpt)?;
        let db = ChunkDatabase::load(&dir.join(EVAL_DB_FILE))?;
        let val = split_of(&seqs, Split::Validation);
        let records = evaluate(&params, &model, &db, &val)?;
        write_records(&dir.join(RECORDS_FILE), &records)?;
        Ok(vec![RECORDS_FILE.into()])
    })?;

    run.stage("analyze", |dir| {
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let model = RetroConfig::from_text(&std::fs::read_to_string(dir.join(MODEL_FILE)).at(dir.join(MODEL_FILE))?)?;
        let records = read_records(&dir.join(RECORDS_FILE))?;
        let out = dir.join(ANALYSIS_DIR);
        let mut written: Vec<String> = analyze(&records, Some(&vocab), &out, config.log_y)?
            .iter()
            .map(|p| rel(p, dir))
            .collect();
        let checks = ReproductionChecks::compute(&records, model.m);
        write_atomic(&dir.join(CHECKS_FILE), (serde_json::to_string_pretty(&checks)? + "\n").as_bytes())?;
        written.push(CHECKS_FILE.into());
        Ok(written)
    })?;

    let manifest = Manifest {
        seed: config.seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        artifacts: run.artifacts,
    };
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(PipelineOutcome {
        dir: dir.to_path_buf(),
        manifest,
        executed: run.executed,
    })
}
