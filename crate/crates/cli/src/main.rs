//! `retro-lab`: corpus synthesis, database build, training, evaluation,
//! analysis, and the staged pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use retro_lab::corpus::{read_jsonl, split_of, synth_corpus, tokenize_all, write_jsonl, Split, SynthSpec, TokenSequence};
use retro_lab::eval::{analyze, evaluate, read_records, summarize, write_records, ReproductionChecks};
use retro_lab::model::{generate, ModelParams, RetroConfig, Sampling, PRESETS};
use retro_lab::pipeline::{run_pipeline, sub_seed, PipelineConfig, CHECKS_FILE, MANIFEST_FILE, MODEL_FILE, RECORDS_FILE};
use retro_lab::retrieval::{ChunkDatabase, ChunkingConfig, RetrievalConfig};
use retro_lab::tensor::read_checkpoint;
use retro_lab::tokenizer::{train_bpe, Vocab, BOS};
use retro_lab::trainer::{train, write_loss_csv, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "retro-lab", version, about = "Desk-scale retrieval-augmented language modeling")]
struct Cli {
    /// Root seed; every component derives a named sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model and training preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Default root for artifacts whose output path is omitted.
    #[arg(long, env = "RETRO_LAB_DIR", default_value = "artifacts", global = true)]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic corpus as JSONL.
    Synth(SynthArgs),
    /// Train (or reuse) a vocabulary and build a retrieval database.
    BuildDb(BuildDbArgs),
    /// Train a model against a training-split database.
    Train(TrainArgs),
    /// Score validation tokens with retrieval on and off.
    Eval(EvalArgs),
    /// Bucket report, category table, summary and charts from records.
    Analyze(AnalyzeArgs),
    /// Run every stage end to end, resuming completed stages.
    Pipeline(PipelineArgs),
    /// Continue a text prompt with a trained model.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    doc_len: Option<usize>,
    /// Probability that a validation document receives a planted span.
    #[arg(long)]
    rate: Option<f64>,
    /// Probability for non-reserved training documents.
    #[arg(long)]
    train_rate: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
}

#[derive(Args)]
struct BuildDbArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Chunk size (defaults to the preset's).
    #[arg(long)]
    m: Option<usize>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Also index this split (e.g. `validation` for evaluation databases).
    #[arg(long)]
    include_split: Option<String>,
    /// Attach an IVF index with this many centroids.
    #[arg(long)]
    ivf: Option<usize>,
    /// Existing vocabulary; when absent one is trained on the training split
    /// and written next to the database.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Vocabulary (defaults to the one beside the database).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    no_clip: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Database over train ∪ validation.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Model config (defaults to `model.cfg` beside the checkpoint).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log-scale y axis on the bucket histogram.
    #[arg(long)]
    log_y: bool,
    /// Vocabulary for bits-per-byte figures.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Chunk size used to locate the duplicate buckets `m+1..=2m`.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the reproduction experiment and report its four checks.
    #[arg(long)]
    acceptance: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Retrieval database; without one the model runs with retrieval off.
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    /// Sampling temperature; greedy when omitted.
    #[arg(long)]
    temperature: Option<f64>,
}

struct Globals {
    seed: u64,
    preset: String,
    root: PathBuf,
}

impl Globals {
    fn out(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.root.join(default))
    }
}

fn sidecar_vocab(db: &Path) -> PathBuf {
    db.with_extension("vocab.txt")
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model_config(path: &Path) -> Result<RetroConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RetroConfig::from_text(&text)?)
}

fn tokenized(corpus: &Path, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    let docs = read_jsonl(corpus)?;
    Ok(tokenize_all(&docs, vocab))
}

fn cmd_synth(g: &Globals, a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_docs: a.n_docs.unwrap_or(d.n_docs),
        doc_len: a.doc_len.unwrap_or(d.doc_len),
        duplication_rate: a.rate.unwrap_or(d.duplication_rate),
        train_duplication_rate: a.train_rate.unwrap_or(d.train_duplication_rate),
        validation_fraction: a.validation_fraction.unwrap_or(d.validation_fraction),
        seed: sub_seed(g.seed, "corpus"),
        ..d
    };
    let docs = synth_corpus(&spec)?;
    let out = g.out(a.out, "corpus.jsonl");
    write_jsonl(&out, &docs)?;
    info!("wrote {} documents to {}", docs.len(), out.display());
    Ok(())
}

fn cmd_build_db(g: &Globals, a: BuildDbArgs) -> Result<()> {
    let out = g.out(a.out, "db.rdb");
    let docs = read_jsonl(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(path) => load_vocab(path)?,
        None => {
            let texts = docs.iter().filter(|d| d.split == Split::Train).map(|d| d.text.as_str());
            train_bpe(texts, a.vocab_size)?
        }
    };
    let side = sidecar_vocab(&out);
    if a.vocab.as_deref() != Some(side.as_path()) {
        vocab.save(&side)?;
    }
    let seqs = tokenize_all(&docs, &vocab);
    let mut keep = vec![Split::Train];
    match a.include_split.as_deref() {
        None => {}
        Some("validation") => keep.push(Split::Validation),
        Some("train") => {}
        Some(other) => bail!("unknown split {other:?} (expected train or validation)"),
    }
    let rows: Vec<TokenSequence> = seqs.into_iter().filter(|s| keep.contains(&s.split)).collect();
    let m = match a.m {
        Some(m) => m,
        None => RetroConfig::preset(&g.preset)?.m,
    };
    let mut db = ChunkDatabase::build(&rows, ChunkingConfig::new(m)?, a.d, sub_seed(g.seed, "embedder"))?;
    if let Some(c) = a.ivf {
        db = db.with_ivf(c, 20, sub_seed(g.seed, "ivf"))?;
    }
    db.save(&out)?;
    info!("wrote {} pairs to {} (vocabulary {})", db.len(), out.display(), side.display());
    Ok(())
}

fn cmd_train(g: &Globals, a: TrainArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab.clone().unwrap_or_else(|| sidecar_vocab(&a.db)))?;
    let db = ChunkDatabase::load(&a.db)?;
    let seqs = tokenized(&a.corpus, &vocab)?;
    let docs = split_of(&seqs, Split::Train);
    let mut model = RetroConfig::preset(&g.preset)?;
    model.vocab_size = vocab.size();
    model.m = db.m();
    let mut tc = TrainConfig::preset(&g.preset)?;
    tc.steps = a.steps.unwrap_or(tc.steps);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.checkpoint_every = a.checkpoint_every.unwrap_or(tc.checkpoint_every);
    if a.no_clip {
        tc.clip_norm = None;
    }
    tc.seed = sub_seed(g.seed, "shuffle");
    let out = g.out(a.out, "train");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(MODEL_FILE), model.to_text())?;
    let state = match &a.resume {
        Some(path) => TrainState::from_checkpoint(&model, &read_checkpoint(path)?)?,
        None => TrainState::fresh(ModelParams::init(&model, sub_seed(g.seed, "init"))?),
    };
    let report = train(&model, state, &db, &docs, &tc, Some(&out))?;
    write_loss_csv(&out.join("loss.csv"), &report.losses)?;
    if let Some(last) = report.losses.last() {
        info!("finished at step {} with loss {:.4}", last.0, last.1);
    }
    for p in &report.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}

fn checkpoint_model(checkpoint: &Path, given: Option<PathBuf>) -> Result<RetroConfig> {
    let path = given.unwrap_or_else(|| checkpoint.with_file_name(MODEL_FILE));
    load_model_config(&path)
}

fn cmd_eval(g: &Globals, a: EvalArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab.clone().unwrap_or_else(|| sidecar_vocab(&a.db)))?;
    let model = checkpoint_model(&a.checkpoint, a.model)?;
    let params = ModelParams::from_checkpoint(&model, &read_checkpoint(&a.checkpoint)?)?;
    let db = ChunkDatabase::load(&a.db)?;
    let seqs = tokenized(&a.corpus, &vocab)?;
    let val = split_of(&seqs, Split::Validation);
    let records = evaluate(&params, &model, &db, &val)?;
    let out = g.out(a.out, "eval");
    write_records(&out.join(RECORDS_FILE), &records)?;
    let s = summarize(&records, Some(&vocab))?;
    println!(
        "{} tokens: mean loss on {:.4}, off {:.4}; summed off-on gap {:.4}",
        s.tokens, s.mean_loss_on, s.mean_loss_off, s.aggregate_gap
    );
    Ok(())
}

fn print_checks(c: &ReproductionChecks) {
    let mark = |ok: bool| if ok { "yes" } else { "no" };
    println!("retrieval lowers mean loss:          {} ({:.4} vs {:.4})", mark(c.retrieval_helps()), c.mean_loss_on, c.mean_loss_off);
    println!(
        "overlap n>=4 at most half of n=0:    {} ({:?} vs {:?})",
        mark(c.overlap_loss_drop()),
        c.high_overlap_mean,
        c.zero_overlap_mean
    );
    println!(
        "gain concentrated in overlap:        {} ({:.3} vs {:.3})",
        mark(c.gain_from_overlap()),
        c.overlapping_delta,
        c.zero_overlap_delta
    );
    println!("duplicate buckets populated:         {} ({} tokens)", mark(c.duplicate_jump()), c.upper_bucket_tokens);
}

fn cmd_analyze(g: &Globals, a: AnalyzeArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let vocab = a.vocab.as_deref().map(load_vocab).transpose()?;
    let out = g.out(a.out, "analysis");
    for p in analyze(&records, vocab.as_ref(), &out, a.log_y)? {
        println!("{}", p.display());
    }
    let m = match a.m {
        Some(m) => m,
        None => RetroConfig::preset(&g.preset)?.m,
    };
    print_checks(&ReproductionChecks::compute(&records, m));
    Ok(())
}

fn cmd_pipeline(g: &Globals, a: PipelineArgs, seed_given: bool, preset_given: bool) -> Result<()> {
    let mut cfg = match (&a.config, a.acceptance) {
        (Some(_), true) => bail!("--config and --acceptance are mutually exclusive"),
        (Some(path), false) => PipelineConfig::load(path)?,
        (None, true) => PipelineConfig::acceptance(g.seed),
        (None, false) => PipelineConfig::default(),
    };
    if seed_given {
        cfg.seed = g.seed;
    }
    if preset_given {
        cfg.preset = g.preset.clone();
    }
    let default = if a.acceptance { format!("acceptance-seed{}", cfg.seed) } else { "pipeline".into() };
    let out = g.out(a.out, &default);
    let outcome = run_pipeline(&cfg, &out)?;
    println!("artifacts in {} (manifest {})", out.display(), out.join(MANIFEST_FILE).display());
    if outcome.executed.is_empty() {
        println!("all stages up to date");
    } else {
        println!("ran stages: {}", outcome.executed.join(", "));
    }
    let checks: ReproductionChecks = serde_json::from_str(&std::fs::read_to_string(out.join(CHECKS_FILE))?)?;
    print_checks(&checks);
    if a.acceptance {
        let all = checks.retrieval_helps() && checks.overlap_loss_drop() && checks.gain_from_overlap() && checks.duplicate_jump();
        println!("acceptance: {}", if all { "PASS" } else { "FAIL" });
    }
    Ok(())
}

fn cmd_generate(g: &Globals, a: GenerateArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = checkpoint_model(&a.checkpoint, a.model)?;
    let params = ModelParams::from_checkpoint(&model, &read_checkpoint(&a.checkpoint)?)?;
    let db = a.db.as_deref().map(ChunkDatabase::load).transpose()?;
    let mut prompt = vec![BOS];
    prompt.extend(vocab.encode(&a.prompt));
    let sampling = match a.temperature {
        Some(temperature) => Sampling::Temperature {
            temperature,
            seed: sub_seed(g.seed, "sampling"),
        },
        None => Sampling::Greedy,
    };
    let retrieval = RetrievalConfig::exact(model.k);
    let out = generate(&params, &model, db.as_ref(), &retrieval, &prompt, a.tokens, sampling)?;
    println!("{}", vocab.decode(&out)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let preset = cli.preset.clone().unwrap_or_else(|| "desk".into());
    if !PRESETS.contains(&preset.as_str()) {
        bail!("unknown preset {preset:?} (expected one of {PRESETS:?})");
    }
    let g = Globals {
        seed: cli.seed.unwrap_or(0),
        preset,
        root: cli.root,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&g, a),
        Command::BuildDb(a) => cmd_build_db(&g, a),
        Command::Train(a) => cmd_train(&g, a),
        Command::Eval(a) => cmd_eval(&g, a),
        Command::Analyze(a) => cmd_analyze(&g, a),
        Command::Pipeline(a) => cmd_pipeline(&g, a, cli.seed.is_some(), cli.preset.is_some()),
        Command::Generate(a) => cmd_generate(&g, a),
    }
}
