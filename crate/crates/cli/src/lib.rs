//! `gazeattn` command-line pipeline: corpus generation, saliency-model
//! training, joint task training under every ablation, evaluation and
//! attention-map emission.
//!
//! Every subcommand prints its metrics as one JSON line on stdout and writes
//! file artifacts under `--out`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gazeattn_core::config::ConfigRecord;
use gazeattn_core::corpus::{
    pos_tag, read_compression, read_gaze, read_pairs, read_tagged, write_compression, write_gaze, write_pairs,
    write_tagged, CorpusSizes, PosTag, TaggedSentence,
};
use gazeattn_core::embeddings::{load_embeddings, tokenize, EmbeddingTable, Vocabulary};
use gazeattn_core::gaze_synth::{generate_pretraining_corpus, GazeRecord, SimulatorParams};
use gazeattn_core::metrics::{
    bleu4, compression_ratio, content_function_split, duration_mse, mean_deletion_f1, mean_jsd, spearman_pos,
};
use gazeattn_core::paragen::{paragen_vocab, train_paragen};
use gazeattn_core::sentcomp::train_sentcomp;
use gazeattn_core::tsm::{finetune, pretrain};
use gazeattn_core::{
    corpus, gaze_synth, paragen, sentcomp, tsm, AblationMode, AttentionTrace, Checkpoint, Error, FlatConfig, JointRun,
    ParagenConfig, ParagenModel, Result, SentcompConfig, SentcompModel, Stage, Task, TsmConfig, TsmModel,
};
use serde_json::{json, Value};

pub mod svg;

/// Config prefix for the simulator that stands in for human readers.
pub const HUMAN_GAZE_PREFIX: &str = "human_gaze";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gazeattn",
    version,
    about = "Gaze-supervised saliency and attention pipeline"
)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config entry, e.g. `--set tsm.hidden_size=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic task corpora, simulated human gaze and pretraining gaze.
    GenSynth(GenSynthArgs),
    /// Pretrain and/or finetune the text saliency model.
    TrainTsm(TrainTsmArgs),
    /// Score saliency predictions against gold gaze.
    EvalTsm(EvalTsmArgs),
    /// Jointly train a task network with the saliency model.
    TrainTask(TrainTaskArgs),
    /// Evaluate a trained task network on a test file.
    EvalTask(EvalTaskArgs),
    /// Write the saliency-over-epochs and attention maps for a probe sentence.
    EmitMaps(EmitMapsArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 200)]
    compression: usize,
    #[arg(long, default_value_t = 100)]
    gaze_sentences: usize,
    #[arg(long, default_value_t = 3)]
    readers: usize,
    /// Sentences simulated for TSM pretraining.
    #[arg(long, default_value_t = 1000)]
    synthetic_sentences: usize,
    /// Simulator runs averaged per pretraining sentence.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Size of each held-out test split relative to its training split.
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Debug, Args)]
struct TrainTsmArgs {
    #[arg(long)]
    out: PathBuf,
    /// Synthetic gaze for pretraining.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Human gaze for finetuning.
    #[arg(long)]
    human: Option<PathBuf>,
    /// Existing checkpoint to finetune instead of building a new model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Word vectors, one `token v1 … vd` line per word.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalTsmArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Predicted saliency in the gaze format, one record per sentence.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// POS tags for the gold sentences; the rule-based tagger is used otherwise.
    #[arg(long)]
    tags: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainTaskArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Saliency checkpoint; required by every mode except no-fixation.
    #[arg(long)]
    tsm: Option<PathBuf>,
    /// Overrides `<task>.ablation` from the config.
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalTaskArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tsm: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Debug, Args)]
struct EmitMapsArgs {
    #[arg(long)]
    task_checkpoint: PathBuf,
    #[arg(long)]
    tsm_checkpoint: Option<PathBuf>,
    /// Probe sentence; defaults to the one recorded during training.
    #[arg(long)]
    probe: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI on `std::env::args_os()`-style arguments (program name first).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(metrics) => {
            let _ = writeln!(stdout, "{metrics}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Config mistakes are invocation errors; bad files and contract breaches
/// are data errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(cli: Cli) -> Result<Value> {
    let config = load_config(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(&a, &config),
        Command::TrainTsm(a) => train_tsm(&a, &config),
        Command::EvalTsm(a) => eval_tsm(&a),
        Command::TrainTask(a) => train_task(&a, &config),
        Command::EvalTask(a) => eval_task(&a),
        Command::EmitMaps(a) => emit_maps(&a),
    }
}

/// Every key the config file may carry, with its default value.
pub fn default_config() -> FlatConfig {
    let mut cfg = FlatConfig::new();
    cfg.merge(&TsmConfig::default().to_flat(tsm::CONFIG_PREFIX));
    cfg.merge(&ParagenConfig::default().to_flat(paragen::CONFIG_PREFIX));
    cfg.merge(&SentcompConfig::default().to_flat(sentcomp::CONFIG_PREFIX));
    cfg.merge(&SimulatorParams::default().to_flat(gaze_synth::CONFIG_PREFIX));
    cfg.merge(&corpus::human_simulator_params().to_flat(HUMAN_GAZE_PREFIX));
    cfg
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<FlatConfig> {
    let mut cfg = match path {
        Some(p) => FlatConfig::read(p)?,
        None => FlatConfig::new(),
    };
    for item in overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v.trim());
    }
    let known = default_config();
    if let Some(key) = cfg.entries().keys().find(|k| known.get(k).is_none()) {
        return Err(Error::Config(format!("unknown config key '{key}'")));
    }
    Ok(cfg)
}

fn record<R: ConfigRecord>(mut base: R, prefix: &str, cfg: &FlatConfig) -> Result<R> {
    base.apply(prefix, cfg)?;
    Ok(base)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_synth(a: &GenSynthArgs, cfg: &FlatConfig) -> Result<Value> {
    if !(a.test_fraction > 0.0 && a.test_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "--test-fraction must lie in (0, 1], got {}",
            a.test_fraction
        )));
    }
    let pretraining = record(SimulatorParams::default(), gaze_synth::CONFIG_PREFIX, cfg)?;
    let human = record(corpus::human_simulator_params(), HUMAN_GAZE_PREFIX, cfg)?;
    let sizes = CorpusSizes {
        pairs: a.pairs,
        compression: a.compression,
        gaze_sentences: a.gaze_sentences,
        readers: a.readers,
    };
    let split = |n: usize| ((n as f64 * a.test_fraction).ceil() as usize).max(1);
    let test_sizes = CorpusSizes {
        pairs: split(a.pairs),
        compression: split(a.compression),
        gaze_sentences: split(a.gaze_sentences),
        readers: a.readers,
    };
    let train = corpus::make_synthetic_corpora_with(a.seed, sizes, &human)?;
    let test = corpus::make_synthetic_corpora_with(a.seed.wrapping_add(0x7e57), test_sizes, &human)?;
    let synth_sentences = corpus::grammar_sentences(a.seed.wrapping_add(0x5e7), a.synthetic_sentences);
    let synthetic = generate_pretraining_corpus(&synth_sentences, &train.lexicon, &pretraining, a.runs, a.seed)?;

    create_dir(&a.out)?;
    write_file(&a.out.join("pairs.tsv"), |w| write_pairs(w, &train.pairs))?;
    write_file(&a.out.join("pairs_test.tsv"), |w| write_pairs(w, &test.pairs))?;
    write_file(&a.out.join("compression.txt"), |w| {
        write_compression(w, &train.compression)
    })?;
    write_file(&a.out.join("compression_test.txt"), |w| {
        write_compression(w, &test.compression)
    })?;
    write_file(&a.out.join("human_gaze.tsv"), |w| write_gaze(w, &train.gaze))?;
    write_file(&a.out.join("human_gaze_test.tsv"), |w| {
        write_gaze(w, &rename_sentences(&test.gaze, "t"))
    })?;
    write_file(&a.out.join("synthetic_gaze.tsv"), |w| write_gaze(w, &synthetic))?;
    write_file(&a.out.join("lexicon.tsv"), |w| train.lexicon.write(w))?;
    let tagged = |gaze: &[GazeRecord]| -> Vec<TaggedSentence> {
        unique_sentences(gaze).into_iter().map(|t| pos_tag(&t)).collect()
    };
    write_file(&a.out.join("human_gaze.tags"), |w| {
        write_tagged(w, &tagged(&train.gaze))
    })?;
    write_file(&a.out.join("human_gaze_test.tags"), |w| {
        write_tagged(w, &tagged(&test.gaze))
    })?;
    Ok(json!({
        "command": "gen-synth",
        "seed": a.seed,
        "pairs": train.pairs.len(),
        "pairs_test": test.pairs.len(),
        "compression": train.compression.len(),
        "compression_test": test.compression.len(),
        "human_gaze_records": train.gaze.len(),
        "human_gaze_test_records": test.gaze.len(),
        "synthetic_gaze_records": synthetic.len(),
        "lexicon_entries": train.lexicon.len(),
    }))
}

/// Test split sentence ids get their own prefix so they never collide with training ids.
fn rename_sentences(gaze: &[GazeRecord], prefix: &str) -> Vec<GazeRecord> {
    gaze.iter()
        .cloned()
        .map(|mut r| {
            r.sentence_id = format!("{prefix}{}", r.sentence_id);
            r
        })
        .collect()
}

fn unique_sentences(gaze: &[GazeRecord]) -> Vec<Vec<String>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in gaze {
        if seen.insert(r.sentence_id.clone()) {
            out.push(r.tokens.clone());
        }
    }
    out
}

fn embedding_table(path: Option<&Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    match path {
        Some(p) => load_embeddings(p, vocab, dim, seed),
        None => Ok(EmbeddingTable::random(vocab, dim, seed)),
    }
}

fn last_loss(ckpt: &Checkpoint) -> Value {
    ckpt.provenance.epoch_losses.last().map_or(Value::Null, |&v| json!(v))
}

fn train_tsm(a: &TrainTsmArgs, cfg: &FlatConfig) -> Result<Value> {
    let synthetic = a.synthetic.as_deref().map(read_gaze).transpose()?;
    let human = a.human.as_deref().map(read_gaze).transpose()?;
    let ckpt = if let Some(init) = &a.init {
        if synthetic.is_some() {
            return Err(Error::Config(
                "--init and --synthetic are exclusive; pretrain from scratch or finetune a checkpoint".into(),
            ));
        }
        let human = human.ok_or_else(|| Error::Config("--init needs --human data to finetune on".into()))?;
        let start = Checkpoint::load(init)?;
        let base = TsmModel::from_checkpoint(&start)?.config;
        let config = record(base, tsm::CONFIG_PREFIX, cfg)?;
        finetune(&start, &human, &config, a.seed)?
    } else {
        if synthetic.is_none() && human.is_none() {
            return Err(Error::Config("train-tsm needs --synthetic, --human, or both".into()));
        }
        let config = record(TsmConfig::default(), tsm::CONFIG_PREFIX, cfg)?;
        let words = synthetic.iter().chain(&human).flatten().flat_map(|r| &r.tokens);
        let vocab = corpus::build_vocab(words, 1);
        let emb = embedding_table(a.embeddings.as_deref(), &vocab, config.embed_dim, a.seed)?;
        let model = TsmModel::new(config.clone(), vocab, &emb, a.seed)?;
        let start = match &synthetic {
            Some(s) => pretrain(model, s, a.seed)?,
            None => model.random_init_checkpoint(a.seed),
        };
        match &human {
            Some(h) => finetune(&start, h, &config, a.seed)?,
            None => start,
        }
    };
    create_dir(&a.out)?;
    let path = a.out.join("tsm.ckpt");
    ckpt.save(&path)?;
    Ok(json!({
        "command": "train-tsm",
        "stage": ckpt.provenance.stage.to_string(),
        "epochs": ckpt.provenance.epochs,
        "final_loss": last_loss(&ckpt),
        "config_hash": ckpt.provenance.config_hash,
    }))
}

fn tags_for(gold: &[GazeRecord], tags: Option<&Path>) -> Result<Vec<Vec<PosTag>>> {
    let Some(path) = tags else {
        return Ok(gold.iter().map(|r| pos_tag(&r.tokens).tags).collect());
    };
    let tagged = read_tagged(path)?;
    let lookup: std::collections::HashMap<&[String], &[PosTag]> = tagged
        .iter()
        .map(|t| (t.tokens.as_slice(), t.tags.as_slice()))
        .collect();
    gold.iter()
        .map(|r| {
            lookup.get(r.tokens.as_slice()).map(|t| t.to_vec()).ok_or_else(|| {
                Error::InsufficientData(format!("no tags for sentence {} in {}", r.sentence_id, path.display()))
            })
        })
        .collect()
}

fn eval_tsm(a: &EvalTsmArgs) -> Result<Value> {
    let gold = read_gaze(&a.gold)?;
    if gold.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no records", a.gold.display())));
    }
    let predicted: Vec<Vec<f64>> = if let Some(path) = &a.pred {
        let pred = read_gaze(path)?;
        let by_id: std::collections::HashMap<&str, &GazeRecord> =
            pred.iter().map(|r| (r.sentence_id.as_str(), r)).collect();
        gold.iter()
            .map(|g| {
                let p = by_id
                    .get(g.sentence_id.as_str())
                    .ok_or_else(|| Error::Contract(format!("no prediction for sentence {}", g.sentence_id)))?;
                if p.tokens != g.tokens {
                    return Err(Error::Contract(format!(
                        "prediction tokens differ from gold for sentence {}",
                        g.sentence_id
                    )));
                }
                Ok(p.durations.clone())
            })
            .collect::<Result<_>>()?
    } else {
        let ckpt = Checkpoint::load(a.checkpoint.as_deref().expect("clap requires --pred or --checkpoint"))?;
        let model = TsmModel::from_checkpoint(&ckpt)?;
        gold.iter()
            .map(|g| model.predict(&g.tokens).map(|d| d.u))
            .collect::<Result<_>>()?
    };
    let truth: Vec<Vec<f64>> = gold.iter().map(|g| g.durations.clone()).collect();
    let tags = tags_for(&gold, a.tags.as_deref())?;
    let mse = duration_mse(&predicted, &truth)?;
    let jsd = mean_jsd(&predicted, &truth)?;
    let optional = |r: Result<f64>| match r {
        Ok(v) => Ok(json!(v)),
        Err(Error::InsufficientData(msg)) => {
            log::warn!("{msg}");
            Ok(Value::Null)
        }
        Err(e) => Err(e),
    };
    let rho = optional(spearman_pos(&predicted, &truth, &tags))?;
    let (model_content, human_content) = match (
        content_function_split(&predicted, &tags),
        content_function_split(&truth, &tags),
    ) {
        (Ok(m), Ok(h)) => (json!(m.0), json!(h.0)),
        (Err(Error::InsufficientData(_)), _) | (_, Err(Error::InsufficientData(_))) => (Value::Null, Value::Null),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(json!({
        "command": "eval-tsm",
        "records": gold.len(),
        "mse": mse,
        "jsd": jsd,
        "spearman_rho": rho,
        "content_share_model": model_content,
        "content_share_human": human_content,
    }))
}

fn load_tsm_arg(path: Option<&Path>, mode: AblationMode) -> Result<Option<(Checkpoint, Vec<u8>)>> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let ckpt = Checkpoint::from_bytes(&bytes, &p.display().to_string())?;
            Ok(Some((ckpt, bytes)))
        }
        None if mode.needs_checkpoint() => Err(Error::Config(format!("ablation mode {mode} needs --tsm"))),
        None => Ok(None),
    }
}

fn train_task(a: &TrainTaskArgs, cfg: &FlatConfig) -> Result<Value> {
    let run: JointRun;
    let mode;
    let tsm_input;
    match a.task {
        Task::Paragen => {
            let mut config = record(ParagenConfig::default(), paragen::CONFIG_PREFIX, cfg)?;
            if let Some(m) = a.ablation {
                config.ablation = m;
            }
            mode = config.ablation;
            tsm_input = load_tsm_arg(a.tsm.as_deref(), mode)?;
            let corpus = read_pairs(&a.train)?;
            let model = match &a.embeddings {
                Some(p) => {
                    let vocab = paragen_vocab(&corpus);
                    let emb = load_embeddings(p, &vocab, config.embed_dim, a.seed)?;
                    ParagenModel::new(config, vocab, &emb, a.seed)?
                }
                None => ParagenModel::for_corpus(config, &corpus, a.seed)?,
            };
            run = train_paragen(model, &corpus, tsm_input.as_ref().map(|t| &t.0), a.seed)?;
        }
        Task::Sentcomp => {
            let mut config = record(SentcompConfig::default(), sentcomp::CONFIG_PREFIX, cfg)?;
            if let Some(m) = a.ablation {
                config.ablation = m;
            }
            mode = config.ablation;
            tsm_input = load_tsm_arg(a.tsm.as_deref(), mode)?;
            let corpus = read_compression(&a.train)?;
            let model = match &a.embeddings {
                Some(p) => {
                    let vocab = corpus::build_vocab(corpus.iter().flat_map(|e| &e.tokens), 1);
                    let emb = load_embeddings(p, &vocab, config.embed_dim, a.seed)?;
                    SentcompModel::new(config, vocab, &emb, a.seed)?
                }
                None => SentcompModel::for_corpus(config, &corpus, a.seed)?,
            };
            run = train_sentcomp(model, &corpus, tsm_input.as_ref().map(|t| &t.0), a.seed)?;
        }
    }
    create_dir(&a.out)?;
    let task_path = a.out.join("task.ckpt");
    run.task.save(&task_path)?;
    let tsm_path = a.out.join("tsm.ckpt");
    match (&run.tsm, &tsm_input) {
        // Frozen training must hand back the input bytes untouched.
        (Some(_), Some((_, bytes))) if !mode.trains_tsm() => write_bytes(&tsm_path, bytes)?,
        (Some(ckpt), _) => ckpt.save(&tsm_path)?,
        (None, _) => {}
    }
    run.trace.save(&a.out.join("trace.json"))?;
    Ok(json!({
        "command": "train-task",
        "task": a.task.to_string(),
        "ablation": mode.to_string(),
        "epochs": run.epoch_losses.len(),
        "first_loss": run.epoch_losses.first(),
        "final_loss": run.epoch_losses.last(),
        "tsm_checkpoint": run.tsm.is_some(),
    }))
}

/// Ablation mode a task checkpoint was trained under, checked against `task`.
fn task_mode(ckpt: &Checkpoint, task: Task) -> Result<AblationMode> {
    match ckpt.provenance.task {
        Some(t) if t == task => {}
        Some(t) => return Err(Error::Config(format!("checkpoint holds a {t} network, not {task}"))),
        None => return Err(Error::Config(format!("checkpoint is not a {task} task network"))),
    }
    let mode = ckpt
        .provenance
        .ablation
        .as_deref()
        .ok_or_else(|| Error::Config("task checkpoint records no ablation mode".into()))?;
    mode.parse()
}

/// Saliency model paired with a task checkpoint, or `None` for no-fixation.
fn paired_tsm(path: Option<&Path>, mode: AblationMode, task: Task) -> Result<Option<TsmModel>> {
    if mode == AblationMode::NoFixation {
        if path.is_some() {
            log::warn!("no-fixation network ignores the saliency checkpoint");
        }
        return Ok(None);
    }
    let path = path.ok_or_else(|| Error::Config(format!("a {mode} network needs its saliency checkpoint (--tsm)")))?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.provenance.stage == Stage::Joint && ckpt.provenance.task != Some(task) {
        return Err(Error::Config(format!(
            "saliency checkpoint was trained jointly with {}, not {task}",
            ckpt.provenance.task.map_or("nothing".to_string(), |t| t.to_string())
        )));
    }
    TsmModel::from_checkpoint(&ckpt).map(Some)
}

fn saliency_of(tsm: Option<&TsmModel>, tokens: &[String]) -> Result<Option<Vec<f64>>> {
    tsm.map(|m| m.predict(tokens).map(|d| d.u)).transpose()
}

fn eval_task(a: &EvalTaskArgs) -> Result<Value> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mode = task_mode(&ckpt, a.task)?;
    let tsm = paired_tsm(a.tsm.as_deref(), mode, a.task)?;
    match a.task {
        Task::Paragen => {
            let model = ParagenModel::from_checkpoint(&ckpt)?;
            let test = read_pairs(&a.test)?;
            let mut hyps = Vec::with_capacity(test.len());
            for pair in &test {
                let u = saliency_of(tsm.as_ref(), &pair.source)?;
                hyps.push(
                    model
                        .generate(&pair.source, u.as_deref(), model.config.beam_width)?
                        .tokens,
                );
            }
            let refs: Vec<Vec<String>> = test.iter().map(|p| p.target.clone()).collect();
            Ok(json!({
                "command": "eval-task",
                "task": "paragen",
                "ablation": mode.to_string(),
                "sentences": test.len(),
                "bleu4": bleu4(&hyps, &refs)?,
            }))
        }
        Task::Sentcomp => {
            let model = SentcompModel::from_checkpoint(&ckpt)?;
            let test = read_compression(&a.test)?;
            let mut masks = Vec::with_capacity(test.len());
            let mut ratio = 0.0;
            for ex in &test {
                let u = saliency_of(tsm.as_ref(), &ex.tokens)?;
                let out = model.compress(&ex.tokens, u.as_deref(), model.config.threshold)?;
                ratio += compression_ratio(&ex.tokens, &out.tokens)?;
                masks.push((out.keep, ex.keep.clone()));
            }
            if test.is_empty() {
                return Err(Error::InsufficientData(format!("{} has no examples", a.test.display())));
            }
            Ok(json!({
                "command": "eval-task",
                "task": "sentcomp",
                "ablation": mode.to_string(),
                "sentences": test.len(),
                "f1": mean_deletion_f1(&masks)?,
                "compression_ratio": ratio / test.len() as f64,
            }))
        }
    }
}

fn emit_maps(a: &EmitMapsArgs) -> Result<Value> {
    let ckpt = Checkpoint::load(&a.task_checkpoint)?;
    let task = ckpt.provenance.task.ok_or_else(|| {
        Error::Config(format!(
            "{} is not a task network checkpoint",
            a.task_checkpoint.display()
        ))
    })?;
    let mode = task_mode(&ckpt, task)?;
    let tsm = paired_tsm(a.tsm_checkpoint.as_deref(), mode, task)?;
    let history = ckpt.provenance.probe.clone().unwrap_or_default();
    let probe = match &a.probe {
        Some(text) => tokenize(text),
        None if !history.tokens.is_empty() => history.tokens.clone(),
        None => return Err(Error::Config("no probe sentence recorded; pass --probe".into())),
    };
    if probe.is_empty() {
        return Err(Error::Contract("probe sentence has no tokens".into()));
    }
    let u = saliency_of(tsm.as_ref(), &probe)?;
    let epoch_saliency = if history.tokens == probe && !history.saliency.is_empty() {
        history.saliency
    } else {
        if tsm.is_some() {
            log::warn!("probe differs from the training probe; saliency map shows the final epoch only");
        }
        u.iter().cloned().collect()
    };
    let trace = match task {
        Task::Paragen => {
            let model = ParagenModel::from_checkpoint(&ckpt)?;
            let generation = model.generate(&probe, u.as_deref(), model.config.beam_width)?;
            let mut output_tokens = generation.tokens;
            if !generation.truncated {
                output_tokens.push("</s>".to_string());
            }
            AttentionTrace {
                task: Some(task),
                probe_tokens: probe,
                epoch_saliency,
                attention: generation.attention,
                output_tokens,
                truncated: generation.truncated,
            }
        }
        Task::Sentcomp => {
            let model = SentcompModel::from_checkpoint(&ckpt)?;
            let out = model.compress(&probe, u.as_deref(), model.config.threshold)?;
            AttentionTrace {
                task: Some(task),
                probe_tokens: probe,
                epoch_saliency,
                attention: out.attention,
                output_tokens: out.tokens,
                truncated: false,
            }
        }
    };
    trace.check()?;
    create_dir(&a.out)?;
    trace.save(&a.out.join("trace.json"))?;
    write_bytes(&a.out.join("saliency.svg"), svg::saliency_strips(&trace).as_bytes())?;
    write_bytes(&a.out.join("attention.svg"), svg::attention_grid(&trace).as_bytes())?;
    Ok(json!({
        "command": "emit-maps",
        "task": task.to_string(),
        "ablation": mode.to_string(),
        "epochs": trace.epoch_saliency.len(),
        "steps": trace.attention.len(),
        "positions": trace.probe_tokens.len(),
        "output": trace.output_tokens.join(" "),
    }))
}
