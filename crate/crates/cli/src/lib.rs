//! The `adtext` command line.
//!
//! Each subcommand reads its inputs, writes its outputs and leaves a
//! `<output>.manifest.json` (or `run_manifest.json` inside an output
//! directory) naming the command, the resolved configuration and its hash,
//! the seed and the toolkit version.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use adtext_core::analysis::{
    align_words, compute_embeddings, export_embeddings, export_heatmap, merge_per_word, token_attention,
    WordMerge,
};
use adtext_core::checkpoint::{load_checkpoint, save_checkpoint};
use adtext_core::encoder::{EncoderConfig, EncoderModel, HeadActivation, NormPlacement};
use adtext_core::eval::{eval_report, export_parity, pair_report, read_predictions, write_json, write_predictions, PredictionRecord};
use adtext_core::featurize::{featurize, merge_description_cache, read_corpus, write_corpus, DescriptionCache, SerializedSample, TextFormat};
use adtext_core::synth::{generate, SynthConfig};
use adtext_core::system::{load_dataset, save_dataset, AtomicSystem, Split};
use adtext_core::tokenizer::{build_vocab, encode, TokenSequence, Vocabulary};
use adtext_core::train::{pretrain_mlm, train_regression, write_history, Objective, TrainRunConfig};

pub const SEED_ENV: &str = "ADTEXT_SEED";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bundled fixture: the NH3/VCr3 system plus small synthetic systems.
pub const FIXTURE_SYSTEMS: &str = include_str!("../fixtures/systems.jsonl");

#[derive(Debug, Parser)]
#[command(name = "adtext", version, about = "Text-based adsorption energy toolkit")]
pub struct Cli {
    /// Seed for every random draw (the ADTEXT_SEED environment variable
    /// overrides it).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file whose keys override command-line flags. Keys may sit at
    /// the top level or in a table named after the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Serialize systems into one of the text formats.
    Featurize(FeaturizeArgs),
    /// Build a vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Masked-token pretraining on a corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune the regression head and encoder on labelled text.
    Train(TrainArgs),
    /// Predict energies for a corpus.
    Predict(PredictArgs),
    /// Split-wise MAE, parity data and pair statistics.
    Eval(EvalArgs),
    /// Energy-difference pair counts, SECR and error propagation.
    Pairs(PairsArgs),
    /// Per-word attention heatmaps.
    Attention(AttentionArgs),
    /// First-token embeddings for external projection.
    Embeddings(EmbeddingsArgs),
    /// Run the whole pipeline on the bundled fixture.
    Smoke(SmokeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    S1,
    S2,
    S3,
    S4,
    S5,
    Desc,
}

impl From<FormatArg> for TextFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::S1 => TextFormat::S1,
            FormatArg::S2 => TextFormat::S2,
            FormatArg::S3 => TextFormat::S3,
            FormatArg::S4 => TextFormat::S4,
            FormatArg::S5 => TextFormat::S5,
            FormatArg::Desc => TextFormat::Desc,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Spread validation systems over the four validation split labels.
    #[arg(long)]
    pub mixed_splits: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FeaturizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::S4)]
    pub format: FormatArg,
    /// Covalent contact tolerance in angstrom.
    #[arg(long, default_value_t = adtext_core::featurize::DEFAULT_CUTOFF_TOLERANCE)]
    pub tolerance: f64,
    /// Fall back to the header-only string when no binding is detected.
    #[arg(long)]
    pub fallback: bool,
    /// Pre-generated prose to append to description-format samples.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Feed-forward width; 4 x hidden when omitted.
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = HeadArg::Tanh)]
    pub head_activation: HeadArg,
    /// Apply layer normalization before each sublayer instead of after.
    #[arg(long)]
    pub pre_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Tanh,
    Gelu,
}

impl ModelArgs {
    fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.layers,
            n_heads: self.heads,
            hidden_size: self.hidden,
            ffn_size: self.ffn.unwrap_or(4 * self.hidden),
            max_positions: self.max_positions,
            vocab_size,
            dropout_rate: self.dropout,
            head_activation: match self.head_activation {
                HeadArg::Tanh => HeadActivation::Tanh,
                HeadArg::Gelu => HeadActivation::Gelu,
            },
            norm: if self.pre_norm { NormPlacement::Pre } else { NormPlacement::Post },
            gelu: "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    /// Base learning rate of the lowest group.
    #[arg(long, default_value_t = 1e-6)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Clip gradients to this global norm.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl OptimArgs {
    fn run_config(&self, seed: u64, objective: Objective) -> TrainRunConfig {
        let mut cfg = TrainRunConfig {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            early_stopping_patience: self.patience,
            seed,
            objective,
            base_lr: self.lr,
            grad_clip: self.grad_clip,
            ..Default::default()
        };
        cfg.adamw.weight_decay = self.weight_decay;
        cfg
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    /// Separate output projection instead of the token embedding table.
    #[arg(long)]
    pub untied: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Labelled corpus; `train` samples are fitted, validation splits scored.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this (e.g. pretrained) checkpoint; its head is reset.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Systems file supplying adsorbate and bulk labels.
    #[arg(long)]
    pub systems: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only predict these splits (repeatable); all when omitted.
    #[arg(long = "split")]
    pub splits: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Report directory to create.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PairsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Report directory to create.
    #[arg(long)]
    pub report: PathBuf,
    /// Pair across splits instead of within each split.
    #[arg(long)]
    pub global: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeArg {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttentionArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Systems to profile (repeatable); all when omitted.
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Layers to export; first and last when omitted.
    #[arg(long = "layer")]
    pub layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = MergeArg::Sum)]
    pub merge: MergeArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EmbeddingsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub systems: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SmokeArgs {
    /// Directory that receives every artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Systems file; the bundled fixture when omitted.
    #[arg(long)]
    pub systems: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::S4)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 3)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub train_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

/// Error caused by the invocation or its inputs (exit code 1).
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Exit code for a failed run: 1 for bad input, 2 for internal faults.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use adtext_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Shape(_)
                | E::NonFiniteGradient(_)
                | E::AttentionNotCaptured
                | E::UnassignedToken(_)
                | E::LayerOutOfRange { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

/// Parse `argv` (program name first) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            code
        }
    }
}

/// Seed precedence: `--seed` < config file `seed` < `ADTEXT_SEED`.
fn resolve_seed(cli: &Cli, file: Option<&serde_json::Map<String, serde_json::Value>>) -> Result<u64> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| user(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
    }
    if let Some(s) = file.and_then(|m| m.get("seed")) {
        return s
            .as_u64()
            .ok_or_else(|| user(format!("config seed {s} is not an unsigned integer")));
    }
    Ok(cli.seed.unwrap_or(0))
}

fn load_config_table(cli: &Cli, command: &str) -> Result<Option<serde_json::Map<String, serde_json::Value>>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    let value: toml::Value =
        toml::from_str(&text).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    let json = serde_json::to_value(value)?;
    let serde_json::Value::Object(mut top) = json else {
        return Err(user("config must be a table"));
    };
    let section = top.remove(command);
    let mut merged: serde_json::Map<String, serde_json::Value> = top
        .into_iter()
        .filter(|(_, v)| !v.is_object())
        .collect();
    if let Some(serde_json::Value::Object(s)) = section {
        merged.extend(s);
    }
    Ok(Some(merged))
}

/// Overlay config-file keys on parsed flags.
fn apply_config<T: Serialize + DeserializeOwned>(
    args: &T,
    file: Option<&serde_json::Map<String, serde_json::Value>>,
) -> Result<T> {
    let Some(file) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(args)?)?);
    };
    let serde_json::Value::Object(mut base) = serde_json::to_value(args)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in file {
        if k == "seed" {
            continue;
        }
        if !base.contains_key(k) {
            return Err(user(format!("unknown config key {k:?}")));
        }
        base.insert(k.clone(), v.clone());
    }
    serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| user(format!("config: {e}")))
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    toolkit_version: &'a str,
    seed: u64,
    threads: usize,
    config_hash: String,
    config: &'a T,
}

fn config_hash<T: Serialize>(args: &T, seed: u64) -> String {
    let text = serde_json::to_string(&(args, seed)).expect("config serializes");
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn write_manifest<T: Serialize>(ctx: &Ctx, command: &str, args: &T, out: &Path, is_dir: bool) -> Result<()> {
    let m = RunManifest {
        command,
        toolkit_version: VERSION,
        seed: ctx.seed,
        threads: ctx.threads,
        config_hash: config_hash(args, ctx.seed),
        config: args,
    };
    write_json(manifest_path(out, is_dir), &m)?;
    Ok(())
}

struct Ctx {
    seed: u64,
    threads: usize,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(user(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

/// Build a directory under a temporary sibling name, then move it into
/// place so readers never see a half-written directory.
fn atomic_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    ensure_parent(out)?;
    let mut tmp_name = out.file_name().map(OsString::from).unwrap_or_else(|| "out".into());
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = out.with_file_name(tmp_name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("replacing {}", out.display()))?;
    }
    fs::rename(&tmp, out).with_context(|| format!("moving output into {}", out.display()))?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(user("--threads must be at least 1"));
    }
    macro_rules! dispatch {
        ($name:literal, $args:expr, $f:ident) => {{
            let table = load_config_table(cli, $name)?;
            let ctx = Ctx {
                seed: resolve_seed(cli, table.as_ref())?,
                threads: cli.threads,
            };
            let args = apply_config($args, table.as_ref())?;
            $f(&ctx, &args)
        }};
    }
    match &cli.command {
        Command::Synth(a) => dispatch!("synth", a, cmd_synth),
        Command::Featurize(a) => dispatch!("featurize", a, cmd_featurize),
        Command::BuildVocab(a) => dispatch!("build-vocab", a, cmd_build_vocab),
        Command::Pretrain(a) => dispatch!("pretrain", a, cmd_pretrain),
        Command::Train(a) => dispatch!("train", a, cmd_train),
        Command::Predict(a) => dispatch!("predict", a, cmd_predict),
        Command::Eval(a) => dispatch!("eval", a, cmd_eval),
        Command::Pairs(a) => dispatch!("pairs", a, cmd_pairs),
        Command::Attention(a) => dispatch!("attention", a, cmd_attention),
        Command::Embeddings(a) => dispatch!("embeddings", a, cmd_embeddings),
        Command::Smoke(a) => dispatch!("smoke", a, cmd_smoke),
    }
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let systems = generate(&SynthConfig {
        n_systems: a.n,
        noise_sigma: a.noise,
        val_fraction: a.val_fraction,
        seed: ctx.seed,
        mixed_validation_splits: a.mixed_splits,
    })?;
    ensure_parent(&a.out)?;
    save_dataset(&a.out, &systems)?;
    write_manifest(ctx, "synth", a, &a.out, false)
}

fn featurize_systems(systems: &[AtomicSystem], a: &FeaturizeArgs) -> Result<Vec<SerializedSample>> {
    let format: TextFormat = a.format.into();
    let mut samples = systems
        .iter()
        .map(|s| featurize(s, format, a.tolerance, a.fallback))
        .collect::<adtext_core::Result<Vec<_>>>()?;
    if let Some(path) = &a.descriptions {
        if format != TextFormat::Desc {
            return Err(user("--descriptions only applies to --format desc"));
        }
        let cache = DescriptionCache::load(path)?;
        let report = merge_description_cache(&mut samples, systems, &cache)?;
        log::info!("description cache: {report:?}");
    }
    Ok(samples)
}

fn cmd_featurize(ctx: &Ctx, a: &FeaturizeArgs) -> Result<()> {
    require_file(&a.input, "systems file")?;
    let systems = load_dataset(&a.input)?;
    let samples = featurize_systems(&systems, a)?;
    ensure_parent(&a.out)?;
    write_corpus(&a.out, &samples)?;
    write_manifest(ctx, "featurize", a, &a.out, false)
}

fn cmd_build_vocab(ctx: &Ctx, a: &BuildVocabArgs) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let corpus = read_corpus(&a.corpus)?;
    let vocab = build_vocab(corpus.iter().map(|s| s.text.as_str()), a.min_freq)?;
    ensure_parent(&a.out)?;
    vocab.save(&a.out)?;
    write_manifest(ctx, "build-vocab", a, &a.out, false)
}

fn load_inputs(corpus: &Path, vocab: &Path) -> Result<(Vec<SerializedSample>, Vocabulary)> {
    require_file(corpus, "corpus")?;
    require_file(vocab, "vocabulary")?;
    Ok((read_corpus(corpus)?, Vocabulary::load(vocab)?))
}

fn cmd_pretrain(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let config = a.model.config(vocab.len());
    config.validate().map_err(|e| user(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let model = EncoderModel::new(config, &mut rng)?;
    let seqs: Vec<TokenSequence> = corpus
        .iter()
        .map(|s| encode(&s.text, &vocab, a.model.max_positions))
        .collect();
    let mut run = a.optim.run_config(ctx.seed, Objective::Mlm);
    run.mask_rate = a.mask_rate;
    run.tied_projection = !a.untied;
    let out = pretrain_mlm(&model, &seqs, &vocab, &run)?;
    atomic_dir(&a.out, |dir| {
        save_checkpoint(&out.model, dir, &vocab.hash(), out.steps, ctx.seed)?;
        write_history(dir.join("history.jsonl"), &out.history)?;
        write_manifest(ctx, "pretrain", a, dir, true)
    })
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let model = match &a.init {
        Some(dir) => {
            let (mut m, _) = load_checkpoint(dir, Some(&vocab.hash()))?;
            if m.config.vocab_size != vocab.len() {
                return Err(user(format!(
                    "checkpoint {} expects a vocabulary of {}, got {}",
                    dir.display(),
                    m.config.vocab_size,
                    vocab.len()
                )));
            }
            m.reset_head(&mut rng);
            m
        }
        None => {
            let config = a.model.config(vocab.len());
            config.validate().map_err(|e| user(e.to_string()))?;
            EncoderModel::new(config, &mut rng)?
        }
    };
    let (train, val): (Vec<SerializedSample>, Vec<SerializedSample>) =
        corpus.into_iter().partition(|s| s.split == Split::Train);
    if train.is_empty() || val.is_empty() {
        return Err(user(format!(
            "corpus needs train and validation samples; found {} and {}",
            train.len(),
            val.len()
        )));
    }
    let run = a.optim.run_config(ctx.seed, Objective::RegressionMae);
    let out = train_regression(&model, &train, &val, &vocab, &run)?;
    log::info!("best validation MAE {:.4} eV at epoch {}", out.best_val_mae, out.best_epoch);
    atomic_dir(&a.out, |dir| {
        save_checkpoint(&out.best_model, dir, &vocab.hash(), out.steps, ctx.seed)?;
        write_history(dir.join("history.jsonl"), &out.history)?;
        write_manifest(ctx, "train", a, dir, true)
    })
}

/// Order-preserving map over at most `threads` scoped workers.
fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> adtext_core::Result<U> + Sync,
) -> adtext_core::Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<adtext_core::Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn systems_by_id(path: &Path) -> Result<BTreeMap<String, AtomicSystem>> {
    require_file(path, "systems file")?;
    Ok(load_dataset(path)?.into_iter().map(|s| (s.id.clone(), s)).collect())
}

fn cmd_predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let systems = systems_by_id(&a.systems)?;
    let (model, _) = load_checkpoint(&a.checkpoint, Some(&vocab.hash()))?;
    let wanted: Vec<Split> = a
        .splits
        .iter()
        .map(|s| s.parse::<Split>().map_err(|e| user(e.to_string())))
        .collect::<Result<_>>()?;
    let selected: Vec<&SerializedSample> = corpus
        .iter()
        .filter(|s| wanted.is_empty() || wanted.contains(&s.split))
        .collect();
    let max = model.config.max_positions;
    let preds = par_map(&selected, ctx.threads, |s| model.predict(&encode(&s.text, &vocab, max)))?;
    let mut records = Vec::with_capacity(selected.len());
    for (s, p) in selected.iter().zip(preds) {
        let sys = systems
            .get(&s.system_id)
            .ok_or_else(|| user(format!("system {} missing from {}", s.system_id, a.systems.display())))?;
        records.push(PredictionRecord::new(
            &s.system_id,
            s.split,
            &sys.adsorbate_smiles,
            &sys.bulk_formula,
            s.energy_ev.unwrap_or(f64::NAN),
            p,
        ));
    }
    ensure_parent(&a.out)?;
    write_predictions(&a.out, &records)?;
    write_manifest(ctx, "predict", a, &a.out, false)
}

fn labelled_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    require_file(path, "predictions file")?;
    let records = read_predictions(path)?;
    if let Some(r) = records.iter().find(|r| !r.label.is_finite()) {
        return Err(user(format!("system {} has no label", r.system_id)));
    }
    Ok(records)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let records = labelled_predictions(&a.pred)?;
    let records: Vec<PredictionRecord> = records.into_iter().filter(|r| r.split != Split::Train).collect();
    if records.is_empty() {
        return Err(user("no validation-split predictions to evaluate"));
    }
    let report = eval_report(&records)?;
    atomic_dir(&a.report, |dir| {
        write_json(dir.join("report.json"), &report)?;
        export_parity(dir, &records)?;
        write_manifest(ctx, "eval", a, dir, true)
    })
}

fn cmd_pairs(ctx: &Ctx, a: &PairsArgs) -> Result<()> {
    let records = labelled_predictions(&a.pred)?;
    let report = pair_report(&records, !a.global)?;
    for (group, n) in &report.pair_counts {
        println!("{group}\t{n} pairs");
    }
    atomic_dir(&a.report, |dir| {
        write_json(dir.join("pairs_report.json"), &report)?;
        write_manifest(ctx, "pairs", a, dir, true)
    })
}

fn cmd_attention(ctx: &Ctx, a: &AttentionArgs) -> Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let (model, _) = load_checkpoint(&a.checkpoint, Some(&vocab.hash()))?;
    let n_layers = model.config.n_layers;
    let layers: Vec<usize> = if a.layers.is_empty() {
        let mut l = vec![0, n_layers - 1];
        l.dedup();
        l
    } else {
        a.layers.clone()
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(user(format!("layer {bad} out of range for {n_layers} layers")));
    }
    let selected: Vec<&SerializedSample> = if a.ids.is_empty() {
        corpus.iter().collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                corpus
                    .iter()
                    .find(|s| &s.system_id == id)
                    .ok_or_else(|| user(format!("system {id} not in corpus")))
            })
            .collect::<Result<_>>()?
    };
    let merge = match a.merge {
        MergeArg::Sum => WordMerge::Sum,
        MergeArg::Mean => WordMerge::Mean,
    };
    let max = model.config.max_positions;
    let per_sample = par_map(&selected, ctx.threads, |s| {
        let seq = encode(&s.text, &vocab, max);
        let out = model.forward(&seq, true)?;
        let alignment = align_words(&seq, &vocab);
        layers
            .iter()
            .map(|&l| {
                let scores = token_attention(out.attention.as_ref(), l)?;
                Ok((s.system_id.clone(), merge_per_word(&scores, &alignment, l, merge)?))
            })
            .collect::<adtext_core::Result<Vec<_>>>()
    })?;
    let profiles: Vec<_> = per_sample.into_iter().flatten().collect();
    ensure_parent(&a.out)?;
    export_heatmap(&a.out, &profiles)?;
    write_manifest(ctx, "attention", a, &a.out, false)
}

fn cmd_embeddings(ctx: &Ctx, a: &EmbeddingsArgs) -> Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let systems = systems_by_id(&a.systems)?;
    let (model, _) = load_checkpoint(&a.checkpoint, Some(&vocab.hash()))?;
    let max = model.config.max_positions;
    let mut items = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let sys = systems
            .get(&s.system_id)
            .ok_or_else(|| user(format!("system {} missing from {}", s.system_id, a.systems.display())))?;
        items.push((sys, encode(&s.text, &vocab, max)));
    }
    let rows = par_map(&items, ctx.threads, |(sys, seq)| {
        compute_embeddings(&model, &[(sys, seq)]).map(|mut v| v.remove(0))
    })?;
    ensure_parent(&a.out)?;
    export_embeddings(&a.out, &rows)?;
    write_manifest(ctx, "embeddings", a, &a.out, false)
}

/// Artifacts written by [`end_to_end_smoke`], relative to its directory.
pub const SMOKE_ARTIFACTS: [&str; 9] = [
    "corpus.jsonl",
    "vocab.txt",
    "pretrained/params.bin",
    "model/params.bin",
    "model/history.jsonl",
    "predictions.tsv",
    "eval/report.json",
    "heatmap.jsonl",
    "embeddings.tsv",
];

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage {name} failed"))
}

fn smoke_model() -> ModelArgs {
    ModelArgs {
        layers: 2,
        heads: 2,
        hidden: 32,
        ffn: None,
        max_positions: 128,
        dropout: 0.1,
        head_activation: HeadArg::Tanh,
        pre_norm: false,
    }
}

/// featurize → build-vocab → pretrain → train → predict → eval →
/// attention → embeddings → pairs, all inside `a.out`.
pub fn end_to_end_smoke(seed: u64, threads: usize, a: &SmokeArgs) -> Result<Vec<PathBuf>> {
    let ctx = Ctx { seed, threads };
    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let systems_path = match &a.systems {
        Some(p) => p.clone(),
        None => {
            let p = out.join("systems.jsonl");
            fs::write(&p, FIXTURE_SYSTEMS)?;
            p
        }
    };
    let corpus = out.join("corpus.jsonl");
    let vocab = out.join("vocab.txt");
    let pretrained = out.join("pretrained");
    let model_dir = out.join("model");
    let preds = out.join("predictions.tsv");
    let optim = |epochs| OptimArgs {
        epochs,
        batch_size: 8,
        lr: a.lr,
        patience: 5,
        weight_decay: 0.01,
        grad_clip: None,
    };

    stage(
        "featurize",
        cmd_featurize(
            &ctx,
            &FeaturizeArgs {
                input: systems_path.clone(),
                out: corpus.clone(),
                format: a.format,
                tolerance: adtext_core::featurize::DEFAULT_CUTOFF_TOLERANCE,
                fallback: true,
                descriptions: None,
            },
        ),
    )?;
    stage(
        "build-vocab",
        cmd_build_vocab(
            &ctx,
            &BuildVocabArgs {
                corpus: corpus.clone(),
                out: vocab.clone(),
                min_freq: 1,
            },
        ),
    )?;
    stage(
        "pretrain",
        cmd_pretrain(
            &ctx,
            &PretrainArgs {
                corpus: corpus.clone(),
                vocab: vocab.clone(),
                out: pretrained.clone(),
                mask_rate: 0.15,
                untied: false,
                model: smoke_model(),
                optim: optim(a.pretrain_epochs),
            },
        ),
    )?;
    stage(
        "train",
        cmd_train(
            &ctx,
            &TrainArgs {
                corpus: corpus.clone(),
                vocab: vocab.clone(),
                out: model_dir.clone(),
                init: Some(pretrained.clone()),
                model: smoke_model(),
                optim: optim(a.train_epochs),
            },
        ),
    )?;
    stage(
        "predict",
        cmd_predict(
            &ctx,
            &PredictArgs {
                corpus: corpus.clone(),
                systems: systems_path.clone(),
                vocab: vocab.clone(),
                checkpoint: model_dir.clone(),
                out: preds.clone(),
                splits: vec![],
            },
        ),
    )?;
    stage(
        "eval",
        cmd_eval(
            &ctx,
            &EvalArgs {
                pred: preds.clone(),
                report: out.join("eval"),
            },
        ),
    )?;
    stage(
        "attention",
        cmd_attention(
            &ctx,
            &AttentionArgs {
                corpus: corpus.clone(),
                vocab: vocab.clone(),
                checkpoint: model_dir.clone(),
                out: out.join("heatmap.jsonl"),
                ids: vec![],
                layers: vec![],
                merge: MergeArg::Sum,
            },
        ),
    )?;
    stage(
        "embeddings",
        cmd_embeddings(
            &ctx,
            &EmbeddingsArgs {
                corpus: corpus.clone(),
                systems: systems_path.clone(),
                vocab: vocab.clone(),
                checkpoint: model_dir.clone(),
                out: out.join("embeddings.tsv"),
            },
        ),
    )?;
    stage(
        "pairs",
        cmd_pairs(
            &ctx,
            &PairsArgs {
                pred: preds,
                report: out.join("pairs"),
                global: false,
            },
        ),
    )?;
    let artifacts: Vec<PathBuf> = SMOKE_ARTIFACTS.iter().map(|p| out.join(p)).collect();
    if let Some(missing) = artifacts.iter().find(|p| !p.exists()) {
        bail!("artifact {} was not produced", missing.display());
    }
    Ok(artifacts)
}

fn cmd_smoke(ctx: &Ctx, a: &SmokeArgs) -> Result<()> {
    let artifacts = end_to_end_smoke(ctx.seed, ctx.threads, a)?;
    write_manifest(ctx, "smoke", a, &a.out, true)?;
    for p in artifacts {
        println!("{}", p.display());
    }
    Ok(())
}
