//! The coar command line. One process per invocation; every command writes
//! one run directory holding the resolved config, a manifest with input and
//! output hashes, and the command's artifacts.
//!
//! Config layering: defaults, then the JSON file named by `--config`, then
//! explicit flags, strongest last. The resolved result is persisted as
//! `config.json` so a run can be replayed from its directory alone.
//!
//! Exit codes: 0 success, 2 invalid argument, 3 numeric failure, 4 a result
//! missed an acceptance threshold.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use coar_core::audit::{drift_kl_on, reference_param_table, sample_class_sequences};
use coar_core::sampler;
use coar_core::toyworld::{
    build_codebook, make_pretrain_corpus, make_subject, make_style, CODEBOOK_SIZE, IMAGE_TOKENS,
    PATCH_DIM,
};
use coar_core::trainer::{
    generate_class_priors, gradcheck, pretrain_backbone, sweep_layers, train_subject,
    train_style, HELD_OUT_TEMPLATES, PRIOR_TEMPLATE, STYLE_TEMPLATE, SUBJECT_TEMPLATE,
};
use coar_core::{
    BackboneConfig, BackboneParams, CoarError, Codebook, ContextBank, DecodeConfig, LossConfig,
    PretrainConfig, TokenId, TokenSequence, TrainConfig, Vocabulary,
};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::evals::class_consistency;
use crate::persistence::{self, CkptError};
use crate::render::{tokens_to_grid, write_ppm};
use crate::rundir::{
    resolve_root, GradcheckOut, LossRow, PretrainOut, RunDir, RunManifest, SweepRowOut,
};

/// Gradient agreement the gradcheck command demands.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl From<CoarError> for CliError {
    fn from(e: CoarError) -> Self {
        match e {
            CoarError::InvalidArgument(_) => CliError::Invalid(e.to_string()),
            CoarError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Invalid(format!("io: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "coar",
    about = "Concept learning on a frozen toy multimodal transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the toy backbone from scratch; the only command that writes
    /// backbone weights.
    Pretrain(PretrainArgs),
    /// Learn a subject bank against a frozen backbone.
    LearnSubject(LearnSubjectArgs),
    /// Learn a style bank against a frozen backbone.
    LearnStyle(LearnStyleArgs),
    /// Decode an image, optionally with banks injected.
    Generate(GenerateArgs),
    /// Subject and style banks together under the identity mask.
    Compose(ComposeArgs),
    /// Parameter accounting table, plus distribution drift when given a
    /// backbone and bank.
    Audit(AuditArgs),
    /// Finite-difference check of the bank gradient on the small model.
    Gradcheck(GradcheckArgs),
    /// Train subject banks at several depths and tabulate the trade-off.
    SweepLayers(SweepArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::LearnSubject(a) => cmd_learn_subject(a),
        Command::LearnStyle(a) => cmd_learn_style(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SweepLayers(a) => cmd_sweep(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.

fn load_file_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let bytes =
        fs::read(p).map_err(|e| CliError::Invalid(format!("config {}: {e}", p.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Invalid(format!("config {}: {e}", p.display())))
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

struct Ctx {
    run: RunDir,
    manifest: RunManifest,
    start: Instant,
}

impl Ctx {
    fn new<C: Serialize>(
        run_root: Option<&Path>,
        command: &str,
        config: &C,
        world_seed: u64,
    ) -> CliResult<Ctx> {
        let root = resolve_root(run_root);
        let run = RunDir::create(&root, command)?;
        run.write_json("config.json", config)?;
        let value = serde_json::to_value(config)
            .map_err(|e| CliError::Invalid(format!("config encode: {e}")))?;
        Ok(Ctx {
            run,
            manifest: RunManifest::new(command, value, world_seed),
            start: Instant::now(),
        })
    }

    fn note_input(&mut self, path: &Path) -> CliResult<()> {
        self.manifest.note_input(path)?;
        Ok(())
    }

    /// Stamp output hashes and the duration, then write the manifest.
    fn finish(mut self, outputs: &[PathBuf]) -> CliResult<()> {
        self.manifest.note_output(&self.run.file("config.json"))?;
        for p in outputs {
            self.manifest.note_output(p)?;
        }
        self.manifest.duration_ms = self.start.elapsed().as_millis() as u64;
        self.run.write_json("manifest.json", &self.manifest)?;
        println!("run directory: {}", self.run.path.display());
        Ok(())
    }
}

fn standard_world(world_seed: u64) -> CliResult<(Vocabulary, Codebook)> {
    let vocab = Vocabulary::standard();
    let cb = build_codebook(CODEBOOK_SIZE, PATCH_DIM, world_seed)?;
    Ok((vocab, cb))
}

/// Load a backbone and remember its hash; callers pair this with
/// [`assert_backbone_untouched`] after the wrapped operation.
fn load_backbone_input(ctx: &mut Ctx, path: &Path) -> CliResult<(BackboneParams, u64)> {
    ctx.note_input(path)?;
    Ok(persistence::load_backbone(path)?)
}

/// Nothing but pretrain may change backbone bytes; re-hash to prove it.
fn assert_backbone_untouched(ctx: &Ctx, path: &Path) -> CliResult<()> {
    let before = &ctx.manifest.inputs[&path.display().to_string()];
    let after = crate::rundir::sha256_hex(path)?;
    if *before != after {
        return Err(CliError::Numeric(format!(
            "backbone file {} changed during a non-pretrain command",
            path.display()
        )));
    }
    Ok(())
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Invalid(format!("missing required {flag}")))
}

fn class_token(vocab: &Vocabulary, word: &str) -> CliResult<TokenId> {
    vocab
        .word_id(word)
        .ok_or_else(|| CliError::Invalid(format!("unknown class word {word:?}")))
}

fn decode_config(
    topk: bool,
    k: usize,
    temperature: f64,
    seed: u64,
    max_tokens: usize,
) -> DecodeConfig {
    let mut dc = if topk {
        DecodeConfig::topk(seed, max_tokens)
    } else {
        DecodeConfig::greedy(max_tokens)
    };
    if topk {
        dc.k = k;
        dc.temperature = temperature;
    }
    dc
}

#[derive(Serialize)]
struct TokensOut<'a> {
    template: &'a str,
    class: &'a str,
    tokens: &'a [TokenId],
    codes: Vec<usize>,
}

/// tokens.json always; image.ppm when the decode filled a whole grid.
fn write_decode_artifacts(
    ctx: &Ctx,
    vocab: &Vocabulary,
    cb: &Codebook,
    template: &str,
    class_word: &str,
    tokens: &[TokenId],
) -> CliResult<Vec<PathBuf>> {
    let codes = tokens.iter().map(|&t| vocab.image_code(t)).collect();
    let out = TokensOut { template, class: class_word, tokens, codes };
    ctx.run.write_json("tokens.json", &out)?;
    let mut artifacts = vec![ctx.run.file("tokens.json")];
    if tokens.len() == IMAGE_TOKENS {
        let grid = tokens_to_grid(vocab, cb, tokens, coar_core::toyworld::GRID,
            coar_core::toyworld::GRID)?;
        write_ppm(&ctx.run.file("image.ppm"), &grid)?;
        artifacts.push(ctx.run.file("image.ppm"));
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Args)]
pub struct PretrainArgs {
    /// JSON file supplying any of this command's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop once class-conditional cross-entropy falls below this.
    #[arg(long)]
    target_ce: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Fraction of classes whose greedy decode must classify back to the
    /// prompted class.
    #[arg(long)]
    min_class_consistency: Option<f64>,
    /// Skip the per-class decode evaluation.
    #[arg(long)]
    skip_decode_eval: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    steps: Option<usize>,
    corpus_size: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    target_ce: Option<f64>,
    eval_every: Option<usize>,
    min_class_consistency: Option<f64>,
    skip_decode_eval: Option<bool>,
    seed: Option<u64>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct PretrainResolved {
    steps: usize,
    corpus_size: usize,
    batch_size: usize,
    lr: f64,
    target_ce: f64,
    eval_every: usize,
    min_class_consistency: f64,
    skip_decode_eval: bool,
    seed: u64,
    world_seed: u64,
}

#[derive(Serialize)]
struct PretrainMetrics {
    report: PretrainOut,
    class_consistency: Option<f64>,
    /// Per class: (predicted class index, shape fit).
    class_table: Option<Vec<(usize, f64)>>,
}

fn cmd_pretrain(args: PretrainArgs) -> CliResult<()> {
    let file: PretrainFile = load_file_config(args.config.as_deref())?;
    let r = PretrainResolved {
        steps: pick(args.steps, file.steps, 5000),
        corpus_size: pick(args.corpus_size, file.corpus_size, 240),
        batch_size: pick(args.batch_size, file.batch_size, 8),
        lr: pick(args.lr, file.lr, 3e-3),
        target_ce: pick(args.target_ce, file.target_ce, 0.35),
        eval_every: pick(args.eval_every, file.eval_every, 100),
        min_class_consistency: pick(args.min_class_consistency, file.min_class_consistency, 0.9),
        skip_decode_eval: args.skip_decode_eval || file.skip_decode_eval.unwrap_or(false),
        seed: pick(args.seed, file.seed, 3),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let ctx = Ctx::new(args.run_root.as_deref(), "pretrain", &r, r.world_seed)?;
    let (vocab, cb) = standard_world(r.world_seed)?;
    let corpus = make_pretrain_corpus(r.world_seed, r.corpus_size, &cb)?;
    let reserved = [vocab.placeholder_v(), vocab.placeholder_s(), vocab.ctx_img()];
    let mut params =
        BackboneParams::init(&BackboneConfig::standard(), r.seed, &reserved).map_err(CliError::from)?;
    let pcfg = PretrainConfig {
        steps: r.steps,
        batch_size: r.batch_size,
        lr: r.lr,
        target_ce: r.target_ce,
        eval_every: r.eval_every,
        ..PretrainConfig::default()
    };
    let report = pretrain_backbone(&mut params, &vocab, &cb, &corpus, &pcfg)?;
    let ckpt = ctx.run.file("backbone.ckpt");
    persistence::save_backbone(&ckpt, &params, r.seed)?;

    let mut metrics = PretrainMetrics {
        report: PretrainOut::from(&report),
        class_consistency: None,
        class_table: None,
    };
    if r.steps > 0 && !r.skip_decode_eval {
        let (frac, table) = class_consistency(&params, &vocab)?;
        metrics.class_consistency = Some(frac);
        metrics.class_table = Some(table);
    }
    ctx.run.write_json("metrics.json", &metrics)?;
    println!(
        "pretrain: {} steps, class-conditional ce {:.4}, target {}",
        report.steps_run,
        report.final_class_ce,
        if report.reached_target { "reached" } else { "missed" }
    );
    if let Some(frac) = metrics.class_consistency {
        println!("class consistency: {:.0}% of classes decode to their class", frac * 100.0);
    }
    let outputs = vec![ckpt, ctx.run.file("metrics.json")];
    ctx.finish(&outputs)?;

    if r.steps > 0 && !report.reached_target {
        return Err(CliError::Threshold(format!(
            "class-conditional cross-entropy {:.4} never fell below {:.4}",
            report.final_class_ce, r.target_ce
        )));
    }
    if let Some(frac) = metrics.class_consistency {
        if frac < r.min_class_consistency {
            return Err(CliError::Threshold(format!(
                "class consistency {frac:.2} below the {:.2} floor",
                r.min_class_consistency
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// learn-subject / learn-style

#[derive(Args)]
pub struct LearnSubjectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    subject_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    n_class_images: Option<usize>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnSubjectFile {
    backbone: Option<PathBuf>,
    subject_seed: Option<u64>,
    seed: Option<u64>,
    steps: Option<usize>,
    n_layers: Option<usize>,
    lr: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    n_class_images: Option<usize>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct LearnSubjectResolved {
    backbone: PathBuf,
    subject_seed: u64,
    seed: u64,
    steps: usize,
    n_layers: usize,
    lr: f64,
    alpha: f64,
    beta: f64,
    lambda1: f64,
    lambda2: f64,
    n_class_images: usize,
    world_seed: u64,
}

#[derive(Serialize)]
struct TrainMetrics {
    steps: usize,
    initial: Option<LossRow>,
    final_step: Option<LossRow>,
}

fn train_metrics(history: &[coar_core::LossReport]) -> TrainMetrics {
    TrainMetrics {
        steps: history.len(),
        initial: history.first().map(LossRow::from),
        final_step: history.last().map(LossRow::from),
    }
}

fn cmd_learn_subject(args: LearnSubjectArgs) -> CliResult<()> {
    let file: LearnSubjectFile = load_file_config(args.config.as_deref())?;
    let base = TrainConfig::subject();
    let r = LearnSubjectResolved {
        backbone: require(args.backbone.or(file.backbone), "--backbone")?,
        subject_seed: pick(args.subject_seed, file.subject_seed, 1),
        seed: pick(args.seed, file.seed, base.seed),
        steps: pick(args.steps, file.steps, base.steps),
        n_layers: pick(args.n_layers, file.n_layers, base.n_layers),
        lr: pick(args.lr, file.lr, base.lr),
        alpha: pick(args.alpha, file.alpha, base.loss.alpha),
        beta: pick(args.beta, file.beta, base.loss.beta),
        lambda1: pick(args.lambda1, file.lambda1, base.loss.lambda1),
        lambda2: pick(args.lambda2, file.lambda2, base.loss.lambda2),
        n_class_images: pick(args.n_class_images, file.n_class_images, base.n_class_images),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let mut ctx = Ctx::new(args.run_root.as_deref(), "learn-subject", &r, r.world_seed)?;
    let (params, _) = load_backbone_input(&mut ctx, &r.backbone)?;
    let (vocab, cb) = standard_world(r.world_seed)?;
    let subject = make_subject(r.subject_seed, &cb);
    let cfg = TrainConfig {
        lr: r.lr,
        steps: r.steps,
        n_layers: r.n_layers,
        seed: r.seed,
        n_class_images: r.n_class_images,
        loss: LossConfig {
            alpha: r.alpha,
            beta: r.beta,
            lambda1: r.lambda1,
            lambda2: r.lambda2,
        },
        ..base
    };
    let (bank, history) = train_subject(&params, &vocab, &subject, &cb, &cfg)?;
    assert_backbone_untouched(&ctx, &r.backbone)?;

    let bank_path = ctx.run.file("bank.ckpt");
    persistence::save_bank(&bank_path, &bank)?;
    ctx.run.write_losses(&history)?;
    ctx.run.write_json("metrics.json", &train_metrics(&history))?;
    let mut outputs = vec![
        bank_path,
        ctx.run.file("losses.jsonl"),
        ctx.run.file("metrics.json"),
    ];
    // The class priors the run regularized against, regenerated from the
    // same seed so downstream audits can reuse them.
    let dpp_active =
        r.steps > 0 && cfg.loss.alpha > 0.0 && (cfg.loss.lambda1 > 0.0 || cfg.loss.lambda2 > 0.0);
    if dpp_active {
        let priors = generate_class_priors(
            &params,
            &vocab,
            subject.class_name,
            r.n_class_images,
            r.seed,
        )?;
        let priors_path = ctx.run.file("priors.ckpt");
        persistence::save_priors(&priors_path, &priors)?;
        outputs.push(priors_path);
    }
    if let Some(last) = history.last() {
        println!(
            "learn-subject: {} steps, ntp {:.4} -> {:.4}",
            history.len(),
            history[0].ntp,
            last.ntp
        );
    }
    ctx.finish(&outputs)
}

#[derive(Args)]
pub struct LearnStyleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    style_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnStyleFile {
    backbone: Option<PathBuf>,
    style_seed: Option<u64>,
    seed: Option<u64>,
    steps: Option<usize>,
    n_layers: Option<usize>,
    lr: Option<f64>,
    beta: Option<f64>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct LearnStyleResolved {
    backbone: PathBuf,
    style_seed: u64,
    seed: u64,
    steps: usize,
    n_layers: usize,
    lr: f64,
    beta: f64,
    world_seed: u64,
}

fn cmd_learn_style(args: LearnStyleArgs) -> CliResult<()> {
    let file: LearnStyleFile = load_file_config(args.config.as_deref())?;
    let base = TrainConfig::style();
    let r = LearnStyleResolved {
        backbone: require(args.backbone.or(file.backbone), "--backbone")?,
        style_seed: pick(args.style_seed, file.style_seed, 2),
        seed: pick(args.seed, file.seed, base.seed),
        steps: pick(args.steps, file.steps, base.steps),
        n_layers: pick(args.n_layers, file.n_layers, base.n_layers),
        lr: pick(args.lr, file.lr, base.lr),
        beta: pick(args.beta, file.beta, base.loss.beta),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let mut ctx = Ctx::new(args.run_root.as_deref(), "learn-style", &r, r.world_seed)?;
    let (params, _) = load_backbone_input(&mut ctx, &r.backbone)?;
    let (vocab, cb) = standard_world(r.world_seed)?;
    let style = make_style(r.style_seed, &cb);
    let cfg = TrainConfig {
        lr: r.lr,
        steps: r.steps,
        n_layers: r.n_layers,
        seed: r.seed,
        loss: LossConfig { beta: r.beta, ..base.loss },
        ..base
    };
    let (bank, history) = train_style(&params, &vocab, &style, &cb, &cfg)?;
    assert_backbone_untouched(&ctx, &r.backbone)?;

    let bank_path = ctx.run.file("bank.ckpt");
    persistence::save_bank(&bank_path, &bank)?;
    ctx.run.write_losses(&history)?;
    ctx.run.write_json("metrics.json", &train_metrics(&history))?;
    if let Some(last) = history.last() {
        println!(
            "learn-style ({}): {} steps, ntp {:.4} -> {:.4}",
            style.style_name,
            history.len(),
            history[0].ntp,
            last.ntp
        );
    }
    let outputs = vec![
        bank_path,
        ctx.run.file("losses.jsonl"),
        ctx.run.file("metrics.json"),
    ];
    ctx.finish(&outputs)
}

// ---------------------------------------------------------------------------
// generate / compose

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Subject bank checkpoint.
    #[arg(long)]
    subject: Option<PathBuf>,
    /// Style bank checkpoint.
    #[arg(long)]
    style: Option<PathBuf>,
    /// Prompt template; defaults to match the banks supplied.
    #[arg(long)]
    template: Option<String>,
    /// Class word; defaults to the first bank's class.
    #[arg(long)]
    class: Option<String>,
    /// Sample from the top-k distribution instead of greedy decoding.
    #[arg(long)]
    topk: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    backbone: Option<PathBuf>,
    subject: Option<PathBuf>,
    style: Option<PathBuf>,
    template: Option<String>,
    class: Option<String>,
    topk: Option<bool>,
    k: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct GenerateResolved {
    backbone: PathBuf,
    subject: Option<PathBuf>,
    style: Option<PathBuf>,
    template: String,
    class: Option<String>,
    topk: bool,
    k: usize,
    temperature: f64,
    seed: u64,
    max_tokens: usize,
    world_seed: u64,
}

fn default_template(has_subject: bool, has_style: bool) -> &'static str {
    match (has_subject, has_style) {
        (true, true) => "a photo of [V] [Class] in [S] style",
        (true, false) => SUBJECT_TEMPLATE,
        (false, true) => STYLE_TEMPLATE,
        (false, false) => PRIOR_TEMPLATE,
    }
}

/// The class word a decode runs under: the flag wins, else the first bank.
fn resolve_class_word(
    vocab: &Vocabulary,
    flag: &Option<String>,
    banks: &[&ContextBank],
) -> CliResult<(TokenId, String)> {
    if let Some(word) = flag {
        return Ok((class_token(vocab, word)?, word.clone()));
    }
    let bank = banks
        .first()
        .ok_or_else(|| CliError::Invalid("zero-shot decoding needs --class".into()))?;
    let word = vocab
        .word(bank.class_name)
        .ok_or_else(|| CliError::Invalid("bank class is not a word in this vocabulary".into()))?;
    Ok((bank.class_name, word.to_string()))
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let file: GenerateFile = load_file_config(args.config.as_deref())?;
    let subject_path = args.subject.or(file.subject);
    let style_path = args.style.or(file.style);
    let template = pick(
        args.template,
        file.template,
        default_template(subject_path.is_some(), style_path.is_some()).to_string(),
    );
    let r = GenerateResolved {
        backbone: require(args.backbone.or(file.backbone), "--backbone")?,
        subject: subject_path,
        style: style_path,
        template,
        class: args.class.or(file.class),
        topk: args.topk || file.topk.unwrap_or(false),
        k: pick(args.k, file.k, 20),
        temperature: pick(args.temperature, file.temperature, 1.0),
        seed: pick(args.seed, file.seed, 0),
        max_tokens: pick(args.max_tokens, file.max_tokens, IMAGE_TOKENS),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let mut ctx = Ctx::new(args.run_root.as_deref(), "generate", &r, r.world_seed)?;
    let (params, _) = load_backbone_input(&mut ctx, &r.backbone)?;
    let (vocab, cb) = standard_world(r.world_seed)?;

    let mut banks = Vec::new();
    for path in [&r.subject, &r.style].into_iter().flatten() {
        ctx.note_input(path)?;
        banks.push(persistence::load_bank(path)?);
    }
    let bank_refs: Vec<&ContextBank> = banks.iter().collect();
    let (class, class_word) = resolve_class_word(&vocab, &r.class, &bank_refs)?;
    let dc = decode_config(r.topk, r.k, r.temperature, r.seed, r.max_tokens);
    let tokens = sampler::generate(&params, &vocab, &bank_refs, &r.template, class, &dc)?;
    assert_backbone_untouched(&ctx, &r.backbone)?;

    let outputs = write_decode_artifacts(&ctx, &vocab, &cb, &r.template, &class_word, &tokens)?;
    println!("generate: {} tokens under {:?}", tokens.len(), r.template);
    ctx.finish(&outputs)
}

#[derive(Args)]
pub struct ComposeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Subject bank checkpoint.
    #[arg(long)]
    subject: Option<PathBuf>,
    /// Style bank checkpoint.
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    template: Option<String>,
    /// Class word; defaults to the subject bank's class.
    #[arg(long)]
    class: Option<String>,
    /// Greedy decoding (the default; present for scripts that spell it out).
    #[arg(long)]
    greedy: bool,
    /// Sample from the top-k distribution instead.
    #[arg(long, conflicts_with = "greedy")]
    topk: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComposeFile {
    backbone: Option<PathBuf>,
    subject: Option<PathBuf>,
    style: Option<PathBuf>,
    template: Option<String>,
    class: Option<String>,
    topk: Option<bool>,
    k: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct ComposeResolved {
    backbone: PathBuf,
    subject: PathBuf,
    style: PathBuf,
    template: String,
    class: Option<String>,
    topk: bool,
    k: usize,
    temperature: f64,
    seed: u64,
    max_tokens: usize,
    world_seed: u64,
}

fn cmd_compose(args: ComposeArgs) -> CliResult<()> {
    let file: ComposeFile = load_file_config(args.config.as_deref())?;
    let r = ComposeResolved {
        backbone: require(args.backbone.or(file.backbone), "--backbone")?,
        subject: require(args.subject.or(file.subject), "--subject")?,
        style: require(args.style.or(file.style), "--style")?,
        template: pick(
            args.template,
            file.template,
            "a photo of [V] [Class] in [S] style".to_string(),
        ),
        class: args.class.or(file.class),
        topk: args.topk || (!args.greedy && file.topk.unwrap_or(false)),
        k: pick(args.k, file.k, 20),
        temperature: pick(args.temperature, file.temperature, 1.0),
        seed: pick(args.seed, file.seed, 0),
        max_tokens: pick(args.max_tokens, file.max_tokens, IMAGE_TOKENS),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let mut ctx = Ctx::new(args.run_root.as_deref(), "compose", &r, r.world_seed)?;
    let (params, _) = load_backbone_input(&mut ctx, &r.backbone)?;
    let (vocab, cb) = standard_world(r.world_seed)?;
    ctx.note_input(&r.subject)?;
    let subject_bank = persistence::load_bank(&r.subject)?;
    ctx.note_input(&r.style)?;
    let style_bank = persistence::load_bank(&r.style)?;

    let (class, class_word) =
        resolve_class_word(&vocab, &r.class, &[&subject_bank, &style_bank])?;
    let dc = decode_config(r.topk, r.k, r.temperature, r.seed, r.max_tokens);
    let tokens = sampler::compose(
        &params,
        &vocab,
        &subject_bank,
        &style_bank,
        &r.template,
        class,
        &dc,
    )?;
    assert_backbone_untouched(&ctx, &r.backbone)?;

    let outputs = write_decode_artifacts(&ctx, &vocab, &cb, &r.template, &class_word, &tokens)?;
    println!("compose: {} tokens under {:?}", tokens.len(), r.template);
    ctx.finish(&outputs)
}

// ---------------------------------------------------------------------------
// audit

#[derive(Args)]
pub struct AuditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint; with --bank, also measure drift.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Bank checkpoint to measure distribution drift for.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the JSON document instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditFile {
    backbone: Option<PathBuf>,
    bank: Option<PathBuf>,
    n_samples: Option<usize>,
    seed: Option<u64>,
    json: Option<bool>,
}

#[derive(Serialize)]
struct AuditResolved {
    backbone: Option<PathBuf>,
    bank: Option<PathBuf>,
    n_samples: usize,
    seed: u64,
    json: bool,
}

#[derive(Serialize)]
struct ParamAuditOut {
    method: String,
    count: u64,
    formula: String,
}

#[derive(Serialize)]
struct DriftOut {
    /// Mean KL with no bank injected; identical passes, so exactly zero.
    zero_shot: f64,
    /// Mean KL between zero-shot and injected next-token distributions.
    with_bank: f64,
    templates: Vec<String>,
    n_samples: usize,
    seed: u64,
}

#[derive(Serialize)]
struct AuditDoc {
    params: Vec<ParamAuditOut>,
    drift: Option<DriftOut>,
}

fn cmd_audit(args: AuditArgs) -> CliResult<()> {
    let file: AuditFile = load_file_config(args.config.as_deref())?;
    let r = AuditResolved {
        backbone: args.backbone.or(file.backbone),
        bank: args.bank.or(file.bank),
        n_samples: pick(args.n_samples, file.n_samples, 4),
        seed: pick(args.seed, file.seed, 0),
        json: args.json || file.json.unwrap_or(false),
    };
    if r.backbone.is_some() != r.bank.is_some() {
        return Err(CliError::Invalid(
            "drift measurement needs both --backbone and --bank".into(),
        ));
    }
    let mut ctx = Ctx::new(args.run_root.as_deref(), "audit", &r, 0)?;

    let params_rows: Vec<ParamAuditOut> = reference_param_table()
        .into_iter()
        .map(|row| ParamAuditOut { method: row.method, count: row.count, formula: row.formula })
        .collect();

    let mut drift = None;
    if let (Some(backbone_path), Some(bank_path)) = (&r.backbone, &r.bank) {
        let (params, _) = load_backbone_input(&mut ctx, backbone_path)?;
        ctx.note_input(bank_path)?;
        let bank = persistence::load_bank(bank_path)?;
        let vocab = Vocabulary::standard();
        let word = vocab
            .word(bank.class_name)
            .ok_or_else(|| CliError::Invalid("bank class is not a word".into()))?;
        let seqs = sample_class_sequences(
            &params,
            &vocab,
            bank.class_name,
            &HELD_OUT_TEMPLATES,
            r.n_samples,
            r.seed,
        )?;
        let zero_shot = drift_kl_on(&params, None, &seqs)?;
        let with_bank = drift_kl_on(&params, Some(&bank), &seqs)?;
        assert_backbone_untouched(&ctx, backbone_path)?;
        println!("drift for class {word:?}:");
        drift = Some(DriftOut {
            zero_shot,
            with_bank,
            templates: HELD_OUT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
            n_samples: r.n_samples,
            seed: r.seed,
        });
    }

    let doc = AuditDoc { params: params_rows, drift };
    ctx.run.write_json("audit.json", &doc)?;
    if r.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&doc)
                .map_err(|e| CliError::Invalid(format!("audit encode: {e}")))?
        );
    } else {
        print_audit_table(&doc);
    }
    let outputs = vec![ctx.run.file("audit.json")];
    ctx.finish(&outputs)
}

fn print_audit_table(doc: &AuditDoc) {
    let method_w = doc
        .params
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let count_w = doc
        .params
        .iter()
        .map(|r| r.count.to_string().len())
        .max()
        .unwrap_or(5)
        .max("count".len());
    println!("{:<method_w$}  {:>count_w$}  formula", "method", "count");
    for row in &doc.params {
        println!("{:<method_w$}  {:>count_w$}  {}", row.method, row.count, row.formula);
    }
    if let Some(d) = &doc.drift {
        println!();
        println!("drift_kl zero-shot: {:.6}", d.zero_shot);
        println!("drift_kl with bank: {:.6}", d.with_bank);
    }
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Central-difference step size.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckFile {
    h: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GradcheckResolved {
    h: f64,
    seed: u64,
    tolerance: f64,
}

#[derive(Serialize)]
struct GradcheckMetrics {
    report: GradcheckOut,
    h: f64,
    tolerance: f64,
    pass: bool,
}

/// The small-model fixture the finite-difference check runs on: random
/// weights, a perturbed two-layer bank, one subject and one class sequence.
fn gradcheck_fixture(
    seed: u64,
) -> CliResult<(BackboneParams, ContextBank, Vec<TokenSequence>, Vec<TokenSequence>)> {
    use coar_core::context::new_bank;
    use coar_core::mat::Mat;
    use coar_core::sequences::{assemble, tokenize_prompt};
    use coar_core::{BankKind, InitPolicy};

    let cfg = BackboneConfig::small();
    let params = BackboneParams::random(&cfg, seed)?;
    let vocab = Vocabulary::with_sizes(12, 12)?;
    let class: TokenId = 9;
    let mut bank = new_bank(
        2,
        cfg.dim,
        BankKind::Subject,
        class,
        seed.wrapping_add(1),
        InitPolicy::RandomNormal,
    )?;
    let anchor = Mat::from_vec(2, cfg.dim, (0..2 * cfg.dim).map(|i| 0.01 * i as f64).collect());
    let hidden = bank.p_v.clone();
    bank.init_from_activations(&anchor, &hidden)?;
    for v in bank.p_i.data.iter_mut() {
        *v += 0.02;
    }
    let image: Vec<TokenId> = (0..8).map(|c| vocab.image_id(c % 12)).collect();
    let prompt = tokenize_prompt(&vocab, SUBJECT_TEMPLATE, class)?;
    let subject = vec![assemble(&vocab, &prompt.tokens, &image, 1)?];
    let class_prompt = tokenize_prompt(&vocab, PRIOR_TEMPLATE, class)?;
    let class_batch = vec![assemble(&vocab, &class_prompt.tokens, &image, 1)?];
    Ok((params, bank, subject, class_batch))
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let file: GradcheckFile = load_file_config(args.config.as_deref())?;
    let r = GradcheckResolved {
        h: pick(args.h, file.h, 1e-4),
        seed: pick(args.seed, file.seed, 31),
        tolerance: GRADCHECK_TOLERANCE,
    };
    let ctx = Ctx::new(args.run_root.as_deref(), "gradcheck", &r, 0)?;
    let (params, bank, subject, class_batch) = gradcheck_fixture(r.seed)?;
    let report = gradcheck(
        &params,
        &bank,
        &subject,
        &class_batch,
        &LossConfig::default(),
        r.h,
    )?;
    let out = GradcheckOut::from(&report);
    let pass = report.max_rel_err < r.tolerance;
    ctx.run.write_json(
        "gradcheck.json",
        &GradcheckMetrics { report: out, h: r.h, tolerance: r.tolerance, pass },
    )?;
    println!(
        "gradcheck: {} scalars, max relative error {:.3e} ({})",
        report.n_checked,
        report.max_rel_err,
        if pass { "pass" } else { "FAIL" }
    );
    let outputs = vec![ctx.run.file("gradcheck.json")];
    ctx.finish(&outputs)?;
    if !pass {
        return Err(CliError::Threshold(format!(
            "gradient mismatch {:.3e} exceeds {:.0e}",
            report.max_rel_err, r.tolerance
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-layers

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    subject_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Depths to train at, comma separated.
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_class_images: Option<usize>,
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    backbone: Option<PathBuf>,
    subject_seed: Option<u64>,
    seed: Option<u64>,
    ns: Option<Vec<usize>>,
    steps: Option<usize>,
    lr: Option<f64>,
    alpha: Option<f64>,
    n_class_images: Option<usize>,
    world_seed: Option<u64>,
}

#[derive(Serialize)]
struct SweepResolved {
    backbone: PathBuf,
    subject_seed: u64,
    seed: u64,
    ns: Vec<usize>,
    steps: usize,
    lr: f64,
    alpha: f64,
    n_class_images: usize,
    world_seed: u64,
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let file: SweepFile = load_file_config(args.config.as_deref())?;
    let base = TrainConfig::subject();
    let r = SweepResolved {
        backbone: require(args.backbone.or(file.backbone), "--backbone")?,
        subject_seed: pick(args.subject_seed, file.subject_seed, 1),
        seed: pick(args.seed, file.seed, base.seed),
        ns: pick(args.ns, file.ns, vec![1, 3, 9, 12]),
        steps: pick(args.steps, file.steps, base.steps),
        lr: pick(args.lr, file.lr, base.lr),
        alpha: pick(args.alpha, file.alpha, base.loss.alpha),
        n_class_images: pick(args.n_class_images, file.n_class_images, base.n_class_images),
        world_seed: pick(args.world_seed, file.world_seed, 7),
    };
    let mut ctx = Ctx::new(args.run_root.as_deref(), "sweep-layers", &r, r.world_seed)?;
    let (params, _) = load_backbone_input(&mut ctx, &r.backbone)?;
    let (vocab, cb) = standard_world(r.world_seed)?;
    let subject = make_subject(r.subject_seed, &cb);
    let cfg = TrainConfig {
        lr: r.lr,
        steps: r.steps,
        seed: r.seed,
        n_class_images: r.n_class_images,
        loss: LossConfig { alpha: r.alpha, ..base.loss },
        ..base
    };
    let rows = sweep_layers(&params, &vocab, &subject, &cb, &r.ns, &cfg)?;
    assert_backbone_untouched(&ctx, &r.backbone)?;

    let out: Vec<SweepRowOut> = rows.iter().map(SweepRowOut::from).collect();
    ctx.run.write_json("sweep.json", &out)?;
    println!("{:>8}  {:>10}  {:>9}  {:>9}", "n_layers", "final_ntp", "fidelity", "drift");
    for row in &out {
        println!(
            "{:>8}  {:>10.4}  {:>9.4}  {:>9.4}",
            row.n_layers, row.final_ntp, row.fidelity, row.drift
        );
    }
    let outputs = vec![ctx.run.file("sweep.json")];
    ctx.finish(&outputs)
}
