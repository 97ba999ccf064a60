//! Command-line operator surface: `gen`, `sft`, `train`, `eval`, `reward`,
//! `cot-filter`, and `ablate`.
//!
//! Every command starts from a [`RunConfig`] (defaults, then `--config`, then
//! flags) and records the effective configuration next to its outputs, so
//! `--config <out>/config.toml` reruns it byte-for-byte.

pub mod config;
pub mod experiment;

pub use config::RunConfig;

use crate::evalmetrics::{self, MetricError, PredictionPair, ThresholdMode};
use crate::geometry::BBox;
use crate::grpo::{self, derive_seed, GrpoError, RewardMode, StepLog};
use crate::policy::{self, Adam, Checkpoint, PolicyError, PolicyParams, SftExample};
use crate::position_reward::{shaped_reward, KernelParams, RewardError, RewardWeights, Shaping};
use crate::response_format::{self, parse_box_text};
use crate::scenes::{self, Difficulty, ExpressionKind, Scene, SceneError};
use clap::{Args, Parser, Subcommand};
use experiment::{ArmSpec, EvalPoint, Progress, SummaryRow};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid configuration: {field} {reason}")]
    Invalid { field: String, reason: String },
    #[error("{0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

fn policy_exit_code(e: &PolicyError) -> i32 {
    match e {
        PolicyError::NonFinite { .. } | PolicyError::NonFiniteLoss(_) => EXIT_NUMERIC,
        PolicyError::Settings(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Invalid { .. } | CliError::Exists(_) => {
                EXIT_CONFIG
            }
            CliError::Io { .. } | CliError::Data(_) | CliError::Metric(_) | CliError::Reward(_) => EXIT_DATA,
            CliError::Scene(SceneError::InvalidDifficulty { .. }) => EXIT_CONFIG,
            CliError::Scene(_) => EXIT_DATA,
            CliError::Policy(e) => policy_exit_code(e),
            CliError::Grpo(e) => match e {
                GrpoError::Policy(p) => policy_exit_code(p),
                GrpoError::Settings { .. } => EXIT_CONFIG,
                GrpoError::Reward(_) => EXIT_DATA,
                GrpoError::NonFiniteRatio { .. } | GrpoError::NonFiniteLoss { .. } | GrpoError::Misaligned { .. } => {
                    EXIT_NUMERIC
                }
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "groundrl", version, about = "Positional rewards and consistency-weighted GRPO on synthetic grounding scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write the effective configuration to this path.
    #[arg(long, global = true)]
    pub emit_config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Scene difficulty preset: default, single, far-init.
    #[arg(long, global = true)]
    pub preset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene corpus.
    Gen(GenArgs),
    /// Teacher-forced likelihood training on ground-truth box tokens.
    Sft(SftArgs),
    /// GRPO fine-tuning with a selectable reward mode.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus, or an external prediction file.
    Eval(EvalArgs),
    /// Print the reward channels for one prediction.
    Reward(RewardArgs),
    /// Validate and partition a chain-of-thought corpus.
    CotFilter(CotFilterArgs),
    /// Multi-seed, multi-arm training comparison.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this checkpoint, including its optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GrpoOverrides {
    /// iou-only, pos, pos-sc, sc-only, giou, diou, center.
    #[arg(long)]
    pub reward_mode: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Initial policy and frozen reference.
    #[arg(long, conflicts_with = "cold")]
    pub init: Option<PathBuf>,
    /// Start from a fresh initialization.
    #[arg(long)]
    pub cold: bool,
    #[command(flatten)]
    pub grpo: GrpoOverrides,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON Lines `{id, pred_box | null, gt_box, kind?}`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Count IoU equal to the threshold as correct.
    #[arg(long)]
    pub inclusive: bool,
    /// Step log CSV whose reward-std curve is attached to the report.
    #[arg(long)]
    pub step_log: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    /// Write `<out>.txt` and `<out>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the scored predictions as JSON Lines.
    #[arg(long)]
    pub write_predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    /// Predicted box, `[x1,y1,x2,y2]`.
    #[arg(long, allow_hyphen_values = true)]
    pub pred: String,
    /// Ground-truth box, `[x1,y1,x2,y2]`.
    #[arg(long, allow_hyphen_values = true)]
    pub gt: String,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Score the format channel as failed.
    #[arg(long)]
    pub no_format: bool,
    /// none, positional, giou, diou, center-distance.
    #[arg(long, default_value = "positional")]
    pub shaping: String,
    /// Comma-separated group IoUs whose consistency weight is printed.
    #[arg(long, allow_hyphen_values = true)]
    pub ious: Option<String>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CotFilterArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub min_think_chars: Option<usize>,
    #[arg(long)]
    pub match_tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Arm as `mode[:lambda_m=X,lambda_v=Y]`. Repeat the flag, or separate arms
    /// with `;`.
    #[arg(long = "arm", default_values_t = vec!["iou-only".to_string(), "pos".to_string()])]
    pub arms: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seeds 0..n when `--seeds` is absent.
    #[arg(long, default_value_t = 5)]
    pub num_seeds: u64,
    #[command(flatten)]
    pub grpo: GrpoOverrides,
}

// ---------------------------------------------------------------------------
// Configuration assembly
// ---------------------------------------------------------------------------

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(name) = &common.preset {
        cfg.scenes = Difficulty::preset(name).ok_or_else(|| CliError::Invalid {
            field: "preset".into(),
            reason: format!("unknown preset {name:?} (default, single, far-init)"),
        })?;
    }
    Ok(cfg)
}

fn apply_grpo(cfg: &mut RunConfig, o: &GrpoOverrides) -> Result<(), CliError> {
    if let Some(m) = &o.reward_mode {
        cfg.grpo.reward_mode = RewardMode::parse(m).ok_or_else(|| CliError::Invalid {
            field: "grpo.reward_mode".into(),
            reason: format!("unknown reward mode {m:?}"),
        })?;
    }
    set(&mut cfg.grpo.lr, o.lr);
    set(&mut cfg.grpo.lambda_m, o.lambda_m);
    set(&mut cfg.grpo.lambda_v, o.lambda_v);
    set(&mut cfg.grpo.beta, o.beta);
    set(&mut cfg.grpo.alpha, o.alpha);
    set(&mut cfg.grpo.group_size, o.group_size);
    set(&mut cfg.train.steps, o.steps);
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or [paths] entry)")))
}

fn emit(cfg: &RunConfig, common: &Common, out_dir: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = out_dir {
        cfg.save(&dir.join("config.toml"))?;
    }
    if let Some(p) = &common.emit_config {
        cfg.save(p)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn init_workers(n: usize) {
    // Fails only if a pool was already installed, which is fine: results do not
    // depend on the worker count.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse `args` and run the command, writing human-readable output to `out`.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = base_config(&cli.common)?;
    match &cli.command {
        Command::Gen(a) => {
            set_path(&mut cfg.paths.out, &a.out);
            set(&mut cfg.gen.n, a.n);
            cfg.validate()?;
            init_workers(cfg.workers);
            emit(&cfg, &cli.common, None)?;
            cmd_gen(&cfg, a.overwrite, out)
        }
        Command::Sft(a) => {
            set_path(&mut cfg.paths.corpus, &a.corpus);
            set_path(&mut cfg.paths.out, &a.out_dir);
            set_path(&mut cfg.paths.checkpoint, &a.resume);
            set(&mut cfg.sft.epochs, a.epochs);
            set(&mut cfg.sft.batch_size, a.batch_size);
            set(&mut cfg.sft.lr, a.lr);
            cmd_sft(cfg, &cli.common, out)
        }
        Command::Train(a) => {
            set_path(&mut cfg.paths.corpus, &a.corpus);
            set_path(&mut cfg.paths.eval_corpus, &a.eval_corpus);
            set_path(&mut cfg.paths.out, &a.out_dir);
            if a.init.is_some() {
                set_path(&mut cfg.paths.checkpoint, &a.init);
                cfg.train.cold = false;
            }
            if a.cold {
                cfg.train.cold = true;
                cfg.paths.checkpoint = None;
            }
            apply_grpo(&mut cfg, &a.grpo)?;
            set(&mut cfg.train.eval_every, a.eval_every);
            set(&mut cfg.train.checkpoint_every, a.checkpoint_every);
            cmd_train(cfg, &cli.common, out)
        }
        Command::Eval(a) => {
            set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
            set_path(&mut cfg.paths.corpus, &a.corpus);
            set_path(&mut cfg.paths.predictions, &a.predictions);
            if a.predictions.is_some() {
                cfg.paths.checkpoint = None;
            }
            set_path(&mut cfg.paths.out, &a.out);
            cfg.validate()?;
            init_workers(cfg.workers);
            emit(&cfg, &cli.common, None)?;
            cmd_eval(&cfg, a, out)
        }
        Command::Reward(a) => {
            set(&mut cfg.grpo.alpha, a.alpha);
            set(&mut cfg.grpo.beta, a.beta);
            set(&mut cfg.grpo.lambda_m, a.lambda_m);
            set(&mut cfg.grpo.lambda_v, a.lambda_v);
            cfg.validate()?;
            emit(&cfg, &cli.common, None)?;
            cmd_reward(&cfg, a, out)
        }
        Command::CotFilter(a) => {
            set_path(&mut cfg.paths.corpus, &a.input);
            set_path(&mut cfg.paths.out, &a.out_dir);
            set(&mut cfg.filter.min_think_chars, a.min_think_chars);
            set(&mut cfg.filter.match_tolerance, a.match_tolerance);
            cfg.validate()?;
            cmd_cot_filter(&cfg, &cli.common, out)
        }
        Command::Ablate(a) => {
            set_path(&mut cfg.paths.out, &a.out_dir);
            apply_grpo(&mut cfg, &a.grpo)?;
            cmd_ablate(cfg, &cli.common, a, out)
        }
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(cfg: &RunConfig, overwrite: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let path = require(&cfg.paths.out, "--out")?;
    if path.exists() && !overwrite {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    let corpus = scenes::generate_dataset(cfg.seed, cfg.gen.n, &cfg.scenes, path)?;
    let _ = writeln!(out, "wrote {} scenes to {}", corpus.len(), path.display());
    for kind in ExpressionKind::ALL {
        let n = corpus.iter().filter(|s| s.expression.kind == kind).count();
        let _ = writeln!(out, "  {:<16} {n}", kind.name());
    }
    let objects: usize = corpus.iter().map(|s| s.objects.len()).sum();
    let _ = writeln!(out, "  objects          {objects}");
    Ok(())
}

// ---------------------------------------------------------------------------
// sft
// ---------------------------------------------------------------------------

fn check_corpus(corpus: &[Scene], settings: &policy::PolicySettings, origin: &Path) -> Result<(), CliError> {
    if let Some(s) = corpus
        .iter()
        .find(|s| (s.image_w, s.image_h) != (settings.image_w, settings.image_h))
    {
        return Err(CliError::Data(format!(
            "{}: scene {} is {}x{} but the policy expects {}x{}",
            origin.display(),
            s.id,
            s.image_w,
            s.image_h,
            settings.image_w,
            settings.image_h
        )));
    }
    Ok(())
}

fn cmd_sft(mut cfg: RunConfig, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus_path = require(&cfg.paths.corpus, "--corpus")?.to_path_buf();
    let dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();
    let resume = cfg.paths.checkpoint.clone();
    let (mut params, mut opt, mut step) = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let params = ck.policy()?;
            let opt = ck.optimizer.clone().unwrap_or_else(|| Adam::new(params.len(), cfg.sft.lr));
            if opt.m.len() != params.len() {
                return Err(CliError::Data(format!("{}: optimizer state does not match parameters", p.display())));
            }
            cfg.policy = params.settings.clone();
            (params, opt, ck.step)
        }
        None => {
            cfg.validate()?;
            let params = PolicyParams::init(&cfg.policy, cfg.seed)?;
            let opt = Adam::new(params.len(), cfg.sft.lr);
            (params, opt, 0)
        }
    };
    cfg.validate()?;
    init_workers(cfg.workers);
    opt.lr = cfg.sft.lr;
    let corpus = scenes::load_scenes(&corpus_path)?;
    check_corpus(&corpus, &params.settings, &corpus_path)?;
    create_dir(&dir)?;
    emit(&cfg, common, Some(&dir))?;

    let loss_path = dir.join("sft_loss.csv");
    let append = resume.is_some() && step > 0 && loss_path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(&loss_path)
    } else {
        File::create(&loss_path)
    }
    .map_err(io_err(&loss_path))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", loss_path.display()));
    if !append {
        log.write_record(["step", "epoch", "nll"]).map_err(csv_err)?;
    }

    let examples: Vec<SftExample> = corpus
        .iter()
        .map(|s| SftExample {
            features: policy::featurize(s, params.settings.max_objects).values,
            tokens: policy::encode_box(&s.target_box(), &params.settings),
        })
        .collect();
    let per_epoch = examples.len().div_ceil(cfg.sft.batch_size) as u64;
    let first_epoch = step.checked_div(per_epoch).unwrap_or(0);
    let (mut first, mut last) = (None, None);
    for epoch in first_epoch..first_epoch + cfg.sft.epochs as u64 {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch])));
        for chunk in order.chunks(cfg.sft.batch_size) {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let nll = policy::sft_step(&mut params, &mut opt, &batch)?;
            step += 1;
            log.write_record([step.to_string(), epoch.to_string(), nll.to_string()])
                .map_err(csv_err)?;
            first.get_or_insert(nll);
            last = Some(nll);
        }
    }
    log.flush().map_err(io_err(&loss_path))?;
    let ck_path = dir.join("checkpoint.json");
    Checkpoint::new(&params, cfg.seed, step, "sft", Some(&opt)).save(&ck_path)?;
    let _ = writeln!(out, "sft: {} examples, {} epochs, step {}", examples.len(), cfg.sft.epochs, step);
    if let (Some(a), Some(b)) = (first, last) {
        let _ = writeln!(out, "nll {a:.4} -> {b:.4}");
    }
    let _ = writeln!(out, "checkpoint {}", ck_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(mut cfg: RunConfig, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus_path = require(&cfg.paths.corpus, "--corpus")?.to_path_buf();
    let dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();
    let init = match (&cfg.paths.checkpoint, cfg.train.cold) {
        (Some(p), false) => {
            let params = Checkpoint::load(p)?.policy()?;
            cfg.policy = params.settings.clone();
            params
        }
        (None, true) => {
            cfg.validate()?;
            PolicyParams::init(&cfg.policy, cfg.seed)?
        }
        _ => return Err(CliError::Usage("train needs exactly one of --init <checkpoint> or --cold".into())),
    };
    cfg.validate()?;
    init_workers(cfg.workers);
    let train = scenes::load_scenes(&corpus_path)?;
    check_corpus(&train, &init.settings, &corpus_path)?;
    if train.is_empty() {
        return Err(CliError::Data(format!("{}: empty corpus", corpus_path.display())));
    }
    let eval = match &cfg.paths.eval_corpus {
        Some(p) => {
            let e = scenes::load_scenes(p)?;
            check_corpus(&e, &init.settings, p)?;
            e
        }
        None => train.clone(),
    };
    create_dir(&dir)?;
    emit(&cfg, common, Some(&dir))?;

    let steps_path = dir.join("steps.csv");
    let eval_path = dir.join("eval.csv");
    let mut steps_csv = csv::Writer::from_writer(File::create(&steps_path).map_err(io_err(&steps_path))?);
    let mut eval_csv = csv::Writer::from_writer(File::create(&eval_path).map_err(io_err(&eval_path))?);
    let csv_err = |path: &Path, e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    steps_csv.write_record(StepLog::CSV_HEADER).map_err(|e| csv_err(&steps_path, e))?;
    eval_csv.write_record(EvalPoint::CSV_HEADER).map_err(|e| csv_err(&eval_path, e))?;
    steps_csv.flush().map_err(io_err(&steps_path))?;
    eval_csv.flush().map_err(io_err(&eval_path))?;

    let settings = cfg.grpo.clone();
    let every = cfg.train.checkpoint_every;
    let seed = cfg.seed;
    let result = experiment::run_training(&cfg, &settings, init, &train, &eval, |p| match p {
        Progress::Step(log, trainer) => {
            steps_csv.write_record(log.csv_record()).map_err(|e| csv_err(&steps_path, e))?;
            steps_csv.flush().map_err(io_err(&steps_path))?;
            if every > 0 && trainer.step % every == 0 {
                let path = dir.join(format!("checkpoint-{:06}.json", trainer.step));
                Checkpoint::new(&trainer.params, seed, trainer.step, "grpo", Some(&trainer.opt)).save(&path)?;
            }
            Ok(())
        }
        Progress::Eval(point, _) => {
            eval_csv.write_record(point.csv_record()).map_err(|e| csv_err(&eval_path, e))?;
            eval_csv.flush().map_err(io_err(&eval_path))?;
            let _ = writeln!(
                out,
                "step {:>6}  Acc@0.5 {:.4}  Acc@0.7 {:.4}  mIoU {:.4}",
                point.step, point.acc_at_05, point.acc_at_07, point.miou
            );
            Ok(())
        }
    });
    let (trainer, logs, _) = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(out, "aborted; partial logs in {}", dir.display());
            return Err(e);
        }
    };
    let ck_path = dir.join("checkpoint.json");
    Checkpoint::new(&trainer.params, seed, trainer.step, "grpo", Some(&trainer.opt)).save(&ck_path)?;
    if let Some(last) = logs.last() {
        let _ = writeln!(
            out,
            "{}: {} steps, final mean reward {:.4}, reward std {:.4}",
            settings.reward_mode.name(),
            trainer.step,
            last.mean_reward,
            last.reward_std
        );
    }
    let _ = writeln!(out, "checkpoint {}", ck_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pairs: Vec<PredictionPair> = match (&cfg.paths.predictions, &cfg.paths.checkpoint) {
        (Some(p), _) => evalmetrics::load_predictions(p)?,
        (None, Some(ck)) => {
            let params = Checkpoint::load(ck)?.policy()?;
            let corpus_path = require(&cfg.paths.corpus, "--corpus")?;
            let corpus = scenes::load_scenes(corpus_path)?;
            check_corpus(&corpus, &params.settings, corpus_path)?;
            evalmetrics::predict_scenes(&params, &corpus)?
        }
        (None, None) => return Err(CliError::Usage("eval needs --predictions or --checkpoint with --corpus".into())),
    };
    let mode = if a.inclusive {
        ThresholdMode::Inclusive
    } else {
        ThresholdMode::Strict
    };
    let mut report = evalmetrics::evaluate_pairs(&pairs, mode)?;
    if let Some(p) = &a.step_log {
        let file = File::open(p).map_err(io_err(p))?;
        let logs = grpo::read_step_logs(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        if logs.is_empty() {
            return Err(CliError::Data(format!("{}: no steps", p.display())));
        }
        report.reward_std_series = Some(evalmetrics::reward_std_curve(&logs, a.window));
    }
    if let Some(p) = &a.write_predictions {
        let mut w = create_file(p)?;
        for pair in &pairs {
            let line = serde_json::to_string(pair).expect("prediction serializes");
            writeln!(w, "{line}").map_err(io_err(p))?;
        }
        w.flush().map_err(io_err(p))?;
    }
    let text = evalmetrics::render_report(&report);
    let _ = write!(out, "{text}");
    if let Some(prefix) = &cfg.paths.out {
        let txt = prefix.with_extension("txt");
        let json = prefix.with_extension("json");
        fs::write(&txt, &text).map_err(io_err(&txt))?;
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&json, body + "\n").map_err(io_err(&json))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reward
// ---------------------------------------------------------------------------

fn parse_box_arg(text: &str, what: &str) -> Result<BBox, CliError> {
    parse_box_text(text).ok_or_else(|| CliError::Usage(format!("malformed {what} box {text:?}; expected [x1,y1,x2,y2]")))
}

/// `exp(lambda_m (1 - m) + lambda_v var)` before clipping.
fn raw_consistency_weight(ious: &[f64], s: &grpo::GrpoSettings) -> f64 {
    let (m, v) = grpo::mean_var(ious);
    (s.lambda_m * (1.0 - m) + s.lambda_v * v).exp()
}

fn cmd_reward(cfg: &RunConfig, a: &RewardArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pred = parse_box_arg(&a.pred, "--pred")?;
    let gt = parse_box_arg(&a.gt, "--gt")?;
    let w = a.width.unwrap_or(cfg.scenes.image_w as f64);
    let h = a.height.unwrap_or(cfg.scenes.image_h as f64);
    let shaping: Shaping = serde_json::from_value(serde_json::Value::String(a.shaping.clone()))
        .map_err(|_| CliError::Usage(format!("unknown shaping {:?}", a.shaping)))?;
    let kernel = KernelParams::from_gt(&gt, cfg.grpo.alpha, w, h)?;
    let weights = RewardWeights {
        beta: cfg.grpo.beta,
        format_weight: 1.0,
    };
    weights.validate()?;
    let r = shaped_reward(Some(&pred), !a.no_format, &weights, &kernel, shaping);
    let _ = writeln!(out, "format  {}", r.format);
    let _ = writeln!(out, "iou     {}", r.iou);
    let _ = writeln!(out, "pos     {}", r.pos);
    let _ = writeln!(out, "total   {}", r.total);
    if let Some(list) = &a.ious {
        let ious = list
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("malformed IoU list {list:?}")))?;
        if ious.is_empty() || ious.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Usage("IoU list values must lie in [0, 1]".into()));
        }
        let _ = writeln!(
            out,
            "w       {} (unclipped {})",
            grpo::consistency_weight(&ious, &cfg.grpo),
            raw_consistency_weight(&ious, &cfg.grpo)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cot-filter
// ---------------------------------------------------------------------------

fn cmd_cot_filter(cfg: &RunConfig, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let input = require(&cfg.paths.corpus, "--input")?;
    let dir = require(&cfg.paths.out, "--out-dir")?;
    let reader = BufReader::new(File::open(input).map_err(io_err(input))?);
    create_dir(dir)?;
    emit(cfg, common, Some(dir))?;
    let paths = ["accepted.jsonl", "rejected.jsonl", "verdicts.jsonl"].map(|n| dir.join(n));
    let mut acc = create_file(&paths[0])?;
    let mut rej = create_file(&paths[1])?;
    let mut ver = create_file(&paths[2])?;
    let summary = response_format::filter_corpus(reader, &cfg.filter, &mut acc, &mut rej, &mut ver).map_err(io_err(input))?;
    for (w, p) in [&mut acc, &mut rej, &mut ver].into_iter().zip(&paths) {
        w.flush().map_err(io_err(p))?;
    }
    let summary_path = dir.join("summary.json");
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, body + "\n").map_err(io_err(&summary_path))?;
    let _ = writeln!(
        out,
        "total {}  accepted {}  rejected {}  undecodable {}",
        summary.total, summary.accepted, summary.rejected, summary.undecodable
    );
    for (v, n) in &summary.by_violation {
        let _ = writeln!(out, "  {:<26} {n}", serde_json::to_value(v).expect("violation serializes").as_str().unwrap_or("?"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn arm_dir_name(arm: &ArmSpec) -> String {
    arm.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_ablate(mut cfg: RunConfig, common: &Common, a: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    cfg.validate()?;
    init_workers(cfg.workers);
    let dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();
    let arms = a
        .arms
        .iter()
        .flat_map(|s| s.split(';'))
        .map(|s| s.parse::<ArmSpec>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = a.seeds.clone().unwrap_or_else(|| (0..a.num_seeds).collect());
    if arms.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one arm and one seed".into()));
    }
    cfg.train.cold = true;
    create_dir(&dir)?;
    emit(&cfg, common, Some(&dir))?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        for arm in &arms {
            let run = experiment::run_arm(&cfg, arm, seed)?;
            let run_dir = dir.join(arm_dir_name(arm)).join(format!("seed-{seed}"));
            create_dir(&run_dir)?;
            let steps_path = run_dir.join("steps.csv");
            grpo::write_step_logs(File::create(&steps_path).map_err(io_err(&steps_path))?, &run.logs)
                .map_err(|e| CliError::Data(format!("{}: {e}", steps_path.display())))?;
            let eval_path = run_dir.join("eval.csv");
            let mut w = csv::Writer::from_writer(File::create(&eval_path).map_err(io_err(&eval_path))?);
            let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", eval_path.display()));
            w.write_record(EvalPoint::CSV_HEADER).map_err(csv_err)?;
            for p in &run.evals {
                w.write_record(p.csv_record()).map_err(csv_err)?;
            }
            w.flush().map_err(io_err(&eval_path))?;
            let row = SummaryRow::from(&run);
            let _ = writeln!(
                out,
                "seed {seed} {}: Acc@0.5 {:.4}  tail reward std {:.5}",
                row.arm, row.acc_at_05, row.tail_reward_std
            );
            rows.push(row);
        }
    }
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(File::create(&csv_path).map_err(io_err(&csv_path))?);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let table = experiment::render_summary(&rows);
    let txt_path = dir.join("summary.txt");
    fs::write(&txt_path, &table).map_err(io_err(&txt_path))?;
    let _ = write!(out, "{table}");
    Ok(())
}
