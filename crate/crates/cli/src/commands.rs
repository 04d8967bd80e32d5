//! Argument definitions and the six workflows.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pmp_core::analysis::{
    default_alphas, grad_distribution, masked_step_contrast, probe_landscape, verify_prop1, ContrastReport,
    LandscapeOptions, Prop1Report, QuadraticModel, DEFAULT_BINS, PLOT_CUTOFF,
};
use pmp_core::data::{
    blocks_from_documents, gen_synthetic, load_corpus, markov_documents, PackedBlock, SyntheticTask, TaskKind,
    DEFAULT_SHUFFLE_BUFFER,
};
use pmp_core::mask::{check_rho, MaskFile, DEFAULT_IOU_THRESHOLD, DEFAULT_STREAK};
use pmp_core::model::{build_model, ModelConfig};
use pmp_core::trainer::{
    discover_mask, finetune, pretrain, Checkpoint, FinetuneMode, GainReport, MaskSource, PmpOptions, PretrainMode,
    TrainConfig,
};
use pmp_core::PmpError;

use crate::config::{parse_assignment, resolve, SEED_ENV};
use crate::error::{CliError, CliResult};
use crate::output::{json_lines, pretty_json, Run};

#[derive(Debug, Parser)]
#[command(name = "pmp", version, about = "Private-mask pre-training toolkit")]
#[command(after_help = "Exit codes: 0 success, 2 usage, 3 data or compatibility, 4 numeric failure.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a model, optionally restricted to a private mask.
    Pretrain(PretrainArgs),
    /// Run only the early-bird warm-up and write the mask.
    DiscoverMask(DiscoverArgs),
    /// Fine-tune a checkpoint on a classification task and report the gain.
    Finetune(FinetuneArgs),
    /// Loss along random masked and full-space directions.
    ProbeLandscape(ProbeArgs),
    /// Gradient-magnitude histograms split by mask membership.
    GradDist(GradDistArgs),
    /// Monte Carlo check of the quadratic instability model.
    VerifyTheory(TheoryArgs),
    /// Print the resolved training configuration.
    Config(ConfigArgs),
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let rho: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    check_rho(rho).map_err(|e| e.to_string())?;
    Ok(rho)
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    parse_assignment(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Built-in preset: reference, desk, accept or finetune.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key = value` file applied over the preset.
    #[arg(long = "config")]
    pub config_file: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub total_updates: Option<usize>,
    #[arg(long)]
    pub warmup_updates: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub t_eb: Option<usize>,
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

impl TrainFlags {
    pub fn resolve(&self, default_preset: &str) -> CliResult<TrainConfig> {
        let mut flags = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k.into(), v));
            }
        };
        push("seed", self.seed.map(|x| x.to_string()));
        push("lr", self.lr.map(|x| x.to_string()));
        push("total_updates", self.total_updates.map(|x| x.to_string()));
        push("warmup_updates", self.warmup_updates.map(|x| x.to_string()));
        push("micro_batch", self.micro_batch.map(|x| x.to_string()));
        push("grad_accum", self.grad_accum.map(|x| x.to_string()));
        push("block_len", self.block_len.map(|x| x.to_string()));
        push("t_eb", self.t_eb.map(|x| x.to_string()));
        resolve(
            self.preset.as_deref().unwrap_or(default_preset),
            self.config_file.as_deref(),
            env_seed().as_deref(),
            &flags,
        )
    }
}

/// Seed for commands without a training config: flag, then `PMP_SEED`, then 0.
fn analysis_seed(flag: Option<u64>) -> CliResult<u64> {
    match (flag, env_seed()) {
        (Some(s), _) => Ok(s),
        (None, Some(s)) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an integer"))),
        (None, None) => Ok(0),
    }
}

#[derive(Debug, Args)]
pub struct CorpusFlags {
    /// Plain-text file or directory; documents are separated by blank lines.
    /// Without it a synthetic Markov corpus is generated from the seed.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Documents in the synthetic corpus.
    #[arg(long, default_value_t = 2500)]
    pub synthetic_docs: usize,
    /// Disable the block shuffle buffer.
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long, default_value_t = DEFAULT_SHUFFLE_BUFFER)]
    pub shuffle_buffer: usize,
}

fn read_documents(corpus: Option<&Path>, synthetic_docs: usize, seed: u64, run: &mut Run) -> CliResult<Vec<Vec<u8>>> {
    match corpus {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Input {
                    path: p.display().to_string(),
                    source: std::io::Error::from(std::io::ErrorKind::NotFound),
                });
            }
            run.input(p);
            Ok(load_corpus(p)?)
        }
        None => Ok(markov_documents(synthetic_docs, 50, 400, seed)),
    }
}

impl CorpusFlags {
    fn blocks(&self, cfg: &TrainConfig, run: &mut Run) -> CliResult<Vec<PackedBlock>> {
        let docs = read_documents(self.corpus.as_deref(), self.synthetic_docs, cfg.seed, run)?;
        let shuffle = (!self.no_shuffle).then_some((self.shuffle_buffer.max(1), cfg.seed));
        Ok(blocks_from_documents(docs, cfg.block_len, shuffle)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Earlybird,
    Random,
}

#[derive(Debug, Args)]
pub struct MaskFlags {
    /// Fraction of coordinates in the mask, in (0, 1].
    #[arg(long, default_value_t = 0.7, value_parser = parse_rho)]
    pub rho: f64,
    #[arg(long, value_enum, default_value_t = SourceArg::Earlybird)]
    pub mask_source: SourceArg,
    /// Seed of the random mask; defaults to the training seed.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_STREAK)]
    pub streak: usize,
    /// Track an exponential moving average of |g| instead of single steps.
    #[arg(long)]
    pub ema_beta: Option<f64>,
    /// Keep the warmed-up weights instead of restarting from initialisation.
    #[arg(long)]
    pub continue_after_warmup: bool,
    /// Tensors (exact name or dotted suffix) that are always trainable.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

impl MaskFlags {
    fn options(&self, seed: u64) -> PmpOptions {
        let mut o = PmpOptions::new(self.rho);
        o.source = match self.mask_source {
            SourceArg::Earlybird => MaskSource::EarlyBird,
            SourceArg::Random => MaskSource::Random {
                seed: self.mask_seed.unwrap_or(seed),
            },
        };
        o.iou_threshold = self.iou_threshold;
        o.required_streak = self.streak;
        o.ema_beta = self.ema_beta;
        o.continue_after_warmup = self.continue_after_warmup;
        o.exclude = self.exclude.clone();
        o
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub corpus: CorpusFlags,
    /// Train only the coordinates of a private mask.
    #[arg(long)]
    pub pmp: bool,
    #[command(flatten)]
    pub mask: MaskFlags,
    /// Output directory for the checkpoint, metrics and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the private mask; defaults to `<out>/private.mask`.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PretrainSnapshot<'a> {
    train: &'a TrainConfig,
    model: &'a ModelConfig,
    pmp: bool,
    rho: Option<f64>,
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = a.train.resolve("desk")?;
    let mut run = Run::start("pretrain", &a.out)?;
    let blocks = a.corpus.blocks(&cfg, &mut run)?;
    let config = ModelConfig::default();
    let mut model = build_model(config.clone(), cfg.seed)?;
    let mode = if a.pmp {
        PretrainMode::Pmp(a.mask.options(cfg.seed))
    } else {
        PretrainMode::Standard
    };
    let out = pretrain(&mut model, &blocks, &cfg, &mode)?;
    run.write("model.ckpt", &out.checkpoint.to_bytes()?)?;
    run.write("metrics.jsonl", &json_lines(&out.metrics)?)?;
    if let Some(mf) = &out.mask {
        let p = a.mask_out.clone().unwrap_or_else(|| run.path("private.mask"));
        run.write_to(&p, &mf.to_bytes())?;
    }
    if let Some(eb) = &out.earlybird {
        run.write("earlybird.json", &pretty_json(eb)?)?;
    }
    let snapshot = PretrainSnapshot {
        train: &cfg,
        model: &config,
        pmp: a.pmp,
        rho: a.pmp.then_some(a.mask.rho),
    };
    run.finish(&snapshot, cfg.seed)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub corpus: CorpusFlags,
    #[command(flatten)]
    pub mask: MaskFlags,
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_discover(a: &DiscoverArgs) -> CliResult<()> {
    if !matches!(a.mask.mask_source, SourceArg::Earlybird) {
        return Err(CliError::Usage("discover-mask only supports the early-bird source".into()));
    }
    let cfg = a.train.resolve("desk")?;
    let mut run = Run::start("discover-mask", &a.out)?;
    let blocks = a.corpus.blocks(&cfg, &mut run)?;
    let config = ModelConfig::default();
    let mut model = build_model(config.clone(), cfg.seed)?;
    let found = discover_mask(&mut model, &blocks, &cfg, &a.mask.options(cfg.seed))?;
    run.write("private.mask", &found.mask.to_bytes())?;
    run.write("warmup.jsonl", &json_lines(&found.metrics)?)?;
    run.write("earlybird.json", &pretty_json(&found.earlybird)?)?;
    let snapshot = PretrainSnapshot {
        train: &cfg,
        model: &config,
        pmp: true,
        rho: Some(a.mask.rho),
    };
    run.finish(&snapshot, cfg.seed)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    HeadOnly,
    Unauthorized,
    Authorized,
    Lora,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    KeywordCls,
    ParityCls,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Private mask; required by the authorized mode.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::KeywordCls)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 512)]
    pub n_train: usize,
    #[arg(long, default_value_t = 256)]
    pub n_eval: usize,
    /// Seed of the synthetic task; defaults to the training seed.
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_checkpoint(path: &Path, run: &mut Run) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Input {
        path: path.display().to_string(),
        source,
    })?;
    run.input(path);
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn read_mask(path: &Path, ckpt: &Checkpoint, run: &mut Run) -> CliResult<MaskFile> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Input {
        path: path.display().to_string(),
        source,
    })?;
    run.input(path);
    let mf = MaskFile::from_bytes(&bytes)?;
    mf.check_layout(ckpt.to_model()?.layout())?;
    Ok(mf)
}

#[derive(Debug, Serialize)]
struct FinetuneSnapshot<'a> {
    train: &'a TrainConfig,
    mode: &'a str,
    task: String,
    n_train: usize,
    n_eval: usize,
    task_seed: u64,
}

fn cmd_finetune(a: &FinetuneArgs) -> CliResult<()> {
    let cfg = a.train.resolve("finetune")?;
    let mut run = Run::start("finetune", &a.out)?;
    let ckpt = read_checkpoint(&a.checkpoint, &mut run)?;
    let mode = match a.mode {
        ModeArg::HeadOnly => FinetuneMode::HeadOnly,
        ModeArg::Unauthorized => FinetuneMode::UnauthorizedFull,
        ModeArg::Authorized => {
            let p = a
                .mask
                .as_deref()
                .ok_or_else(|| CliError::Usage("--mode authorized requires --mask".into()))?;
            FinetuneMode::AuthorizedMasked(read_mask(p, &ckpt, &mut run)?)
        }
        ModeArg::Lora => FinetuneMode::Lora {
            rank: a.lora_rank,
            alpha: a.lora_alpha,
        },
    };
    let kind = match a.task {
        TaskArg::KeywordCls => TaskKind::KeywordCls,
        TaskArg::ParityCls => TaskKind::ParityCls,
    };
    let task_seed = a.task_seed.unwrap_or(cfg.seed);
    let task = gen_synthetic(&SyntheticTask {
        kind,
        seed: task_seed,
        n_train: a.n_train,
        n_eval: a.n_eval,
        seq_len: cfg.block_len,
    })?;
    let n_classes = kind.n_classes();
    let baseline = finetune(&ckpt, &task.train, &task.eval, n_classes, &cfg, &FinetuneMode::HeadOnly)?;
    let other = if mode == FinetuneMode::HeadOnly {
        None
    } else {
        Some(finetune(&ckpt, &task.train, &task.eval, n_classes, &cfg, &mode)?)
    };
    let out = other.as_ref().unwrap_or(&baseline);
    let report = GainReport {
        mode: mode.name().into(),
        pre_accuracy: out.pre_accuracy,
        baseline_accuracy: baseline.post_accuracy,
        accuracy: out.post_accuracy,
        gain: out.post_accuracy - baseline.post_accuracy,
    };
    run.write("report.json", &pretty_json(&report)?)?;
    run.write("metrics.jsonl", &json_lines(&out.metrics)?)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Usage(e.to_string()))?);
    let snapshot = FinetuneSnapshot {
        train: &cfg,
        mode: mode.name(),
        task: kind.to_string(),
        n_train: a.n_train,
        n_eval: a.n_eval,
        task_seed,
    };
    run.finish(&snapshot, cfg.seed)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct HeldOutFlags {
    /// Held-out text; without it synthetic Markov text is generated.
    #[arg(long)]
    pub heldout_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub heldout_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub block_len: usize,
}

impl HeldOutFlags {
    fn blocks(&self, n: usize, run: &mut Run) -> CliResult<Vec<PackedBlock>> {
        let docs = read_documents(self.heldout_corpus.as_deref(), 200, self.heldout_seed, run)?;
        let mut blocks = blocks_from_documents(docs, self.block_len, None)?;
        if blocks.len() < n {
            return Err(PmpError::Data(format!("held-out text yields {} blocks, {n} requested", blocks.len())).into());
        }
        blocks.truncate(n);
        Ok(blocks)
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub held_out: HeldOutFlags,
    #[arg(long, default_value_t = 16)]
    pub n_blocks: usize,
    #[arg(long, default_value_t = 10)]
    pub directions: usize,
    /// Comma-separated step sizes; must include 0. Default: 21 points on [-0.5, 0.5].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub filter_normalize: bool,
    #[arg(long, default_value_t = 16)]
    pub eval_batch: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_probe(a: &ProbeArgs) -> CliResult<()> {
    let seed = analysis_seed(a.seed)?;
    let mut run = Run::start("probe-landscape", &a.out)?;
    let ckpt = read_checkpoint(&a.checkpoint, &mut run)?;
    let mask = read_mask(&a.mask, &ckpt, &mut run)?;
    let blocks = a.held_out.blocks(a.n_blocks, &mut run)?;
    let opts = LandscapeOptions {
        alphas: a.alphas.clone().unwrap_or_else(default_alphas),
        n_directions: a.directions,
        seed,
        filter_normalize: a.filter_normalize,
        eval_batch: a.eval_batch,
    };
    let probe = probe_landscape(&ckpt, &mask, &blocks, &opts)?;
    run.write("landscape.csv", probe.to_csv().as_bytes())?;
    run.write("landscape.json", &pretty_json(&probe)?)?;
    run.finish(&opts, seed)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradDistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub held_out: HeldOutFlags,
    #[arg(long, default_value_t = 32)]
    pub n_blocks: usize,
    /// Drop gradient magnitudes below this; 0 keeps every coordinate.
    #[arg(long, default_value_t = PLOT_CUTOFF)]
    pub cutoff: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct GradDistSnapshot {
    cutoff: f64,
    bins: usize,
    n_blocks: usize,
    block_len: usize,
    heldout_seed: u64,
}

fn cmd_grad_dist(a: &GradDistArgs) -> CliResult<()> {
    let mut run = Run::start("grad-dist", &a.out)?;
    let ckpt = read_checkpoint(&a.checkpoint, &mut run)?;
    let mask = read_mask(&a.mask, &ckpt, &mut run)?;
    let blocks = a.held_out.blocks(a.n_blocks, &mut run)?;
    let h = grad_distribution(&ckpt, &mask, &blocks, a.cutoff, a.bins)?;
    run.write("graddist.csv", h.to_csv().as_bytes())?;
    run.write("graddist.json", &pretty_json(&h)?)?;
    let snapshot = GradDistSnapshot {
        cutoff: a.cutoff,
        bins: a.bins,
        n_blocks: a.n_blocks,
        block_len: a.held_out.block_len,
        heldout_seed: a.held_out.heldout_seed,
    };
    run.finish(&snapshot, a.held_out.heldout_seed)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TheoryPreset {
    /// Ten flat and ten curved directions, unit curvature and noise.
    Prop1Default,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, value_enum, default_value_t = TheoryPreset::Prop1Default)]
    pub preset: TheoryPreset,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_m: Option<usize>,
    #[arg(long)]
    pub d_mbar: Option<usize>,
    #[arg(long)]
    pub eps_flat: Option<f64>,
    #[arg(long)]
    pub lambda_curv: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Directory for the report and manifest; stdout only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TheoryReport {
    model: QuadraticModel,
    prop1: Prop1Report,
    contrast: ContrastReport,
    pass: bool,
}

fn cmd_verify_theory(a: &TheoryArgs) -> CliResult<()> {
    let seed = analysis_seed(a.seed)?;
    let TheoryPreset::Prop1Default = a.preset;
    let base = QuadraticModel::prop1_default();
    let model = QuadraticModel::new(
        a.d_m.unwrap_or(base.d_m),
        a.d_mbar.unwrap_or(base.d_mbar),
        a.eps_flat.unwrap_or(base.eps_flat),
        a.lambda_curv.unwrap_or(base.lambda_curv),
        a.sigma.unwrap_or(base.noise_sigma),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let prop1 = verify_prop1(&model, a.eta, a.samples, seed)?;
    let contrast = masked_step_contrast(&model, a.eta, a.samples, seed)?;
    let report = TheoryReport {
        pass: prop1.pass && contrast.authorized_not_worse,
        model,
        prop1,
        contrast,
    };
    let json = pretty_json(&report)?;
    if let Some(dir) = &a.out {
        let mut run = Run::start("verify-theory", dir)?;
        run.write("theory.json", &json)?;
        #[derive(Serialize)]
        struct Snapshot {
            eta: f64,
            samples: usize,
        }
        run.finish(&Snapshot { eta: a.eta, samples: a.samples }, seed)?;
    }
    print!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub train: TrainFlags,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::DiscoverMask(a) => cmd_discover(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::ProbeLandscape(a) => cmd_probe(a),
        Command::GradDist(a) => cmd_grad_dist(a),
        Command::VerifyTheory(a) => cmd_verify_theory(a),
        Command::Config(a) => {
            let cfg = a.train.resolve("desk")?;
            print!("{}", String::from_utf8_lossy(&pretty_json(&cfg)?));
            Ok(())
        }
    }
}
