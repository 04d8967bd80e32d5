//! Standard and mask-restricted language-model pre-training.

use serde::{Deserialize, Serialize};

use super::{step, Checkpoint, CheckpointMeta, OptimizerState, StepStats, TrainConfig};
use crate::autodiff::{flatten_grads, Graph};
use crate::data::PackedBlock;
use crate::error::{PmpError, Result};
use crate::mask::{
    check_rho, exclusion_mask, k_for, random_mask_excluding, BinaryMask, EarlyBird, EarlyBirdTracker,
    IouRecord, MaskFile, DEFAULT_IOU_THRESHOLD, DEFAULT_STREAK,
};
use crate::model::{Model, Trainable};
use crate::quantgeom::l2norm;

/// Where the training mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    /// Early-bird discovery during an unmasked warm-up.
    EarlyBird,
    /// Uniform random subset of the same size.
    Random { seed: u64 },
    /// A mask supplied by the caller.
    Given(BinaryMask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmpOptions {
    pub rho: f64,
    pub source: MaskSource,
    pub iou_threshold: f64,
    pub required_streak: usize,
    /// Score candidates by an EMA of `|g|` with this decay instead of the
    /// single-step magnitude.
    pub ema_beta: Option<f64>,
    /// Keep the warm-up weights instead of restoring the initialisation.
    pub continue_after_warmup: bool,
    /// Tensor names (or name suffixes such as `attn_norm`) kept out of
    /// selection and always trained.
    pub exclude: Vec<String>,
}

impl PmpOptions {
    pub fn new(rho: f64) -> Self {
        PmpOptions {
            rho,
            source: MaskSource::EarlyBird,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            required_streak: DEFAULT_STREAK,
            ema_beta: None,
            continue_after_warmup: false,
            exclude: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PretrainMode {
    Standard,
    Pmp(PmpOptions),
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub streak: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyBirdSummary {
    pub converged: bool,
    pub warmup_updates: usize,
    pub history: Vec<IouRecord>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Release artefact; carries no mask information.
    pub checkpoint: Checkpoint,
    /// Private artefact, present in mask mode.
    pub mask: Option<MaskFile>,
    pub earlybird: Option<EarlyBirdSummary>,
    pub metrics: Vec<MetricRecord>,
}

fn batch_at<'a>(blocks: &'a [PackedBlock], update: usize, cfg: &TrainConfig, total: usize) -> Result<&'a [PackedBlock]> {
    let eff = cfg.effective_batch();
    let start = update * eff;
    blocks.get(start..start + eff).ok_or_else(|| {
        PmpError::Training(format!(
            "data exhausted after {update} of {total} updates: {} blocks available, {} needed",
            blocks.len(),
            total * eff
        ))
    })
}

/// Mean loss and flat gradient over `batch`, split into `micro`-sized
/// chunks whose gradients are averaged.
pub fn lm_gradient(model: &Model, batch: &[PackedBlock], micro: usize) -> Result<(f64, Vec<f64>)> {
    let micro = micro.max(1);
    let n_chunks = batch.len().div_ceil(micro);
    let mut acc = vec![0.0f64; model.layout().d()];
    let mut loss = 0.0;
    let mut g = Graph::new();
    for chunk in batch.chunks(micro) {
        g.clear();
        let seqs: Vec<&[u32]> = chunk.iter().map(|b| b.tokens.as_slice()).collect();
        let l = model.lm_loss(&mut g, &seqs, Trainable::BASE)?;
        loss += g.value(l).item() / n_chunks as f64;
        let grads = g.backward(l)?;
        let flat = flatten_grads(&grads, model.layout())?;
        for (a, &x) in acc.iter_mut().zip(&flat) {
            *a += x as f64 / n_chunks as f64;
        }
    }
    Ok((loss, acc))
}

/// Mean next-token loss over `blocks`, evaluated `batch` sequences at a time.
pub fn eval_lm_loss(model: &Model, blocks: &[PackedBlock], batch: usize) -> Result<f64> {
    if blocks.is_empty() {
        return Err(PmpError::Data("no evaluation blocks".into()));
    }
    let mut total = 0.0;
    for chunk in blocks.chunks(batch.max(1)) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|b| b.tokens.as_slice()).collect();
        total += model.eval_lm_loss(&seqs)? * chunk.len() as f64;
    }
    Ok(total / blocks.len() as f64)
}

/// `‖project(∇L, M)‖ / ‖∇L‖` on `blocks`.
pub fn masked_grad_fraction(model: &Model, blocks: &[PackedBlock], mask: &BinaryMask) -> Result<f64> {
    let (_, g) = lm_gradient(model, blocks, blocks.len())?;
    let full = l2norm(&g);
    if full == 0.0 {
        return Err(PmpError::Numeric("gradient vanishes on this batch".into()));
    }
    let masked: Vec<f64> = g.iter().enumerate().map(|(i, &x)| if mask.get(i) { x } else { 0.0 }).collect();
    Ok(l2norm(&masked) / full)
}

fn record(phase: &str, step: usize, loss: f64, s: &StepStats) -> MetricRecord {
    MetricRecord {
        phase: phase.into(),
        step,
        loss,
        lr: s.lr,
        grad_norm: s.grad_norm,
        iou: None,
        streak: None,
    }
}

/// Pre-trains `model` in place on the block stream.
///
/// Mask mode runs an unmasked warm-up from the initial weights, feeding each
/// update's `|g|` to the early-bird tracker, then (by default) restores the
/// initial weights and trains only the masked coordinates. The warm-up reads
/// the same leading blocks that main training later reuses.
pub fn pretrain(
    model: &mut Model,
    blocks: &[PackedBlock],
    cfg: &TrainConfig,
    mode: &PretrainMode,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if let Some(b) = blocks.first() {
        if b.tokens.len() > model.config.max_seq_len {
            return Err(PmpError::Config(format!(
                "block length {} exceeds max_seq_len {}",
                b.tokens.len(),
                model.config.max_seq_len
            )));
        }
    }
    let d = model.layout().d();
    let mut metrics = Vec::new();
    let mut mask_file = None;
    let mut earlybird = None;
    let mut mask = None;

    if let PretrainMode::Pmp(opts) = mode {
        let (excluded, k) = mask_budget(model, opts)?;
        let chosen = match &opts.source {
            MaskSource::Given(m) => {
                if m.len() != d {
                    return Err(PmpError::Compatibility(format!(
                        "supplied mask has length {}, model has {d} parameters",
                        m.len()
                    )));
                }
                m.clone()
            }
            MaskSource::Random { seed } => random_mask_excluding(d, opts.rho, *seed, excluded.as_ref())?,
            MaskSource::EarlyBird => {
                let theta0 = model.params().to_vec();
                let (m, summary) = discover(model, blocks, cfg, opts, excluded, k, &mut metrics)?;
                if !opts.continue_after_warmup {
                    model.set_params(&theta0)?;
                }
                earlybird = Some(summary);
                m
            }
        };
        mask_file = Some(MaskFile {
            mask: chosen.clone(),
            layout_hash: model.layout().layout_hash(),
        });
        mask = Some(chosen);
    }

    let mut state = OptimizerState::new(d);
    for t in 0..cfg.total_updates {
        let batch = batch_at(blocks, t, cfg, cfg.total_updates)?;
        let (loss, g) = lm_gradient(model, batch, cfg.micro_batch)?;
        let stats = step(model.params_mut(), &g, &mut state, cfg, mask.as_ref())?;
        if t % 100 == 0 || t + 1 == cfg.total_updates {
            log::info!("update {t}: loss {loss:.4} lr {:.3e} |g| {:.3}", stats.lr, stats.grad_norm);
        }
        metrics.push(record("main", t, loss, &stats));
    }

    let checkpoint = Checkpoint::from_model(
        model,
        CheckpointMeta {
            steps: cfg.total_updates,
            mode: match mode {
                PretrainMode::Standard => "standard".into(),
                PretrainMode::Pmp(_) => "pmp".into(),
            },
        },
    );
    Ok(PretrainOutcome {
        checkpoint,
        mask: mask_file,
        earlybird,
        metrics,
    })
}

/// Validated mask ratio plus exclusions: the forced-on set and the number of
/// coordinates to pick among the rest.
fn mask_budget(model: &Model, opts: &PmpOptions) -> Result<(Option<BinaryMask>, usize)> {
    check_rho(opts.rho)?;
    let d = model.layout().d();
    let excluded = exclusion_mask(model.layout(), &opts.exclude)?;
    let n_eligible = d - excluded.as_ref().map_or(0, |m| m.k());
    let k = k_for(opts.rho, n_eligible);
    if k == 0 {
        return Err(PmpError::Config(format!("mask ratio {} selects no coordinates", opts.rho)));
    }
    Ok((excluded, k))
}

/// Result of a warm-up-only early-bird run.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub mask: MaskFile,
    pub earlybird: EarlyBirdSummary,
    pub metrics: Vec<MetricRecord>,
}

/// Runs only the unmasked warm-up of mask mode and returns the early-bird
/// mask. `model` is left at its warmed-up weights.
pub fn discover_mask(model: &mut Model, blocks: &[PackedBlock], cfg: &TrainConfig, opts: &PmpOptions) -> Result<Discovery> {
    cfg.validate()?;
    let (excluded, k) = mask_budget(model, opts)?;
    let mut metrics = Vec::new();
    let (mask, earlybird) = discover(model, blocks, cfg, opts, excluded, k, &mut metrics)?;
    Ok(Discovery {
        mask: MaskFile {
            mask,
            layout_hash: model.layout().layout_hash(),
        },
        earlybird,
        metrics,
    })
}

/// Unmasked warm-up driving the early-bird tracker. Returns the converged
/// mask, or the last candidate (with a warning) when the cap is reached.
fn discover(
    model: &mut Model,
    blocks: &[PackedBlock],
    cfg: &TrainConfig,
    opts: &PmpOptions,
    excluded: Option<BinaryMask>,
    k: usize,
    metrics: &mut Vec<MetricRecord>,
) -> Result<(BinaryMask, EarlyBirdSummary)> {
    if cfg.t_eb == 0 || cfg.t_eb > cfg.total_updates {
        return Err(PmpError::Config(format!(
            "t_eb {} must lie in 1..={}",
            cfg.t_eb, cfg.total_updates
        )));
    }
    let mut tracker = EarlyBirdTracker::new(opts.iou_threshold, opts.required_streak)
        .with_exclusion(excluded)
        .with_ema(opts.ema_beta);
    let mut state = OptimizerState::new(model.layout().d());
    for t in 0..cfg.t_eb {
        let batch = batch_at(blocks, t, cfg, cfg.t_eb)?;
        let (loss, g) = lm_gradient(model, batch, cfg.micro_batch)?;
        let g_abs: Vec<f64> = g.iter().map(|x| x.abs()).collect();
        let status = tracker.step(&g_abs, k)?;
        let stats = step(model.params_mut(), &g, &mut state, cfg, None)?;
        let mut rec = record("warmup", t, loss, &stats);
        if let Some(h) = tracker.history().last().filter(|h| h.step == t + 1) {
            rec.iou = Some(h.iou);
            rec.streak = Some(h.streak);
        }
        metrics.push(rec);
        if let EarlyBird::Converged(m) = status {
            log::info!("early-bird mask converged after {} warm-up updates", t + 1);
            let summary = EarlyBirdSummary {
                converged: true,
                warmup_updates: t + 1,
                history: tracker.history().to_vec(),
            };
            return Ok((m, summary));
        }
    }
    log::warn!(
        "early-bird tracker did not converge within {} updates (streak {}); adopting the latest candidate",
        cfg.t_eb,
        tracker.streak()
    );
    let m = tracker.last_mask().cloned().expect("at least one candidate");
    Ok((
        m,
        EarlyBirdSummary {
            converged: false,
            warmup_updates: cfg.t_eb,
            history: tracker.history().to_vec(),
        },
    ))
}
