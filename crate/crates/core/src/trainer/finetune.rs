//! Classification fine-tuning of a released checkpoint.

use serde::{Deserialize, Serialize};

use super::{step, Checkpoint, MetricRecord, OptimizerState, TrainConfig};
use crate::autodiff::{flatten_grads, Graph};
use crate::data::Example;
use crate::error::{PmpError, Result};
use crate::mask::{BinaryMask, MaskFile};
use crate::model::{FlatParamLayout, Model, Trainable};
use crate::quantgeom::SeededStream;

#[derive(Clone, Debug, PartialEq)]
pub enum FinetuneMode {
    /// Frozen base, trained head: the reference for the gain.
    HeadOnly,
    /// Every base coordinate plus the head.
    UnauthorizedFull,
    /// Base coordinates inside the private mask plus the head.
    AuthorizedMasked(MaskFile),
    /// Frozen base, low-rank adapters on the attention projections plus the head.
    Lora { rank: usize, alpha: f64 },
}

impl FinetuneMode {
    pub fn name(&self) -> &'static str {
        match self {
            FinetuneMode::HeadOnly => "head-only",
            FinetuneMode::UnauthorizedFull => "unauthorized",
            FinetuneMode::AuthorizedMasked(_) => "authorized",
            FinetuneMode::Lora { .. } => "lora",
        }
    }
}

pub struct FinetuneOutcome {
    pub model: Model,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub mode: String,
    pub pre_accuracy: f64,
    pub baseline_accuracy: f64,
    pub accuracy: f64,
    /// `accuracy - baseline_accuracy`.
    pub gain: f64,
}

/// Held-out accuracy of the attached head.
pub fn accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(PmpError::Data("no evaluation examples".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let pred = model.predict(&seqs)?;
        for (p, e) in pred.iter().zip(chunk) {
            if Some(*p) == e.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn labels(examples: &[&Example], n_classes: usize) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| match e.label {
            Some(l) if l < n_classes => Ok(l),
            Some(l) => Err(PmpError::Data(format!("label {l} outside {n_classes} classes"))),
            None => Err(PmpError::Data("fine-tuning example has no label".into())),
        })
        .collect()
}

/// Example order: a fresh seeded permutation per epoch.
struct Order {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
    epoch: u64,
    root: SeededStream,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        let mut o = Order {
            n,
            perm: Vec::new(),
            pos: n,
            epoch: 0,
            root: SeededStream::new(seed).split(0xF1_7E),
        };
        o.next_epoch();
        o
    }

    fn next_epoch(&mut self) {
        self.perm = (0..self.n).collect();
        self.root.split(self.epoch).shuffle(&mut self.perm);
        self.epoch += 1;
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.next_epoch();
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

fn copy_grads(
    grads: &crate::autodiff::Gradients<f32>,
    layout: &FlatParamLayout,
    out: &mut [f32],
) -> Result<()> {
    if layout.d() > 0 {
        out.copy_from_slice(&flatten_grads(grads, layout)?);
    }
    Ok(())
}

/// Fine-tunes a fresh head (and, depending on `mode`, base weights or
/// adapters) on `train`, reporting accuracy on `eval` before and after.
///
/// All trainable groups share one AdamW state and one global clip; the mode
/// only decides which coordinates the update may touch.
pub fn finetune(
    checkpoint: &Checkpoint,
    train: &[Example],
    eval: &[Example],
    n_classes: usize,
    cfg: &TrainConfig,
    mode: &FinetuneMode,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PmpError::Data("no training examples".into()));
    }
    let mut model = checkpoint.to_model()?;
    model.attach_head(n_classes, cfg.seed)?;
    if let FinetuneMode::Lora { rank, alpha } = mode {
        model.attach_lora(*rank, *alpha, cfg.seed ^ 0x10_4A)?;
    }
    if let FinetuneMode::AuthorizedMasked(mf) = mode {
        mf.check_layout(model.layout())?;
    }
    let d = model.layout().d();
    let head_layout = model.head.as_ref().expect("attached").layout.clone();
    let lora_layout = model
        .lora
        .as_ref()
        .map_or_else(|| FlatParamLayout::new(Vec::new()), |l| Ok(l.layout.clone()))?;
    let (h, l) = (head_layout.d(), lora_layout.d());
    let n = d + h + l;

    let mut bits = vec![false; n];
    match mode {
        FinetuneMode::HeadOnly => {}
        FinetuneMode::UnauthorizedFull => bits[..d].fill(true),
        FinetuneMode::AuthorizedMasked(mf) => {
            for (i, b) in bits[..d].iter_mut().enumerate() {
                *b = mf.mask.get(i);
            }
        }
        FinetuneMode::Lora { .. } => bits[d + h..].fill(true),
    }
    bits[d..d + h].fill(true);
    let train_mask = BinaryMask::from_bools(&bits, 0.0);
    let trainable = Trainable {
        base: matches!(mode, FinetuneMode::UnauthorizedFull | FinetuneMode::AuthorizedMasked(_)),
        extras: true,
    };

    let pre_accuracy = accuracy(&model, eval)?;
    let mut all: Vec<f32> = Vec::with_capacity(n);
    all.extend_from_slice(model.params());
    all.extend_from_slice(&model.head.as_ref().expect("attached").values);
    if let Some(lora) = &model.lora {
        all.extend_from_slice(&lora.values);
    }
    let mut state = OptimizerState::new(n);
    let mut order = Order::new(train.len(), cfg.seed);
    let mut flat = vec![0.0f32; n];
    let mut metrics = Vec::with_capacity(cfg.total_updates);
    let mut g = Graph::new();
    for t in 0..cfg.total_updates {
        let mut acc = vec![0.0f64; n];
        let mut loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let batch: Vec<&Example> = (0..cfg.micro_batch).map(|_| &train[order.next()]).collect();
            let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
            let ys = labels(&batch, n_classes)?;
            g.clear();
            let lv = model.cls_loss(&mut g, &seqs, &ys, trainable)?;
            loss += g.value(lv).item() / cfg.grad_accum as f64;
            let grads = g.backward(lv)?;
            flat.fill(0.0);
            if trainable.base {
                copy_grads(&grads, model.layout(), &mut flat[..d])?;
            }
            copy_grads(&grads, &head_layout, &mut flat[d..d + h])?;
            copy_grads(&grads, &lora_layout, &mut flat[d + h..])?;
            for (a, &x) in acc.iter_mut().zip(&flat) {
                *a += x as f64 / cfg.grad_accum as f64;
            }
        }
        let stats = step(&mut all, &acc, &mut state, cfg, Some(&train_mask))?;
        if trainable.base {
            model.params_mut().copy_from_slice(&all[..d]);
        }
        model.head.as_mut().expect("attached").values.copy_from_slice(&all[d..d + h]);
        if let Some(lora) = model.lora.as_mut() {
            lora.values.copy_from_slice(&all[d + h..]);
        }
        metrics.push(MetricRecord {
            phase: mode.name().into(),
            step: t,
            loss,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            iou: None,
            streak: None,
        });
    }
    let post_accuracy = accuracy(&model, eval)?;
    log::info!(
        "{} fine-tune: accuracy {pre_accuracy:.3} -> {post_accuracy:.3}",
        mode.name()
    );
    Ok(FinetuneOutcome {
        model,
        pre_accuracy,
        post_accuracy,
        metrics,
    })
}

/// Runs `mode` and the head-only reference with the same budget and seed.
pub fn finetune_gain(
    checkpoint: &Checkpoint,
    train: &[Example],
    eval: &[Example],
    n_classes: usize,
    cfg: &TrainConfig,
    mode: &FinetuneMode,
) -> Result<GainReport> {
    let baseline = finetune(checkpoint, train, eval, n_classes, cfg, &FinetuneMode::HeadOnly)?;
    let (pre, acc) = if *mode == FinetuneMode::HeadOnly {
        (baseline.pre_accuracy, baseline.post_accuracy)
    } else {
        let out = finetune(checkpoint, train, eval, n_classes, cfg, mode)?;
        (out.pre_accuracy, out.post_accuracy)
    };
    Ok(GainReport {
        mode: mode.name().into(),
        pre_accuracy: pre,
        baseline_accuracy: baseline.post_accuracy,
        accuracy: acc,
        gain: acc - baseline.post_accuracy,
    })
}
