//! AdamW training with warmup + cosine schedule, global-norm clipping and
//! gradient accumulation; mask-restricted pre-training and the fine-tuning
//! modes.

mod checkpoint;
mod finetune;
mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointMeta, CKPT_MAGIC};
pub use finetune::{accuracy, finetune, finetune_gain, FinetuneMode, FinetuneOutcome, GainReport};
pub use pretrain::{
    discover_mask, eval_lm_loss, lm_gradient, masked_grad_fraction, pretrain, Discovery, EarlyBirdSummary, MaskSource, MetricRecord, PmpOptions,
    PretrainMode, PretrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{PmpError, Result};
use crate::mask::BinaryMask;

/// Optimiser and schedule hyper-parameters plus the data-shape knobs that
/// come with a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// `min_lr = min_lr_ratio · base_lr` at the end of the cosine.
    pub min_lr_ratio: f64,
    pub warmup_updates: usize,
    pub total_updates: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    /// Global-norm threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub block_len: usize,
    /// Cap on early-bird warm-up updates.
    pub t_eb: usize,
}

pub const PRESETS: [&str; 4] = ["reference", "desk", "accept", "finetune"];

impl TrainConfig {
    /// Named presets. `reference` is the full-scale pre-training recipe,
    /// `desk` shrinks it for a CPU, `accept` is the shorter-block schedule
    /// the acceptance experiments run on a single core, and `finetune` is
    /// the classification fine-tuning budget (`block_len` is the example
    /// length there).
    pub fn preset(name: &str) -> Result<Self> {
        let desk = TrainConfig {
            base_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_updates: 200,
            total_updates: 2000,
            micro_batch: 8,
            grad_accum: 1,
            clip_norm: 1.0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 42,
            block_len: 256,
            t_eb: 100,
        };
        match name {
            "desk" => Ok(desk),
            "reference" => Ok(TrainConfig {
                base_lr: 2e-5,
                warmup_updates: 2000,
                total_updates: 20_000,
                micro_batch: 4,
                grad_accum: 8,
                t_eb: 500,
                ..desk
            }),
            "accept" => Ok(TrainConfig {
                base_lr: 3e-3,
                warmup_updates: 80,
                total_updates: 800,
                block_len: 64,
                ..desk
            }),
            "finetune" => Ok(TrainConfig {
                base_lr: 3e-3,
                warmup_updates: 10,
                total_updates: 150,
                micro_batch: 16,
                block_len: 32,
                ..desk
            }),
            other => Err(PmpError::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_updates", self.total_updates),
            ("micro_batch", self.micro_batch),
            ("grad_accum", self.grad_accum),
            ("block_len", self.block_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PmpError::Config(format!("{name} must be positive")));
            }
        }
        if self.warmup_updates > self.total_updates {
            return Err(PmpError::Config(format!(
                "warmup_updates {} exceeds total_updates {}",
                self.warmup_updates, self.total_updates
            )));
        }
        let reals = [
            ("base_lr", self.base_lr),
            ("min_lr_ratio", self.min_lr_ratio),
            ("clip_norm", self.clip_norm),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PmpError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(PmpError::Config(format!("betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        Ok(())
    }

    /// Sequences consumed per optimiser update.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    /// Sets one field from its textual form; used by config files and flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| PmpError::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "base_lr" | "lr" => self.base_lr = parse(key, value)?,
            "min_lr_ratio" => self.min_lr_ratio = parse(key, value)?,
            "warmup_updates" => self.warmup_updates = parse(key, value)?,
            "total_updates" => self.total_updates = parse(key, value)?,
            "micro_batch" => self.micro_batch = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.betas.0 = parse(key, value)?,
            "beta2" => self.betas.1 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "block_len" => self.block_len = parse(key, value)?,
            "t_eb" => self.t_eb = parse(key, value)?,
            other => return Err(PmpError::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }
}

/// Learning rate for update `t`: `base·(t+1)/warmup` during warmup, then a
/// cosine from `base` down to `min_lr_ratio·base`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t >= cfg.total_updates {
        return Err(PmpError::Argument(format!(
            "update {t} outside schedule of {} updates",
            cfg.total_updates
        )));
    }
    let base = cfg.base_lr;
    if t < cfg.warmup_updates {
        return Ok(base * (t + 1) as f64 / cfg.warmup_updates as f64);
    }
    let min = cfg.min_lr_ratio * base;
    let span = (cfg.total_updates - cfg.warmup_updates) as f64;
    let progress = (t - cfg.warmup_updates) as f64 / span;
    Ok(min + (base - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW moments. Coordinates outside the training mask are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(d: usize) -> Self {
        OptimizerState {
            m: vec![0.0; d],
            v: vec![0.0; d],
            step_count: 0,
        }
    }
}

/// Gradient norms seen by one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Norm of the (projected) gradient before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One AdamW update at the scheduled learning rate for the state's step
/// count.
pub fn step<G: Copy + Into<f64>>(
    params: &mut [f32],
    grads: &[G],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    mask: Option<&BinaryMask>,
) -> Result<StepStats> {
    let lr = lr_at(state.step_count as usize, cfg)?;
    adamw_update(params, grads, state, cfg, lr, mask)
}

/// AdamW with decoupled weight decay at an explicit learning rate.
///
/// With a mask the gradient is projected first, then clipped, and only
/// masked coordinates of the parameters and moments are written.
pub fn adamw_update<G: Copy + Into<f64>>(
    params: &mut [f32],
    grads: &[G],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
    mask: Option<&BinaryMask>,
) -> Result<StepStats> {
    let d = params.len();
    if grads.len() != d || state.m.len() != d || state.v.len() != d {
        return Err(PmpError::dim("adamw", &[params.len(), state.m.len()], &[grads.len()]));
    }
    if let Some(m) = mask {
        if m.len() != d {
            return Err(PmpError::dim("adamw mask", &[d], &[m.len()]));
        }
    }
    let active = |i: usize| mask.is_none_or(|m| m.get(i));
    let mut g: Vec<f64> = Vec::with_capacity(d);
    let mut sq = 0.0;
    for (i, x) in grads.iter().enumerate() {
        let x: f64 = (*x).into();
        if !x.is_finite() {
            return Err(PmpError::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        let x = if active(i) { x } else { 0.0 };
        sq += x * x;
        g.push(x);
    }
    let grad_norm = sq.sqrt();
    let mut clip = 1.0;
    if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        clip = cfg.clip_norm / (grad_norm + 1e-6);
    }
    let (b1, b2) = cfg.betas;
    let t = state.step_count + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..d {
        if !active(i) {
            continue;
        }
        let gi = g[i] * clip;
        let m = b1 * state.m[i] + (1.0 - b1) * gi;
        let v = b2 * state.v[i] + (1.0 - b2) * gi * gi;
        state.m[i] = m;
        state.v[i] = v;
        let p = params[i] as f64 * decay;
        params[i] = (p - lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps)) as f32;
    }
    state.step_count = t;
    Ok(StepStats {
        lr,
        grad_norm,
        clipped_norm: grad_norm * clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::random_mask;
    use crate::quantgeom::{adamw_first_step_delta, SeededStream};
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::preset("desk").unwrap()
    }

    #[test]
    fn reference_preset_values() {
        let p = TrainConfig::preset("reference").unwrap();
        assert_eq!(p.base_lr, 2e-5);
        assert_eq!((p.warmup_updates, p.total_updates), (2000, 20_000));
        assert_eq!((p.micro_batch, p.grad_accum, p.effective_batch()), (4, 8, 32));
        assert_eq!((p.clip_norm, p.seed, p.t_eb, p.block_len), (1.0, 42, 500, 256));
        assert!(TrainConfig::preset("huge").is_err());
    }

    #[test]
    fn desk_preset_values() {
        let p = cfg();
        assert_eq!(p.base_lr, 3e-4);
        assert_eq!((p.warmup_updates, p.total_updates, p.t_eb), (200, 2000, 100));
        assert_eq!((p.micro_batch, p.grad_accum), (8, 1));
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(lr_at(0, &c).unwrap(), 3e-4 / 200.0);
        assert!((lr_at(200, &c).unwrap() - 3e-4).abs() < 1e-9);
        assert!((lr_at(199, &c).unwrap() - lr_at(200, &c).unwrap()).abs() < 1e-9);
        // independent evaluation of the last cosine point
        let progress = 1799.0 / 1800.0;
        let expected = 3e-5 + (3e-4 - 3e-5) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
        assert!((lr_at(1999, &c).unwrap() - expected).abs() < 1e-15);
        assert!((lr_at(1999, &c).unwrap() - 3e-5).abs() < 1e-9);
        assert!(matches!(lr_at(2000, &c), Err(PmpError::Argument(_))));
    }

    #[test]
    fn first_step_closed_form() {
        let c = TrainConfig {
            base_lr: 0.1,
            warmup_updates: 1,
            total_updates: 10,
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..cfg()
        };
        let mut p = [0.5f32];
        let mut s = OptimizerState::new(1);
        step(&mut p, &[1.0f32], &mut s, &c, None).unwrap();
        let delta = p[0] as f64 - 0.5;
        let expected = adamw_first_step_delta(0.5, 1.0, 0.1, (0.9, 0.999), 1e-8, 0.0);
        assert!((delta - expected).abs() < 1e-7, "{delta} vs {expected}");
        assert!((delta + 0.0999999).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_gradient_leaves_state() {
        let mut p = vec![1.0f32; 4];
        let mut s = OptimizerState::new(4);
        let before = (p.clone(), s.clone());
        let r = step(&mut p, &[0.1, f32::NAN, 0.2, 0.3], &mut s, &cfg(), None);
        assert!(matches!(r, Err(PmpError::Numeric(_))));
        assert_eq!((p, s), before);
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let c = TrainConfig {
            warmup_updates: 2,
            ..cfg()
        };
        let mut rng = SeededStream::new(1);
        let mut p1: Vec<f32> = rng.gaussian(50).iter().map(|&x| x as f32).collect();
        let mut p2 = p1.clone();
        let (mut s1, mut s2) = (OptimizerState::new(50), OptimizerState::new(50));
        let ones = BinaryMask::ones(50);
        for _ in 0..20 {
            let g: Vec<f32> = rng.gaussian(50).iter().map(|&x| x as f32).collect();
            step(&mut p1, &g, &mut s1, &c, None).unwrap();
            step(&mut p2, &g, &mut s2, &c, Some(&ones)).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn masked_coordinates_frozen_for_100_steps() {
        let c = TrainConfig {
            warmup_updates: 10,
            ..cfg()
        };
        let mut rng = SeededStream::new(2);
        let mask = random_mask(64, 0.7, 5).unwrap();
        let p0: Vec<f32> = rng.gaussian(64).iter().map(|&x| x as f32).collect();
        let mut p = p0.clone();
        let mut s = OptimizerState::new(64);
        for _ in 0..100 {
            let g: Vec<f32> = rng.gaussian(64).iter().map(|&x| 5.0 * x as f32).collect();
            step(&mut p, &g, &mut s, &c, Some(&mask)).unwrap();
        }
        for i in 0..64 {
            if mask.get(i) {
                assert_ne!(p[i].to_bits(), p0[i].to_bits());
            } else {
                assert_eq!(p[i].to_bits(), p0[i].to_bits());
                assert_eq!(s.m[i].to_bits(), 0);
                assert_eq!(s.v[i].to_bits(), 0);
            }
        }
    }

    #[test]
    fn set_keys() {
        let mut c = cfg();
        c.set("lr", "0.5").unwrap();
        c.set("beta2", "0.95").unwrap();
        assert_eq!((c.base_lr, c.betas.1), (0.5, 0.95));
        assert!(c.set("lr", "fast").is_err());
        assert!(c.set("momentum", "1").is_err());
        c.warmup_updates = 5000;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_nonnegative_and_bounded(warm in 1usize..50, extra in 0usize..200, frac in 0.0f64..1.0) {
            let c = TrainConfig { warmup_updates: warm, total_updates: warm + extra + 1, ..cfg() };
            let t = ((c.total_updates - 1) as f64 * frac) as usize;
            let lr = lr_at(t, &c).unwrap();
            prop_assert!(lr >= 0.0 && lr <= c.base_lr + 1e-15);
        }

        #[test]
        fn clipped_norm_bounded(scale in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = SeededStream::new(seed);
            let g: Vec<f64> = rng.gaussian(40).iter().map(|x| x * scale).collect();
            let mut p = vec![0.0f32; 40];
            let mut s = OptimizerState::new(40);
            let mask = random_mask(40, 0.5, seed).unwrap();
            let stats = step(&mut p, &g, &mut s, &cfg(), Some(&mask)).unwrap();
            prop_assert!(stats.clipped_norm <= 1.0 + 1e-6);
            let projected: f64 = (0..40).filter(|&i| mask.get(i)).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
            prop_assert!((stats.grad_norm - projected).abs() <= 1e-12 * projected.max(1.0));
        }
    }
}
