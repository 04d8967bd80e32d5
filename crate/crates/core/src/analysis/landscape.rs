//! One-dimensional loss interpolation `f(α) = L(θ + α·δ)` along random
//! directions, either confined to the mask or spanning every coordinate.

use serde::{Deserialize, Serialize};

use crate::data::PackedBlock;
use crate::error::{PmpError, Result};
use crate::mask::{BinaryMask, MaskFile};
use crate::model::{FlatParamLayout, Model};
use crate::quantgeom::{l2norm, SeededStream};
use crate::trainer::{eval_lm_loss, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeOptions {
    pub alphas: Vec<f64>,
    pub n_directions: usize,
    pub seed: u64,
    /// Rescale each tensor's slice of the direction to that tensor's norm
    /// instead of normalising the whole direction to unit length.
    pub filter_normalize: bool,
    /// Sequences per forward pass.
    pub eval_batch: usize,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        LandscapeOptions {
            alphas: default_alphas(),
            n_directions: 10,
            seed: 0,
            filter_normalize: false,
            eval_batch: 16,
        }
    }
}

/// 21 points from -0.5 to 0.5; index 10 is exactly zero.
pub fn default_alphas() -> Vec<f64> {
    (0..21).map(|i| (i as f64 - 10.0) / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeProbe {
    pub alphas: Vec<f64>,
    pub base_loss: f64,
    pub losses_masked_dir: Vec<f64>,
    pub losses_full_dir: Vec<f64>,
    pub direction_seeds: Vec<u64>,
}

impl LandscapeProbe {
    /// Mean loss increase over `±alpha` for the masked and full curves.
    pub fn symmetric_increase(&self, alpha: f64) -> Option<(f64, f64)> {
        let find = |a: f64| self.alphas.iter().position(|&x| (x - a).abs() < 1e-12);
        let (p, n) = (find(alpha)?, find(-alpha)?);
        let masked = 0.5 * (self.losses_masked_dir[p] + self.losses_masked_dir[n]) - self.base_loss;
        let full = 0.5 * (self.losses_full_dir[p] + self.losses_full_dir[n]) - self.base_loss;
        Some((masked, full))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,loss_masked,loss_full\n");
        for i in 0..self.alphas.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.alphas[i], self.losses_masked_dir[i], self.losses_full_dir[i]
            ));
        }
        s
    }
}

fn normalize(v: &mut [f64], theta: &[f32], layout: &FlatParamLayout, mask: Option<&BinaryMask>, filter: bool) {
    if !filter {
        let n = l2norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        return;
    }
    for e in layout.entries() {
        let r = e.range();
        let target = l2norm(
            &r.clone()
                .map(|i| if mask.is_none_or(|m| m.get(i)) { theta[i] as f64 } else { 0.0 })
                .collect::<Vec<_>>(),
        );
        let n = l2norm(&v[r.clone()]);
        if n > 0.0 {
            v[r].iter_mut().for_each(|x| *x *= target / n);
        }
    }
}

/// Evaluates both interpolation curves on `eval_blocks`, averaging each
/// `α` over `n_directions` draws. Works on a private copy of the weights.
pub fn probe_landscape(
    checkpoint: &Checkpoint,
    mask: &MaskFile,
    eval_blocks: &[PackedBlock],
    opts: &LandscapeOptions,
) -> Result<LandscapeProbe> {
    if opts.alphas.len() < 3 || !opts.alphas.contains(&0.0) {
        return Err(PmpError::Argument("need at least three alphas including 0".into()));
    }
    if opts.n_directions == 0 {
        return Err(PmpError::Argument("need at least one direction".into()));
    }
    let mut model: Model = checkpoint.to_model()?;
    mask.check_layout(model.layout())?;
    let theta = checkpoint.params.clone();
    let layout = model.layout().clone();
    let d = theta.len();
    let batch = opts.eval_batch.max(1);
    let base_loss = eval_lm_loss(&model, eval_blocks, batch)?;

    let root = SeededStream::new(opts.seed);
    let direction_seeds: Vec<u64> = (0..opts.n_directions as u64).map(|j| root.split(j).next_u64()).collect();
    let n_alpha = opts.alphas.len();
    let mut masked = vec![0.0; n_alpha];
    let mut full = vec![0.0; n_alpha];
    let mut shifted = vec![0.0f32; d];
    for (j, &s) in direction_seeds.iter().enumerate() {
        let stream = SeededStream::new(s);
        let mut dir_full = stream.split(0).gaussian(d);
        normalize(&mut dir_full, &theta, &layout, None, opts.filter_normalize);
        let mut dir_masked = stream.split(1).gaussian(d);
        for (i, x) in dir_masked.iter_mut().enumerate() {
            if !mask.mask.get(i) {
                *x = 0.0;
            }
        }
        normalize(&mut dir_masked, &theta, &layout, Some(&mask.mask), opts.filter_normalize);
        for (dir, curve) in [(&dir_masked, &mut masked), (&dir_full, &mut full)] {
            for (a, &alpha) in opts.alphas.iter().enumerate() {
                for i in 0..d {
                    shifted[i] = (theta[i] as f64 + alpha * dir[i]) as f32;
                }
                model.set_params(&shifted)?;
                let loss = eval_lm_loss(&model, eval_blocks, batch)?;
                // running mean keeps the α = 0 entry bit-equal to the base loss
                curve[a] += (loss - curve[a]) / (j + 1) as f64;
            }
        }
    }
    Ok(LandscapeProbe {
        alphas: opts.alphas.clone(),
        base_loss,
        losses_masked_dir: masked,
        losses_full_dir: full,
        direction_seeds,
    })
}
