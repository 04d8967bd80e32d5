//! Gradient-magnitude histograms for masked versus frozen coordinates.

use serde::{Deserialize, Serialize};

use crate::data::PackedBlock;
use crate::error::{PmpError, Result};
use crate::mask::MaskFile;
use crate::quantgeom::{log_bin_edges, log_histogram};
use crate::trainer::{lm_gradient, Checkpoint};

/// Cutoff used when counts must cover every nonzero coordinate.
pub const COUNTING_CUTOFF: f64 = 1e-12;
/// Cutoff that drops near-zero gradients before plotting.
pub const PLOT_CUTOFF: f64 = 1e-8;
pub const DEFAULT_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDistribution {
    pub cutoff: f64,
    /// `n_bins + 1` geometric edges.
    pub edges: Vec<f64>,
    pub masked: Vec<u64>,
    pub unmasked: Vec<u64>,
    pub n_masked: u64,
    pub n_unmasked: u64,
    /// Sum over bins of the smaller normalised count.
    pub overlap: f64,
}

impl GradDistribution {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,masked,unmasked\n");
        for b in 0..self.masked.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[b],
                self.edges[b + 1],
                self.masked[b],
                self.unmasked[b]
            ));
        }
        s
    }
}

/// Overlap coefficient of two count histograms over the same bins.
pub fn overlap_coefficient(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb))
        .sum()
}

/// Histograms of `|g|` split by the mask, from a flat gradient vector.
/// Entries below `cutoff` are dropped; zeros that survive a zero cutoff land
/// in the first bin.
pub fn split_histograms(g_abs: &[f64], mask: &MaskFile, cutoff: f64, n_bins: usize) -> Result<GradDistribution> {
    if !(cutoff >= 0.0) {
        return Err(PmpError::Argument(format!("cutoff {cutoff} must be nonnegative")));
    }
    if g_abs.len() != mask.mask.len() {
        return Err(PmpError::Argument(format!(
            "gradient length {} does not match mask length {}",
            g_abs.len(),
            mask.mask.len()
        )));
    }
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (i, &x) in g_abs.iter().enumerate() {
        if x >= cutoff {
            if mask.mask.get(i) {
                on.push(x);
            } else {
                off.push(x);
            }
        }
    }
    if on.is_empty() && off.is_empty() {
        return Err(PmpError::Analysis(format!("every gradient magnitude is below the cutoff {cutoff}")));
    }
    let all = on.iter().chain(&off);
    let lo = all.clone().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(0.0, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo, lo * 10.0)
    } else {
        (1e-12, 1e-11)
    };
    let masked = log_histogram(&on, n_bins, lo, hi)?;
    let unmasked = log_histogram(&off, n_bins, lo, hi)?;
    Ok(GradDistribution {
        cutoff,
        edges: log_bin_edges(n_bins, lo, hi)?,
        overlap: overlap_coefficient(&masked, &unmasked),
        n_masked: on.len() as u64,
        n_unmasked: off.len() as u64,
        masked,
        unmasked,
    })
}

/// Gradient of the language-model loss on `held_out` at the checkpoint,
/// histogrammed by mask membership.
pub fn grad_distribution(
    checkpoint: &Checkpoint,
    mask: &MaskFile,
    held_out: &[PackedBlock],
    cutoff: f64,
    n_bins: usize,
) -> Result<GradDistribution> {
    let model = checkpoint.to_model()?;
    mask.check_layout(model.layout())?;
    if held_out.is_empty() {
        return Err(PmpError::Data("empty held-out batch".into()));
    }
    let (_, g) = lm_gradient(&model, held_out, held_out.len())?;
    let g_abs: Vec<f64> = g.iter().map(|x| x.abs()).collect();
    split_histograms(&g_abs, mask, cutoff, n_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn mf(bits: &[bool]) -> MaskFile {
        MaskFile {
            mask: BinaryMask::from_bools(bits, 0.5),
            layout_hash: 0,
        }
    }

    #[test]
    fn zero_cutoff_counts_everything() {
        let g = [0.0, 1e-3, 0.5, 2.0, 1e-6, 0.0];
        let m = mf(&[true, false, true, false, true, false]);
        let h = split_histograms(&g, &m, 0.0, 8).unwrap();
        assert_eq!(h.masked.iter().sum::<u64>(), 3);
        assert_eq!(h.unmasked.iter().sum::<u64>(), 3);
        let h = split_histograms(&g, &m, 1e-4, 8).unwrap();
        assert_eq!(h.n_masked + h.n_unmasked, 3);
        assert!(matches!(split_histograms(&g, &m, 10.0, 8), Err(PmpError::Analysis(_))));
    }

    #[test]
    fn overlap_bounds() {
        assert_eq!(overlap_coefficient(&[1, 2, 3], &[2, 4, 6]), 1.0);
        assert_eq!(overlap_coefficient(&[1, 0], &[0, 5]), 0.0);
        assert!((overlap_coefficient(&[1, 1], &[1, 0]) - 0.5).abs() < 1e-15);
    }
}
