//! Probes of the optimisation geometry: loss interpolation along masked and
//! full-space directions, gradient-magnitude distributions split by mask,
//! and the quadratic-model check of the one-step instability bound.

mod graddist;
mod landscape;
mod quadratic;

pub use graddist::{
    grad_distribution, overlap_coefficient, split_histograms, GradDistribution, COUNTING_CUTOFF, DEFAULT_BINS,
    PLOT_CUTOFF,
};
pub use landscape::{default_alphas, probe_landscape, LandscapeOptions, LandscapeProbe};
pub use quadratic::{masked_step_contrast, verify_prop1, ContrastReport, Prop1Report, QuadraticModel};
