//! Landscape and gradient-distribution probes on small models, and the
//! quadratic model against closed forms.

mod common;

use common::markov_blocks;
use pmp_core::analysis::{
    grad_distribution, masked_step_contrast, probe_landscape, verify_prop1, LandscapeOptions, QuadraticModel,
    DEFAULT_BINS,
};
use pmp_core::mask::{random_mask, MaskFile};
use pmp_core::model::{build_model, ModelConfig};
use pmp_core::trainer::{Checkpoint, CheckpointMeta};
use pmp_core::PmpError;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        hidden_size: 16,
        n_heads: 2,
        n_kv_heads: 1,
        intermediate_size: 32,
        ..ModelConfig::default()
    }
}

fn setup(seed: u64, rho: f64) -> (Checkpoint, MaskFile) {
    let model = build_model(small_config(), seed).unwrap();
    let ckpt = Checkpoint::from_model(&model, CheckpointMeta { steps: 0, mode: "init".into() });
    let mf = MaskFile {
        mask: random_mask(ckpt.params.len(), rho, seed).unwrap(),
        layout_hash: ckpt.layout_hash,
    };
    (ckpt, mf)
}

#[test]
fn landscape_zero_point_is_exact_and_checkpoint_untouched() {
    let (ckpt, mf) = setup(1, 0.5);
    let before = ckpt.clone();
    let blocks = markov_blocks(20, 16, 1, false);
    let opts = LandscapeOptions {
        n_directions: 3,
        ..LandscapeOptions::default()
    };
    let p = probe_landscape(&ckpt, &mf, &blocks[..4], &opts).unwrap();
    assert_eq!(ckpt, before);
    assert_eq!(p.alphas.len(), 21);
    assert_eq!(p.losses_masked_dir[10], p.base_loss);
    assert_eq!(p.losses_full_dir[10], p.base_loss);
    assert_eq!(p.direction_seeds.len(), 3);
    let again = probe_landscape(&ckpt, &mf, &blocks[..4], &opts).unwrap();
    assert_eq!(p, again);
    let csv = p.to_csv();
    assert_eq!(csv.lines().count(), 22);
    let (m, f) = p.symmetric_increase(0.5).unwrap();
    assert!(m.is_finite() && f.is_finite());
}

#[test]
fn filter_normalised_directions_also_keep_zero_exact() {
    let (ckpt, mf) = setup(2, 0.3);
    let blocks = markov_blocks(20, 16, 2, false);
    let opts = LandscapeOptions {
        alphas: vec![-0.2, 0.0, 0.2],
        n_directions: 2,
        filter_normalize: true,
        ..LandscapeOptions::default()
    };
    let p = probe_landscape(&ckpt, &mf, &blocks[..2], &opts).unwrap();
    assert_eq!(p.losses_masked_dir[1], p.base_loss);
    assert_eq!(p.losses_full_dir[1], p.base_loss);
}

#[test]
fn landscape_rejects_bad_options_and_foreign_masks() {
    let (ckpt, mf) = setup(3, 0.5);
    let blocks = markov_blocks(20, 16, 3, false);
    let no_zero = LandscapeOptions {
        alphas: vec![-0.1, 0.1, 0.2],
        ..LandscapeOptions::default()
    };
    assert!(matches!(probe_landscape(&ckpt, &mf, &blocks, &no_zero), Err(PmpError::Argument(_))));
    let foreign = MaskFile {
        layout_hash: mf.layout_hash ^ 7,
        ..mf
    };
    let err = probe_landscape(&ckpt, &foreign, &blocks, &LandscapeOptions::default()).unwrap_err();
    assert!(matches!(err, PmpError::Compatibility(_)));
}

#[test]
fn zero_cutoff_histograms_cover_every_coordinate() {
    let (ckpt, mf) = setup(4, 0.6);
    let blocks = markov_blocks(20, 16, 4, false);
    let h = grad_distribution(&ckpt, &mf, &blocks[..4], 0.0, DEFAULT_BINS).unwrap();
    let total: u64 = h.masked.iter().chain(&h.unmasked).sum();
    assert_eq!(total as usize, ckpt.params.len());
    assert_eq!(h.n_masked as usize, mf.mask.k());
    assert_eq!(h.edges.len(), DEFAULT_BINS + 1);
    assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn random_mask_on_fresh_model_overlaps_almost_fully() {
    let model = build_model(ModelConfig::default(), 5).unwrap();
    let ckpt = Checkpoint::from_model(&model, CheckpointMeta { steps: 0, mode: "init".into() });
    let mf = MaskFile {
        mask: random_mask(ckpt.params.len(), 0.7, 5).unwrap(),
        layout_hash: ckpt.layout_hash,
    };
    let blocks = markov_blocks(40, 32, 5, false);
    let h = grad_distribution(&ckpt, &mf, &blocks[..8], 1e-8, DEFAULT_BINS).unwrap();
    assert!(h.overlap > 0.9, "overlap {}", h.overlap);
}

fn closed_form_mean(m: &QuadraticModel, eta: f64) -> f64 {
    let s2 = m.noise_sigma * m.noise_sigma;
    let (bm, bmbar) = m.bias_b.split_at(m.d_m);
    let e_m: f64 = bm.iter().map(|b| b * b + s2).sum();
    let e_mbar: f64 = bmbar.iter().map(|b| b * b + s2).sum();
    0.5 * eta * eta * (m.eps_flat * e_m + m.lambda_curv * e_mbar)
}

#[test]
fn chi_square_expectation_within_five_percent() {
    let m = QuadraticModel::prop1_default();
    let r = verify_prop1(&m, 0.05, 100_000, 1).unwrap();
    let want = 0.5 * 0.0025 * 10.0;
    assert!((r.empirical_mean_increase - want).abs() / want < 0.05);
    assert!((r.analytic_mean_increase - closed_form_mean(&m, 0.05)).abs() < 1e-15);
    assert!(r.pass);
}

#[test]
fn biased_gradient_matches_closed_form() {
    let bias: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 1.0).collect();
    let m = QuadraticModel::new(4, 4, 0.2, 1.5, 0.5).unwrap().with_bias(bias).unwrap();
    let r = verify_prop1(&m, 0.1, 40_000, 2).unwrap();
    let want = closed_form_mean(&m, 0.1);
    assert!((r.empirical_mean_increase - want).abs() < 5.0 * r.std_error, "{r:?} vs {want}");
}

#[test]
fn standard_error_shrinks_with_sample_count() {
    let m = QuadraticModel::prop1_default();
    let a = verify_prop1(&m, 0.05, 10_000, 3).unwrap().std_error;
    let b = verify_prop1(&m, 0.05, 40_000, 3).unwrap().std_error;
    let ratio = a / b;
    assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn contrast_with_slight_masked_curvature() {
    let m = QuadraticModel::new(10, 10, 0.01, 1.0, 1.0).unwrap();
    let eta = 0.05;
    let c = masked_step_contrast(&m, eta, 100_000, 4).unwrap();
    let (_, embar) = m.expected_sq_norms();
    let diff = c.unauthorized_mean_change - c.authorized_mean_change;
    // the difference is exactly the complement term, whatever eps_flat is
    let exact = 0.5 * eta * eta * m.lambda_curv * embar;
    assert!((diff - exact).abs() < 5.0 * c.difference_std_error, "{diff} vs {exact}");
    assert_eq!(c.predicted_difference, exact);
    let approx = 0.5 * eta * eta * (m.lambda_curv - m.eps_flat) * embar;
    assert!((diff - approx).abs() / approx < 0.05);
    assert!(c.authorized_not_worse);
    assert!(c.authorized_mean_change > 0.0);
}

#[test]
fn equal_curvature_still_favours_the_masked_step() {
    let m = QuadraticModel::new(10, 10, 1.0, 1.0, 1.0).unwrap();
    let c = masked_step_contrast(&m, 0.05, 20_000, 5).unwrap();
    let (em, embar) = m.expected_sq_norms();
    assert_eq!(em, embar);
    // authorized moves only the masked block, so the gap is the complement share
    assert!(c.authorized_mean_change > 0.0);
    assert!((c.unauthorized_mean_change / c.authorized_mean_change - 2.0).abs() < 0.05);
}
