//! Quadratic stand-in for the pre-training loss around a conditional
//! optimum, with block-diagonal curvature: `eps_flat` on the masked block
//! and `lambda_curv` on the complement.
//!
//! For a step `θ* − ηg` the loss increase is
//! `½η²(eps_flat‖g_M‖² + lambda_curv‖g_M̄‖²)`, so with
//! `g = b + σξ` its expectation is known in closed form and the Monte Carlo
//! estimates below can be checked against it.

use serde::{Deserialize, Serialize};

use crate::error::{PmpError, Result};
use crate::quantgeom::SeededStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    pub d_m: usize,
    pub d_mbar: usize,
    pub eps_flat: f64,
    pub lambda_curv: f64,
    /// Optimum; the masked block comes first.
    pub theta_star: Vec<f64>,
    pub noise_sigma: f64,
    /// Mean fine-tuning gradient, laid out like `theta_star`.
    pub bias_b: Vec<f64>,
}

impl QuadraticModel {
    /// Zero optimum and zero bias.
    pub fn new(d_m: usize, d_mbar: usize, eps_flat: f64, lambda_curv: f64, noise_sigma: f64) -> Result<Self> {
        let m = QuadraticModel {
            d_m,
            d_mbar,
            eps_flat,
            lambda_curv,
            theta_star: vec![0.0; d_m + d_mbar],
            noise_sigma,
            bias_b: vec![0.0; d_m + d_mbar],
        };
        m.validate()?;
        Ok(m)
    }

    /// Ten flat and ten curved directions, unit curvature, pure noise.
    pub fn prop1_default() -> Self {
        Self::new(10, 10, 0.0, 1.0, 1.0).expect("valid constants")
    }

    pub fn with_bias(mut self, bias_b: Vec<f64>) -> Result<Self> {
        self.bias_b = bias_b;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_curv > 0.0 && self.lambda_curv.is_finite()) {
            return Err(PmpError::Analysis(format!(
                "complement curvature must be positive, got {}",
                self.lambda_curv
            )));
        }
        if !(self.eps_flat >= 0.0 && self.eps_flat.is_finite()) {
            return Err(PmpError::Analysis(format!(
                "masked-block curvature must be nonnegative, got {}",
                self.eps_flat
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PmpError::Analysis(format!("noise scale {} is invalid", self.noise_sigma)));
        }
        let n = self.d_m + self.d_mbar;
        if n == 0 || self.theta_star.len() != n || self.bias_b.len() != n {
            return Err(PmpError::Analysis(format!(
                "vectors must have length d_m + d_mbar = {n}"
            )));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.d_m + self.d_mbar
    }

    fn curvature(&self, i: usize) -> f64 {
        if i < self.d_m {
            self.eps_flat
        } else {
            self.lambda_curv
        }
    }

    /// `L_pre(θ) = ½ (θ−θ*)ᵀ H (θ−θ*)`.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.theta_star)
            .enumerate()
            .map(|(i, (t, s))| 0.5 * self.curvature(i) * (t - s) * (t - s))
            .sum()
    }

    /// `E‖g_M‖²` and `E‖g_M̄‖²`.
    pub fn expected_sq_norms(&self) -> (f64, f64) {
        let s2 = self.noise_sigma * self.noise_sigma;
        let (bm, bmbar) = self.bias_b.split_at(self.d_m);
        (
            bm.iter().map(|x| x * x).sum::<f64>() + s2 * self.d_m as f64,
            bmbar.iter().map(|x| x * x).sum::<f64>() + s2 * self.d_mbar as f64,
        )
    }

    /// Fine-tuning gradient for Monte Carlo sample `i`; each sample owns its
    /// own counter-based stream, so results do not depend on evaluation order.
    fn sample_gradient(&self, seed: u64, i: u64) -> Vec<f64> {
        let mut s = SeededStream::new(seed).split(i);
        self.bias_b
            .iter()
            .map(|b| b + self.noise_sigma * s.next_gaussian())
            .collect()
    }

    /// Loss change of one step `θ* − ηg`, optionally confined to the masked
    /// block.
    fn step_increase(&self, g: &[f64], eta: f64, masked_only: bool) -> f64 {
        let n = if masked_only { self.d_m } else { self.dim() };
        let theta: Vec<f64> = (0..self.dim())
            .map(|i| {
                if i < n {
                    self.theta_star[i] - eta * g[i]
                } else {
                    self.theta_star[i]
                }
            })
            .collect();
        self.loss(&theta) - self.loss(&self.theta_star)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub eta: f64,
    pub n_samples: usize,
    pub empirical_mean_increase: f64,
    pub std_error: f64,
    /// Exact expectation of the increase under the model.
    pub analytic_mean_increase: f64,
    /// `c·η²` with `c = ½·lambda_curv·E‖g_M̄‖²`.
    pub predicted_lower_bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub eta: f64,
    pub n_samples: usize,
    pub authorized_mean_change: f64,
    pub unauthorized_mean_change: f64,
    /// Standard error of the per-sample difference.
    pub difference_std_error: f64,
    /// Exact expected `unauthorized − authorized`, `½η²·lambda_curv·E‖g_M̄‖²`.
    pub predicted_difference: f64,
    pub authorized_not_worse: bool,
}

fn check_run(model: &QuadraticModel, eta: f64, n_samples: usize) -> Result<()> {
    model.validate()?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(PmpError::Analysis(format!("step size {eta} must be positive")));
    }
    if n_samples < 2 {
        return Err(PmpError::Analysis("need at least two Monte Carlo samples".into()));
    }
    Ok(())
}

/// Running mean and variance (Welford), exact for constant input.
#[derive(Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

/// Monte Carlo check that one unconstrained step from the optimum raises the
/// loss by at least `c·η²`.
pub fn verify_prop1(model: &QuadraticModel, eta: f64, n_samples: usize, seed: u64) -> Result<Prop1Report> {
    check_run(model, eta, n_samples)?;
    let mut acc = Moments::default();
    for i in 0..n_samples {
        let g = model.sample_gradient(seed, i as u64);
        acc.push(model.step_increase(&g, eta, false));
    }
    let (em, embar) = model.expected_sq_norms();
    let analytic = 0.5 * eta * eta * (model.eps_flat * em + model.lambda_curv * embar);
    let bound = 0.5 * model.lambda_curv * embar * eta * eta;
    Ok(Prop1Report {
        eta,
        n_samples,
        empirical_mean_increase: acc.mean,
        std_error: acc.std_error(),
        analytic_mean_increase: analytic,
        predicted_lower_bound: bound,
        pass: acc.mean >= 0.95 * bound,
    })
}

/// Same samples, two steps: the full step and the step projected onto the
/// masked block.
pub fn masked_step_contrast(
    model: &QuadraticModel,
    eta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ContrastReport> {
    check_run(model, eta, n_samples)?;
    let (mut auth, mut unauth, mut diff) = (Moments::default(), Moments::default(), Moments::default());
    for i in 0..n_samples {
        let g = model.sample_gradient(seed, i as u64);
        let a = model.step_increase(&g, eta, true);
        let u = model.step_increase(&g, eta, false);
        auth.push(a);
        unauth.push(u);
        diff.push(u - a);
    }
    let (_, embar) = model.expected_sq_norms();
    Ok(ContrastReport {
        eta,
        n_samples,
        authorized_mean_change: auth.mean,
        unauthorized_mean_change: unauth.mean,
        difference_std_error: diff.std_error(),
        predicted_difference: 0.5 * eta * eta * model.lambda_curv * embar,
        authorized_not_worse: auth.mean <= unauth.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_direction_immunity() {
        let mut bias = vec![0.0; 4];
        bias[0] = 1.0;
        bias[1] = -2.0;
        let m = QuadraticModel::new(2, 2, 0.0, 3.0, 0.0).unwrap().with_bias(bias).unwrap();
        let r = verify_prop1(&m, 0.1, 10, 0).unwrap();
        assert_eq!(r.empirical_mean_increase, 0.0);
    }

    #[test]
    fn one_dimensional_hand_value() {
        let m = QuadraticModel::new(1, 1, 0.0, 2.0, 0.0)
            .unwrap()
            .with_bias(vec![0.0, 1.0])
            .unwrap();
        let r = verify_prop1(&m, 0.1, 4, 0).unwrap();
        assert!((r.empirical_mean_increase - 0.01).abs() < 1e-15);
        assert!((r.predicted_lower_bound - 0.01).abs() < 1e-15);
        assert!(r.pass);
    }

    #[test]
    fn invalid_curvature() {
        assert!(matches!(QuadraticModel::new(1, 1, 0.0, 0.0, 1.0), Err(PmpError::Analysis(_))));
        let mut m = QuadraticModel::prop1_default();
        m.lambda_curv = -1.0;
        assert!(verify_prop1(&m, 0.1, 10, 0).is_err());
    }

    #[test]
    fn stationary_point_without_noise_or_bias() {
        let m = QuadraticModel::new(3, 3, 0.5, 1.0, 0.0).unwrap();
        assert_eq!(verify_prop1(&m, 0.2, 10, 1).unwrap().empirical_mean_increase, 0.0);
        let c = masked_step_contrast(&m, 0.2, 10, 1).unwrap();
        assert_eq!((c.authorized_mean_change, c.unauthorized_mean_change), (0.0, 0.0));
    }

    #[test]
    fn authorized_change_zero_when_flat() {
        let m = QuadraticModel::prop1_default();
        let c = masked_step_contrast(&m, 0.05, 1000, 3).unwrap();
        assert_eq!(c.authorized_mean_change, 0.0);
        assert!(c.unauthorized_mean_change > 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = QuadraticModel::prop1_default();
        assert_eq!(verify_prop1(&m, 0.05, 500, 9).unwrap(), verify_prop1(&m, 0.05, 500, 9).unwrap());
    }
}
