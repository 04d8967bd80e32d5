//! Small numeric utilities shared across the crate: a counter-based seeded
//! random stream, Gaussian sampling, L2 norms, CRC32 and log-spaced
//! histograms.

use crate::error::{PmpError, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// Every draw is a pure function of `(seed, counter, lane)`, so a stream can
/// be positioned anywhere with [`SeededStream::at`] and split into
/// independent sub-streams without sharing state. Not cryptographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededStream {
    seed: u64,
    counter: u64,
    key: u64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        SeededStream {
            seed,
            counter,
            key: mix64(seed.wrapping_add(0x6A09_E667_F3BC_C909)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent stream keyed by `(seed, id)`, starting at counter 0.
    pub fn split(&self, id: u64) -> SeededStream {
        SeededStream::new(mix64(self.key ^ mix64(id.wrapping_add(GOLDEN))))
    }

    #[inline]
    fn raw(&self, counter: u64, lane: u64) -> u64 {
        let index = counter.wrapping_mul(2).wrapping_add(lane);
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = self.raw(self.counter, 0);
        self.counter = self.counter.wrapping_add(1);
        x
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = (self.raw(self.counter, 0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.raw(self.counter, 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        self.counter = self.counter.wrapping_add(1);
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` standard normal draws; the counter advances by exactly `n`.
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Euclidean norm with 64-bit accumulation in index order.
pub fn l2norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter()
        .map(|&x| {
            let x: f64 = x.into();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc_table();

/// Standard reflected CRC-32 (polynomial 0xEDB88320, init and xorout 0xFFFFFFFF).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = !0u32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

/// Geometric bin edges `lo = e_0 < e_1 < ... < e_n = hi`.
pub fn log_bin_edges(n_bins: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    check_log_range(n_bins, lo, hi)?;
    let ratio = (hi / lo).ln();
    Ok((0..=n_bins)
        .map(|i| lo * (ratio * i as f64 / n_bins as f64).exp())
        .collect())
}

fn check_log_range(n_bins: usize, lo: f64, hi: f64) -> Result<()> {
    if n_bins == 0 {
        return Err(PmpError::Argument("histogram needs at least one bin".into()));
    }
    if !(lo > 0.0) || !(lo < hi) || !hi.is_finite() {
        return Err(PmpError::Argument(format!(
            "log histogram range must satisfy 0 < lo < hi, got lo={lo}, hi={hi}"
        )));
    }
    Ok(())
}

/// Counts of `values` in `n_bins` geometric bins between `lo` and `hi`.
/// Values outside the range land in the first or last bin.
pub fn log_histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Vec<u64>> {
    check_log_range(n_bins, lo, hi)?;
    let log_lo = lo.ln();
    let width = (hi.ln() - log_lo) / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let bin = if v <= lo {
            0
        } else {
            let b = ((v.ln() - log_lo) / width).floor();
            if b >= n_bins as f64 {
                n_bins - 1
            } else {
                b as usize
            }
        };
        counts[bin] += 1;
    }
    Ok(counts)
}

/// Parameter change produced by the very first AdamW update, written out
/// directly from the bias-corrected recurrence. Used as a test oracle.
pub fn adamw_first_step_delta(
    theta: f64,
    grad: f64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> f64 {
    let (b1, b2) = betas;
    let m_hat = (1.0 - b1) * grad / (1.0 - b1);
    let v_hat = (1.0 - b2) * grad * grad / (1.0 - b2);
    -lr * weight_decay * theta - lr * m_hat / (v_hat.sqrt() + eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_state_gives_same_draws() {
        let mut a = SeededStream::at(7, 100);
        let mut b = SeededStream::at(7, 100);
        assert_eq!(a.gaussian(32), b.gaussian(32));
        assert_eq!(a.counter(), 132);
    }

    #[test]
    fn gaussian_moments() {
        let mut s = SeededStream::new(1);
        let xs = s.gaussian(1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn different_seeds_are_uncorrelated() {
        let a = SeededStream::new(3).gaussian(10_000);
        let b = SeededStream::new(4).gaussian(10_000);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let corr = dot / (l2norm(&a) * l2norm(&b));
        assert!(corr.abs() < 0.05, "corr {corr}");
        let c = SeededStream::new(3).split(1).gaussian(10_000);
        let dot: f64 = a.iter().zip(&c).map(|(x, y)| x * y).sum();
        assert!((dot / (l2norm(&a) * l2norm(&c))).abs() < 0.05);
    }

    #[test]
    fn l2norm_of_pythagorean_pair() {
        assert_eq!(l2norm(&[3.0f32, 4.0]), 5.0);
    }

    #[test]
    fn crc32_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn crc32_matches_reference_crate() {
        let mut s = SeededStream::new(11);
        for len in [1usize, 7, 64, 1000] {
            let bytes: Vec<u8> = (0..len).map(|_| s.next_u64() as u8).collect();
            assert_eq!(crc32(&bytes), crc32fast::hash(&bytes));
        }
    }

    #[test]
    fn histogram_edges_and_clamping() {
        assert_eq!(log_histogram(&[1e-3], 4, 1e-3, 1.0).unwrap(), vec![1, 0, 0, 0]);
        let h = log_histogram(&[0.0, 1e-9, 5.0, 0.05], 3, 1e-3, 1.0).unwrap();
        assert_eq!(h, vec![2, 1, 1]);
        assert!(log_histogram(&[1.0], 3, 1.0, 1.0).is_err());
        assert!(log_histogram(&[1.0], 3, 2.0, 1.0).is_err());
        let edges = log_bin_edges(3, 1e-3, 1.0).unwrap();
        assert!((edges[1] - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let delta = adamw_first_step_delta(0.0, 1.0, 0.1, (0.9, 0.999), 1e-8, 0.0);
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<u32> = (0..100).collect();
        SeededStream::new(5).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    proptest! {
        #[test]
        fn l2norm_is_homogeneous(v in prop::collection::vec(-100.0f64..100.0, 1..64), c in -10.0f64..10.0) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let lhs = l2norm(&scaled);
            let rhs = c.abs() * l2norm(&v);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
        }

        #[test]
        fn below_stays_in_range(seed in any::<u64>(), n in 1u64..1000) {
            let mut s = SeededStream::new(seed);
            for _ in 0..16 {
                prop_assert!(s.below(n) < n);
            }
        }
    }
}
