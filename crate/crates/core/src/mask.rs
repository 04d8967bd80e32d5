//! Binary parameter masks over the flat layout: exact global top-k
//! selection, IoU, the early-bird stability tracker, random baselines,
//! projection and the on-disk mask format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmpError, Result};
use crate::model::FlatParamLayout;
use crate::quantgeom::{crc32, SeededStream};

pub const MASK_MAGIC: &[u8; 8] = b"PMPMASK1";
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.99;
pub const DEFAULT_STREAK: usize = 5;

/// `⌊rho·n⌋`, with a tiny guard so products like `0.7 * 10` that land a
/// rounding error below an integer still floor to it.
pub fn k_for(rho: f64, n: usize) -> usize {
    ((rho * n as f64) + 1e-9).floor() as usize
}

pub fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(PmpError::Argument(format!("mask ratio {rho} outside (0, 1]")));
    }
    Ok(())
}

/// Fixed-length bitset with its nominal ratio. `k` is the popcount.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    words: Vec<u64>,
    d: usize,
    k: usize,
    rho: f64,
}

impl BinaryMask {
    fn empty(d: usize) -> Self {
        BinaryMask {
            words: vec![0; d.div_ceil(64)],
            d,
            k: 0,
            rho: 0.0,
        }
    }

    pub fn ones(d: usize) -> Self {
        let mut m = Self::empty(d);
        for i in 0..d {
            m.set(i);
        }
        m.k = d;
        m.rho = 1.0;
        m
    }

    pub fn from_bools(bits: &[bool], rho: f64) -> Self {
        let mut m = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i);
            }
        }
        m.k = m.count_ones();
        m.rho = rho;
        m
    }

    fn from_indices(d: usize, indices: impl IntoIterator<Item = usize>, rho: f64) -> Self {
        let mut m = Self::empty(d);
        for i in indices {
            m.set(i);
        }
        m.k = m.count_ones();
        m.rho = rho;
        m
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    /// Number of set bits.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.d).map(|i| self.get(i)).collect()
    }

    pub fn ones_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(|&i| self.get(i))
    }

    pub fn complement(&self) -> BinaryMask {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let tail = self.d % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        BinaryMask {
            words,
            d: self.d,
            k: self.d - self.k,
            rho: 1.0 - self.rho,
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// LSB-first packed bytes, `⌈d/8⌉` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.d.div_ceil(8)];
        for (j, byte) in out.iter_mut().enumerate() {
            *byte = (self.words[j / 8] >> (8 * (j % 8))) as u8;
        }
        out
    }

    fn from_bytes(bytes: &[u8], d: usize, rho: f64) -> Result<Self> {
        if bytes.len() != d.div_ceil(8) {
            return Err(PmpError::Format(format!(
                "bitset has {} bytes, expected {}",
                bytes.len(),
                d.div_ceil(8)
            )));
        }
        let mut m = Self::empty(d);
        for (j, &b) in bytes.iter().enumerate() {
            m.words[j / 8] |= (b as u64) << (8 * (j % 8));
        }
        if d % 8 != 0 && bytes.last().is_some_and(|&b| b >> (d % 8) != 0) {
            return Err(PmpError::Format("bits set beyond the mask length".into()));
        }
        m.k = m.count_ones();
        m.rho = rho;
        Ok(m)
    }
}

fn check_values(g: &[f64]) -> Result<()> {
    if let Some(i) = g.iter().position(|v| v.is_nan() || *v < 0.0) {
        return Err(PmpError::Argument(format!(
            "mask scores must be nonnegative, entry {i} is {}",
            g[i]
        )));
    }
    Ok(())
}

/// Exact top-`k` of `g` over `candidates`: larger values first, ties to the
/// lower index.
fn select_top(g: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let order = |a: &usize, b: &usize| g[*b].total_cmp(&g[*a]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, order);
        candidates.truncate(k);
    }
    candidates
}

/// Keeps exactly the `k` largest entries of `g`.
pub fn topk_mask(g: &[f64], k: usize) -> Result<BinaryMask> {
    topk_mask_excluding(g, k, None)
}

/// Top-`k` over the coordinates not in `excluded`; excluded coordinates are
/// then forced on, so the popcount is `k` plus the excluded count.
pub fn topk_mask_excluding(g: &[f64], k: usize, excluded: Option<&BinaryMask>) -> Result<BinaryMask> {
    let d = g.len();
    let eligible: Vec<usize> = match excluded {
        Some(ex) => {
            if ex.len() != d {
                return Err(PmpError::Argument(format!(
                    "exclusion mask has length {}, scores have {d}",
                    ex.len()
                )));
            }
            (0..d).filter(|&i| !ex.get(i)).collect()
        }
        None => (0..d).collect(),
    };
    if k == 0 || k > eligible.len() {
        return Err(PmpError::Argument(format!(
            "k = {k} outside 1..={}",
            eligible.len()
        )));
    }
    check_values(g)?;
    let n_eligible = eligible.len();
    let mut chosen = select_top(g, eligible, k);
    if let Some(ex) = excluded {
        chosen.extend(ex.ones_indices());
    }
    Ok(BinaryMask::from_indices(d, chosen, k as f64 / n_eligible as f64))
}

/// Intersection over union.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PmpError::Argument(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Err(PmpError::Argument("IoU of two empty masks is undefined".into()));
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Uniformly random subset of `⌊rho·d⌋` coordinates.
pub fn random_mask(d: usize, rho: f64, seed: u64) -> Result<BinaryMask> {
    random_mask_excluding(d, rho, seed, None)
}

/// Random counterpart of [`topk_mask_excluding`]: `⌊rho·n_eligible⌋`
/// eligible coordinates plus every excluded one.
pub fn random_mask_excluding(
    d: usize,
    rho: f64,
    seed: u64,
    excluded: Option<&BinaryMask>,
) -> Result<BinaryMask> {
    check_rho(rho)?;
    let mut eligible: Vec<usize> = match excluded {
        Some(ex) if ex.len() != d => {
            return Err(PmpError::Argument(format!(
                "exclusion mask has length {}, expected {d}",
                ex.len()
            )))
        }
        Some(ex) => (0..d).filter(|&i| !ex.get(i)).collect(),
        None => (0..d).collect(),
    };
    let k = k_for(rho, eligible.len());
    if k == 0 {
        return Err(PmpError::Argument(format!("mask ratio {rho} selects no coordinates of {d}")));
    }
    // partial Fisher-Yates: the first k slots form a uniform k-subset
    let mut rng = SeededStream::new(seed).split(0x4A5C);
    for i in 0..k {
        let j = i + rng.below((eligible.len() - i) as u64) as usize;
        eligible.swap(i, j);
    }
    eligible.truncate(k);
    if let Some(ex) = excluded {
        eligible.extend(ex.ones_indices());
    }
    Ok(BinaryMask::from_indices(d, eligible, rho))
}

/// Zeroes the entries of `v` whose mask bit is off.
pub fn project<T: Copy + Default>(v: &[T], mask: &BinaryMask) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    project_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn project_in_place<T: Copy + Default>(v: &mut [T], mask: &BinaryMask) -> Result<()> {
    if v.len() != mask.len() {
        return Err(PmpError::Argument(format!(
            "vector length {} does not match mask length {}",
            v.len(),
            mask.len()
        )));
    }
    for (i, x) in v.iter_mut().enumerate() {
        if !mask.get(i) {
            *x = T::default();
        }
    }
    Ok(())
}

/// Marks every coordinate of the named tensors.
pub fn exclusion_mask(layout: &FlatParamLayout, names: &[String]) -> Result<Option<BinaryMask>> {
    if names.is_empty() {
        return Ok(None);
    }
    let mut bits = vec![false; layout.d()];
    for name in names {
        let matched: Vec<_> = layout
            .entries()
            .iter()
            .filter(|e| e.name == *name || e.name.ends_with(&format!(".{name}")))
            .collect();
        if matched.is_empty() {
            return Err(PmpError::Config(format!("exclusion {name:?} matches no parameter")));
        }
        for e in matched {
            bits[e.range()].iter_mut().for_each(|b| *b = true);
        }
    }
    Ok(Some(BinaryMask::from_bools(&bits, 0.0)))
}

/// Outcome of one [`EarlyBirdTracker::step`].
#[derive(Clone, Debug, PartialEq)]
pub enum EarlyBird {
    Pending,
    Converged(BinaryMask),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRecord {
    pub step: usize,
    pub iou: f64,
    pub streak: usize,
}

/// Tracks successive top-k candidates and declares convergence once
/// `required_streak` consecutive IoUs reach `iou_threshold`.
#[derive(Clone, Debug)]
pub struct EarlyBirdTracker {
    pub iou_threshold: f64,
    pub required_streak: usize,
    last_mask: Option<BinaryMask>,
    consecutive_stable: usize,
    history: Vec<IouRecord>,
    calls: usize,
    converged: bool,
    excluded: Option<BinaryMask>,
    ema_beta: Option<f64>,
    ema: Vec<f64>,
}

impl Default for EarlyBirdTracker {
    fn default() -> Self {
        Self::new(DEFAULT_IOU_THRESHOLD, DEFAULT_STREAK)
    }
}

impl EarlyBirdTracker {
    pub fn new(iou_threshold: f64, required_streak: usize) -> Self {
        EarlyBirdTracker {
            iou_threshold,
            required_streak,
            last_mask: None,
            consecutive_stable: 0,
            history: Vec::new(),
            calls: 0,
            converged: false,
            excluded: None,
            ema_beta: None,
            ema: Vec::new(),
        }
    }

    pub fn with_exclusion(mut self, excluded: Option<BinaryMask>) -> Self {
        self.excluded = excluded;
        self
    }

    /// Scores candidates by an exponential moving average of `|g|` instead of
    /// the single-step magnitude.
    pub fn with_ema(mut self, beta: Option<f64>) -> Self {
        self.ema_beta = beta;
        self
    }

    pub fn history(&self) -> &[IouRecord] {
        &self.history
    }

    pub fn streak(&self) -> usize {
        self.consecutive_stable
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// Latest candidate, if any.
    pub fn last_mask(&self) -> Option<&BinaryMask> {
        self.last_mask.as_ref()
    }

    /// Feeds one gradient-magnitude vector.
    pub fn step(&mut self, g_abs: &[f64], k: usize) -> Result<EarlyBird> {
        if self.converged {
            return Err(PmpError::State("early-bird tracker already converged".into()));
        }
        let candidate = match self.ema_beta {
            Some(beta) => {
                if self.ema.is_empty() {
                    self.ema = g_abs.to_vec();
                } else {
                    if self.ema.len() != g_abs.len() {
                        return Err(PmpError::Argument("gradient length changed between calls".into()));
                    }
                    for (e, &g) in self.ema.iter_mut().zip(g_abs) {
                        *e = beta * *e + (1.0 - beta) * g;
                    }
                }
                topk_mask_excluding(&self.ema, k, self.excluded.as_ref())?
            }
            None => topk_mask_excluding(g_abs, k, self.excluded.as_ref())?,
        };
        self.calls += 1;
        if let Some(prev) = &self.last_mask {
            let v = iou(prev, &candidate)?;
            if v >= self.iou_threshold {
                self.consecutive_stable += 1;
            } else {
                self.consecutive_stable = 0;
            }
            self.history.push(IouRecord {
                step: self.calls,
                iou: v,
                streak: self.consecutive_stable,
            });
        }
        self.last_mask = Some(candidate);
        if self.consecutive_stable >= self.required_streak {
            self.converged = true;
            return Ok(EarlyBird::Converged(self.last_mask.clone().expect("just set")));
        }
        Ok(EarlyBird::Pending)
    }
}

/// Free-function form of [`EarlyBirdTracker::step`].
pub fn earlybird_step(tracker: &mut EarlyBirdTracker, g_abs: &[f64], k: usize) -> Result<EarlyBird> {
    tracker.step(g_abs, k)
}

/// A mask bound to the parameter layout it was discovered on.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFile {
    pub mask: BinaryMask,
    pub layout_hash: u64,
}

impl MaskFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.mask;
        let mut out = Vec::with_capacity(44 + m.d.div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(m.d as u64).to_le_bytes());
        out.extend_from_slice(&(m.k as u64).to_le_bytes());
        out.extend_from_slice(&m.rho.to_le_bytes());
        out.extend_from_slice(&self.layout_hash.to_le_bytes());
        out.extend_from_slice(&m.to_bytes());
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 4 * 8;
        if bytes.len() < HEADER + 4 || &bytes[..8] != MASK_MAGIC {
            return Err(PmpError::Format("not a mask file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32(body) != stored {
            return Err(PmpError::Format("mask file checksum mismatch".into()));
        }
        let word = |i: usize| u64::from_le_bytes(body[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        let d = word(0) as usize;
        let k = word(1) as usize;
        let rho = f64::from_bits(word(2));
        let layout_hash = word(3);
        let mask = BinaryMask::from_bytes(&body[HEADER..], d, rho)?;
        if mask.k != k {
            return Err(PmpError::Format(format!(
                "mask header claims {k} set bits, bitset has {}",
                mask.k
            )));
        }
        Ok(MaskFile { mask, layout_hash })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the mask was made for `layout`.
    pub fn check_layout(&self, layout: &FlatParamLayout) -> Result<()> {
        if self.layout_hash != layout.layout_hash() || self.mask.len() != layout.d() {
            return Err(PmpError::Compatibility(format!(
                "mask (layout {:#018x}, d={}) does not belong to this model (layout {:#018x}, d={})",
                self.layout_hash,
                self.mask.len(),
                layout.layout_hash(),
                layout.d()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(m: &BinaryMask) -> String {
        m.to_bools().iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    #[test]
    fn topk_by_hand() {
        assert_eq!(bits(&topk_mask(&[0.5, 0.1, 0.9, 0.3], 2).unwrap()), "1010");
        assert_eq!(bits(&topk_mask(&[1.0; 4], 2).unwrap()), "1100");
    }

    #[test]
    fn topk_argument_checks() {
        assert!(matches!(topk_mask(&[1.0, 2.0], 0), Err(PmpError::Argument(_))));
        assert!(matches!(topk_mask(&[1.0, 2.0], 3), Err(PmpError::Argument(_))));
        assert!(matches!(topk_mask(&[1.0, -2.0], 1), Err(PmpError::Argument(_))));
    }

    #[test]
    fn iou_by_hand() {
        let a = BinaryMask::from_bools(&[true, true, false, false], 0.5);
        let b = BinaryMask::from_bools(&[true, false, true, false], 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a.complement()).unwrap(), 0.0);
        let e = BinaryMask::from_bools(&[false; 4], 0.0);
        assert!(iou(&e, &e).is_err());
        assert!(iou(&a, &BinaryMask::ones(5)).is_err());
    }

    #[test]
    fn random_mask_popcount_and_determinism() {
        let m = random_mask(10, 0.7, 3).unwrap();
        assert_eq!(m.k(), 7);
        assert_eq!(m, random_mask(10, 0.7, 3).unwrap());
        assert_ne!(bits(&m), bits(&random_mask(10, 0.7, 4).unwrap()));
        assert!(random_mask(10, 1.5, 0).is_err());
        assert!(random_mask(10, 0.0, 0).is_err());
    }

    #[test]
    fn random_mask_is_uniform() {
        let (d, rho, draws) = (100, 0.7, 10_000);
        let mut freq = vec![0u32; d];
        for s in 0..draws {
            for i in random_mask(d, rho, s).unwrap().ones_indices() {
                freq[i] += 1;
            }
        }
        let p = 0.7;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for f in freq {
            assert!((f as f64 - draws as f64 * p).abs() < 3.5 * sd, "{f}");
        }
    }

    #[test]
    fn earlybird_constant_input() {
        let g = [0.3, 0.9, 0.1, 0.5];
        let mut t = EarlyBirdTracker::default();
        for call in 1..=6 {
            match earlybird_step(&mut t, &g, 2).unwrap() {
                EarlyBird::Pending => assert!(call < 6),
                EarlyBird::Converged(m) => {
                    assert_eq!(call, 6);
                    assert_eq!(bits(&m), "0101");
                }
            }
        }
        assert_eq!(t.history().len(), 5);
        assert!(matches!(t.step(&g, 2), Err(PmpError::State(_))));
    }

    #[test]
    fn earlybird_streak_resets() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        let mut t = EarlyBirdTracker::new(0.99, 2);
        assert_eq!(t.step(&a, 2).unwrap(), EarlyBird::Pending);
        assert_eq!(t.step(&a, 2).unwrap(), EarlyBird::Pending);
        assert_eq!(t.streak(), 1);
        assert_eq!(t.step(&b, 2).unwrap(), EarlyBird::Pending);
        assert_eq!(t.streak(), 0);
        assert_eq!(t.step(&b, 2).unwrap(), EarlyBird::Pending);
        assert!(matches!(t.step(&b, 2).unwrap(), EarlyBird::Converged(_)));
    }

    #[test]
    fn exclusions_are_forced_on() {
        let ex = BinaryMask::from_bools(&[true, false, false, false, false], 0.0);
        let m = topk_mask_excluding(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, Some(&ex)).unwrap();
        assert_eq!(bits(&m), "10011");
        assert_eq!(m.k(), 3);
        let r = random_mask_excluding(5, 0.5, 1, Some(&ex)).unwrap();
        assert!(r.get(0));
        assert_eq!(r.k(), 3);
    }

    #[test]
    fn mask_file_round_trip_and_corruption() {
        let m = random_mask(1001, 0.7, 9).unwrap();
        let f = MaskFile {
            mask: m,
            layout_hash: 0xDEAD_BEEF,
        };
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 8 + 32 + 126 + 4);
        assert_eq!(MaskFile::from_bytes(&bytes).unwrap(), f);
        for pos in [0, 9, 30, 50, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(MaskFile::from_bytes(&bad).is_err());
        }
    }

    #[test]
    fn lsb_first_bit_order() {
        let m = BinaryMask::from_bools(&[true, false, false, false, false, false, false, false, false, true], 0.2);
        assert_eq!(m.to_bytes(), vec![0x01, 0x02]);
    }

    proptest! {
        #[test]
        fn partition_identity(v in prop::collection::vec(-10.0f64..10.0, 1..200), seed in any::<u64>()) {
            let m = random_mask(v.len(), 0.5, seed);
            prop_assume!(m.is_ok());
            let m = m.unwrap();
            let a = project(&v, &m).unwrap();
            let b = project(&v, &m.complement()).unwrap();
            for i in 0..v.len() {
                prop_assert_eq!(a[i] + b[i], v[i]);
            }
            prop_assert_eq!(project(&a, &m).unwrap(), a.clone());
            prop_assert_eq!(project(&v, &BinaryMask::ones(v.len())).unwrap(), v);
        }

        #[test]
        fn exact_sparsity(d in 1usize..2000, rho in 0.01f64..1.0, seed in any::<u64>()) {
            let k = k_for(rho, d);
            prop_assume!(k >= 1);
            let m = random_mask(d, rho, seed).unwrap();
            prop_assert_eq!(m.k(), k);
            prop_assert_eq!(m.to_bools().iter().filter(|&&b| b).count(), k);
            let c = m.complement();
            prop_assert_eq!(c.k(), d - k);
            prop_assert_eq!(c.to_bools().iter().filter(|&&b| b).count(), d - k);
        }

        #[test]
        fn topk_dominance(g in prop::collection::vec(0u8..20, 1..300), kf in 0.0f64..1.0) {
            let g: Vec<f64> = g.into_iter().map(|x| x as f64 / 4.0).collect();
            let k = 1 + ((g.len() - 1) as f64 * kf) as usize;
            let m = topk_mask(&g, k).unwrap();
            prop_assert_eq!(m.k(), k);
            let sel_min = m.ones_indices().map(|i| g[i]).fold(f64::INFINITY, f64::min);
            let unsel_max = m.complement().ones_indices().map(|i| g[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(sel_min >= unsel_max);
            if sel_min == unsel_max {
                // ties at the threshold go to lower indices
                let last_sel = m.ones_indices().filter(|&i| g[i] == sel_min).max().unwrap();
                let first_unsel = m.complement().ones_indices().filter(|&i| g[i] == sel_min).min().unwrap();
                prop_assert!(last_sel < first_unsel);
            }
        }

        #[test]
        fn iou_symmetry(d in 2usize..500, s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_mask(d, 0.5, s1).unwrap();
            let b = random_mask(d, 0.5, s2).unwrap();
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn earlybird_fixed_input_converges_after_streak_plus_one(streak in 1usize..12, d in 2usize..64) {
            let g: Vec<f64> = (0..d).map(|i| (i * 37 % 11) as f64).collect();
            let mut t = EarlyBirdTracker::new(0.99, streak);
            for call in 1..=streak + 1 {
                let r = t.step(&g, d / 2 + 1).unwrap();
                prop_assert_eq!(matches!(r, EarlyBird::Converged(_)), call == streak + 1);
            }
        }
    }
}
