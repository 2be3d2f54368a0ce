//! Exponential-logarithmic Dice plus class-weighted cross-entropy, applied at
//! every supervised decoder resolution against decimated labels.
//!
//! Logits and probabilities are class-major per sample: `[class][voxel]`,
//! `3 * n` values for `n` voxels. Dice and cross-entropy sums are pooled over
//! the whole batch.

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{KIDNEY, NUM_CLASSES, TUMOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Exponent applied to `-ln(dice)`.
    pub dice_exponent: f64,
    /// Weights of the kidney and tumor Dice terms.
    pub dice_weights: [f64; 2],
    /// Background, kidney and tumor cross-entropy weights.
    pub ce_weights: [f64; 3],
    /// Added to numerator and denominator of the soft Dice.
    pub dice_smooth: f64,
    /// Floor for `-ln(dice)` and for probabilities inside the logarithm.
    pub log_floor: f64,
    /// Per-head weights, full resolution first. Empty means `2^-l`, normalized.
    pub level_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_exponent: 0.3,
            dice_weights: [0.4, 0.6],
            ce_weights: [0.28, 0.28, 0.44],
            dice_smooth: 1e-5,
            log_floor: 1e-6,
            level_weights: Vec::new(),
        }
    }
}

const SUM_TOL: f64 = 1e-9;

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dice_exponent > 0.0 && self.dice_exponent.is_finite()) {
            v.push(format!("loss.dice_exponent must be > 0, got {}", self.dice_exponent));
        }
        let check_weights = |name: &str, w: &[f64], v: &mut Vec<String>| {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                v.push(format!("loss.{name} must be nonnegative, got {w:?}"));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
                v.push(format!("loss.{name} must sum to 1, got {w:?}"));
            }
        };
        check_weights("dice_weights", &self.dice_weights, &mut v);
        check_weights("ce_weights", &self.ce_weights, &mut v);
        if !self.level_weights.is_empty() {
            if self.level_weights.iter().any(|w| !(*w > 0.0)) {
                v.push(format!("loss.level_weights must be positive, got {:?}", self.level_weights));
            }
            check_weights("level_weights", &self.level_weights, &mut v);
        }
        if !(self.dice_smooth > 0.0) {
            v.push(format!("loss.dice_smooth must be > 0, got {}", self.dice_smooth));
        }
        if !(self.log_floor > 0.0 && self.log_floor < 1.0) {
            v.push(format!("loss.log_floor must be in (0, 1), got {}", self.log_floor));
        }
        v
    }

    /// Weights for `levels` supervised heads.
    pub fn level_weights_for(&self, levels: usize) -> Result<Vec<f64>> {
        if !self.level_weights.is_empty() {
            if self.level_weights.len() != levels {
                return Err(Error::InvalidInput(format!(
                    "{} level weights configured for {levels} heads",
                    self.level_weights.len()
                )));
            }
            return Ok(self.level_weights.clone());
        }
        Ok(default_level_weights(levels))
    }

    /// Loss value of a perfect prediction: every `-ln(dice)` sits on the floor.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.powf(self.dice_exponent) * self.dice_weights.iter().sum::<f64>()
    }
}

/// `w_l ∝ 2^-l`, normalized to sum to one.
pub fn default_level_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Per-voxel softmax of class-major logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let n = logits.len() / NUM_CLASSES;
    let mut out = vec![0.0; logits.len()];
    for v in 0..n {
        let z = [logits[v], logits[n + v], logits[2 * n + v]];
        let m = z[0].max(z[1]).max(z[2]);
        let e = z.map(|x| (x - m).exp());
        let sum = e[0] + e[1] + e[2];
        for c in 0..NUM_CLASSES {
            out[c * n + v] = e[c] / sum;
        }
    }
    out
}

/// Batch-pooled soft Dice of `class`: `(2 Σ p y + ε) / (Σ p + Σ y + ε)`.
pub fn soft_dice(probs: &[&[f64]], labels: &[&[u8]], class: u8, cfg: &LossConfig) -> f64 {
    let (inter, total) = dice_sums(probs, labels, class);
    (2.0 * inter + cfg.dice_smooth) / (total + cfg.dice_smooth)
}

fn dice_sums(probs: &[&[f64]], labels: &[&[u8]], class: u8) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let n = y.len();
        let pc = &p[class as usize * n..(class as usize + 1) * n];
        for (&pv, &yv) in pc.iter().zip(*y) {
            total += pv;
            if yv == class {
                inter += pv;
                total += 1.0;
            }
        }
    }
    (inter, total)
}

/// `Σ_k w_k · max(-ln d_k, δ)^γ` over kidney and tumor.
pub fn exp_log_dice(dice_kidney: f64, dice_tumor: f64, cfg: &LossConfig) -> f64 {
    let term = |d: f64| (-d.ln()).max(cfg.log_floor).powf(cfg.dice_exponent);
    cfg.dice_weights[0] * term(dice_kidney) + cfg.dice_weights[1] * term(dice_tumor)
}

/// Derivative of one weighted exp-log term with respect to its Dice value.
fn exp_log_term_grad(d: f64, weight: f64, cfg: &LossConfig) -> f64 {
    let nl = -d.ln();
    if nl <= cfg.log_floor {
        return 0.0;
    }
    weight * cfg.dice_exponent * nl.powf(cfg.dice_exponent - 1.0) * (-1.0 / d)
}

/// `Σ_c α_c · mean_{y = c}(-ln max(p_c, δ))`; classes absent from the batch add 0.
pub fn weighted_ce(probs: &[&[f64]], labels: &[&[u8]], cfg: &LossConfig) -> f64 {
    let mut sums = [0.0f64; NUM_CLASSES];
    let counts = class_counts(labels);
    for (p, y) in probs.iter().zip(labels) {
        let n = y.len();
        for (v, &c) in y.iter().enumerate() {
            let c = c as usize;
            sums[c] -= p[c * n + v].max(cfg.log_floor).ln();
        }
    }
    (0..NUM_CLASSES)
        .filter(|&c| counts[c] > 0)
        .map(|c| cfg.ce_weights[c] * sums[c] / counts[c] as f64)
        .sum()
}

fn class_counts(labels: &[&[u8]]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for y in labels {
        for &c in *y {
            counts[c as usize] += 1;
        }
    }
    counts
}

/// Components of the loss at one resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub dice_kidney: f64,
    pub dice_tumor: f64,
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

fn check_lengths(logits: &[&[f64]], labels: &[&[u8]]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "batch size of logits and labels",
            expected: vec![labels.len()],
            found: vec![logits.len()],
        });
    }
    for (z, y) in logits.iter().zip(labels) {
        if z.len() != NUM_CLASSES * y.len() {
            return Err(Error::ShapeMismatch {
                what: "logits and labels",
                expected: vec![NUM_CLASSES * y.len()],
                found: vec![z.len()],
            });
        }
    }
    Ok(())
}

fn terms_from_probs(probs: &[&[f64]], labels: &[&[u8]], cfg: &LossConfig) -> LossTerms {
    let dice_kidney = soft_dice(probs, labels, KIDNEY, cfg);
    let dice_tumor = soft_dice(probs, labels, TUMOR, cfg);
    let dice = exp_log_dice(dice_kidney, dice_tumor, cfg);
    let ce = weighted_ce(probs, labels, cfg);
    LossTerms {
        dice_kidney,
        dice_tumor,
        dice,
        ce,
        total: dice + ce,
    }
}

/// Exp-log Dice plus weighted cross-entropy of softmax(`logits`).
pub fn total_loss(logits: &[&[f64]], labels: &[&[u8]], cfg: &LossConfig) -> Result<LossTerms> {
    check_lengths(logits, labels)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let views: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    Ok(terms_from_probs(&views, labels, cfg))
}

/// [`total_loss`] and its gradient with respect to every logit.
pub fn total_loss_with_grad(
    logits: &[&[f64]],
    labels: &[&[u8]],
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    check_lengths(logits, labels)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let views: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    let terms = terms_from_probs(&views, labels, cfg);

    // dL/dd for kidney and tumor, and the pooled sums the Dice derivative needs.
    let dice_parts = [KIDNEY, TUMOR].map(|class| {
        let (inter, total) = dice_sums(&views, labels, class);
        let d = (2.0 * inter + cfg.dice_smooth) / (total + cfg.dice_smooth);
        let w = cfg.dice_weights[class as usize - 1];
        (exp_log_term_grad(d, w, cfg), inter, total)
    });
    let counts = class_counts(labels);

    let grads = views
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let n = y.len();
            let mut g = vec![0.0; NUM_CLASSES * n];
            for (v, &yv) in y.iter().enumerate() {
                let mut dp = [0.0f64; NUM_CLASSES];
                for (k, &(dl_dd, inter, total)) in dice_parts.iter().enumerate() {
                    let class = k + 1;
                    let yk = if yv as usize == class { 1.0 } else { 0.0 };
                    let denom = total + cfg.dice_smooth;
                    let dd_dp = (2.0 * yk * denom - (2.0 * inter + cfg.dice_smooth)) / (denom * denom);
                    dp[class] += dl_dd * dd_dp;
                }
                let c = yv as usize;
                let pc = p[c * n + v];
                if pc > cfg.log_floor {
                    dp[c] -= cfg.ce_weights[c] / (counts[c] as f64 * pc);
                }
                let pv = [p[v], p[n + v], p[2 * n + v]];
                let dot = pv[0] * dp[0] + pv[1] * dp[1] + pv[2] * dp[2];
                for k in 0..NUM_CLASSES {
                    g[k * n + v] = pv[k] * (dp[k] - dot);
                }
            }
            g
        })
        .collect();
    Ok((terms, grads))
}

/// Decimates labels to `1/2^level` resolution by taking every `2^level`-th voxel.
pub fn downsample_labels(label: ArrayView3<'_, u8>, level: usize) -> Result<Array3<u8>> {
    let f = 1usize << level;
    let (x, y, z) = label.dim();
    if x % f != 0 || y % f != 0 || z % f != 0 {
        return Err(Error::Divisibility {
            dims: vec![x, y, z],
            divisor: f,
        });
    }
    let step = f as isize;
    Ok(label.slice(s![..;step, ..;step, ..;step]).to_owned())
}

/// Per-head logits for a batch: `heads[level][sample]`, full resolution first.
pub type HeadLogits<'a> = [Vec<&'a [f64]>];

fn level_labels(labels: &[ArrayView3<'_, u8>], levels: usize) -> Result<Vec<Vec<Vec<u8>>>> {
    (0..levels)
        .map(|l| {
            labels
                .iter()
                .map(|lab| Ok(downsample_labels(*lab, l)?.iter().copied().collect()))
                .collect()
        })
        .collect()
}

/// `Σ_l w_l · total_loss(heads[l], downsample_labels(label, l))`.
pub fn multiscale_loss(
    heads: &HeadLogits<'_>,
    labels: &[ArrayView3<'_, u8>],
    cfg: &LossConfig,
) -> Result<f64> {
    let weights = cfg.level_weights_for(heads.len())?;
    let per_level = level_labels(labels, heads.len())?;
    let mut sum = 0.0;
    for ((logits, labs), w) in heads.iter().zip(&per_level).zip(&weights) {
        let labs: Vec<&[u8]> = labs.iter().map(Vec::as_slice).collect();
        sum += w * total_loss(logits, &labs, cfg)?.total;
    }
    Ok(sum)
}

/// Result of [`multiscale_loss_with_grad`].
#[derive(Debug, Clone)]
pub struct MultiscaleLoss {
    pub value: f64,
    pub per_level: Vec<LossTerms>,
    /// `grads[level][sample]`, same layout as the logits.
    pub grads: Vec<Vec<Vec<f64>>>,
}

pub fn multiscale_loss_with_grad(
    heads: &HeadLogits<'_>,
    labels: &[ArrayView3<'_, u8>],
    cfg: &LossConfig,
) -> Result<MultiscaleLoss> {
    let weights = cfg.level_weights_for(heads.len())?;
    let per_level_labels = level_labels(labels, heads.len())?;
    let mut out = MultiscaleLoss {
        value: 0.0,
        per_level: Vec::with_capacity(heads.len()),
        grads: Vec::with_capacity(heads.len()),
    };
    for ((logits, labs), &w) in heads.iter().zip(&per_level_labels).zip(&weights) {
        let labs: Vec<&[u8]> = labs.iter().map(Vec::as_slice).collect();
        let (terms, mut grads) = total_loss_with_grad(logits, &labs, cfg)?;
        out.value += w * terms.total;
        for g in grads.iter_mut().flatten() {
            *g *= w;
        }
        out.per_level.push(terms);
        out.grads.push(grads);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn one_hot(labels: &[u8]) -> Vec<f64> {
        let n = labels.len();
        let mut p = vec![0.0; 3 * n];
        for (v, &c) in labels.iter().enumerate() {
            p[c as usize * n + v] = 1.0;
        }
        p
    }

    #[test]
    fn default_config_is_valid() {
        assert!(cfg().violations().is_empty());
        let bad = LossConfig {
            ce_weights: [0.3, 0.3, 0.3],
            dice_exponent: 0.0,
            ..cfg()
        };
        assert_eq!(bad.violations().len(), 2);
    }

    #[test]
    fn dice_of_exact_one_hot_is_one() {
        let y = [0u8, 1, 1, 2, 0, 2];
        let p = one_hot(&y);
        for class in [KIDNEY, TUMOR] {
            assert!((soft_dice(&[&p], &[&y], class, &cfg()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_of_disjoint_masks_is_near_zero() {
        let y = [1u8, 1, 0, 0];
        let p = one_hot(&[0, 0, 1, 1]);
        let d = soft_dice(&[&p], &[&y], KIDNEY, &cfg());
        assert!((d - 1e-5 / (4.0 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn dice_half_overlap() {
        // |pred| = 4, |gt| = 4, overlap 2.
        let y = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let p = one_hot(&[1, 1, 0, 0, 1, 1, 0, 0]);
        let d = soft_dice(&[&p], &[&y], KIDNEY, &cfg());
        assert!((d - 0.5).abs() < 1e-5);
    }

    #[test]
    fn exp_log_reference_points() {
        let c = cfg();
        assert!((exp_log_dice(1.0, 1.0, &c) - c.floor_value()).abs() < 1e-15);
        assert!((c.floor_value() - 0.015848931924611134).abs() < 1e-12);
        let e = (-1.0f64).exp();
        assert!((exp_log_dice(e, e, &c) - 1.0).abs() < 1e-12);
        assert!((exp_log_dice(0.5, 0.5, &c) - 0.8959).abs() < 1e-3);
    }

    #[test]
    fn ce_reference_points() {
        let c = cfg();
        let y = [0u8, 1, 2, 2];
        let uniform = vec![1.0 / 3.0; 12];
        assert!((weighted_ce(&[&uniform], &[&y], &c) - 3f64.ln()).abs() < 1e-12);
        let bg = [0u8; 4];
        assert!((weighted_ce(&[&uniform], &[&bg], &c) - 0.28 * 3f64.ln()).abs() < 1e-12);
        let p = one_hot(&y);
        assert!(weighted_ce(&[&p], &[&y], &c).abs() < 1e-12);
    }

    #[test]
    fn totals_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let z: Vec<f64> = (0..192).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = total_loss(&[&z], &[&y], &cfg()).unwrap();
        assert_eq!(t.total, t.dice + t.ce);
        let p = softmax(&z);
        assert_eq!(t.ce, weighted_ce(&[&p], &[&y], &cfg()));
    }

    #[test]
    fn downsample_rules() {
        let lab = Array3::from_shape_fn([4, 4, 4], |(x, y, z)| ((x + y + z) % 2) as u8);
        assert_eq!(downsample_labels(lab.view(), 0).unwrap(), lab);
        let d = downsample_labels(lab.view(), 1).unwrap();
        assert_eq!(d.dim(), (2, 2, 2));
        // Even coordinates of a checkerboard all share parity 0.
        assert!(d.iter().all(|&v| v == 0));
        let c = Array3::from_elem([8, 8, 8], 2u8);
        assert!(downsample_labels(c.view(), 3).unwrap().iter().all(|&v| v == 2));
        assert!(downsample_labels(Array3::<u8>::zeros([6, 4, 4]).view(), 2).is_err());
    }

    #[test]
    fn multiscale_single_level_equals_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lab = Array3::from_shape_fn([4, 4, 4], |_| rng.random_range(0..3u8));
        let z: Vec<f64> = (0..192).map(|_| rng.random_range(-2.0..2.0)).collect();
        let flat: Vec<u8> = lab.iter().copied().collect();
        let c = LossConfig {
            level_weights: vec![1.0],
            ..cfg()
        };
        let m = multiscale_loss(&[vec![&z]], &[lab.view()], &c).unwrap();
        assert_eq!(m, total_loss(&[&z], &[&flat], &c).unwrap().total);
    }

    #[test]
    fn multiscale_rejects_mismatched_heads() {
        let lab = Array3::<u8>::zeros([4, 4, 4]);
        let z = vec![0.0; 3 * 64];
        let bad = vec![0.0; 3 * 27];
        assert!(multiscale_loss(&[vec![&z], vec![&bad]], &[lab.view()], &cfg()).is_err());
    }

    #[test]
    fn perfect_heads_hit_the_floor() {
        let lab = Array3::from_shape_fn([4, 4, 4], |(x, _, _)| (x % 3) as u8);
        let mut heads = Vec::new();
        for l in 0..2 {
            let d = downsample_labels(lab.view(), l).unwrap();
            let z: Vec<f64> = one_hot(d.as_slice().unwrap()).iter().map(|p| 60.0 * p).collect();
            heads.push(z);
        }
        let refs: Vec<Vec<&[f64]>> = heads.iter().map(|h| vec![h.as_slice()]).collect();
        let m = multiscale_loss(&refs, &[lab.view()], &cfg()).unwrap();
        assert!((m - cfg().floor_value()).abs() < 1e-9, "{m}");
    }

    proptest! {
        #[test]
        fn ce_is_monotone_in_true_class_probability(
            seed in 0u64..500, voxel in 0usize..16, bump in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
            let z: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = softmax(&z);
            let mut q = p.clone();
            let c = y[voxel] as usize;
            let old = p[c * 16 + voxel];
            let new = old + bump * (1.0 - old);
            let rest = 1.0 - old;
            for k in 0..3 {
                q[k * 16 + voxel] = if k == c {
                    new
                } else if rest > 0.0 {
                    p[k * 16 + voxel] * (1.0 - new) / rest
                } else {
                    0.0
                };
            }
            let before = weighted_ce(&[&p], &[&y], &cfg());
            let after = weighted_ce(&[&q], &[&y], &cfg());
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn exp_log_decreasing_off_the_floor(a in 1e-3f64..0.99, b in 1e-3f64..0.99, t in 1e-3f64..0.99) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assume!(hi - lo > 1e-9);
            let c = cfg();
            prop_assert!(exp_log_dice(hi, t, &c) < exp_log_dice(lo, t, &c));
            prop_assert!(exp_log_dice(t, hi, &c) < exp_log_dice(t, lo, &c));
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 27;
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let z: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let yp: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
            let zp: Vec<f64> = (0..3).flat_map(|c| perm.iter().map(move |&i| (c, i))).map(|(c, i)| z[c * n + i]).collect();
            let a = total_loss(&[&z], &[&y], &cfg()).unwrap();
            let b = total_loss(&[&zp], &[&yp], &cfg()).unwrap();
            prop_assert!((a.dice - b.dice).abs() <= 1e-12 * a.dice.abs().max(1.0));
            prop_assert!((a.ce - b.ce).abs() <= 1e-12 * a.ce.abs().max(1.0));
        }
    }
}
