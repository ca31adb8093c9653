//! Segmentation overlap and paired significance testing.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::volume::Volume;
use crate::{Error, Result};

/// Largest number of non-zero differences for which the exact null
/// distribution is enumerated.
pub const EXACT_MAX_N: usize = 20;

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks were empty; `value` is 1 by convention.
    pub both_empty: bool,
}

/// Dice of the non-zero voxels of two volumes on the same grid.
pub fn dice_coefficient(a: &Volume, b: &Volume) -> Result<DiceScore> {
    a.ensure_same_grid(b, "Dice masks")?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0.0, y != 0.0);
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    if na + nb == 0 {
        return Ok(DiceScore {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(DiceScore {
        value: 2.0 * both as f64 / (na + nb) as f64,
        both_empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub n_zero_dropped: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// One-sided Wilcoxon signed-rank test of `H1: x > y` on paired samples.
///
/// Zero differences are dropped and tied magnitudes get average ranks. For
/// `n <= EXACT_MAX_N` the p-value is the exact tail `P(W+ >= w)` under the
/// null, computed on doubled ranks so tied half-ranks stay integral. Larger
/// samples use the normal approximation with tie and continuity correction.
pub fn wilcoxon_one_sided(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let mut d: Vec<f64> = Vec::with_capacity(x.len());
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        let v = a - b;
        if !v.is_finite() {
            return Err(Error::InvalidValue {
                index: i,
                value: v,
                what: "paired difference",
            });
        }
        if v != 0.0 {
            d.push(v);
        }
    }
    let n_zero_dropped = x.len() - d.len();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }

    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // doubled average ranks: a tie block over 1-based ranks i+1..=j gets i+1+j
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && d[j].abs() == d[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j) as u64;
        rank2[i..j].fill(r2);
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let w2: u64 = d.iter().zip(&rank2).filter(|(v, _)| **v > 0.0).map(|(_, r)| *r).sum();
    let w_plus = w2 as f64 / 2.0;

    let (p_value, exact) = if n <= EXACT_MAX_N {
        // counts[s] = number of sign patterns with doubled W+ equal to s
        let max: u64 = rank2.iter().sum();
        let mut counts = vec![0f64; max as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &rank2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let tail: f64 = counts[w2 as usize..].iter().sum();
        (tail / 2f64.powi(n as i32), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (normal.cdf(-z), false)
    };
    Ok(WilcoxonResult {
        n,
        n_zero_dropped,
        w_plus,
        p_value: p_value.clamp(0.0, 1.0),
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_one_sided(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.w_plus, 15.0);
        assert!(r.exact);
        assert!((r.p_value - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn all_negative_is_one() {
        let r = wilcoxon_one_sided(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.w_plus, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zeros_dropped_and_errors() {
        let r = wilcoxon_one_sided(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.n_zero_dropped, 1);
        assert!((r.p_value - 0.25).abs() < 1e-15);
        assert!(wilcoxon_one_sided(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(wilcoxon_one_sided(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_use_average_ranks() {
        // |d| = 1, 1, 2 -> ranks 1.5, 1.5, 3; positive: one of the ties and the 2
        let r = wilcoxon_one_sided(&[1.0, 0.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r.w_plus, 4.5);
        // patterns with W+ >= 4.5: {1.5,3}x2, {1.5,1.5,3} -> 3 of 8
        assert!((r.p_value - 3.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn normal_approximation_with_continuity_correction() {
        let x: Vec<f64> = (1..=30).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = (1..=30).map(|i| if i % 3 == 0 { i as f64 * 0.2 } else { 0.0 }).collect();
        let r = wilcoxon_one_sided(&x, &y).unwrap();
        assert!(!r.exact);
        assert_eq!(r.w_plus, 300.0);
        // reference: scipy.stats.wilcoxon(..., alternative="greater", method="approx", correction=True)
        assert!((r.p_value - 0.08408948986167625).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn dice_conventions() {
        let a = Volume::from_labels([2, 2, 1], [1.0; 3], &[1, 1, 0, 0]).unwrap();
        let b = Volume::from_labels([2, 2, 1], [1.0; 3], &[0, 1, 1, 0]).unwrap();
        assert!((dice_coefficient(&a, &b).unwrap().value - 0.5).abs() < 1e-15);
        let e = Volume::from_labels([2, 2, 1], [1.0; 3], &[0; 4]).unwrap();
        let d = dice_coefficient(&e, &e).unwrap();
        assert!(d.both_empty && d.value == 1.0);
        assert_eq!(dice_coefficient(&a, &e).unwrap().value, 0.0);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.6, 0.8]);
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
    }
}
