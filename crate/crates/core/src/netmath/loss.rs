//! Class-weighted Dice + cross-entropy branch loss.
//!
//! For predictions `p[i][c]`, one-hot targets `y[i][c]` and class weights
//! `w[c]` over `N` voxels:
//!
//! ```text
//! dice = 1 - 2 * sum_c w_c sum_i y_ci p_ci / sum_c w_c sum_i (y_ci + p_ci)
//! ce   = -(1/N) sum_i sum_c y_ci w_c ln(max(p_ci, eps))
//! ```
//!
//! No smoothing constant is added to the Dice ratio. When its denominator is
//! zero the Dice term is defined as 0 and [`LossValue::dice_degenerate`] is set.

use serde::{Deserialize, Serialize};

use super::pairwise_sum;
use crate::grade::NUM_CLASSES;
use crate::volume::ProbStack;
use crate::{Error, Result};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidConfig("class weights are empty".into()));
        }
        if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::InvalidConfig(format!("class weights must be >= 0, got {w:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidConfig("at least one class weight must be > 0".into()));
        }
        Ok(ClassWeights(w))
    }

    /// Background and prostate weights of the gland branch.
    pub fn prostate_default() -> Self {
        ClassWeights(vec![0.002, 0.14])
    }

    /// Background, prostate and the four lesion grades.
    pub fn lesion_default() -> Self {
        ClassWeights(vec![0.002, 0.14, 0.1715, 0.1715, 0.1715, 0.1715])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|w| w * k).collect())
    }
}

/// Weights of the two branch losses. The lesion weight is zero before
/// `switch_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub lambda1: f64,
    pub lambda2: f64,
    pub switch_epoch: u32,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            lambda1: 1.0,
            lambda2: 1.0,
            switch_epoch: 20,
        }
    }
}

impl LossSchedule {
    pub fn new(lambda1: f64, lambda2: f64, switch_epoch: u32) -> Result<Self> {
        if !(lambda1.is_finite() && lambda1 >= 0.0 && lambda2.is_finite() && lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be >= 0, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(LossSchedule {
            lambda1,
            lambda2,
            switch_epoch,
        })
    }

    pub fn lesion_weight_at(&self, epoch: u32) -> f64 {
        if epoch < self.switch_epoch {
            0.0
        } else {
            self.lambda2
        }
    }
}

/// Voxel-by-class probability matrix, row-major (`values[i * classes + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    voxels: usize,
    classes: usize,
    values: Vec<f64>,
}

impl ClassProbs {
    pub fn new(voxels: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if voxels == 0 || classes == 0 || values.len() != voxels * classes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {voxels} voxels x {classes} classes",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidValue {
                index: i,
                value: values[i],
                what: "probability",
            });
        }
        Ok(ClassProbs {
            voxels,
            classes,
            values,
        })
    }

    pub fn from_prob_stack(p: &ProbStack) -> Self {
        let mut values = Vec::with_capacity(p.len() * NUM_CLASSES);
        for i in 0..p.len() {
            for c in 0..NUM_CLASSES {
                values.push(p.prob(i, c) as f64);
            }
        }
        ClassProbs {
            voxels: p.len(),
            classes: NUM_CLASSES,
            values,
        }
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.classes + c]
    }
}

/// One-hot ground truth stored as class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHot {
    classes: usize,
    labels: Vec<usize>,
}

impl OneHot {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::InvalidValue {
                index: i,
                value: labels[i] as f64,
                what: "class index",
            });
        }
        Ok(OneHot { classes, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn value(&self, i: usize, c: usize) -> f64 {
        if self.labels[i] == c {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub ce_term: f64,
    /// Set when the weighted Dice denominator vanished.
    pub dice_degenerate: bool,
}

fn check_shapes(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> Result<()> {
    if p.voxels != y.labels.len() || p.classes != y.classes || p.classes != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}, target {}x{}, weights {}",
            p.voxels,
            p.classes,
            y.labels.len(),
            y.classes,
            w.len()
        )));
    }
    Ok(())
}

/// Weighted overlap `A = sum_c w_c sum_i y p` and mass `B = sum_c w_c sum_i (y + p)`.
fn dice_sums(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> (f64, f64) {
    let mut inter = Vec::with_capacity(p.classes);
    let mut mass = Vec::with_capacity(p.classes);
    let mut col = vec![0.0; p.voxels];
    for (c, &wc) in w.as_slice().iter().enumerate() {
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = y.value(i, c) * p.get(i, c);
        }
        inter.push(wc * pairwise_sum(&col));
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = y.value(i, c) + p.get(i, c);
        }
        mass.push(wc * pairwise_sum(&col));
    }
    (pairwise_sum(&inter), pairwise_sum(&mass))
}

fn dice_value(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> (f64, bool) {
    let (a, b) = dice_sums(p, y, w);
    if b == 0.0 {
        (0.0, true)
    } else {
        (1.0 - 2.0 * a / b, false)
    }
}

pub fn weighted_dice_loss(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> Result<f64> {
    check_shapes(p, y, w)?;
    let (d, degenerate) = dice_value(p, y, w);
    if degenerate {
        log::warn!("weighted Dice denominator is zero; Dice term set to 0");
    }
    Ok(d)
}

pub fn weighted_ce_loss(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> Result<f64> {
    check_shapes(p, y, w)?;
    let ws = w.as_slice();
    let terms: Vec<f64> = y
        .labels
        .iter()
        .enumerate()
        .map(|(i, &c)| ws[c] * p.get(i, c).max(LOG_EPS).ln())
        .collect();
    // -0.0 -> 0.0 for the perfect case
    Ok(-pairwise_sum(&terms) / p.voxels as f64 + 0.0)
}

pub fn branch_loss(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> Result<LossValue> {
    check_shapes(p, y, w)?;
    let (dice_term, dice_degenerate) = dice_value(p, y, w);
    let ce_term = weighted_ce_loss(p, y, w)?;
    Ok(LossValue {
        total: dice_term + ce_term,
        dice_term,
        ce_term,
        dice_degenerate,
    })
}

/// `lambda1 * prostate + lambda2(epoch) * lesion`.
pub fn global_loss(prostate: &LossValue, lesion: &LossValue, s: &LossSchedule, epoch: u32) -> f64 {
    let l2 = s.lesion_weight_at(epoch);
    let lesion_part = if l2 == 0.0 { 0.0 } else { l2 * lesion.total };
    s.lambda1 * prostate.total + lesion_part
}

/// Analytic `d(dice + ce) / dp_ci`, laid out like [`ClassProbs::values`].
///
/// Every probability must lie strictly inside `(LOG_EPS, 1)`; at the clamp
/// the cross-entropy is not differentiable.
pub fn branch_loss_gradient(p: &ClassProbs, y: &OneHot, w: &ClassWeights) -> Result<Vec<f64>> {
    check_shapes(p, y, w)?;
    if let Some(i) = p.values.iter().position(|&v| !(v > LOG_EPS && v < 1.0)) {
        return Err(Error::InvalidValue {
            index: i,
            value: p.values[i],
            what: "probability strictly inside (eps, 1)",
        });
    }
    let (a, b) = dice_sums(p, y, w);
    let n = p.voxels as f64;
    let ws = w.as_slice();
    let mut grad = Vec::with_capacity(p.values.len());
    for i in 0..p.voxels {
        for (c, &wc) in ws.iter().enumerate() {
            let yc = y.value(i, c);
            // d(1 - 2A/B) = -2 (B dA - A dB) / B^2 with dA = w y, dB = w
            let d_dice = -2.0 * wc * (yc * b - a) / (b * b);
            let d_ce = -yc * wc / (n * p.get(i, c));
            grad.push(d_dice + d_ce);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(voxels: usize, classes: usize) -> ClassProbs {
        ClassProbs::new(voxels, classes, vec![1.0 / classes as f64; voxels * classes]).unwrap()
    }

    fn perfect(labels: &[usize], classes: usize) -> ClassProbs {
        let mut v = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            v[i * classes + l] = 1.0;
        }
        ClassProbs::new(labels.len(), classes, v).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = vec![0, 1, 5, 2, 3, 4, 1, 0];
        let y = OneHot::new(labels.clone(), 6).unwrap();
        let p = perfect(&labels, 6);
        let w = ClassWeights::lesion_default();
        assert_eq!(weighted_dice_loss(&p, &y, &w).unwrap(), 0.0);
        let ce = weighted_ce_loss(&p, &y, &w).unwrap();
        assert!(ce >= 0.0 && ce <= -(1.0 - LOG_EPS).ln() * 0.1715 + 1e-15);
        let lv = branch_loss(&p, &y, &w).unwrap();
        assert!(lv.total.abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_on_background_target() {
        // all voxels class 0, p = 1/6 everywhere, uniform weights:
        // A = N/6, B = N + N, dice = 1 - 2(N/6)/(2N) = 5/6
        let y = OneHot::new(vec![0; 10], 6).unwrap();
        let p = uniform(10, 6);
        let w = ClassWeights::new(vec![0.3; 6]).unwrap();
        let d = weighted_dice_loss(&p, &y, &w).unwrap();
        assert!((d - 5.0 / 6.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn ce_closed_forms() {
        let y = OneHot::new(vec![2], 3).unwrap();
        let e = std::f64::consts::E;
        let p = ClassProbs::new(1, 3, vec![0.5 - 0.5 / e, 0.5 - 0.5 / e, 1.0 / e]).unwrap();
        let w = ClassWeights::new(vec![1.0; 3]).unwrap();
        assert!((weighted_ce_loss(&p, &y, &w).unwrap() - 1.0).abs() < 1e-12);

        let y = OneHot::new(vec![0, 3, 5, 1], 6).unwrap();
        let ce = weighted_ce_loss(&uniform(4, 6), &y, &ClassWeights::new(vec![1.0; 6]).unwrap()).unwrap();
        assert!((ce - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn default_lesion_weights_accepted() {
        let w = ClassWeights::new(vec![0.002, 0.14, 0.1715, 0.1715, 0.1715, 0.1715]).unwrap();
        assert_eq!(w, ClassWeights::lesion_default());
        assert!(ClassWeights::new(vec![0.0, 0.0]).is_err());
        assert!(ClassWeights::new(vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn branch_loss_is_sum_of_parts() {
        let y = OneHot::new(vec![1, 0, 2], 3).unwrap();
        let p = ClassProbs::new(3, 3, vec![0.2, 0.7, 0.1, 0.5, 0.3, 0.2, 0.1, 0.1, 0.8]).unwrap();
        let w = ClassWeights::new(vec![0.1, 0.5, 1.0]).unwrap();
        let lv = branch_loss(&p, &y, &w).unwrap();
        assert_eq!(lv.dice_term, weighted_dice_loss(&p, &y, &w).unwrap());
        assert_eq!(lv.ce_term, weighted_ce_loss(&p, &y, &w).unwrap());
        assert!((lv.total - lv.dice_term - lv.ce_term).abs() < 1e-9);
    }

    #[test]
    fn empty_dice_denominator() {
        // weight only on class 2, which is absent in target and prediction
        let y = OneHot::new(vec![0, 1], 3).unwrap();
        let p = ClassProbs::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let w = ClassWeights::new(vec![0.0, 0.0, 1.0]).unwrap();
        let lv = branch_loss(&p, &y, &w).unwrap();
        assert!(lv.dice_degenerate);
        assert_eq!(lv.dice_term, 0.0);
    }

    #[test]
    fn shape_errors() {
        let y = OneHot::new(vec![0, 1], 2).unwrap();
        let p = uniform(3, 2);
        let w = ClassWeights::prostate_default();
        assert!(weighted_dice_loss(&p, &y, &w).is_err());
        assert!(weighted_ce_loss(&uniform(2, 3), &y, &w).is_err());
        assert!(OneHot::new(vec![2], 2).is_err());
    }

    #[test]
    fn schedule() {
        let s = LossSchedule::default();
        let lp = LossValue { total: 0.7, dice_term: 0.5, ce_term: 0.2, dice_degenerate: false };
        let ll = LossValue { total: 1.3, dice_term: 0.9, ce_term: 0.4, dice_degenerate: false };
        assert_eq!(global_loss(&lp, &ll, &s, 0), 0.7);
        assert_eq!(global_loss(&lp, &ll, &s, 19), 0.7);
        assert_eq!(global_loss(&lp, &ll, &s, 20), 0.7 + 1.3);
        let off = LossSchedule::new(0.0, 0.0, 20).unwrap();
        assert_eq!(global_loss(&lp, &ll, &off, 50), 0.0);
        assert!(LossSchedule::new(-1.0, 0.0, 0).is_err());
    }

    #[test]
    fn gradient_rejects_boundary() {
        let y = OneHot::new(vec![0], 2).unwrap();
        let p = ClassProbs::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(branch_loss_gradient(&p, &y, &ClassWeights::prostate_default()).is_err());
    }

    #[test]
    fn zero_weight_class_has_zero_ce_gradient() {
        let y = OneHot::new(vec![0, 1, 1], 2).unwrap();
        let p = ClassProbs::new(3, 2, vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5]).unwrap();
        let w = ClassWeights::new(vec![1.0, 0.0]).unwrap();
        let g = branch_loss_gradient(&p, &y, &w).unwrap();
        // class 1 has weight 0: neither the Dice nor the CE part depends on it
        for i in 0..3 {
            assert_eq!(g[i * 2 + 1], 0.0);
        }
    }

    fn arb_instance() -> impl Strategy<Value = (ClassProbs, OneHot, ClassWeights)> {
        (1usize..12, 2usize..7).prop_flat_map(|(n, c)| {
            (
                proptest::collection::vec(0.01f64..1.0, n * c),
                proptest::collection::vec(0..c, n),
                proptest::collection::vec(0.0f64..2.0, c),
            )
                .prop_filter_map("need a positive weight", move |(raw, labels, mut w)| {
                    w[0] += 0.01;
                    let mut v = raw.clone();
                    for row in v.chunks_mut(c) {
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|x| *x /= s);
                    }
                    Some((
                        ClassProbs::new(n, c, v).ok()?,
                        OneHot::new(labels, c).ok()?,
                        ClassWeights::new(w).ok()?,
                    ))
                })
        })
    }

    proptest! {
        #[test]
        fn dice_term_in_unit_interval((p, y, w) in arb_instance()) {
            let d = weighted_dice_loss(&p, &y, &w).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(weighted_ce_loss(&p, &y, &w).unwrap() >= 0.0);
        }

        #[test]
        fn weight_rescaling((p, y, w) in arb_instance(), k in 0.1f64..10.0) {
            let a = branch_loss(&p, &y, &w).unwrap();
            let b = branch_loss(&p, &y, &w.scaled(k).unwrap()).unwrap();
            prop_assert!((a.dice_term - b.dice_term).abs() <= 1e-12);
            prop_assert!((b.ce_term - k * a.ce_term).abs() <= 1e-12 * (1.0 + b.ce_term.abs()));
        }
    }
}
