//! Training-side numerics: branch losses and their gradients, the
//! epoch-scheduled global loss, the prostate attention gate and the
//! softmax-to-label conversion.

mod attention;
pub mod gradcheck;
mod loss;

pub use attention::{
    attention_gate_backward, attention_gate_forward, AttentionMap, FeatureStack, GateGradients,
    Resampler,
};
pub use loss::{
    branch_loss, branch_loss_gradient, global_loss, weighted_ce_loss, weighted_dice_loss,
    ClassProbs, ClassWeights, LossSchedule, LossValue, OneHot, LOG_EPS,
};

use crate::grade::NUM_CLASSES;
use crate::volume::{ProbStack, Volume};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_class(probs: &[f32]) -> usize {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = c;
        }
    }
    best
}

/// Per-voxel argmax over the six channels, as a label volume.
pub fn label_from_probs(p: &ProbStack) -> Volume {
    let labels: Vec<u8> = (0..p.len())
        .map(|i| {
            let mut v = [0f32; NUM_CLASSES];
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = p.prob(i, c);
            }
            argmax_class(&v) as u8
        })
        .collect();
    Volume::from_labels(p.dims(), p.spacing_mm(), &labels).expect("argmax codes are in 0..=5")
}

/// Sum in a fixed pairwise order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_class(&[0.9, 0.02, 0.02, 0.02, 0.02, 0.02]), 0);
        assert_eq!(argmax_class(&[0.1, 0.1, 0.3, 0.3, 0.1, 0.1]), 2);
    }

    #[test]
    fn label_volume_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5 * 4 * 3;
        let probs: Vec<[f32; 6]> = (0..n)
            .map(|_| {
                let raw: Vec<f32> = (0..6).map(|_| rng.gen_range(1u32..=16) as f32).collect();
                let s: f32 = raw.iter().sum();
                let mut p = [0f32; 6];
                for c in 0..6 {
                    p[c] = raw[c] / s;
                }
                p
            })
            .collect();
        let stack = ProbStack::from_voxels([5, 4, 3], [1.0; 3], &probs).unwrap();
        let labels = label_from_probs(&stack);
        for (i, p) in probs.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f32::MIN;
            for c in 0..6 {
                if stack.prob(i, c) > best_v {
                    best_v = stack.prob(i, c);
                    best = c;
                }
            }
            assert_eq!(labels.label_at(i) as usize, best, "voxel {i} probs {p:?}");
        }
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_increasing_maps(raw in proptest::collection::vec(0u32..64, 6)) {
            let p: Vec<f32> = raw.iter().map(|&k| k as f32 / 64.0).collect();
            let q: Vec<f32> = p.iter().map(|&x| (x as f64).exp() as f32 * 3.0 + 1.0).collect();
            let r: Vec<f32> = p.iter().map(|&x| x * x).collect();
            prop_assert_eq!(argmax_class(&p), argmax_class(&q));
            prop_assert_eq!(argmax_class(&p), argmax_class(&r));
        }
    }
}
