//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    attention_gate_backward, attention_gate_forward, branch_loss, branch_loss_gradient, AttentionMap,
    ClassProbs, ClassWeights, FeatureStack, OneHot,
};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`]; keeps exact zeros from dividing by zero.
pub const RELATIVE_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let up = f(&probe);
            probe[k] = orig - step;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub per_instance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

/// Random interior prediction with every probability >= 0.2 / classes.
fn random_loss_instance(rng: &mut ChaCha8Rng) -> (ClassProbs, OneHot, ClassWeights) {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let n = h * w;
    let c = if rng.gen_bool(0.3) { 2 } else { 6 };
    let mut values = Vec::with_capacity(n * c);
    for _ in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|r| r / s));
    }
    let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mut weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
    weights[rng.gen_range(0..c)] += 0.1;
    (
        ClassProbs::new(n, c, values).expect("valid probabilities"),
        OneHot::new(labels, c).expect("labels in range"),
        ClassWeights::new(weights).expect("positive weights"),
    )
}

pub fn check_branch_loss(seed: u64, instances: usize, step: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_instance = Vec::with_capacity(instances);
    for _ in 0..instances {
        let (p, y, w) = random_loss_instance(&mut rng);
        let analytic = branch_loss_gradient(&p, &y, &w)?;
        let (n, c) = (p.voxels(), p.classes());
        let numeric = central_difference(
            |x| {
                let q = ClassProbs::new(n, c, x.to_vec()).expect("probe stays inside [0, 1]");
                branch_loss(&q, &y, &w).expect("shapes fixed").total
            },
            p.values(),
            step,
        );
        per_instance.push(max_relative_error(&analytic, &numeric));
    }
    Ok(SuiteReport {
        name: "branch_loss_gradient",
        instances,
        max_relative_error: per_instance.iter().copied().fold(0.0, f64::max),
        per_instance,
    })
}

/// Checks both gate gradients against the scalar objective `<d_out, gate(f, a)>`.
pub fn check_attention_gate(seed: u64, instances: usize, step: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_instance = Vec::with_capacity(instances);
    for k in 0..instances {
        let ah = rng.gen_range(2..=16);
        let aw = rng.gen_range(2..=16);
        // alternate between integer ratios (area pooling) and arbitrary sizes (bilinear)
        let (fh, fw) = if k % 2 == 0 {
            let divs = |n: usize| (1..=n).filter(|d| n % d == 0).collect::<Vec<_>>();
            let dh = divs(ah);
            let dw = divs(aw);
            (dh[rng.gen_range(0..dh.len())], dw[rng.gen_range(0..dw.len())])
        } else {
            (rng.gen_range(1..=ah), rng.gen_range(1..=aw))
        };
        let ch = rng.gen_range(1..=6);
        let nf = ch * fh * fw;
        let f = FeatureStack::new(ch, fh, fw, (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        // keep the probe away from the [0, 1] bounds of the attention map
        let a = AttentionMap::new(ah, aw, (0..ah * aw).map(|_| rng.gen_range(0.05..0.95)).collect())?;
        let d_out = FeatureStack::new(ch, fh, fw, (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let grads = attention_gate_backward(&f, &a, &d_out)?;

        let objective = |f: &FeatureStack, a: &AttentionMap| -> f64 {
            let out = attention_gate_forward(f, a).expect("shapes fixed");
            out.values().iter().zip(d_out.values()).map(|(o, g)| o * g).sum()
        };
        let num_df = central_difference(
            |x| objective(&FeatureStack::new(ch, fh, fw, x.to_vec()).expect("finite"), &a),
            f.values(),
            step,
        );
        let num_da = central_difference(
            |x| objective(&f, &AttentionMap::new(ah, aw, x.to_vec()).expect("inside [0, 1]")),
            a.values(),
            step,
        );
        let e = max_relative_error(grads.d_features.values(), &num_df)
            .max(max_relative_error(&grads.d_attention, &num_da));
        per_instance.push(e);
    }
    Ok(SuiteReport {
        name: "attention_gate_backward",
        instances,
        max_relative_error: per_instance.iter().copied().fold(0.0, f64::max),
        per_instance,
    })
}

pub fn run_all(seed: u64, instances: usize) -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        step: DEFAULT_STEP,
        seed,
        suites: vec![
            check_branch_loss(seed, instances, DEFAULT_STEP)?,
            check_attention_gate(seed.wrapping_add(1), instances, DEFAULT_STEP)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn suites_pass_small() {
        let r = run_all(5, 3).unwrap();
        for s in &r.suites {
            assert!(s.max_relative_error < 1e-4, "{}: {}", s.name, s.max_relative_error);
        }
    }
}
