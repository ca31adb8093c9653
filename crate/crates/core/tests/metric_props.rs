mod common;

use common::{bfs_components, kappa_oracle, wilcoxon_enumeration};
use lesion_eval::cluster::{connected_components_mask, Connectivity};
use lesion_eval::matching::{Candidate, DetectionRecord, ExtraHitPolicy, Hit};
use lesion_eval::metrics::{
    bootstrap_kappa, froc_curve, mean_std, quadratic_weighted_kappa, sensitivity_at_fp, wilcoxon_one_sided,
    BootstrapUnit, ConfusionMatrix, PatientDetections,
};
use lesion_eval::volume::Zone;
use lesion_eval::Grade;
use proptest::prelude::*;

/// (score in 1/64 steps, hit lesion or None) for each candidate, plus n_gt.
fn patient() -> impl Strategy<Value = PatientDetections> {
    (1usize..4).prop_flat_map(|n_gt| {
        prop::collection::vec((0u32..=64, prop::option::of(0..n_gt)), 0..6).prop_map(move |cs| {
            PatientDetections {
                candidates: cs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (s, hit))| Candidate {
                        pred: i,
                        score: s as f64 / 64.0,
                        hit: hit.map(|gt| Hit {
                            gt,
                            intersection: 1,
                            overlap_frac: 1.0,
                            dice: 1.0,
                        }),
                    })
                    .collect(),
                n_gt,
            }
        })
    })
}

/// Lenient counts at one threshold, straight from the candidate lists.
fn counts_at(ps: &[PatientDetections], t: f64) -> (usize, usize) {
    let (mut detected, mut fp) = (0, 0);
    for p in ps {
        let mut hit: Vec<usize> = p
            .candidates
            .iter()
            .filter(|c| c.score >= t)
            .filter_map(|c| c.hit.map(|h| h.gt))
            .collect();
        hit.sort_unstable();
        hit.dedup();
        detected += hit.len();
        fp += p.candidates.iter().filter(|c| c.score >= t && c.hit.is_none()).count();
    }
    (detected, fp)
}

fn cell_matrix() -> impl Strategy<Value = [[u64; 4]; 4]> {
    prop::array::uniform4(prop::array::uniform4(0u64..6))
}

fn record(pid: usize, truth: usize, pred: Option<usize>) -> DetectionRecord {
    DetectionRecord {
        patient_id: format!("p{pid}"),
        fold: 0,
        zone: Zone::Pz,
        gt_grade: Grade::ALL[truth],
        pred_grade: pred.map(|j| Grade::ALL[j]),
        score: pred.map(|_| 0.9),
        dice: 0.0,
        overlap_frac: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn froc_is_monotone_and_matches_counts(ps in prop::collection::vec(patient(), 1..6)) {
        let c = froc_curve(&ps, ExtraHitPolicy::Lenient).unwrap();
        let n_gt: usize = ps.iter().map(|p| p.n_gt).sum();
        prop_assert_eq!(c.n_gt_lesions, n_gt);
        prop_assert_eq!(c.points[0].threshold, 0.0);
        let last = c.points.last().unwrap();
        prop_assert!(last.threshold > 1.0);
        prop_assert_eq!((last.sensitivity, last.mean_fp_per_patient), (0.0, 0.0));
        for w in c.points.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[0].sensitivity >= w[1].sensitivity);
            prop_assert!(w[0].mean_fp_per_patient >= w[1].mean_fp_per_patient);
        }
        for p in &c.points {
            let (d, f) = counts_at(&ps, p.threshold);
            prop_assert_eq!(p.sensitivity, d as f64 / n_gt as f64);
            prop_assert_eq!(p.mean_fp_per_patient, f as f64 / ps.len() as f64);
        }
    }

    #[test]
    fn strict_policy_only_adds_false_positives(ps in prop::collection::vec(patient(), 1..6)) {
        let l = froc_curve(&ps, ExtraHitPolicy::Lenient).unwrap();
        let s = froc_curve(&ps, ExtraHitPolicy::Strict).unwrap();
        prop_assert_eq!(l.points.len(), s.points.len());
        for (a, b) in l.points.iter().zip(&s.points) {
            prop_assert_eq!(a.sensitivity, b.sensitivity);
            prop_assert!(b.mean_fp_per_patient >= a.mean_fp_per_patient);
        }
    }

    #[test]
    fn step_readout_matches_threshold_scan(ps in prop::collection::vec(patient(), 1..6), rate in 0.0f64..4.0) {
        let c = froc_curve(&ps, ExtraHitPolicy::Lenient).unwrap();
        let n_gt: usize = ps.iter().map(|p| p.n_gt).sum();
        let mut best = 0.0f64;
        // every achievable operating point is reached at some candidate score
        for t in ps.iter().flat_map(|p| p.candidates.iter().map(|c| c.score)).chain([0.0, 2.0]) {
            let (d, f) = counts_at(&ps, t);
            if f as f64 / ps.len() as f64 <= rate {
                best = best.max(d as f64 / n_gt as f64);
            }
        }
        prop_assert_eq!(sensitivity_at_fp(&c, rate).unwrap(), best);
    }

    #[test]
    fn kappa_is_bounded_and_matches_definition(m in cell_matrix()) {
        prop_assume!(m.iter().flatten().sum::<u64>() > 0);
        let cm = ConfusionMatrix { counts: m, include_fn_as_gs6: false };
        let k = quadratic_weighted_kappa(&cm).unwrap();
        prop_assert!(k.kappa <= 1.0 + 1e-12 && k.kappa >= -1.0 - 1e-12);
        if !k.degenerate {
            prop_assert!((k.kappa - kappa_oracle(&m)).abs() < 1e-12);
        }
        let mut t = [[0u64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                t[j][i] = m[i][j];
            }
        }
        let kt = quadratic_weighted_kappa(&ConfusionMatrix { counts: t, include_fn_as_gs6: false }).unwrap();
        prop_assert!((k.kappa - kt.kappa).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_seed_deterministic(
        cells in prop::collection::vec((0usize..4, prop::option::of(0usize..4), 0usize..5), 1..30),
        seed in any::<u64>(),
    ) {
        let recs: Vec<_> = cells.iter().map(|&(t, p, pid)| record(pid, t, p)).collect();
        for unit in [BootstrapUnit::Lesion, BootstrapUnit::Patient] {
            let a = bootstrap_kappa(&recs, 64, seed, true, unit).unwrap();
            let b = bootstrap_kappa(&recs, 64, seed, true, unit).unwrap();
            prop_assert_eq!(&a, &b);
            let s = a.bootstrap.unwrap();
            prop_assert_eq!(s.n_skipped, 0);
            prop_assert!(s.std >= 0.0 && s.mean.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration(d in prop::collection::vec(-6i32..=6, 1..13)) {
        let x: Vec<f64> = d.iter().map(|&v| v as f64 * 0.5).collect();
        let y = vec![0.0; x.len()];
        match wilcoxon_one_sided(&x, &y) {
            Ok(r) => {
                prop_assert!(r.exact);
                prop_assert!((r.p_value - wilcoxon_enumeration(&x)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
            Err(_) => prop_assert!(x.iter().all(|&v| v == 0.0)),
        }
    }

    #[test]
    fn components_match_flood_fill(
        dims in (1usize..7, 1usize..7, 1usize..5),
        bits in prop::collection::vec(any::<bool>(), 7 * 7 * 5),
        conn in prop::sample::select(vec![6u32, 18, 26]),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let mask = &bits[..dims.iter().product()];
        let mut got = connected_components_mask(dims, mask, Connectivity::from_value(conn).unwrap());
        let mut want = bfs_components(dims, mask, conn);
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn population_std_of_shifted_data(xs in prop::collection::vec(-100.0f64..100.0, 1..20), c in -50.0f64..50.0) {
        let (m, s) = mean_std(&xs);
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let (m2, s2) = mean_std(&shifted);
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
    }
}

#[test]
fn bootstrap_of_single_cell_has_zero_spread() {
    let recs: Vec<_> = (0..10).map(|i| record(i, 2, Some(2))).collect();
    let k = bootstrap_kappa(&recs, 200, 5, false, BootstrapUnit::Lesion).unwrap();
    assert!(k.degenerate);
    let s = k.bootstrap.unwrap();
    assert_eq!((k.kappa, s.mean, s.std), (1.0, 1.0, 0.0));
}
