//! Oracles shared by the integration tests. Nothing here calls the matching,
//! clustering or metrics code under test.

#![allow(dead_code)]

use std::collections::VecDeque;

use lesion_eval::phantom::{cs_score, PhantomLedger};
use lesion_eval::volume::Zone;
use lesion_eval::Grade;

/// `(threshold, mean_fp_per_patient, sensitivity)`
pub type Point = (f64, f64, f64);

/// One scored prediction: its score and whether it is a true positive.
#[derive(Clone, Copy, Debug)]
struct Scored {
    score: f64,
    tp: bool,
}

fn sweep(preds: &[Scored], n_gt: usize, n_patients: usize) -> Option<Vec<Point>> {
    if n_gt == 0 {
        return None;
    }
    let mut ts: Vec<f64> = preds.iter().map(|p| p.score).collect();
    ts.push(0.0);
    ts.push(1.0 + 1e-9);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    Some(
        ts.into_iter()
            .map(|t| {
                let tp = preds.iter().filter(|p| p.tp && p.score >= t).count();
                let fp = preds.iter().filter(|p| !p.tp && p.score >= t).count();
                (t, fp as f64 / n_patients as f64, tp as f64 / n_gt as f64)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerExpectation {
    pub n_patients: usize,
    pub n_gt_cs: usize,
    pub cs_curve: Option<Vec<Point>>,
    pub grade_curves: Vec<Option<Vec<Point>>>,
    pub cm_tp_only: [[u64; 4]; 4],
    pub cm_fn_as_gs6: [[u64; 4]; 4],
    pub n_gt_per_grade: [usize; 4],
}

/// Counts implied by the construction script, restricted to one zone when
/// requested. Every blob lies wholly in one zone and every detected lesion
/// is predicted on exactly its own voxels.
pub fn ledger_expectation(ledger: &PhantomLedger, zone: Option<Zone>) -> LedgerExpectation {
    let keep = |z: Zone| zone.map_or(true, |want| want == z);
    let n_patients = ledger.patients.len();
    let mut cs_preds = Vec::new();
    let mut grade_preds: Vec<Vec<Scored>> = vec![Vec::new(); 4];
    let mut n_gt_per_grade = [0usize; 4];
    let mut n_gt_cs = 0;
    let mut cm_tp_only = [[0u64; 4]; 4];
    let mut cm_fn = [[0u64; 4]; 4];

    for p in &ledger.patients {
        for l in p.lesions.iter().filter(|l| keep(l.zone)) {
            let t = l.grade.index();
            n_gt_per_grade[t] += 1;
            let true_cs = t > 0;
            n_gt_cs += true_cs as usize;
            match (l.detected, l.predicted_grade, l.score) {
                (true, Some(pg), Some(s)) => {
                    let q = pg.index();
                    cm_tp_only[t][q] += 1;
                    cm_fn[t][q] += 1;
                    grade_preds[q].push(Scored { score: s, tp: q == t });
                    if q > 0 {
                        cs_preds.push(Scored {
                            score: cs_score(s),
                            tp: true_cs,
                        });
                    }
                }
                _ => cm_fn[t][0] += 1,
            }
        }
        for fp in p.false_positives.iter().filter(|f| keep(f.zone)) {
            let q = fp.grade.index();
            grade_preds[q].push(Scored { score: fp.score, tp: false });
            if q > 0 {
                cs_preds.push(Scored {
                    score: cs_score(fp.score),
                    tp: false,
                });
            }
        }
    }
    LedgerExpectation {
        n_patients,
        n_gt_cs,
        cs_curve: sweep(&cs_preds, n_gt_cs, n_patients),
        grade_curves: (0..4).map(|g| sweep(&grade_preds[g], n_gt_per_grade[g], n_patients)).collect(),
        cm_tp_only,
        cm_fn_as_gs6: cm_fn,
        n_gt_per_grade,
    }
}

/// Quadratic weighted kappa straight from the textbook definition.
pub fn kappa_oracle(m: &[[u64; 4]; 4]) -> f64 {
    let k = 4usize;
    let n: f64 = m.iter().flatten().map(|&c| c as f64).sum();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / ((k - 1) as f64).powi(2);
            let row: f64 = (0..k).map(|jj| m[i][jj] as f64).sum();
            let col: f64 = (0..k).map(|ii| m[ii][j] as f64).sum();
            num += w * m[i][j] as f64;
            den += w * row * col / n;
        }
    }
    1.0 - num / den
}

pub fn curve_points(c: &lesion_eval::metrics::FrocCurve) -> Vec<Point> {
    c.points
        .iter()
        .map(|p| (p.threshold, p.mean_fp_per_patient, p.sensitivity))
        .collect()
}

pub fn grade(i: usize) -> Grade {
    Grade::ALL[i]
}

/// Brute-force flood fill: adjacency tested pairwise from the offset norms.
pub fn bfs_components(dims: [usize; 3], mask: &[bool], conn: u32) -> Vec<Vec<usize>> {
    let [nx, ny, _] = dims;
    let adjacent = |d: [i64; 3]| {
        let l1: i64 = d.iter().map(|v| v.abs()).sum();
        let linf = d.iter().map(|v| v.abs()).max().unwrap();
        linf == 1
            && match conn {
                6 => l1 == 1,
                18 => l1 <= 2,
                _ => true,
            }
    };
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let c = [(v % nx) as i64, ((v / nx) % ny) as i64, (v / (nx * ny)) as i64];
            for w in 0..mask.len() {
                if !mask[w] || seen[w] {
                    continue;
                }
                let c2 = [(w % nx) as i64, ((w / nx) % ny) as i64, (w / (nx * ny)) as i64];
                if adjacent([c2[0] - c[0], c2[1] - c[1], c2[2] - c[2]]) {
                    seen[w] = true;
                    comp.push(w);
                    queue.push_back(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One-sided tail probability by listing all 2^n sign patterns over average ranks.
pub fn wilcoxon_enumeration(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let rank = |i: usize| {
        let a = d[i].abs();
        let below = d.iter().filter(|v| v.abs() < a).count() as f64;
        let tied = d.iter().filter(|v| v.abs() == a).count() as f64;
        below + (tied + 1.0) / 2.0
    };
    let ranks: Vec<f64> = (0..n).map(rank).collect();
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}
