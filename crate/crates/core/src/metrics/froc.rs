//! Free-response ROC: lesion-level sensitivity against mean false positives
//! per patient while sweeping a threshold on the lesion probability score.

use serde::Serialize;

use super::stats::mean_std;
use crate::cluster::LesionMap;
use crate::grade::Grade;
use crate::matching::{classify_predictions, resolve_at_threshold, Candidate, ExtraHitPolicy, MatchOptions};
use crate::{Error, Result};

/// Offset of the upper sentinel threshold above the largest possible score.
pub const THRESHOLD_SENTINEL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub mean_fp_per_patient: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocCurve {
    /// Ordered by strictly increasing threshold.
    pub points: Vec<FrocPoint>,
    pub n_patients: usize,
    pub n_gt_lesions: usize,
}

impl FrocCurve {
    pub fn max_sensitivity(&self) -> f64 {
        self.points.iter().map(|p| p.sensitivity).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,mean_fp_per_patient,sensitivity\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.mean_fp_per_patient, p.sensitivity));
        }
        s
    }
}

/// Classified predictions of one patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientDetections {
    pub candidates: Vec<Candidate>,
    pub n_gt: usize,
}

impl PatientDetections {
    pub fn from_maps(pred: &LesionMap, gt: &LesionMap, opts: &MatchOptions) -> Result<Self> {
        Ok(PatientDetections {
            candidates: classify_predictions(pred, gt, opts)?,
            n_gt: gt.len(),
        })
    }
}

/// Sweeps every distinct score plus the sentinels 0 and `1 + eps`. At each
/// threshold the per-patient matches are resolved and pooled: sensitivity is
/// detected lesions over all lesions, mean FP is total FP over patients.
pub fn froc_curve(patients: &[PatientDetections], policy: ExtraHitPolicy) -> Result<FrocCurve> {
    if patients.is_empty() {
        return Err(Error::MissingData("FROC needs at least one patient".into()));
    }
    let n_gt: usize = patients.iter().map(|p| p.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::Degenerate("no ground-truth lesions; sensitivity undefined".into()));
    }
    let mut thresholds: Vec<f64> = patients
        .iter()
        .flat_map(|p| p.candidates.iter().map(|c| c.score))
        .chain([0.0, 1.0 + THRESHOLD_SENTINEL_EPS])
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let n_patients = patients.len();
    let points = thresholds
        .into_iter()
        .map(|t| {
            let (mut detected, mut fp) = (0usize, 0usize);
            for p in patients {
                let m = resolve_at_threshold(&p.candidates, p.n_gt, t, policy);
                detected += m.detected_lesions();
                fp += m.fp_count();
            }
            FrocPoint {
                threshold: t,
                mean_fp_per_patient: fp as f64 / n_patients as f64,
                sensitivity: detected as f64 / n_gt as f64,
            }
        })
        .collect();
    Ok(FrocCurve {
        points,
        n_patients,
        n_gt_lesions: n_gt,
    })
}

/// FROC over paired per-patient maps.
pub fn froc_from_maps(preds: &[LesionMap], gts: &[LesionMap], opts: &MatchOptions) -> Result<FrocCurve> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction maps vs {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let patients = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| PatientDetections::from_maps(p, g, opts))
        .collect::<Result<Vec<_>>>()?;
    froc_curve(&patients, opts.extra_hits)
}

/// FROC for one grade on GS maps. Only clusters predicted as `grade` are
/// candidates and only lesions of that grade are targets, so a correctly
/// located but misgraded detection is a miss for its true grade and a false
/// positive for the predicted one.
pub fn froc_by_grade(preds: &[LesionMap], gts: &[LesionMap], grade: Grade, opts: &MatchOptions) -> Result<FrocCurve> {
    let p: Vec<LesionMap> = preds.iter().map(|m| m.of_grade(grade)).collect();
    let g: Vec<LesionMap> = gts.iter().map(|m| m.of_grade(grade)).collect();
    froc_from_maps(&p, &g, opts)
}

/// Highest sensitivity among operating points with `mean_fp <= fp_rate`
/// (step readout); 0 when no point qualifies.
pub fn sensitivity_at_fp(curve: &FrocCurve, fp_rate: f64) -> Result<f64> {
    if !(fp_rate >= 0.0) {
        return Err(Error::InvalidArgument(format!("FP rate {fp_rate} must be >= 0")));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.mean_fp_per_patient <= fp_rate)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregatedPoint {
    pub mean_fp_per_patient: f64,
    pub sens_mean: f64,
    pub sens_std: f64,
    /// `mean - 2 std`
    pub sens_lo: f64,
    /// `mean + 2 std`
    pub sens_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedFroc {
    pub n_folds: usize,
    pub points: Vec<AggregatedPoint>,
}

impl AggregatedFroc {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mean_fp_per_patient,sens_mean,sens_lo,sens_hi\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.mean_fp_per_patient, p.sens_mean, p.sens_lo, p.sens_hi));
        }
        s
    }
}

/// Per-fold step readout at each grid FP rate, summarized as mean with a
/// band of two (population) standard deviations.
pub fn aggregate_folds(curves: &[FrocCurve], fp_grid: &[f64]) -> Result<AggregatedFroc> {
    if curves.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fold aggregation needs at least 2 folds, got {}",
            curves.len()
        )));
    }
    if fp_grid.is_empty() {
        return Err(Error::InvalidArgument("empty FP grid".into()));
    }
    let points = fp_grid
        .iter()
        .map(|&fp| {
            let s = curves
                .iter()
                .map(|c| sensitivity_at_fp(c, fp))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&s);
            Ok(AggregatedPoint {
                mean_fp_per_patient: fp,
                sens_mean: mean,
                sens_std: std,
                sens_lo: mean - 2.0 * std,
                sens_hi: mean + 2.0 * std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregatedFroc {
        n_folds: curves.len(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Hit;

    fn cand(pred: usize, score: f64, gt: Option<usize>) -> Candidate {
        Candidate {
            pred,
            score,
            hit: gt.map(|g| Hit {
                gt: g,
                intersection: 1,
                overlap_frac: 1.0,
                dice: 1.0,
            }),
        }
    }

    fn curve(points: &[(f64, f64)]) -> FrocCurve {
        FrocCurve {
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(fp, s))| FrocPoint {
                    threshold: 1.0 - i as f64 * 0.1,
                    mean_fp_per_patient: fp,
                    sensitivity: s,
                })
                .collect(),
            n_patients: 1,
            n_gt_lesions: 1,
        }
    }

    #[test]
    fn perfect_detection() {
        let p = vec![
            PatientDetections { candidates: vec![cand(0, 0.7, Some(0)), cand(1, 0.8, Some(1))], n_gt: 2 },
            PatientDetections { candidates: vec![cand(0, 0.6, Some(0))], n_gt: 1 },
        ];
        let c = froc_curve(&p, ExtraHitPolicy::Lenient).unwrap();
        let ts: Vec<f64> = c.points.iter().map(|p| p.threshold).collect();
        assert_eq!(ts, vec![0.0, 0.6, 0.7, 0.8, 1.0 + THRESHOLD_SENTINEL_EPS]);
        assert_eq!(c.points[0].sensitivity, 1.0);
        assert_eq!(c.points[1].sensitivity, 1.0);
        assert_eq!(c.points[2].sensitivity, 2.0 / 3.0);
        assert!(c.points.iter().all(|p| p.mean_fp_per_patient == 0.0));
        assert_eq!(c.points[4].sensitivity, 0.0);
    }

    #[test]
    fn injected_false_positives() {
        let p: Vec<_> = (0..3)
            .map(|_| PatientDetections {
                candidates: vec![cand(0, 0.9, None), cand(1, 0.9, None), cand(2, 0.95, Some(0))],
                n_gt: 1,
            })
            .collect();
        let c = froc_curve(&p, ExtraHitPolicy::Lenient).unwrap();
        for pt in &c.points {
            if pt.threshold <= 0.9 {
                assert_eq!(pt.mean_fp_per_patient, 2.0);
            } else {
                assert_eq!(pt.mean_fp_per_patient, 0.0);
            }
        }
    }

    #[test]
    fn empty_predictions_and_no_lesions() {
        let p = vec![PatientDetections { candidates: vec![], n_gt: 3 }];
        let c = froc_curve(&p, ExtraHitPolicy::Lenient).unwrap();
        assert!(c.points.iter().all(|p| p.sensitivity == 0.0 && p.mean_fp_per_patient == 0.0));
        let p = vec![PatientDetections { candidates: vec![cand(0, 0.5, None)], n_gt: 0 }];
        assert!(froc_curve(&p, ExtraHitPolicy::Lenient).is_err());
        assert!(froc_curve(&[], ExtraHitPolicy::Lenient).is_err());
    }

    #[test]
    fn step_readout() {
        let c = curve(&[(0.9, 0.6), (1.2, 0.7)]);
        assert_eq!(sensitivity_at_fp(&c, 1.0).unwrap(), 0.6);
        assert_eq!(sensitivity_at_fp(&c, 5.0).unwrap(), 0.7);
        assert_eq!(sensitivity_at_fp(&c, 0.5).unwrap(), 0.0);
        assert!(sensitivity_at_fp(&c, -0.1).is_err());
    }

    #[test]
    fn fold_band() {
        let a = curve(&[(0.0, 0.6)]);
        let b = curve(&[(0.0, 0.8)]);
        let agg = aggregate_folds(&[a.clone(), b], &[1.0]).unwrap();
        let p = agg.points[0];
        assert!((p.sens_mean - 0.7).abs() < 1e-12);
        assert!((p.sens_hi - 0.9).abs() < 1e-12);
        assert!((p.sens_lo - 0.5).abs() < 1e-12);
        let same = aggregate_folds(&[a.clone(), a.clone()], &[0.0, 2.0]).unwrap();
        assert!(same.points.iter().all(|p| p.sens_lo == p.sens_hi));
        assert!(aggregate_folds(&[a.clone()], &[1.0]).is_err());
        assert!(aggregate_folds(&[a.clone(), a], &[]).is_err());
    }

    #[test]
    fn five_scripted_folds() {
        let sens = [0.5, 0.6, 0.7, 0.8, 0.9];
        let curves: Vec<_> = sens.iter().map(|&s| curve(&[(1.0, s)])).collect();
        let agg = aggregate_folds(&curves, &[1.5]).unwrap();
        // mean 0.7, population variance (0.04+0.01+0+0.01+0.04)/5 = 0.02
        assert!((agg.points[0].sens_mean - 0.7).abs() < 1e-12);
        assert!((agg.points[0].sens_std - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
