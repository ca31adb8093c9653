//! Confusion matrices over Gleason grade groups and quadratic weighted kappa.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::mean_std;
use crate::grade::{Grade, NUM_GRADES};
use crate::matching::DetectionRecord;
use crate::{Error, Result};

/// Rows are the true grade, columns the predicted grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_GRADES]; NUM_GRADES],
    /// Whether missed lesions were counted in the GS6 column.
    pub include_fn_as_gs6: bool,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, truth: Grade, pred: Grade) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    /// The column a record lands in, or `None` if it is left out.
    fn column(rec: &DetectionRecord, include_fn_as_gs6: bool) -> Option<usize> {
        match rec.pred_grade {
            Some(g) => Some(g.index()),
            None if include_fn_as_gs6 => Some(Grade::Gs6.index()),
            None => None,
        }
    }

    fn add_record(&mut self, rec: &DetectionRecord) {
        if let Some(j) = Self::column(rec, self.include_fn_as_gs6) {
            self.counts[rec.gt_grade.index()][j] += 1;
        }
    }
}

/// Counts detected lesions by (true, predicted) grade. With
/// `include_fn_as_gs6`, missed lesions are counted as predicted GS6, which
/// reflects a clinical reading where an unseen lesion is left untreated.
pub fn confusion_matrix(records: &[DetectionRecord], include_fn_as_gs6: bool) -> ConfusionMatrix {
    let mut m = ConfusionMatrix {
        counts: Default::default(),
        include_fn_as_gs6,
    };
    for r in records {
        m.add_record(r);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapUnit {
    /// Resample records independently.
    #[default]
    Lesion,
    /// Resample patients and keep each patient's records together.
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapStats {
    pub mean: f64,
    pub std: f64,
    pub n_iterations: usize,
    /// Resamples whose matrix was empty and therefore skipped.
    pub n_skipped: usize,
    pub seed: u64,
    pub unit: BootstrapUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaResult {
    pub kappa: f64,
    /// Expected disagreement was zero (a single populated row or column).
    pub degenerate: bool,
    pub bootstrap: Option<BootstrapStats>,
}

fn kappa_of(counts: &[[u64; NUM_GRADES]; NUM_GRADES]) -> Option<(f64, bool)> {
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let mut rows = [0.0; NUM_GRADES];
    let mut cols = [0.0; NUM_GRADES];
    for i in 0..NUM_GRADES {
        for j in 0..NUM_GRADES {
            rows[i] += counts[i][j] as f64;
            cols[j] += counts[i][j] as f64;
        }
    }
    let denom = ((NUM_GRADES - 1) * (NUM_GRADES - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..NUM_GRADES {
        for j in 0..NUM_GRADES {
            let w = ((i as f64 - j as f64).powi(2)) / denom;
            observed += w * counts[i][j] as f64;
            expected += w * rows[i] * cols[j] / n;
        }
    }
    if expected == 0.0 {
        // perfect agreement stays perfect; anything else carries no information
        return Some((if observed == 0.0 { 1.0 } else { 0.0 }, true));
    }
    Some((1.0 - observed / expected, false))
}

/// Quadratic weighted kappa with weights `(i - j)^2 / 9`.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<KappaResult> {
    let (kappa, degenerate) =
        kappa_of(&cm.counts).ok_or_else(|| Error::Degenerate("kappa of an empty confusion matrix".into()))?;
    Ok(KappaResult {
        kappa,
        degenerate,
        bootstrap: None,
    })
}

/// Point estimate plus bootstrap mean and (population) std of kappa over
/// `n_iter` resamples. Each iteration draws from its own ChaCha8 stream, so
/// results do not depend on thread scheduling.
pub fn bootstrap_kappa(
    records: &[DetectionRecord],
    n_iter: usize,
    seed: u64,
    include_fn_as_gs6: bool,
    unit: BootstrapUnit,
) -> Result<KappaResult> {
    if n_iter == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one iteration".into()));
    }
    let mut point = quadratic_weighted_kappa(&confusion_matrix(records, include_fn_as_gs6))?;
    let cells: Vec<(usize, usize)> = records
        .iter()
        .filter_map(|r| ConfusionMatrix::column(r, include_fn_as_gs6).map(|j| (r.gt_grade.index(), j)))
        .collect();

    // groups of cell indices; one group per resampling unit
    let groups: Vec<Vec<(usize, usize)>> = match unit {
        BootstrapUnit::Lesion => cells.iter().map(|&c| vec![c]).collect(),
        BootstrapUnit::Patient => {
            let mut ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            let mut g = vec![Vec::new(); ids.len()];
            for r in records {
                if let Some(j) = ConfusionMatrix::column(r, include_fn_as_gs6) {
                    let k = ids.binary_search(&r.patient_id.as_str()).expect("id collected above");
                    g[k].push((r.gt_grade.index(), j));
                }
            }
            g
        }
    };

    let draws: Vec<Option<f64>> = (0..n_iter)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut counts = [[0u64; NUM_GRADES]; NUM_GRADES];
            for _ in 0..groups.len() {
                for &(a, b) in &groups[rng.gen_range(0..groups.len())] {
                    counts[a][b] += 1;
                }
            }
            kappa_of(&counts).map(|(k, _)| k)
        })
        .collect();
    let kept: Vec<f64> = draws.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&kept);
    point.bootstrap = Some(BootstrapStats {
        mean,
        std,
        n_iterations: n_iter,
        n_skipped: n_iter - kept.len(),
        seed,
        unit,
    });
    Ok(point)
}
