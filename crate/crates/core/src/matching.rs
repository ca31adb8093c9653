//! True/false positive bookkeeping between predicted and ground-truth lesion
//! maps, grade assignment for confusion matrices, and the point-coordinate
//! lookup used when only lesion centers are annotated.
//!
//! A predicted cluster scoring at least the threshold is a true positive when
//! the fraction of its volume inside a ground-truth lesion reaches
//! `overlap_frac` (10% by default). When it overlaps several lesions it is
//! credited to the one with the largest intersection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterGrade, LesionCluster, LesionMap};
use crate::grade::Grade;
use crate::volume::{Volume, Zone, ZoneMask};
use crate::{Error, Result};

pub const DEFAULT_OVERLAP_FRAC: f64 = 0.10;

/// Volume the overlap fraction is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapDenominator {
    /// The predicted cluster.
    #[default]
    Pred,
    /// The ground-truth lesion.
    Gt,
    /// Union of both.
    Union,
}

/// What happens to a second (or later) prediction hitting an already
/// detected lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraHitPolicy {
    /// Still a true-positive pair; the lesion is counted once.
    #[default]
    Lenient,
    /// Only the highest-scoring prediction is a TP; the others are FPs.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub overlap_frac: f64,
    pub denominator: OverlapDenominator,
    pub extra_hits: ExtraHitPolicy,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            overlap_frac: DEFAULT_OVERLAP_FRAC,
            denominator: OverlapDenominator::Pred,
            extra_hits: ExtraHitPolicy::Lenient,
        }
    }
}

impl MatchOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_frac > 0.0 && self.overlap_frac <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "overlap fraction {} must be in (0, 1]",
                self.overlap_frac
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub gt: usize,
    pub intersection: usize,
    pub overlap_frac: f64,
    pub dice: f64,
}

/// Threshold-independent outcome of one predicted cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub pred: usize,
    pub score: f64,
    /// The credited lesion when the overlap rule is met.
    pub hit: Option<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TpPair {
    pub pred: usize,
    pub gt: usize,
    pub overlap_frac: f64,
    pub dice: f64,
}

/// Indices refer to the `clusters` of the maps passed to [`match_detections`].
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    pub tp: Vec<TpPair>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub below_threshold: Vec<usize>,
    pub n_gt: usize,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.tp.len()
    }

    pub fn fp_count(&self) -> usize {
        self.fp.len()
    }

    /// Number of distinct ground-truth lesions hit.
    pub fn detected_lesions(&self) -> usize {
        self.n_gt - self.fn_.len()
    }
}

/// Dense voxel -> lesion index lookup.
fn lesion_index(m: &LesionMap) -> Vec<u32> {
    let n = m.dims.iter().product();
    let mut idx = vec![u32::MAX; n];
    for (j, c) in m.clusters.iter().enumerate() {
        for &v in &c.voxels {
            idx[v] = j as u32;
        }
    }
    idx
}

/// Intersection sizes of `c` with every lesion it touches, by lesion index.
fn intersections(c: &LesionCluster, lookup: &[u32]) -> BTreeMap<usize, usize> {
    let mut hits = BTreeMap::new();
    for &v in &c.voxels {
        let j = lookup[v];
        if j != u32::MAX {
            *hits.entry(j as usize).or_insert(0) += 1;
        }
    }
    hits
}

fn dice_of(inter: usize, a: usize, b: usize) -> f64 {
    2.0 * inter as f64 / (a + b) as f64
}

/// Classifies every predicted cluster against the ground truth, ignoring scores.
pub fn classify_predictions(pred: &LesionMap, gt: &LesionMap, opts: &MatchOptions) -> Result<Vec<Candidate>> {
    opts.validate()?;
    if !pred.same_grid(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction grid {:?}@{:?} vs ground truth {:?}@{:?}",
            pred.dims, pred.spacing_mm, gt.dims, gt.spacing_mm
        )));
    }
    let lookup = lesion_index(gt);
    Ok(pred
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut best: Option<Hit> = None;
            for (j, inter) in intersections(c, &lookup) {
                let g = gt.clusters[j].len();
                let denom = match opts.denominator {
                    OverlapDenominator::Pred => c.len(),
                    OverlapDenominator::Gt => g,
                    OverlapDenominator::Union => c.len() + g - inter,
                };
                let frac = inter as f64 / denom as f64;
                if frac < opts.overlap_frac {
                    continue;
                }
                // BTreeMap order makes the lowest index win ties
                if best.is_none_or(|b| inter > b.intersection) {
                    best = Some(Hit {
                        gt: j,
                        intersection: inter,
                        overlap_frac: frac,
                        dice: dice_of(inter, c.len(), g),
                    });
                }
            }
            Candidate {
                pred: i,
                score: c.score,
                hit: best,
            }
        })
        .collect())
}

/// Applies a score threshold (`score >= threshold` qualifies) to classified
/// candidates.
pub fn resolve_at_threshold(candidates: &[Candidate], n_gt: usize, threshold: f64, policy: ExtraHitPolicy) -> MatchResult {
    let mut out = MatchResult {
        n_gt,
        ..Default::default()
    };
    // highest-scoring qualifying prediction per lesion, ties to the lower index
    let mut primary: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for c in candidates.iter().filter(|c| c.score >= threshold) {
        if let Some(h) = c.hit {
            let e = primary.entry(h.gt).or_insert((c.score, c.pred));
            if c.score > e.0 {
                *e = (c.score, c.pred);
            }
        }
    }
    for c in candidates {
        if c.score < threshold {
            out.below_threshold.push(c.pred);
            continue;
        }
        match c.hit {
            Some(h) if policy == ExtraHitPolicy::Lenient || primary[&h.gt].1 == c.pred => {
                out.tp.push(TpPair {
                    pred: c.pred,
                    gt: h.gt,
                    overlap_frac: h.overlap_frac,
                    dice: h.dice,
                });
            }
            _ => out.fp.push(c.pred),
        }
    }
    out.fn_ = (0..n_gt).filter(|j| !primary.contains_key(j)).collect();
    out
}

/// Matches with the default denominator (predicted volume) and lenient
/// handling of repeated hits.
pub fn match_detections(pred: &LesionMap, gt: &LesionMap, overlap_frac: f64, score_threshold: f64) -> Result<MatchResult> {
    let opts = MatchOptions {
        overlap_frac,
        ..Default::default()
    };
    match_with(pred, gt, score_threshold, &opts)
}

pub fn match_with(pred: &LesionMap, gt: &LesionMap, score_threshold: f64, opts: &MatchOptions) -> Result<MatchResult> {
    let cands = classify_predictions(pred, gt, opts)?;
    Ok(resolve_at_threshold(&cands, gt.len(), score_threshold, opts.extra_hits))
}

fn grade_rank(g: ClusterGrade) -> usize {
    match g {
        ClusterGrade::Graded(g) => g.index(),
        ClusterGrade::Cs => 4,
    }
}

/// Picks the candidate with the highest Dice against `gt`; ties go to the
/// larger intersection, then the lower grade, then the earlier candidate.
/// Returns an index into `candidates`.
pub fn best_dice_assignment(gt: &LesionCluster, candidates: &[&LesionCluster]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate clusters for Dice assignment".into()));
    }
    let mut best = 0usize;
    let mut best_key = (0usize, 0usize, 0usize); // (2*inter, |a|+|b|) compared exactly below
    for (k, c) in candidates.iter().enumerate() {
        let inter = gt.intersection(&c.voxels);
        let key = (inter, gt.len() + c.len(), grade_rank(c.grade));
        if k == 0 {
            best_key = key;
            continue;
        }
        // dice_k > dice_best  <=>  inter_k * sum_best > inter_best * sum_k
        let lhs = key.0 * best_key.1;
        let rhs = best_key.0 * key.1;
        let better = lhs > rhs
            || (lhs == rhs && (key.0 > best_key.0 || (key.0 == best_key.0 && key.2 < best_key.2)));
        if better {
            best = k;
            best_key = key;
        }
    }
    Ok(best)
}

/// Outcome of one ground-truth lesion for grade agreement analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub patient_id: String,
    pub fold: usize,
    pub zone: Zone,
    pub gt_grade: Grade,
    /// `None` when the lesion was missed.
    pub pred_grade: Option<Grade>,
    pub score: Option<f64>,
    pub dice: f64,
    pub overlap_frac: f64,
}

/// Where a record came from, for [`grade_records`].
#[derive(Debug, Clone, Copy)]
pub struct RecordContext<'a> {
    pub patient_id: &'a str,
    pub fold: usize,
    pub zones: Option<&'a ZoneMask>,
}

/// One record per ground-truth lesion of a GS map. A lesion is detected when
/// some predicted cluster (any grade, any score) meets the overlap rule for
/// it; its predicted grade is that of the intersecting cluster with the
/// highest Dice.
pub fn grade_records(pred_gs: &LesionMap, gt_gs: &LesionMap, opts: &MatchOptions, ctx: RecordContext<'_>) -> Result<Vec<DetectionRecord>> {
    let cands = classify_predictions(pred_gs, gt_gs, opts)?;
    let lookup = lesion_index(gt_gs);
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); gt_gs.len()];
    for (i, c) in pred_gs.clusters.iter().enumerate() {
        for j in intersections(c, &lookup).into_keys() {
            touching[j].push(i);
        }
    }
    let mut detected = vec![false; gt_gs.len()];
    for c in &cands {
        if let Some(h) = c.hit {
            detected[h.gt] = true;
        }
    }
    gt_gs
        .clusters
        .iter()
        .enumerate()
        .map(|(j, lesion)| {
            let gt_grade = lesion.grade.grade().ok_or_else(|| {
                Error::InvalidArgument("grade records need a GS ground-truth map".into())
            })?;
            let zone = ctx.zones.map_or(Zone::Unknown, |z| z.zone_of(&lesion.voxels));
            let mut rec = DetectionRecord {
                patient_id: ctx.patient_id.to_string(),
                fold: ctx.fold,
                zone,
                gt_grade,
                pred_grade: None,
                score: None,
                dice: 0.0,
                overlap_frac: 0.0,
            };
            if detected[j] {
                let pool: Vec<&LesionCluster> = touching[j].iter().map(|&i| &pred_gs.clusters[i]).collect();
                let pick = pool[best_dice_assignment(lesion, &pool)?];
                let inter = lesion.intersection(&pick.voxels);
                rec.pred_grade = pick.grade.grade();
                rec.score = Some(pick.score);
                rec.dice = dice_of(inter, lesion.len(), pick.len());
                rec.overlap_frac = inter as f64 / pick.len() as f64;
            }
            Ok(rec)
        })
        .collect()
}

/// Grade reported for an annotated lesion center: the modal GS label of the
/// CS cluster containing the point (ties to the higher grade), or GS 6 when
/// the point is not inside any CS cluster.
pub fn point_in_cluster_grade(point: [usize; 3], cs_map: &LesionMap, gs_labels: &Volume) -> Result<Grade> {
    let dims = gs_labels.dims();
    if (0..3).any(|a| point[a] >= dims[a]) {
        return Err(Error::InvalidArgument(format!("point {point:?} outside grid {dims:?}")));
    }
    if cs_map.dims != dims {
        return Err(Error::ShapeMismatch("CS map vs label volume".into()));
    }
    let idx = gs_labels.index(point[0], point[1], point[2]);
    let Some(cluster) = cs_map.clusters.iter().find(|c| c.voxels.binary_search(&idx).is_ok()) else {
        return Ok(Grade::Gs6);
    };
    let mut counts = [0usize; 4];
    for &v in &cluster.voxels {
        if let Some(g) = Grade::from_label_code(gs_labels.label_at(v)) {
            counts[g.index()] += 1;
        }
    }
    let mut best = Grade::Gs6;
    let mut best_n = 0;
    for g in Grade::ALL {
        if counts[g.index()] > 0 && counts[g.index()] >= best_n {
            best = g;
            best_n = counts[g.index()];
        }
    }
    Ok(best)
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    patient_id: String,
    fold: usize,
    zone: Zone,
    gt_grade: Grade,
    pred_grade: String,
    score: Option<f64>,
    dice: f64,
    overlap_frac: f64,
}

const MISSED: &str = "MISSED";

pub fn write_detection_csv(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_detection_records(f, records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

/// Writes the detection CSV (with header) to any sink.
pub fn write_detection_records(sink: impl std::io::Write, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(DetectionRow {
            patient_id: r.patient_id.clone(),
            fold: r.fold,
            zone: r.zone,
            gt_grade: r.gt_grade,
            pred_grade: r.pred_grade.map_or(MISSED.to_string(), |g| g.name().to_string()),
            score: r.score,
            dice: r.dice,
            overlap_frac: r.overlap_frac,
        })?;
    }
    w.flush().map_err(|e| Error::io("<detection csv>", e))?;
    Ok(())
}

pub fn read_detection_csv(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize::<DetectionRow>()
        .map(|row| {
            let row = row?;
            let pred_grade = if row.pred_grade == MISSED {
                None
            } else {
                Some(row.pred_grade.parse()?)
            };
            Ok(DetectionRecord {
                patient_id: row.patient_id,
                fold: row.fold,
                zone: row.zone,
                gt_grade: row.gt_grade,
                pred_grade,
                score: row.score,
                dice: row.dice,
                overlap_frac: row.overlap_frac,
            })
        })
        .collect()
}

/// Annotated lesion center for point-based grading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub patient_id: String,
    pub x_vox: usize,
    pub y_vox: usize,
    pub z_vox: usize,
    pub zone: Zone,
    pub gs_label: Grade,
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<PointRecord>> {
    #[derive(Deserialize)]
    struct Row {
        patient_id: String,
        x_vox: usize,
        y_vox: usize,
        z_vox: usize,
        zone: String,
        gs_label: String,
    }
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(PointRecord {
                patient_id: row.patient_id,
                x_vox: row.x_vox,
                y_vox: row.y_vox,
                z_vox: row.z_vox,
                zone: row.zone.parse()?,
                gs_label: row.gs_label.parse()?,
            })
        })
        .collect()
}
