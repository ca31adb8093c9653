//! Full evaluation protocol over a cohort: lesion maps, matching, FROC,
//! confusion matrices, kappa and prostate Dice, plus the report bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    cs_lesion_maps, filter_by_volume, gs_lesion_maps, restrict_to_zone, summarize, ClusterSummary, Connectivity,
    LesionMap,
};
use crate::grade::{Grade, NUM_GRADES};
use crate::matching::{
    grade_records, point_in_cluster_grade, read_points_csv, write_detection_csv, DetectionRecord, ExtraHitPolicy,
    MatchOptions, OverlapDenominator, PointRecord, RecordContext, DEFAULT_OVERLAP_FRAC,
};
use crate::metrics::{
    aggregate_folds, bootstrap_kappa, confusion_matrix, dice_coefficient, froc_curve, mean_std,
    quadratic_weighted_kappa, sensitivity_at_fp, AggregatedFroc, BootstrapUnit, ConfusionMatrix, DiceScore, FrocCurve,
    KappaResult, PatientDetections,
};
use crate::netmath::label_from_probs;
use crate::phantom::PhantomCohort;
use crate::volume::{read_prob_stack, read_volume, ProbStack, Volume, Zone, ZoneMask};
use crate::{Error, Result};

pub const DEFAULT_MIN_VOLUME_MM3: f64 = 45.0;
pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 1000;

/// Patient to fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub n_folds: usize,
    pub patients: Vec<PatientEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub fold: usize,
}

impl FoldManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::InvalidConfig("fold manifest needs n_folds >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patients {
            if p.fold >= self.n_folds {
                return Err(Error::InvalidConfig(format!(
                    "patient {} assigned to fold {} but n_folds is {}",
                    p.id, p.fold, self.n_folds
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidConfig(format!("patient {} listed twice", p.id)));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: FoldManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ZoneFilter {
    #[default]
    #[serde(rename = "none")]
    All,
    #[serde(rename = "pz")]
    Pz,
    #[serde(rename = "tz")]
    Tz,
}

impl ZoneFilter {
    fn zone(self) -> Option<Zone> {
        match self {
            ZoneFilter::All => None,
            ZoneFilter::Pz => Some(Zone::Pz),
            ZoneFilter::Tz => Some(Zone::Tz),
        }
    }
}

impl std::str::FromStr for ZoneFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "all" => Ok(ZoneFilter::All),
            "pz" => Ok(ZoneFilter::Pz),
            "tz" => Ok(ZoneFilter::Tz),
            other => Err(Error::InvalidConfig(format!("unknown zone filter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Holds `<id>/labels` and optionally `<id>/pz`, `<id>/tz`.
    pub gt_dir: PathBuf,
    /// Holds `<id>/prob_0` .. `<id>/prob_5`.
    pub pred_dir: PathBuf,
    /// Bundle destination; nothing is written when absent.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Defaults to `cohort.json` next to `gt_dir` when that file exists.
    pub fold_manifest: Option<PathBuf>,
    /// Point-protocol CSV.
    pub points_file: Option<PathBuf>,
    pub connectivity: u32,
    pub min_volume_mm3: f64,
    pub overlap_frac: f64,
    pub overlap_denominator: OverlapDenominator,
    pub extra_hits: ExtraHitPolicy,
    pub zone: ZoneFilter,
    pub confusion_tp_only: bool,
    pub confusion_fn_as_gs6: bool,
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
    pub bootstrap_unit: BootstrapUnit,
    /// FP rates at which fold curves are aggregated.
    pub fp_grid: Vec<f64>,
    /// FP rates at which sensitivities are reported.
    pub readout_fp: Vec<f64>,
    /// Cluster JSON, candidate and detection CSVs.
    pub write_intermediates: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            gt_dir: PathBuf::new(),
            pred_dir: PathBuf::new(),
            output_dir: None,
            fold_manifest: None,
            points_file: None,
            connectivity: 26,
            min_volume_mm3: DEFAULT_MIN_VOLUME_MM3,
            overlap_frac: DEFAULT_OVERLAP_FRAC,
            overlap_denominator: OverlapDenominator::Pred,
            extra_hits: ExtraHitPolicy::Lenient,
            zone: ZoneFilter::All,
            confusion_tp_only: true,
            confusion_fn_as_gs6: true,
            bootstrap_iterations: DEFAULT_BOOTSTRAP_ITERATIONS,
            bootstrap_seed: 0,
            bootstrap_unit: BootstrapUnit::Lesion,
            fp_grid: (0..=20).map(|i| i as f64 * 0.25).collect(),
            readout_fp: vec![1.0, 1.5],
            write_intermediates: true,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        Connectivity::from_value(self.connectivity)?;
        self.match_options().validate()?;
        if !(self.min_volume_mm3 >= 0.0) {
            return Err(Error::InvalidConfig(format!("min_volume_mm3 {} must be >= 0", self.min_volume_mm3)));
        }
        if self.fp_grid.iter().chain(&self.readout_fp).any(|&f| !(f >= 0.0)) {
            return Err(Error::InvalidConfig("FP rates must be >= 0".into()));
        }
        Ok(())
    }

    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            overlap_frac: self.overlap_frac,
            denominator: self.overlap_denominator,
            extra_hits: self.extra_hits,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Inputs of one patient.
#[derive(Debug, Clone)]
pub struct PatientCase {
    pub id: String,
    pub fold: usize,
    pub labels: Volume,
    pub zones: Option<ZoneMask>,
    pub probs: ProbStack,
}

impl PhantomCohort {
    pub fn cases(&self) -> Vec<PatientCase> {
        self.patients
            .iter()
            .zip(&self.predictions)
            .map(|(p, probs)| PatientCase {
                id: p.id.clone(),
                fold: p.fold,
                labels: p.labels.clone(),
                zones: Some(p.zones.clone()),
                probs: probs.clone(),
            })
            .collect()
    }

    /// Like [`PhantomCohort::cases`] without copying the volumes.
    pub fn into_cases(self) -> (Vec<PatientCase>, crate::phantom::PhantomLedger) {
        let cases = self
            .patients
            .into_iter()
            .zip(self.predictions)
            .map(|(p, probs)| PatientCase {
                id: p.id,
                fold: p.fold,
                labels: p.labels,
                zones: Some(p.zones),
                probs,
            })
            .collect();
        (cases, self.ledger)
    }
}

/// Per-patient intermediates.
#[derive(Debug, Clone)]
pub struct PatientOutcome {
    pub id: String,
    pub fold: usize,
    pub dice: DiceScore,
    pub gt_gs: LesionMap,
    pub gt_cs: LesionMap,
    pub pred_gs: LesionMap,
    pub pred_cs: LesionMap,
    pub cs: PatientDetections,
    pub by_grade: Vec<PatientDetections>,
    pub records: Vec<DetectionRecord>,
    /// Annotated points with their predicted grade.
    pub points: Vec<(PointRecord, Grade)>,
}

impl PatientOutcome {
    /// Point-protocol records: the annotated grade against the grade read
    /// from the CS cluster at the point.
    pub fn point_records(&self) -> Vec<DetectionRecord> {
        self.points
            .iter()
            .map(|(p, g)| DetectionRecord {
                patient_id: self.id.clone(),
                fold: self.fold,
                zone: p.zone,
                gt_grade: p.gs_label,
                pred_grade: Some(*g),
                score: None,
                dice: 0.0,
                overlap_frac: 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSettings {
    pub connectivity: u32,
    pub min_volume_mm3: f64,
    pub overlap_frac: f64,
    pub overlap_denominator: OverlapDenominator,
    pub extra_hits: ExtraHitPolicy,
    pub zone: ZoneFilter,
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
    pub bootstrap_unit: BootstrapUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientDice {
    pub patient_id: String,
    pub fold: usize,
    pub dice: f64,
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiceSummary {
    pub per_patient: Vec<PatientDice>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Readout {
    pub fp_rate: f64,
    pub sensitivity: f64,
}

/// Sensitivity at one FP rate across folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReadout {
    pub fp_rate: f64,
    /// `None` for folds whose curve is undefined.
    pub per_fold: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocReport {
    pub n_gt_lesions: usize,
    /// All patients pooled; `None` when there is no lesion to detect.
    pub pooled: Option<FrocCurve>,
    pub readout: Vec<Readout>,
    pub per_fold: Vec<Option<FrocCurve>>,
    pub fold_readout: Vec<FoldReadout>,
    pub aggregate: Option<AggregatedFroc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeFrocReport {
    pub grade: Grade,
    #[serde(flatten)]
    pub froc: FrocReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionReport {
    pub variant: &'static str,
    pub grades: [&'static str; NUM_GRADES],
    pub matrix: ConfusionMatrix,
    pub kappa: Option<KappaResult>,
    pub fold_kappa: Vec<Option<f64>>,
    pub fold_kappa_mean: Option<f64>,
    pub fold_kappa_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointReport {
    pub n_points: usize,
    pub grades: [&'static str; NUM_GRADES],
    pub matrix: ConfusionMatrix,
    pub kappa: Option<KappaResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub settings: ReportSettings,
    pub n_patients: usize,
    pub n_folds: usize,
    pub prostate_dice: DiceSummary,
    pub cs_froc: FrocReport,
    pub grade_froc: Vec<GradeFrocReport>,
    pub confusion: Vec<ConfusionReport>,
    pub points: Option<PointReport>,
    /// Degenerate statistics encountered along the way.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub patients: Vec<PatientOutcome>,
}

const GRADE_NAMES: [&str; NUM_GRADES] = ["GS6", "GS3+4", "GS4+3", "GS>=8"];
pub const VARIANT_TP_ONLY: &str = "tp_only";
pub const VARIANT_FN_AS_GS6: &str = "fn_as_gs6";

fn prostate_mask(v: &Volume) -> Result<Volume> {
    let mask: Vec<bool> = v.values().iter().map(|&l| l != 0.0).collect();
    Volume::from_mask(v.dims(), v.spacing_mm(), &mask)
}

/// Lesion maps, matches and grade records of one patient. `points` are the
/// annotated centers belonging to this patient.
pub fn evaluate_patient(case: &PatientCase, points: &[PointRecord], cfg: &EvaluationConfig) -> Result<PatientOutcome> {
    let conn = Connectivity::from_value(cfg.connectivity)?;
    let opts = cfg.match_options();
    if !case.labels.same_grid(case.probs.grid()) {
        return Err(Error::ShapeMismatch(format!(
            "{}: ground truth {:?} vs prediction {:?}",
            case.id,
            case.labels.dims(),
            case.probs.dims()
        )));
    }
    let pred_labels = label_from_probs(&case.probs);
    let dice = dice_coefficient(&prostate_mask(&case.labels)?, &prostate_mask(&pred_labels)?)?;

    let prepare = |m: LesionMap| -> Result<LesionMap> {
        let m = filter_by_volume(&m, cfg.min_volume_mm3)?;
        match cfg.zone.zone() {
            None => Ok(m),
            Some(z) => {
                let zones = case.zones.as_ref().ok_or_else(|| {
                    Error::MissingData(format!("{}: zone filter requested but no zone masks", case.id))
                })?;
                restrict_to_zone(&m, zones, z)
            }
        }
    };
    let gt_gs = prepare(gs_lesion_maps(&case.labels, None, conn)?)?;
    let gt_cs = prepare(cs_lesion_maps(&case.labels, None, conn)?)?;
    let pred_gs = prepare(gs_lesion_maps(&pred_labels, Some(&case.probs), conn)?)?;
    let pred_cs = prepare(cs_lesion_maps(&pred_labels, Some(&case.probs), conn)?)?;

    let cs = PatientDetections::from_maps(&pred_cs, &gt_cs, &opts)?;
    let by_grade = Grade::ALL
        .iter()
        .map(|&g| PatientDetections::from_maps(&pred_gs.of_grade(g), &gt_gs.of_grade(g), &opts))
        .collect::<Result<Vec<_>>>()?;
    let records = grade_records(
        &pred_gs,
        &gt_gs,
        &opts,
        RecordContext {
            patient_id: &case.id,
            fold: case.fold,
            zones: case.zones.as_ref(),
        },
    )?;
    let points = points
        .iter()
        .map(|p| {
            let g = point_in_cluster_grade([p.x_vox, p.y_vox, p.z_vox], &pred_cs, &pred_labels)?;
            Ok((p.clone(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatientOutcome {
        id: case.id.clone(),
        fold: case.fold,
        dice,
        gt_gs,
        gt_cs,
        pred_gs,
        pred_cs,
        cs,
        by_grade,
        records,
        points,
    })
}

fn froc_report(
    what: &str,
    outcomes: &[PatientOutcome],
    n_folds: usize,
    select: impl Fn(&PatientOutcome) -> &PatientDetections,
    cfg: &EvaluationConfig,
    warnings: &mut Vec<String>,
) -> Result<FrocReport> {
    let all: Vec<PatientDetections> = outcomes.iter().map(|o| select(o).clone()).collect();
    let n_gt_lesions = all.iter().map(|p| p.n_gt).sum();
    let pooled = if n_gt_lesions == 0 {
        warnings.push(format!("{what}: no ground-truth lesions; FROC undefined"));
        None
    } else {
        Some(froc_curve(&all, cfg.extra_hits)?)
    };
    let readout = match &pooled {
        Some(c) => cfg
            .readout_fp
            .iter()
            .map(|&fp| Ok(Readout { fp_rate: fp, sensitivity: sensitivity_at_fp(c, fp)? }))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    let mut per_fold = Vec::with_capacity(n_folds);
    if n_folds > 1 {
        for k in 0..n_folds {
            let fold: Vec<PatientDetections> = outcomes
                .iter()
                .filter(|o| o.fold == k)
                .map(|o| select(o).clone())
                .collect();
            if fold.is_empty() || fold.iter().all(|p| p.n_gt == 0) {
                warnings.push(format!("{what}: fold {k} has no ground-truth lesions; fold curve undefined"));
                per_fold.push(None);
            } else {
                per_fold.push(Some(froc_curve(&fold, cfg.extra_hits)?));
            }
        }
    }
    let defined: Vec<FrocCurve> = per_fold.iter().flatten().cloned().collect();
    let fold_readout = if per_fold.is_empty() {
        Vec::new()
    } else {
        cfg.readout_fp
            .iter()
            .map(|&fp| {
                let vals = per_fold
                    .iter()
                    .map(|c| c.as_ref().map(|c| sensitivity_at_fp(c, fp)).transpose())
                    .collect::<Result<Vec<_>>>()?;
                let present: Vec<f64> = vals.iter().flatten().copied().collect();
                let (mean, std) = mean_std(&present);
                let some = !present.is_empty();
                Ok(FoldReadout {
                    fp_rate: fp,
                    per_fold: vals,
                    mean: some.then_some(mean),
                    std: some.then_some(std),
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let aggregate = if defined.len() >= 2 && !cfg.fp_grid.is_empty() {
        Some(aggregate_folds(&defined, &cfg.fp_grid)?)
    } else {
        None
    };
    Ok(FrocReport {
        n_gt_lesions,
        pooled,
        readout,
        per_fold,
        fold_readout,
        aggregate,
    })
}

fn kappa_or_warn(label: &str, records: &[DetectionRecord], fn_as_gs6: bool, cfg: &EvaluationConfig, warnings: &mut Vec<String>) -> Result<Option<KappaResult>> {
    let cm = confusion_matrix(records, fn_as_gs6);
    if cm.total() == 0 {
        warnings.push(format!("{label}: empty confusion matrix; kappa undefined"));
        return Ok(None);
    }
    let k = if cfg.bootstrap_iterations > 0 {
        bootstrap_kappa(records, cfg.bootstrap_iterations, cfg.bootstrap_seed, fn_as_gs6, cfg.bootstrap_unit)?
    } else {
        quadratic_weighted_kappa(&cm)?
    };
    if k.degenerate {
        warnings.push(format!("{label}: degenerate expected disagreement; kappa set to {} by convention", k.kappa));
    }
    Ok(Some(k))
}

fn confusion_report(
    variant: &'static str,
    fn_as_gs6: bool,
    outcomes: &[PatientOutcome],
    n_folds: usize,
    cfg: &EvaluationConfig,
    warnings: &mut Vec<String>,
) -> Result<ConfusionReport> {
    let records: Vec<DetectionRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let matrix = confusion_matrix(&records, fn_as_gs6);
    let kappa = kappa_or_warn(&format!("confusion {variant}"), &records, fn_as_gs6, cfg, warnings)?;
    let mut fold_kappa = Vec::new();
    if n_folds > 1 {
        for k in 0..n_folds {
            let cm = confusion_matrix(
                &records.iter().filter(|r| r.fold == k).cloned().collect::<Vec<_>>(),
                fn_as_gs6,
            );
            if cm.total() == 0 {
                warnings.push(format!("confusion {variant}: fold {k} is empty; kappa undefined"));
                fold_kappa.push(None);
                continue;
            }
            let r = quadratic_weighted_kappa(&cm)?;
            if r.degenerate {
                warnings.push(format!("confusion {variant}: fold {k} kappa degenerate, set to {}", r.kappa));
            }
            fold_kappa.push(Some(r.kappa));
        }
    }
    let present: Vec<f64> = fold_kappa.iter().flatten().copied().collect();
    let (m, s) = mean_std(&present);
    Ok(ConfusionReport {
        variant,
        grades: GRADE_NAMES,
        matrix,
        kappa,
        fold_kappa_mean: (!present.is_empty()).then_some(m),
        fold_kappa_std: (!present.is_empty()).then_some(s),
        fold_kappa,
    })
}

/// Runs the protocol on in-memory cases. `n_folds` is taken from the fold
/// manifest; with a single fold no per-fold statistics are produced.
pub fn evaluate_cases(
    cases: &[PatientCase],
    n_folds: usize,
    points: Option<&[PointRecord]>,
    cfg: &EvaluationConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::MissingData("no patients to evaluate".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.fold >= n_folds.max(1)) {
        return Err(Error::InvalidConfig(format!("{} is in fold {} of {}", c.id, c.fold, n_folds)));
    }
    let mut by_patient: BTreeMap<&str, Vec<PointRecord>> = BTreeMap::new();
    if let Some(points) = points {
        for p in points {
            if !cases.iter().any(|c| c.id == p.patient_id) {
                return Err(Error::MissingData(format!("point for unknown patient {}", p.patient_id)));
            }
            by_patient.entry(&p.patient_id).or_default().push(p.clone());
        }
    }
    let outcomes = cases
        .par_iter()
        .map(|c| {
            let pts = by_patient.get(c.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            evaluate_patient(c, pts, cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    let per_patient: Vec<PatientDice> = outcomes
        .iter()
        .map(|o| PatientDice {
            patient_id: o.id.clone(),
            fold: o.fold,
            dice: o.dice.value,
            both_empty: o.dice.both_empty,
        })
        .collect();
    for d in per_patient.iter().filter(|d| d.both_empty) {
        warnings.push(format!("{}: empty prostate in both masks; Dice set to 1", d.patient_id));
    }
    let (mean, std) = mean_std(&per_patient.iter().map(|d| d.dice).collect::<Vec<_>>());

    let cs_froc = froc_report("CS", &outcomes, n_folds, |o| &o.cs, cfg, &mut warnings)?;
    if cs_froc.pooled.is_none() {
        return Err(Error::Degenerate(
            "no clinically significant ground-truth lesions in the requested stratum".into(),
        ));
    }
    let grade_froc = Grade::ALL
        .iter()
        .map(|&g| {
            Ok(GradeFrocReport {
                grade: g,
                froc: froc_report(g.name(), &outcomes, n_folds, |o| &o.by_grade[g.index()], cfg, &mut warnings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = Vec::new();
    if cfg.confusion_tp_only {
        confusion.push(confusion_report(VARIANT_TP_ONLY, false, &outcomes, n_folds, cfg, &mut warnings)?);
    }
    if cfg.confusion_fn_as_gs6 {
        confusion.push(confusion_report(VARIANT_FN_AS_GS6, true, &outcomes, n_folds, cfg, &mut warnings)?);
    }

    let points = match points {
        None => None,
        Some(_) => {
            let recs: Vec<DetectionRecord> = outcomes
                .iter()
                .flat_map(PatientOutcome::point_records)
                .collect();
            Some(PointReport {
                n_points: recs.len(),
                grades: GRADE_NAMES,
                matrix: confusion_matrix(&recs, false),
                kappa: kappa_or_warn("point protocol", &recs, false, cfg, &mut warnings)?,
            })
        }
    };

    for w in &warnings {
        log::warn!("{w}");
    }
    let report = EvaluationReport {
        settings: ReportSettings {
            connectivity: cfg.connectivity,
            min_volume_mm3: cfg.min_volume_mm3,
            overlap_frac: cfg.overlap_frac,
            overlap_denominator: cfg.overlap_denominator,
            extra_hits: cfg.extra_hits,
            zone: cfg.zone,
            bootstrap_iterations: cfg.bootstrap_iterations,
            bootstrap_seed: cfg.bootstrap_seed,
            bootstrap_unit: cfg.bootstrap_unit,
        },
        n_patients: outcomes.len(),
        n_folds,
        prostate_dice: DiceSummary { per_patient, mean, std },
        cs_froc,
        grade_froc,
        confusion,
        points,
        warnings,
    };
    Ok(Evaluation {
        report,
        patients: outcomes,
    })
}


fn list_patient_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn exists(base: &Path) -> bool {
    let mut s = base.as_os_str().to_owned();
    s.push(".vol.json");
    PathBuf::from(s).exists()
}

/// Manifest from the config, or `cohort.json` beside the ground-truth
/// directory, or a single fold holding every patient directory.
pub fn resolve_manifest(cfg: &EvaluationConfig) -> Result<(FoldManifest, bool)> {
    let implicit = cfg.gt_dir.parent().map(|p| p.join("cohort.json"));
    let path = match (&cfg.fold_manifest, implicit) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) if p.exists() => Some(p),
        _ => None,
    };
    match path {
        Some(p) => Ok((FoldManifest::read(p)?, true)),
        None => Ok((
            FoldManifest {
                n_folds: 1,
                patients: list_patient_dirs(&cfg.gt_dir)?
                    .into_iter()
                    .map(|id| PatientEntry { id, fold: 0 })
                    .collect(),
            },
            false,
        )),
    }
}

pub fn load_cases(cfg: &EvaluationConfig, manifest: &FoldManifest) -> Result<Vec<PatientCase>> {
    manifest
        .patients
        .par_iter()
        .map(|p| {
            let gt = cfg.gt_dir.join(&p.id);
            let pred = cfg.pred_dir.join(&p.id);
            if !pred.is_dir() {
                return Err(Error::MissingData(format!("no prediction directory for patient {}", p.id)));
            }
            let labels = read_volume(gt.join("labels"))?;
            let zones = if exists(&gt.join("pz")) && exists(&gt.join("tz")) {
                Some(ZoneMask::new(read_volume(gt.join("pz"))?, read_volume(gt.join("tz"))?)?)
            } else {
                None
            };
            Ok(PatientCase {
                id: p.id.clone(),
                fold: p.fold,
                labels,
                zones,
                probs: read_prob_stack(&pred)?,
            })
        })
        .collect()
}

/// Loads the cohort, evaluates it and writes the bundle to `output_dir`.
pub fn run_full_evaluation(cfg: &EvaluationConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let (manifest, explicit) = resolve_manifest(cfg)?;
    if manifest.patients.is_empty() {
        return Err(Error::MissingData(format!("no patients under {}", cfg.gt_dir.display())));
    }
    let cases = load_cases(cfg, &manifest)?;
    let points = cfg.points_file.as_ref().map(read_points_csv).transpose()?;
    let mut eval = evaluate_cases(&cases, manifest.n_folds, points.as_deref(), cfg)?;
    if !explicit {
        eval.report
            .warnings
            .insert(0, "no fold manifest; all patients treated as one fold".into());
    }
    if let Some(out) = &cfg.output_dir {
        write_bundle(&eval, out, cfg.write_intermediates)?;
    }
    Ok(eval.report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

#[derive(Serialize)]
struct ClusterFile<'a> {
    patient_id: &'a str,
    gt_gs: Vec<ClusterSummary>,
    gt_cs: Vec<ClusterSummary>,
    pred_gs: Vec<ClusterSummary>,
    pred_cs: Vec<ClusterSummary>,
}

/// Writes `report.json` with the FROC, Dice and confusion files and, when
/// requested, the per-patient intermediates every number is derived from.
pub fn write_bundle(eval: &Evaluation, dir: impl AsRef<Path>, intermediates: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &eval.report;
    write_json(&dir.join("report.json"), r)?;

    let mut dice = String::from("patient_id,fold,dice,both_empty\n");
    for d in &r.prostate_dice.per_patient {
        dice.push_str(&format!("{},{},{},{}\n", d.patient_id, d.fold, d.dice, d.both_empty));
    }
    write_text(&dir.join("dice.csv"), &dice)?;

    let write_froc = |prefix: &str, f: &FrocReport| -> Result<()> {
        if let Some(c) = &f.pooled {
            write_text(&dir.join(format!("{prefix}.csv")), &c.to_csv())?;
        }
        for (k, c) in f.per_fold.iter().enumerate() {
            if let Some(c) = c {
                write_text(&dir.join(format!("{prefix}_fold{k}.csv")), &c.to_csv())?;
            }
        }
        if let Some(a) = &f.aggregate {
            write_text(&dir.join(format!("{prefix}_aggregate.csv")), &a.to_csv())?;
        }
        Ok(())
    };
    write_froc("froc_cs", &r.cs_froc)?;
    for g in &r.grade_froc {
        write_froc(&format!("froc_{}", g.grade.slug()), &g.froc)?;
    }
    for c in &r.confusion {
        write_json(&dir.join(format!("confusion_{}.json", c.variant)), c)?;
    }

    if !intermediates {
        return Ok(());
    }
    let records: Vec<DetectionRecord> = eval.patients.iter().flat_map(|o| o.records.iter().cloned()).collect();
    write_detection_csv(dir.join("detections.csv"), &records)?;

    let mut cands = String::from("patient_id,fold,map,pred_index,score,gt_index,overlap_frac,dice\n");
    let mut census = String::from("patient_id,fold,n_gt_cs,n_gt_gs6,n_gt_gs3p4,n_gt_gs4p3,n_gt_gs8\n");
    for o in &eval.patients {
        let maps = std::iter::once(("cs", &o.cs)).chain(Grade::ALL.iter().map(|g| (g.slug(), &o.by_grade[g.index()])));
        for (name, det) in maps {
            for c in &det.candidates {
                let (gt, frac, d) = match c.hit {
                    Some(h) => (h.gt.to_string(), h.overlap_frac.to_string(), h.dice.to_string()),
                    None => (String::new(), String::new(), String::new()),
                };
                cands.push_str(&format!("{},{},{},{},{},{},{},{}\n", o.id, o.fold, name, c.pred, c.score, gt, frac, d));
            }
        }
        census.push_str(&format!("{},{},{}", o.id, o.fold, o.cs.n_gt));
        for d in &o.by_grade {
            census.push_str(&format!(",{}", d.n_gt));
        }
        census.push('\n');
    }
    write_text(&dir.join("candidates.csv"), &cands)?;
    write_text(&dir.join("patients.csv"), &census)?;

    if eval.report.points.is_some() {
        let mut pts = String::from("patient_id,x_vox,y_vox,z_vox,zone,gs_label,pred_grade\n");
        for o in &eval.patients {
            for (p, g) in &o.points {
                pts.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    p.patient_id,
                    p.x_vox,
                    p.y_vox,
                    p.z_vox,
                    p.zone.name(),
                    p.gs_label.name(),
                    g.name()
                ));
            }
        }
        write_text(&dir.join("points.csv"), &pts)?;
    }

    let clusters = dir.join("clusters");
    fs::create_dir_all(&clusters).map_err(|e| Error::io(&clusters, e))?;
    for o in &eval.patients {
        write_json(
            &clusters.join(format!("{}.json", o.id)),
            &ClusterFile {
                patient_id: &o.id,
                gt_gs: summarize(&o.gt_gs),
                gt_cs: summarize(&o.gt_cs),
                pred_gs: summarize(&o.pred_gs),
                pred_cs: summarize(&o.pred_cs),
            },
        )?;
    }
    Ok(())
}
