//! Synthetic cohorts with a construction ledger.
//!
//! Each patient gets an ellipsoidal prostate split into a transition zone
//! (inner ellipsoid) and a peripheral zone (the remaining shell), with
//! ellipsoidal lesions placed wholly inside one zone. Predictions are painted
//! from a script (detected or missed, predicted grade, score) plus injected
//! false-positive blobs. All probabilities are multiples of 1/128, so every
//! cluster score the pipeline computes is exactly the scripted value.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluate::{FoldManifest, PatientEntry};
use crate::grade::{Grade, NUM_CLASSES, NUM_GRADES};
use crate::volume::{coords_of, voxel_volume_mm3, write_prob_stack, write_volume, ProbStack, Volume, Zone, ZoneMask};
use crate::{Error, Result};

/// Probability quantum; scores are `k / QUANTUM`.
pub const QUANTUM: f64 = 128.0;
const Q: f32 = 1.0 / 128.0;

/// Lowest and highest scripted score. Above the upper bound the prostate
/// channel of a lesion voxel would go negative; below the lower bound the
/// grade channel might not win the argmax.
pub const MIN_SCORE: f64 = 0.5;
pub const MAX_SCORE: f64 = 124.0 / 128.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Prostate semi-axes as fractions of the grid extent.
    pub prostate_fraction: [f64; 3],
    /// Transition-zone semi-axes relative to the prostate's.
    pub tz_scale: f64,
    /// Lesions per patient, in grade order GS6, GS3+4, GS4+3, GS>=8.
    pub lesions_per_grade: [usize; NUM_GRADES],
    /// Range of each lesion semi-axis.
    pub radius_mm: [f64; 2],
    /// Probability that a lesion is placed in the transition zone.
    pub tz_lesion_fraction: f64,
    /// Smallest blob volume the generator accepts.
    pub min_blob_volume_mm3: f64,
    pub miss_fraction: f64,
    /// Row = true grade, column = probability of the predicted grade.
    pub misgrade: [[f64; NUM_GRADES]; NUM_GRADES],
    pub score_range: [f64; 2],
    pub fp_per_patient: usize,
    /// Fixed score for injected false positives; drawn from `score_range` when absent.
    pub fp_score: Option<f64>,
    pub fp_grade_probs: [f64; NUM_GRADES],
    pub n_folds: usize,
    /// Placement attempts per blob before giving up.
    pub max_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let mut identity = [[0.0; NUM_GRADES]; NUM_GRADES];
        for (i, row) in identity.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        PhantomConfig {
            seed: 0,
            n_patients: 10,
            dims: [96, 96, 24],
            spacing_mm: [1.0, 1.0, 3.0],
            prostate_fraction: [0.38, 0.32, 0.38],
            tz_scale: 0.55,
            lesions_per_grade: [1, 1, 1, 1],
            radius_mm: [3.5, 6.0],
            tz_lesion_fraction: 0.3,
            min_blob_volume_mm3: 45.0,
            miss_fraction: 0.0,
            misgrade: identity,
            score_range: [0.55, 0.95],
            fp_per_patient: 0,
            fp_score: None,
            fp_grade_probs: [0.0, 0.4, 0.3, 0.3],
            n_folds: 5,
            max_attempts: 1000,
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what} must be probabilities summing to 1, got {p:?}")));
    }
    Ok(())
}

fn check_score(s: f64, what: &str) -> Result<()> {
    if !(MIN_SCORE..=MAX_SCORE).contains(&s) {
        return Err(Error::InvalidConfig(format!("{what} {s} outside [{MIN_SCORE}, {MAX_SCORE}]")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.dims.iter().any(|&d| d == 0) || self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("invalid grid {:?} @ {:?}", self.dims, self.spacing_mm));
        }
        if self.prostate_fraction.iter().any(|&f| !(f > 0.0 && f <= 0.5)) {
            return bad(format!("prostate fractions must lie in (0, 0.5], got {:?}", self.prostate_fraction));
        }
        if !(self.tz_scale > 0.0 && self.tz_scale < 1.0) {
            return bad(format!("tz_scale must lie in (0, 1), got {}", self.tz_scale));
        }
        let [r0, r1] = self.radius_mm;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("radius range {:?} must be positive and ordered", self.radius_mm));
        }
        for (v, what) in [(self.miss_fraction, "miss_fraction"), (self.tz_lesion_fraction, "tz_lesion_fraction")] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{what} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.min_blob_volume_mm3 >= 0.0) {
            return bad("min_blob_volume_mm3 must be >= 0".into());
        }
        for (g, row) in self.misgrade.iter().enumerate() {
            check_distribution(row, &format!("misgrade row {g}"))?;
        }
        check_distribution(&self.fp_grade_probs, "fp_grade_probs")?;
        let [s0, s1] = self.score_range;
        check_score(s0, "score_range lower bound")?;
        check_score(s1, "score_range upper bound")?;
        if (s0 * QUANTUM).ceil() > (s1 * QUANTUM).floor() {
            return bad(format!("score_range {:?} contains no multiple of 1/128", self.score_range));
        }
        if let Some(s) = self.fp_score {
            check_score(s, "fp_score")?;
        }
        if self.n_folds == 0 {
            return bad("n_folds must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Score of a cluster on the CS map given its scripted grade-channel score:
/// the two other CS channels contribute 1/128 each.
pub fn cs_score(gs_score: f64) -> f64 {
    gs_score + 2.0 / QUANTUM
}

/// Rounds to the nearest multiple of 1/128.
pub fn quantize_score(s: f64) -> f64 {
    (s * QUANTUM).round() / QUANTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerLesion {
    pub grade: Grade,
    pub zone: Zone,
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    pub detected: bool,
    /// Present iff detected.
    pub predicted_grade: Option<Grade>,
    /// Grade-channel score of the predicted blob; present iff detected.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFalsePositive {
    pub grade: Grade,
    pub zone: Zone,
    pub voxels: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLedger {
    pub id: String,
    pub fold: usize,
    pub lesions: Vec<LedgerLesion>,
    pub false_positives: Vec<LedgerFalsePositive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomLedger {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_folds: usize,
    pub patients: Vec<PatientLedger>,
}

/// Ground truth of one synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPatient {
    pub id: String,
    pub fold: usize,
    pub labels: Volume,
    pub zones: ZoneMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCohort {
    pub patients: Vec<PhantomPatient>,
    pub predictions: Vec<ProbStack>,
    pub ledger: PhantomLedger,
}

impl PhantomCohort {
    pub fn manifest(&self) -> FoldManifest {
        FoldManifest {
            n_folds: self.ledger.n_folds,
            patients: self
                .patients
                .iter()
                .map(|p| PatientEntry {
                    id: p.id.clone(),
                    fold: p.fold,
                })
                .collect(),
        }
    }
}

pub fn patient_id(i: usize) -> String {
    format!("p{i:03}")
}

/// Prostate and zone geometry on a voxel grid, shared by every patient.
struct Anatomy {
    dims: [usize; 3],
    spacing: [f64; 3],
    center: [f64; 3],
    semi: [f64; 3],
    tz_scale: f64,
    zone: Vec<Zone>,
    /// PZ and TZ voxel lists.
    zone_voxels: [Vec<usize>; 2],
    masks: ZoneMask,
}

impl Anatomy {
    fn new(cfg: &PhantomConfig) -> Result<Self> {
        let extent: Vec<f64> = (0..3).map(|a| cfg.dims[a] as f64 * cfg.spacing_mm[a]).collect();
        let mut a = Anatomy {
            dims: cfg.dims,
            spacing: cfg.spacing_mm,
            center: [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0],
            semi: [
                extent[0] * cfg.prostate_fraction[0],
                extent[1] * cfg.prostate_fraction[1],
                extent[2] * cfg.prostate_fraction[2],
            ],
            tz_scale: cfg.tz_scale,
            zone: Vec::new(),
            zone_voxels: [Vec::new(), Vec::new()],
            masks: ZoneMask::new(
                Volume::filled(cfg.dims, cfg.spacing_mm, 0.0, crate::volume::VolumeKind::Label)?,
                Volume::filled(cfg.dims, cfg.spacing_mm, 0.0, crate::volume::VolumeKind::Label)?,
            )?,
        };
        let n = cfg.n_voxels();
        a.zone = (0..n).map(|i| a.zone_of(coords_of(cfg.dims, i))).collect();
        let pick = |z: Zone| (0..n).filter(|&i| a.zone[i] == z).collect::<Vec<_>>();
        a.zone_voxels = [pick(Zone::Pz), pick(Zone::Tz)];
        let pz: Vec<bool> = a.zone.iter().map(|&z| z == Zone::Pz).collect();
        let tz: Vec<bool> = a.zone.iter().map(|&z| z == Zone::Tz).collect();
        a.masks = ZoneMask::new(
            Volume::from_mask(cfg.dims, cfg.spacing_mm, &pz)?,
            Volume::from_mask(cfg.dims, cfg.spacing_mm, &tz)?,
        )?;
        Ok(a)
    }

    fn position(&self, c: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (c[a] as f64 + 0.5) * self.spacing[a])
    }

    fn radius2(&self, c: [usize; 3]) -> f64 {
        let p = self.position(c);
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum()
    }

    fn zone_of(&self, c: [usize; 3]) -> Zone {
        let r2 = self.radius2(c);
        if r2 <= self.tz_scale * self.tz_scale {
            Zone::Tz
        } else if r2 <= 1.0 {
            Zone::Pz
        } else {
            Zone::Unknown
        }
    }
}

/// Blob placement state: the voxels reserved by earlier blobs and their
/// two-voxel margin.
struct Placer<'a> {
    anatomy: &'a Anatomy,
    reserved: Vec<bool>,
    cfg: &'a PhantomConfig,
}

impl<'a> Placer<'a> {
    fn new(anatomy: &'a Anatomy, cfg: &'a PhantomConfig) -> Self {
        Placer {
            anatomy,
            reserved: vec![false; cfg.n_voxels()],
            cfg,
        }
    }

    /// Voxels of an axis-aligned ellipsoid centered on voxel `c`, or `None`
    /// if it leaves the grid.
    fn ellipsoid(&self, c: [usize; 3], semi_mm: [f64; 3]) -> Option<Vec<usize>> {
        let dims = self.anatomy.dims;
        let sp = self.anatomy.spacing;
        let reach = [0, 1, 2].map(|a| (semi_mm[a] / sp[a]).floor() as i64);
        let mut out = Vec::new();
        for dz in -reach[2]..=reach[2] {
            for dy in -reach[1]..=reach[1] {
                for dx in -reach[0]..=reach[0] {
                    let d = [dx, dy, dz];
                    let r2: f64 = (0..3).map(|a| (d[a] as f64 * sp[a] / semi_mm[a]).powi(2)).sum();
                    if r2 > 1.0 {
                        continue;
                    }
                    let p = [0, 1, 2].map(|a| c[a] as i64 + d[a]);
                    if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
                        return None;
                    }
                    out.push(p[0] as usize + dims[0] * (p[1] as usize + dims[1] * p[2] as usize));
                }
            }
        }
        out.sort_unstable();
        Some(out)
    }

    fn reserve(&mut self, voxels: &[usize]) {
        let dims = self.anatomy.dims;
        for &v in voxels {
            let c = coords_of(dims, v);
            for dz in -2i64..=2 {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let p = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64) {
                            let i = p[0] as usize + dims[0] * (p[1] as usize + dims[1] * p[2] as usize);
                            self.reserved[i] = true;
                        }
                    }
                }
            }
        }
    }

    /// Places a blob wholly inside the preferred zone, or inside the other
    /// zone when the preferred one has no room left.
    fn place(&mut self, rng: &mut ChaCha8Rng, preferred: Zone, what: &str) -> Result<(Zone, Vec<usize>)> {
        let other = if preferred == Zone::Pz { Zone::Tz } else { Zone::Pz };
        match self.place_in(rng, preferred, what) {
            Ok(v) => Ok((preferred, v)),
            Err(Error::Placement(first)) => match self.place_in(rng, other, what) {
                Ok(v) => Ok((other, v)),
                Err(Error::Placement(second)) => Err(Error::Placement(format!("{first}; {second}"))),
                Err(e) => Err(e),
            },
            Err(e) => Err(e),
        }
    }

    /// Places a blob wholly inside `zone`, clear of every earlier blob.
    fn place_in(&mut self, rng: &mut ChaCha8Rng, zone: Zone, what: &str) -> Result<Vec<usize>> {
        let pool = match zone {
            Zone::Pz => &self.anatomy.zone_voxels[0],
            Zone::Tz => &self.anatomy.zone_voxels[1],
            Zone::Unknown => unreachable!("blobs are placed in PZ or TZ"),
        };
        if pool.is_empty() {
            return Err(Error::Placement(format!("{what}: zone {} is empty on this grid", zone.name())));
        }
        let [r0, r1] = self.cfg.radius_mm;
        let vox_vol = voxel_volume_mm3(self.anatomy.spacing);
        for _ in 0..self.cfg.max_attempts {
            let center = coords_of(self.anatomy.dims, pool[rng.gen_range(0..pool.len())]);
            let semi = [0; 3].map(|_| if r0 == r1 { r0 } else { rng.gen_range(r0..=r1) });
            let Some(voxels) = self.ellipsoid(center, semi) else { continue };
            if (voxels.len() as f64) * vox_vol < self.cfg.min_blob_volume_mm3 {
                continue;
            }
            if voxels.iter().all(|&v| self.anatomy.zone[v] == zone && !self.reserved[v]) {
                self.reserve(&voxels);
                return Ok(voxels);
            }
        }
        Err(Error::Placement(format!(
            "{what}: no free {} position after {} attempts",
            zone.name(),
            self.cfg.max_attempts
        )))
    }
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last class with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn draw_score(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    let lo = (range[0] * QUANTUM).ceil() as u32;
    let hi = (range[1] * QUANTUM).floor() as u32;
    rng.gen_range(lo..=hi) as f64 / QUANTUM
}

fn generate_patient(cfg: &PhantomConfig, anatomy: &Anatomy, index: usize) -> Result<(PhantomPatient, PatientLedger)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = patient_id(index);
    let mut placer = Placer::new(anatomy, cfg);

    let mut lesions = Vec::new();
    for g in Grade::ALL {
        for _ in 0..cfg.lesions_per_grade[g.index()] {
            let zone = if rng.gen_bool(cfg.tz_lesion_fraction) { Zone::Tz } else { Zone::Pz };
            let (zone, voxels) = placer.place(&mut rng, zone, &format!("{id} {g} lesion"))?;
            let detected = !rng.gen_bool(cfg.miss_fraction);
            let (predicted_grade, score) = if detected {
                let p = Grade::from_index(draw_index(&mut rng, &cfg.misgrade[g.index()])).expect("grade index < 4");
                (Some(p), Some(draw_score(&mut rng, cfg.score_range)))
            } else {
                (None, None)
            };
            lesions.push(LedgerLesion {
                grade: g,
                zone,
                voxels,
                detected,
                predicted_grade,
                score,
            });
        }
    }
    let mut false_positives = Vec::new();
    for k in 0..cfg.fp_per_patient {
        let zone = if rng.gen_bool(cfg.tz_lesion_fraction) { Zone::Tz } else { Zone::Pz };
        let (zone, voxels) = placer.place(&mut rng, zone, &format!("{id} false positive {k}"))?;
        let grade = Grade::from_index(draw_index(&mut rng, &cfg.fp_grade_probs)).expect("grade index < 4");
        let score = match cfg.fp_score {
            Some(s) => quantize_score(s),
            None => draw_score(&mut rng, cfg.score_range),
        };
        false_positives.push(LedgerFalsePositive {
            grade,
            zone,
            voxels,
            score,
        });
    }

    let mut labels: Vec<u8> = anatomy.zone.iter().map(|&z| (z != Zone::Unknown) as u8).collect();
    for l in &lesions {
        for &v in &l.voxels {
            labels[v] = l.grade.label_code();
        }
    }
    let fold = index % cfg.n_folds;
    let patient = PhantomPatient {
        id: id.clone(),
        fold,
        labels: Volume::from_labels(cfg.dims, cfg.spacing_mm, &labels)?,
        zones: anatomy.masks.clone(),
    };
    Ok((
        patient,
        PatientLedger {
            id,
            fold,
            lesions,
            false_positives,
        },
    ))
}

const BACKGROUND_PROBS: [f32; NUM_CLASSES] = [61.0 * 2.0 * Q, 2.0 * Q, Q, Q, Q, Q];
const PROSTATE_PROBS: [f32; NUM_CLASSES] = [2.0 * Q, 61.0 * 2.0 * Q, Q, Q, Q, Q];

fn blob_probs(grade: Grade, score: f64) -> [f32; NUM_CLASSES] {
    let s = score as f32;
    let mut p = [Q; NUM_CLASSES];
    p[1] = 1.0 - s - 4.0 * Q;
    p[grade.label_code() as usize] = s;
    p
}

/// Paints the prediction of one patient from its ledger: background and
/// prostate get fixed confident probabilities, detected lesions and false
/// positives get their scripted grade channel, and missed lesions look like
/// plain prostate tissue.
pub fn degrade_prediction(gt: &PhantomPatient, ledger: &PatientLedger) -> Result<ProbStack> {
    let dims = gt.labels.dims();
    let mut probs: Vec<[f32; NUM_CLASSES]> = gt
        .labels
        .values()
        .iter()
        .map(|&l| if l == 0.0 { BACKGROUND_PROBS } else { PROSTATE_PROBS })
        .collect();
    for l in &ledger.lesions {
        if let (true, Some(g), Some(s)) = (l.detected, l.predicted_grade, l.score) {
            let p = blob_probs(g, s);
            for &v in &l.voxels {
                probs[v] = p;
            }
        }
    }
    for fp in &ledger.false_positives {
        let p = blob_probs(fp.grade, fp.score);
        for &v in &fp.voxels {
            if gt.labels.values()[v] != 1.0 {
                return Err(Error::Placement(format!(
                    "{}: false positive voxel {v} is not plain prostate tissue",
                    ledger.id
                )));
            }
            probs[v] = p;
        }
    }
    ProbStack::from_voxels(dims, gt.labels.spacing_mm(), &probs)
}

/// Ground truth, predictions and ledger for a whole cohort. Patients are
/// generated in parallel, each from its own substream of the seed.
pub fn generate_cohort(cfg: &PhantomConfig) -> Result<PhantomCohort> {
    cfg.validate()?;
    let anatomy = Anatomy::new(cfg)?;
    let generated = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let (p, l) = generate_patient(cfg, &anatomy, i)?;
            let probs = degrade_prediction(&p, &l)?;
            Ok((p, l, probs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut patients = Vec::with_capacity(generated.len());
    let mut predictions = Vec::with_capacity(generated.len());
    let mut ledgers = Vec::with_capacity(generated.len());
    for (p, l, probs) in generated {
        patients.push(p);
        ledgers.push(l);
        predictions.push(probs);
    }
    Ok(PhantomCohort {
        patients,
        predictions,
        ledger: PhantomLedger {
            seed: cfg.seed,
            dims: cfg.dims,
            spacing_mm: cfg.spacing_mm,
            n_folds: cfg.n_folds,
            patients: ledgers,
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the cohort directory:
///
/// ```text
/// cohort.json              fold manifest
/// ledger.json
/// phantom_config.json
/// gt/<id>/labels.vol.*     plus pz.vol.*, tz.vol.*
/// pred/<id>/prob_<c>.vol.*
/// ```
pub fn write_cohort(dir: impl AsRef<Path>, cohort: &PhantomCohort, cfg: &PhantomConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("cohort.json"), &cohort.manifest())?;
    write_json(&dir.join("ledger.json"), &cohort.ledger)?;
    write_json(&dir.join("phantom_config.json"), cfg)?;
    cohort
        .patients
        .par_iter()
        .zip(&cohort.predictions)
        .try_for_each(|(p, probs)| -> Result<()> {
            let gt = dir.join("gt").join(&p.id);
            fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
            write_volume(&p.labels, gt.join("labels"))?;
            write_volume(p.zones.pz(), gt.join("pz"))?;
            write_volume(p.zones.tz(), gt.join("tz"))?;
            write_prob_stack(probs, dir.join("pred").join(&p.id))
        })
}
