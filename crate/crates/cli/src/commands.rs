use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesion_eval::cluster::{cs_lesion_maps, filter_by_volume, gs_lesion_maps, summarize, Connectivity, MapKind};
use lesion_eval::evaluate::{
    evaluate_patient, load_cases, resolve_manifest, run_full_evaluation, EvaluationConfig, PatientCase,
    PatientOutcome, Readout,
};
use lesion_eval::matching::{read_detection_csv, read_points_csv, write_detection_records, PointRecord};
use lesion_eval::metrics::{
    bootstrap_kappa, confusion_matrix, froc_curve, quadratic_weighted_kappa, sensitivity_at_fp, wilcoxon_one_sided,
    BootstrapUnit, KappaResult, WilcoxonResult,
};
use lesion_eval::netmath::{gradcheck, label_from_probs};
use lesion_eval::phantom::{generate_cohort, write_cohort, PhantomConfig};
use lesion_eval::volume::{
    preprocess_with, read_prob_stack, read_volume, write_volume, NormalizeScope, PreprocessOptions,
};
use lesion_eval::Grade;
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    Cli, ClusterArgs, CohortArgs, Command, DiceArgs, EvaluateArgs, FrocArgs, KappaArgs, LosscheckArgs, MatchArgs,
    PhantomArgs, PreprocessArgs, Px2Args, WilcoxonArgs,
};

/// Largest relative error the gradient suites accept.
const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Bad flags or config contents; mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(le) = cause.downcast_ref::<lesion_eval::Error>() {
            return if le.is_config_error() { 2 } else { 3 };
        }
    }
    3
}

/// Collected warnings; each one is logged as it is raised.
#[derive(Default)]
struct Warnings(Vec<String>);

impl Warnings {
    fn push(&mut self, msg: String) {
        log::warn!("{msg}");
        self.0.push(msg);
    }
}

/// Runs the selected subcommand and returns the warnings it raised.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let uses_config = matches!(
        cli.command,
        Command::Phantom(_) | Command::Match(_) | Command::Froc(_) | Command::Px2(_) | Command::Evaluate(_)
    );
    if cli.config.is_some() && !uses_config {
        return Err(usage("--config is not used by this subcommand"));
    }
    let mut w = Warnings::default();
    match &cli.command {
        Command::Preprocess(a) => preprocess(a)?,
        Command::Phantom(a) => phantom(cli, a)?,
        Command::Cluster(a) => cluster(a)?,
        Command::Match(a) => match_cmd(cli, a, &mut w)?,
        Command::Froc(a) => froc(cli, a, &mut w)?,
        Command::Kappa(a) => kappa(cli, a, &mut w)?,
        Command::Dice(a) => dice(a, &mut w)?,
        Command::Wilcoxon(a) => wilcoxon(a, &mut w)?,
        Command::Px2(a) => px2(cli, a, &mut w)?,
        Command::Losscheck(a) => losscheck(cli, a)?,
        Command::Evaluate(a) => evaluate(cli, a, &mut w)?,
    }
    Ok(w.0)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    if a.spacing.len() != 3 || a.crop.len() != 2 {
        return Err(usage("--spacing takes x,y,z and --crop takes width,height"));
    }
    let v = read_volume(&a.input)?;
    let opts = PreprocessOptions {
        target_spacing: [a.spacing[0], a.spacing[1], a.spacing[2]],
        crop: [a.crop[0], a.crop[1]],
        normalize: if a.per_slice {
            NormalizeScope::Slice
        } else {
            NormalizeScope::Volume
        },
    };
    let out = preprocess_with(&v, &opts)?;
    write_volume(&out, &a.output)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        output: &'a Path,
        dims: [usize; 3],
        spacing_mm: [f64; 3],
    }
    emit(
        &Summary {
            output: &a.output,
            dims: out.dims(),
            spacing_mm: out.spacing_mm(),
        },
        None,
    )
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PhantomConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => PhantomConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.patients {
        cfg.n_patients = n;
    }
    if let Some(k) = a.folds {
        cfg.n_folds = k;
    }
    cfg.validate()?;
    let cohort = generate_cohort(&cfg)?;
    write_cohort(&a.out, &cohort, &cfg)?;

    let mut lesions = [0usize; 4];
    let (mut detected, mut fps) = (0, 0);
    for p in &cohort.ledger.patients {
        for l in &p.lesions {
            lesions[l.grade.index()] += 1;
            detected += l.detected as usize;
        }
        fps += p.false_positives.len();
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        seed: u64,
        n_patients: usize,
        n_folds: usize,
        lesions_per_grade: [usize; 4],
        detected: usize,
        false_positives: usize,
    }
    emit(
        &Summary {
            out: &a.out,
            seed: cfg.seed,
            n_patients: cfg.n_patients,
            n_folds: cfg.n_folds,
            lesions_per_grade: lesions,
            detected,
            false_positives: fps,
        },
        None,
    )
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let conn = Connectivity::from_value(a.connectivity)?;
    if !(a.min_volume_mm3 >= 0.0) {
        return Err(usage("--min-volume-mm3 must be >= 0"));
    }
    let probs = a.probs.as_ref().map(read_prob_stack).transpose()?;
    let labels = match (&a.labels, &probs) {
        (Some(p), _) => read_volume(p)?,
        (None, Some(pr)) => label_from_probs(pr),
        (None, None) => return Err(usage("cluster needs --labels, --probs or both")),
    };
    let kind = MapKind::from(a.map);
    let map = match kind {
        MapKind::Gs => gs_lesion_maps(&labels, probs.as_ref(), conn)?,
        MapKind::Cs => cs_lesion_maps(&labels, probs.as_ref(), conn)?,
    };
    let map = filter_by_volume(&map, a.min_volume_mm3)?;
    #[derive(Serialize)]
    struct Summary {
        map: MapKind,
        connectivity: u32,
        min_volume_mm3: f64,
        n_clusters: usize,
        clusters: Vec<lesion_eval::cluster::ClusterSummary>,
    }
    emit(
        &Summary {
            map: kind,
            connectivity: a.connectivity,
            min_volume_mm3: a.min_volume_mm3,
            n_clusters: map.len(),
            clusters: summarize(&map),
        },
        a.out.as_deref(),
    )
}

/// Config file, then flags, then checks that the cohort is located.
fn eval_config(cli: &Cli, c: &CohortArgs) -> Result<EvaluationConfig> {
    let mut cfg = match &cli.config {
        Some(p) => EvaluationConfig::read(p)?,
        None => EvaluationConfig::default(),
    };
    if let Some(d) = &c.gt_dir {
        cfg.gt_dir = d.clone();
    }
    if let Some(d) = &c.pred_dir {
        cfg.pred_dir = d.clone();
    }
    if let Some(m) = &c.manifest {
        cfg.fold_manifest = Some(m.clone());
    }
    if let Some(v) = c.connectivity {
        cfg.connectivity = v;
    }
    if let Some(v) = c.min_volume_mm3 {
        cfg.min_volume_mm3 = v;
    }
    if let Some(v) = c.overlap_frac {
        cfg.overlap_frac = v;
    }
    if let Some(z) = c.zone {
        cfg.zone = z;
    }
    if let Some(s) = cli.seed {
        cfg.bootstrap_seed = s;
    }
    if cfg.gt_dir.as_os_str().is_empty() || cfg.pred_dir.as_os_str().is_empty() {
        return Err(usage("--gt-dir and --pred-dir are required (or gt_dir/pred_dir in --config)"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(cfg: &EvaluationConfig, w: &mut Warnings) -> Result<Vec<PatientCase>> {
    let (manifest, explicit) = resolve_manifest(cfg)?;
    if manifest.patients.is_empty() {
        return Err(lesion_eval::Error::MissingData(format!("no patients under {}", cfg.gt_dir.display())).into());
    }
    if !explicit {
        w.push("no fold manifest; all patients treated as one fold".into());
    }
    Ok(load_cases(cfg, &manifest)?)
}

fn outcomes(cases: &[PatientCase], points: &[PointRecord], cfg: &EvaluationConfig) -> Result<Vec<PatientOutcome>> {
    let mut by_patient: BTreeMap<&str, Vec<PointRecord>> = BTreeMap::new();
    for p in points {
        if !cases.iter().any(|c| c.id == p.patient_id) {
            return Err(lesion_eval::Error::MissingData(format!("point for unknown patient {}", p.patient_id)).into());
        }
        by_patient.entry(&p.patient_id).or_default().push(p.clone());
    }
    Ok(cases
        .par_iter()
        .map(|c| evaluate_patient(c, by_patient.get(c.id.as_str()).map_or(&[], Vec::as_slice), cfg))
        .collect::<lesion_eval::Result<Vec<_>>>()?)
}

fn match_cmd(cli: &Cli, a: &MatchArgs, w: &mut Warnings) -> Result<()> {
    let cfg = eval_config(cli, &a.cohort)?;
    let cases = load(&cfg, w)?;
    let records: Vec<_> = outcomes(&cases, &[], &cfg)?
        .into_iter()
        .flat_map(|o| o.records)
        .collect();
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_detection_records(f, &records)?;
        }
        None => write_detection_records(std::io::stdout().lock(), &records)?,
    }
    Ok(())
}

fn froc(cli: &Cli, a: &FrocArgs, w: &mut Warnings) -> Result<()> {
    let cfg = eval_config(cli, &a.cohort)?;
    let cases = load(&cfg, w)?;
    let dets: Vec<_> = outcomes(&cases, &[], &cfg)?
        .into_iter()
        .map(|mut o| match a.grade {
            Some(g) => o.by_grade.swap_remove(g.index()),
            None => o.cs,
        })
        .collect();
    let curve = froc_curve(&dets, cfg.extra_hits)?;
    if let Some(p) = &a.csv {
        fs::write(p, curve.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let readout = cfg
        .readout_fp
        .iter()
        .map(|&fp| {
            Ok(Readout {
                fp_rate: fp,
                sensitivity: sensitivity_at_fp(&curve, fp)?,
            })
        })
        .collect::<lesion_eval::Result<Vec<_>>>()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        target: &'a str,
        n_patients: usize,
        n_gt_lesions: usize,
        max_sensitivity: f64,
        readout: Vec<Readout>,
        curve: &'a lesion_eval::metrics::FrocCurve,
    }
    emit(
        &Summary {
            target: a.grade.map_or("CS", Grade::name),
            n_patients: curve.n_patients,
            n_gt_lesions: curve.n_gt_lesions,
            max_sensitivity: curve.max_sensitivity(),
            readout,
            curve: &curve,
        },
        None,
    )
}

fn check_kappa(label: &str, k: &KappaResult, w: &mut Warnings) {
    if k.degenerate {
        w.push(format!("{label}: degenerate expected disagreement; kappa set to {} by convention", k.kappa));
    }
    if let Some(b) = &k.bootstrap {
        if b.n_skipped > 0 {
            w.push(format!("{label}: {} of {} bootstrap resamples were empty", b.n_skipped, b.n_iterations));
        }
    }
}

fn kappa_of(
    records: &[lesion_eval::matching::DetectionRecord],
    iterations: usize,
    seed: u64,
    fn_as_gs6: bool,
    unit: BootstrapUnit,
) -> lesion_eval::Result<KappaResult> {
    if iterations == 0 {
        quadratic_weighted_kappa(&confusion_matrix(records, fn_as_gs6))
    } else {
        bootstrap_kappa(records, iterations, seed, fn_as_gs6, unit)
    }
}

fn kappa(cli: &Cli, a: &KappaArgs, w: &mut Warnings) -> Result<()> {
    let records = read_detection_csv(&a.detections)?;
    let k = kappa_of(&records, a.iterations, cli.seed.unwrap_or(0), a.fn_as_gs6, a.unit.into())?;
    check_kappa("kappa", &k, w);
    #[derive(Serialize)]
    struct Summary {
        variant: &'static str,
        n_records: usize,
        matrix: lesion_eval::metrics::ConfusionMatrix,
        kappa: KappaResult,
    }
    emit(
        &Summary {
            variant: if a.fn_as_gs6 { "fn_as_gs6" } else { "tp_only" },
            n_records: records.len(),
            matrix: confusion_matrix(&records, a.fn_as_gs6),
            kappa: k,
        },
        None,
    )
}

fn dice(a: &DiceArgs, w: &mut Warnings) -> Result<()> {
    let d = lesion_eval::metrics::dice_coefficient(&read_volume(&a.a)?, &read_volume(&a.b)?)?;
    if d.both_empty {
        w.push("both masks are empty; Dice set to 1".into());
    }
    emit(&d, None)
}

/// Paired columns of a CSV, optionally split by a grouping column. Groups
/// are keyed by their text and returned in sorted order.
fn read_pairs(a: &WilcoxonArgs) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| usage(format!("no column '{name}' in {}", a.input.display())))
    };
    let (ix, iy) = (col(&a.x)?, col(&a.y)?);
    let ig = a.group_by.as_deref().map(col).transpose()?;
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse()
                .with_context(|| format!("row {}: '{s}' is not a number", row + 2))
        };
        let key = ig.map_or(String::new(), |i| rec.get(i).unwrap_or("").trim().to_string());
        let e = groups.entry(key).or_default();
        e.0.push(num(ix)?);
        e.1.push(num(iy)?);
    }
    if groups.is_empty() {
        bail!(lesion_eval::Error::MissingData(format!("{} has no rows", a.input.display())));
    }
    Ok(groups)
}

fn wilcoxon(a: &WilcoxonArgs, w: &mut Warnings) -> Result<()> {
    let groups = read_pairs(a)?;
    #[derive(Serialize)]
    struct Group {
        group: String,
        n_pairs: usize,
        result: Option<WilcoxonResult>,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        pooling: &'static str,
        x: &'a str,
        y: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        group_by: Option<&'a str>,
        groups: Vec<Group>,
    }
    let mut out = Vec::new();
    for (key, (x, y)) in groups {
        let result = match wilcoxon_one_sided(&x, &y) {
            Ok(r) => Some(r),
            Err(lesion_eval::Error::Degenerate(msg)) if a.group_by.is_some() => {
                w.push(format!("group '{key}': {msg}"));
                None
            }
            Err(e) => return Err(e.into()),
        };
        out.push(Group {
            group: key,
            n_pairs: x.len(),
            result,
        });
    }
    emit(
        &Summary {
            pooling: if a.group_by.is_some() { "per_group" } else { "pooled" },
            x: &a.x,
            y: &a.y,
            group_by: a.group_by.as_deref(),
            groups: out,
        },
        None,
    )
}

fn px2(cli: &Cli, a: &Px2Args, w: &mut Warnings) -> Result<()> {
    let cfg = eval_config(cli, &a.cohort)?;
    let cases = load(&cfg, w)?;
    let points = read_points_csv(&a.points)?;
    let outs = outcomes(&cases, &points, &cfg)?;
    let records: Vec<_> = outs.iter().flat_map(PatientOutcome::point_records).collect();
    if records.is_empty() {
        bail!(lesion_eval::Error::Degenerate("no annotated points".into()));
    }
    let iterations = a.iterations.unwrap_or(cfg.bootstrap_iterations);
    let k = kappa_of(&records, iterations, cfg.bootstrap_seed, false, cfg.bootstrap_unit)?;
    check_kappa("point protocol", &k, w);

    #[derive(Serialize)]
    struct Point<'a> {
        patient_id: &'a str,
        voxel: [usize; 3],
        gs_label: Grade,
        predicted: Grade,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        n_points: usize,
        matrix: lesion_eval::metrics::ConfusionMatrix,
        kappa: KappaResult,
        points: Vec<Point<'a>>,
    }
    let pts = outs
        .iter()
        .flat_map(|o| {
            o.points.iter().map(|(p, g)| Point {
                patient_id: &p.patient_id,
                voxel: [p.x_vox, p.y_vox, p.z_vox],
                gs_label: p.gs_label,
                predicted: *g,
            })
        })
        .collect();
    emit(
        &Summary {
            n_points: records.len(),
            matrix: confusion_matrix(&records, false),
            kappa: k,
            points: pts,
        },
        None,
    )
}

fn losscheck(cli: &Cli, a: &LosscheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let report = gradcheck::run_all(cli.seed.unwrap_or(0), a.instances)?;
    let max = report
        .suites
        .iter()
        .map(|s| s.max_relative_error)
        .fold(0.0, f64::max);
    #[derive(Serialize)]
    struct Summary {
        tolerance: f64,
        max_relative_error: f64,
        passed: bool,
        report: gradcheck::GradCheckReport,
    }
    let passed = max < GRADIENT_TOLERANCE;
    emit(
        &Summary {
            tolerance: GRADIENT_TOLERANCE,
            max_relative_error: max,
            passed,
            report,
        },
        None,
    )?;
    if !passed {
        bail!("gradient check failed: max relative error {max:e} >= {GRADIENT_TOLERANCE:e}");
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs, w: &mut Warnings) -> Result<()> {
    let mut cfg = eval_config(cli, &a.cohort)?;
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(p) = &a.points {
        cfg.points_file = Some(p.clone());
    }
    if let Some(n) = a.bootstrap_iterations {
        cfg.bootstrap_iterations = n;
    }
    if a.report_only {
        cfg.write_intermediates = false;
    }
    let report = run_full_evaluation(&cfg)?;
    // already logged by the library
    w.0.extend(report.warnings.iter().cloned());

    #[derive(Serialize)]
    struct Kappa<'a> {
        variant: &'a str,
        pooled: Option<f64>,
        fold_mean: Option<f64>,
        fold_std: Option<f64>,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        output_dir: Option<&'a PathBuf>,
        n_patients: usize,
        n_folds: usize,
        prostate_dice_mean: f64,
        prostate_dice_std: f64,
        cs_n_gt_lesions: usize,
        cs_readout: &'a [Readout],
        kappa: Vec<Kappa<'a>>,
        n_warnings: usize,
    }
    emit(
        &Summary {
            output_dir: cfg.output_dir.as_ref(),
            n_patients: report.n_patients,
            n_folds: report.n_folds,
            prostate_dice_mean: report.prostate_dice.mean,
            prostate_dice_std: report.prostate_dice.std,
            cs_n_gt_lesions: report.cs_froc.n_gt_lesions,
            cs_readout: &report.cs_froc.readout,
            kappa: report
                .confusion
                .iter()
                .map(|c| Kappa {
                    variant: c.variant,
                    pooled: c.kappa.as_ref().map(|k| k.kappa),
                    fold_mean: c.fold_kappa_mean,
                    fold_std: c.fold_kappa_std,
                })
                .collect(),
            n_warnings: report.warnings.len(),
        },
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&usage("bad flag")), 2);
        assert_eq!(exit_code(&lesion_eval::Error::InvalidConnectivity(7).into()), 2);
        assert_eq!(exit_code(&lesion_eval::Error::MissingData("x".into()).into()), 3);
        assert_eq!(exit_code(&lesion_eval::Error::Degenerate("x".into()).into()), 3);
        let wrapped = anyhow::Error::from(lesion_eval::Error::InvalidConfig("x".into())).context("loading");
        assert_eq!(exit_code(&wrapped), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 3);
    }
}
