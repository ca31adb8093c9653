//! `lesion-eval`: command-line front end for the lesion evaluation toolkit.
//!
//! Every subcommand prints JSON on stdout (except `match`, which emits the
//! detection CSV) and logs warnings on stderr. Exit codes:
//!
//! * 0: success
//! * 2: configuration or usage error
//! * 3: data error (unreadable input, grid mismatch, no lesions, ...)
//! * 4: warnings were raised and `--strict` is set

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesion_eval::cluster::MapKind;
use lesion_eval::evaluate::ZoneFilter;
use lesion_eval::metrics::BootstrapUnit;
use lesion_eval::Grade;

#[derive(Debug, Parser)]
#[command(name = "lesion-eval", version, about = "Lesion segmentation evaluation toolkit")]
pub struct Cli {
    /// JSON config: an evaluation config for evaluate/match/froc/px2, a
    /// phantom config for phantom. Command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for the phantom generator, the bootstrap and the gradient suites.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Exit with code 4 when any warning is raised.
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resample, crop and normalize an intensity volume.
    Preprocess(PreprocessArgs),
    /// Write a synthetic cohort with its ledger.
    Phantom(PhantomArgs),
    /// List the lesion clusters of one volume.
    Cluster(ClusterArgs),
    /// Emit one detection record per ground-truth lesion as CSV.
    Match(MatchArgs),
    /// FROC curve of a cohort, binary CS or for one grade.
    Froc(FrocArgs),
    /// Confusion matrix and quadratic weighted kappa from a detection CSV.
    Kappa(KappaArgs),
    /// Dice of the non-zero voxels of two volumes.
    Dice(DiceArgs),
    /// One-sided Wilcoxon signed-rank test on two CSV columns.
    Wilcoxon(WilcoxonArgs),
    /// Point-based grading from annotated lesion centers.
    Px2(Px2Args),
    /// Check the analytic loss and attention-gate gradients against finite differences.
    Losscheck(LosscheckArgs),
    /// Run the full protocol and write the report bundle.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input intensity volume (`.vol.json` or its stem).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target spacing x,y,z in mm; z must equal the source slice thickness.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 3.0])]
    pub spacing: Vec<f64>,
    /// In-plane crop width,height in voxels.
    #[arg(long, value_delimiter = ',', default_values_t = [96, 96])]
    pub crop: Vec<usize>,
    /// Normalize each axial slice on its own instead of the whole volume.
    #[arg(long)]
    pub per_slice: bool,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Destination directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MapArg {
    Gs,
    Cs,
}

impl From<MapArg> for MapKind {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Gs => MapKind::Gs,
            MapArg::Cs => MapKind::Cs,
        }
    }
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Label volume; derived from `--probs` by argmax when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Directory holding `prob_0` .. `prob_5`; gives the cluster scores.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    #[arg(long, default_value_t = 26)]
    pub connectivity: u32,
    #[arg(long, default_value_t = 45.0)]
    pub min_volume_mm3: f64,
    #[arg(long, value_enum, default_value_t = MapArg::Gs)]
    pub map: MapArg,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Cohort location and matching settings shared by the cohort commands.
/// Unset flags fall back to `--config`, then to the built-in defaults.
#[derive(Debug, Args, Default)]
pub struct CohortArgs {
    /// Ground-truth directory with `<id>/labels` and optional `<id>/pz`, `<id>/tz`.
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    /// Prediction directory with `<id>/prob_0` .. `<id>/prob_5`.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Fold manifest JSON; `cohort.json` beside the ground truth is used when present.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub connectivity: Option<u32>,
    #[arg(long)]
    pub min_volume_mm3: Option<f64>,
    #[arg(long)]
    pub overlap_frac: Option<f64>,
    /// Restrict lesions to one zone: none, pz or tz.
    #[arg(long)]
    pub zone: Option<ZoneFilter>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FrocArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Per-grade FROC (GS6, GS3+4, GS4+3, GS>=8) instead of binary CS.
    #[arg(long)]
    pub grade: Option<Grade>,
    /// Also write the curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Lesion,
    Patient,
}

impl From<UnitArg> for BootstrapUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Lesion => BootstrapUnit::Lesion,
            UnitArg::Patient => BootstrapUnit::Patient,
        }
    }
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    /// Detection CSV as written by `match`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Count missed lesions as predicted GS6.
    #[arg(long)]
    pub fn_as_gs6: bool,
    /// Bootstrap resamples; 0 disables the bootstrap.
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = UnitArg::Lesion)]
    pub unit: UnitArg,
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

/// Tests H1: x > y. Rows are paired observations, for example one row per
/// (grade, fold) with the scores of two models. By default every row enters
/// a single pooled test (4 grades x 5 folds gives n = 20 pairs); with
/// `--group-by grade` each grade is tested separately on its fold pairs.
#[derive(Debug, Args)]
pub struct WilcoxonArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Column holding the values expected to be larger.
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    /// Run one test per distinct value of this column.
    #[arg(long)]
    pub group_by: Option<String>,
}

#[derive(Debug, Args)]
pub struct Px2Args {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Points CSV: `patient_id,x_vox,y_vox,z_vox,zone,gs_label`.
    #[arg(long)]
    pub points: PathBuf,
    /// Bootstrap resamples of the point records.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    /// Random instances per suite.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Bundle destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Points CSV for the point protocol.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub bootstrap_iterations: Option<usize>,
    /// Only write the report, dice and FROC/confusion files.
    #[arg(long)]
    pub report_only: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(warnings) => {
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if cli.strict && !warnings.is_empty() {
                eprintln!("{} warning(s) with --strict", warnings.len());
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
