//! Detection and grading statistics.

mod froc;
mod kappa;
mod stats;

pub use froc::{
    aggregate_folds, froc_by_grade, froc_curve, froc_from_maps, sensitivity_at_fp, AggregatedFroc,
    AggregatedPoint, FrocCurve, FrocPoint, PatientDetections, THRESHOLD_SENTINEL_EPS,
};
pub use kappa::{
    bootstrap_kappa, confusion_matrix, quadratic_weighted_kappa, BootstrapStats, BootstrapUnit,
    ConfusionMatrix, KappaResult,
};
pub use stats::{dice_coefficient, mean_std, wilcoxon_one_sided, DiceScore, WilcoxonResult, EXACT_MAX_N};
