//! Numerics for multi-class prostate lesion segmentation studies.
//!
//! The crate covers the whole chain from network outputs to reported
//! statistics:
//!
//! * [`volume`]: dense 3D grids, the on-disk `.vol.json`/`.vol.raw` format and
//!   in-plane preprocessing.
//! * [`netmath`]: weighted Dice + cross-entropy branch losses with analytic
//!   gradients, the scheduled global loss and the attention gate.
//! * [`cluster`]: connected components and GS / CS lesion maps.
//! * [`matching`]: true/false positive bookkeeping and grade assignment.
//! * [`metrics`]: FROC, confusion matrices, quadratic weighted kappa,
//!   bootstrap, Dice and the Wilcoxon signed-rank test.
//! * [`phantom`]: seeded synthetic cohorts with an exact ledger of what was
//!   injected.
//! * [`evaluate`]: the cohort-level evaluation protocol and report bundle.

pub mod cluster;
pub mod error;
pub mod evaluate;
pub mod grade;
pub mod matching;
pub mod metrics;
pub mod netmath;
pub mod phantom;
pub mod volume;

pub use error::{Error, Result};
pub use grade::{Grade, LabelClass};
