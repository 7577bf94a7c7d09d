//! Sample-set metrics and checks of the recovery theory: exact empirical
//! Wasserstein-1, the projection lemma, restricted isometry constants, the
//! distribution-recovery bound, grid KL, mode statistics, RMSE and SSIM.

mod metrics;
mod projection;
mod ric;
mod wasserstein;

pub use metrics::{kl_grid_2d, kl_histogram_2d, mode_report, rmse, ssim, GridSpec, KlReport, ModeReport, SsimConfig};
pub use projection::{check_projection_lemma, project_signal, ProjectionLemma, PROJECTION_BUDGET};
pub use ric::{operator_norm, thm2_bound, RicLevel, RicProblem, RicReport, RIC_BUDGET};
pub use wasserstein::{assignment, w1_empirical, W1Estimate, EXACT_CAP};
