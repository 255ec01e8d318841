//! Affect evaluation: agreement metrics, canonical correlation analysis,
//! RBF support vector regression and the blendshape-to-affect correlation
//! experiment built from them.

pub mod cca;
pub mod experiment;
pub mod metrics;
pub mod svr;

pub use cca::{cca_fit, CcaModel};
pub use experiment::{
    run_correlation_experiment, subject_split, ExperimentConfig, ExperimentData, PairedData, Report, ReportRow, SplitConfig,
};
pub use metrics::{ccc, ccc_checked, mse, pearson, Concordance};
pub use svr::{median_gamma, svr_fit, SvrModel, SvrParams};
