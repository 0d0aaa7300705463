//! Evaluation suite: clustering agreement metrics, fault detection and
//! diagnosis metrics, the PCA + k-means baseline, and report assembly.
//! Everything here is a pure function over labels and predictions, safe to
//! call concurrently.

pub mod baseline;
pub mod fdd;
pub mod metrics;
pub mod report;

pub use baseline::{baseline_pca_kmeans, BaselineFit, BASELINE_DIMS};
pub use fdd::{fdd_metrics, ClusteringMetrics, FaultMetrics, FddInputs, FddReport};
pub use metrics::{acc, ari, nmi, ri, ContingencyTable};
pub use report::{build_report, read_report_json, render_report, write_report_files};
