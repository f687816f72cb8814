//! Ranking metrics, reliability reports, and policy comparison.

mod metrics;
mod policy;
mod reliability;

pub use metrics::{average_precision, map_report, mean_average_precision, MapReport};
pub use policy::{compare_policies, PolicyReport, PolicyRun, PolicySummary};
pub use reliability::{reliability_report, ReliabilityReport, ReliabilityRow};
