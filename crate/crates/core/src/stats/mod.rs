//! Observational statistics: χ² independence tests, two-way ANOVA, segment
//! summaries, and the distribution functions used for their p-values.

use thiserror::Error;

mod anova;
mod chi2;
pub mod lstsq;
pub mod special;
mod summary;

pub use anova::{anova_two_way, AnovaResult, EffectTest};
pub use chi2::{chi2_independence, expected_counts, Chi2Result};
pub use special::{chi2_cdf, chi2_sf, f_cdf, f_sf};
pub use summary::{segment_means, CellSummary, SegmentSummary, Z_95};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("table has no counts")]
    EmptyTable,
    #[error("table rows have different lengths")]
    RaggedTable,
    #[error("a {rows}x{cols} table has no degrees of freedom")]
    DegenerateTable { rows: usize, cols: usize },
    #[error("expected count is zero in cell ({m}, {n})")]
    ZeroExpectedCell { m: usize, n: usize },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// Renders a p-value the way result tables print it.
pub fn format_p_value(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}
