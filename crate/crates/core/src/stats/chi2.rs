use serde::{Deserialize, Serialize};

use super::special::chi2_sf;
use super::{Result, StatsError};

/// Pearson χ² test of independence on an `M x N` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chi2Result {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub expected: Vec<Vec<f64>>,
    /// Observed minus expected, per cell.
    pub deviations: Vec<Vec<f64>>,
}

fn shape(observed: &[Vec<f64>]) -> Result<(usize, usize)> {
    let rows = observed.len();
    let cols = observed.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(StatsError::EmptyTable);
    }
    if observed.iter().any(|r| r.len() != cols) {
        return Err(StatsError::RaggedTable);
    }
    if observed.iter().flatten().any(|&c| !c.is_finite() || c < 0.0) {
        return Err(StatsError::Domain("counts must be finite and non-negative".into()));
    }
    Ok((rows, cols))
}

/// Expected cell counts under independence: row total times column total over grand total.
pub fn expected_counts(observed: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (rows, cols) = shape(observed)?;
    let row_totals: Vec<f64> = observed.iter().map(|r| r.iter().sum()).collect();
    let col_totals: Vec<f64> = (0..cols).map(|c| observed.iter().map(|r| r[c]).sum()).collect();
    let grand: f64 = row_totals.iter().sum();
    if grand <= 0.0 {
        return Err(StatsError::EmptyTable);
    }
    Ok((0..rows)
        .map(|r| (0..cols).map(|c| row_totals[r] * col_totals[c] / grand).collect())
        .collect())
}

pub fn chi2_independence(observed: &[Vec<f64>]) -> Result<Chi2Result> {
    let expected = expected_counts(observed)?;
    let (rows, cols) = (expected.len(), expected[0].len());
    if rows < 2 || cols < 2 {
        return Err(StatsError::DegenerateTable { rows, cols });
    }
    let mut statistic = 0.0;
    let mut deviations = vec![vec![0.0; cols]; rows];
    for m in 0..rows {
        for n in 0..cols {
            let e = expected[m][n];
            if e <= 0.0 {
                return Err(StatsError::ZeroExpectedCell { m, n });
            }
            let dev = observed[m][n] - e;
            deviations[m][n] = dev;
            statistic += dev * dev / e;
        }
    }
    let dof = (rows - 1) * (cols - 1);
    let p_value = chi2_sf(statistic, dof as f64)?;
    Ok(Chi2Result { statistic, dof, p_value, expected, deviations })
}
