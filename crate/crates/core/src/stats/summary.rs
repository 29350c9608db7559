use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegmentKey;

/// z-quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: SegmentKey,
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
    pub ci_half_width: f64,
    /// Set when the cell has a single observation and no spread estimate.
    pub degenerate_ci: bool,
}

/// Descriptive statistics per populated segment, ordered by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub cells: Vec<CellSummary>,
}

impl SegmentSummary {
    pub fn get(&self, key: SegmentKey) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.key == key)
    }
}

pub fn segment_means(values: &[(f64, SegmentKey)]) -> SegmentSummary {
    let mut groups: BTreeMap<SegmentKey, Vec<f64>> = BTreeMap::new();
    for &(v, key) in values {
        groups.entry(key).or_default().push(v);
    }
    let cells = groups
        .into_iter()
        .map(|(key, xs)| {
            let count = xs.len();
            let mean = xs.iter().sum::<f64>() / count as f64;
            if count < 2 {
                return CellSummary { key, count, mean, std_err: 0.0, ci_half_width: 0.0, degenerate_ci: true };
            }
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            let std_err = (var / count as f64).sqrt();
            CellSummary { key, count, mean, std_err, ci_half_width: Z_95 * std_err, degenerate_ci: false }
        })
        .collect();
    SegmentSummary { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_observation_flags_ci() {
        let s = segment_means(&[(4.0, SegmentKey::new(1, 0))]);
        let c = s.get(SegmentKey::new(1, 0)).unwrap();
        assert_eq!(c.mean, 4.0);
        assert_eq!(c.ci_half_width, 0.0);
        assert!(c.degenerate_ci);
        assert!(s.get(SegmentKey::new(0, 0)).is_none());
    }

    #[test]
    fn three_values() {
        let k = SegmentKey::new(0, 0);
        let s = segment_means(&[(1.0, k), (2.0, k), (3.0, k)]);
        let c = s.get(k).unwrap();
        assert_abs_diff_eq!(c.mean, 2.0);
        assert_abs_diff_eq!(c.std_err, 1.0 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.ci_half_width, 1.96 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.ci_half_width, 1.132, epsilon = 1e-3);
    }

    #[test]
    fn identical_cells_identical_summaries() {
        let (a, b) = (SegmentKey::new(0, 1), SegmentKey::new(1, 0));
        let s = segment_means(&[(1.0, a), (5.0, a), (1.0, b), (5.0, b)]);
        let (ca, cb) = (s.get(a).unwrap(), s.get(b).unwrap());
        assert_eq!((ca.count, ca.mean, ca.std_err), (cb.count, cb.mean, cb.std_err));
    }
}
