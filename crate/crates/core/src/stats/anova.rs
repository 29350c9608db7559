use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lstsq::{lstsq, LstsqFit};
use super::special::f_sf;
use super::{Result, StatsError};
use crate::data::SegmentKey;

/// One row of an ANOVA table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTest {
    pub ss: f64,
    pub f: f64,
    pub dof_num: usize,
    pub dof_den: usize,
    pub p_value: f64,
}

/// Two-way ANOVA `outcome ~ product + user + product:user` with Type II sums of squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub product: EffectTest,
    pub user: EffectTest,
    pub interaction: EffectTest,
    pub residual_ss: f64,
    pub n_obs: usize,
    pub n_cells: usize,
}

struct Cell {
    user: usize,
    product: usize,
    count: f64,
    mean: f64,
}

#[derive(Clone, Copy)]
struct Terms {
    user: bool,
    product: bool,
    interaction: bool,
}

// Weighted least squares on cell means: the residual SS of any model nested in
// the cell-means model equals the within-cell SS plus this weighted fit's RSS.
fn fit_cells(cells: &[Cell], n_user: usize, n_product: usize, terms: Terms) -> LstsqFit {
    let w: Vec<f64> = cells.iter().map(|c| c.count.sqrt()).collect();
    let mut columns = vec![w.clone()];
    if terms.user {
        for level in 1..n_user {
            columns.push(cells.iter().zip(&w).map(|(c, w)| if c.user == level { *w } else { 0.0 }).collect());
        }
    }
    if terms.product {
        for level in 1..n_product {
            columns.push(cells.iter().zip(&w).map(|(c, w)| if c.product == level { *w } else { 0.0 }).collect());
        }
    }
    if terms.interaction {
        for a in 1..n_user {
            for b in 1..n_product {
                columns.push(
                    cells
                        .iter()
                        .zip(&w)
                        .map(|(c, w)| if c.user == a && c.product == b { *w } else { 0.0 })
                        .collect(),
                );
            }
        }
    }
    let y = cells.iter().zip(&w).map(|(c, w)| c.mean * w).collect();
    lstsq(columns, y)
}

fn effect(ss: f64, dof_num: usize, dof_den: usize, mse: f64) -> Result<EffectTest> {
    let ss = ss.max(0.0);
    if dof_num == 0 {
        return Ok(EffectTest { ss, f: 0.0, dof_num, dof_den, p_value: 1.0 });
    }
    let f = if mse > 0.0 {
        ss / dof_num as f64 / mse
    } else if ss > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let p_value = f_sf(f, dof_num as f64, dof_den as f64)?;
    Ok(EffectTest { ss, f, dof_num, dof_den, p_value })
}

pub fn anova_two_way(values: &[(f64, SegmentKey)]) -> Result<AnovaResult> {
    if values.len() < 2 {
        return Err(StatsError::DegenerateDesign("fewer than two observations".into()));
    }
    if values.iter().any(|(v, _)| !v.is_finite()) {
        return Err(StatsError::Domain("non-finite outcome".into()));
    }
    let mut user_levels: Vec<usize> = values.iter().map(|(_, k)| k.m).collect();
    user_levels.sort_unstable();
    user_levels.dedup();
    let mut product_levels: Vec<usize> = values.iter().map(|(_, k)| k.n).collect();
    product_levels.sort_unstable();
    product_levels.dedup();
    if user_levels.len() < 2 {
        return Err(StatsError::DegenerateDesign("user factor has a single level".into()));
    }
    if product_levels.len() < 2 {
        return Err(StatsError::DegenerateDesign("product factor has a single level".into()));
    }

    let mut sums: BTreeMap<SegmentKey, (f64, f64)> = BTreeMap::new();
    for &(v, key) in values {
        let e = sums.entry(key).or_insert((0.0, 0.0));
        e.0 += 1.0;
        e.1 += v;
    }
    let means: BTreeMap<SegmentKey, f64> = sums.iter().map(|(k, (c, s))| (*k, s / c)).collect();
    let residual_ss: f64 = values.iter().map(|(v, k)| (v - means[k]).powi(2)).sum();
    let cells: Vec<Cell> = sums
        .iter()
        .map(|(k, (count, _))| Cell {
            user: user_levels.binary_search(&k.m).unwrap(),
            product: product_levels.binary_search(&k.n).unwrap(),
            count: *count,
            mean: means[k],
        })
        .collect();
    let (nu, np) = (user_levels.len(), product_levels.len());

    let t = |user, product, interaction| Terms { user, product, interaction };
    let full = fit_cells(&cells, nu, np, t(true, true, true));
    let additive = fit_cells(&cells, nu, np, t(true, true, false));
    let user_only = fit_cells(&cells, nu, np, t(true, false, false));
    let product_only = fit_cells(&cells, nu, np, t(false, true, false));

    let n_obs = values.len();
    let n_cells = cells.len();
    if n_obs <= full.rank {
        return Err(StatsError::DegenerateDesign("no residual degrees of freedom".into()));
    }
    let dof_den = n_obs - full.rank;
    let mse = residual_ss / dof_den as f64;

    Ok(AnovaResult {
        product: effect(user_only.rss - additive.rss, additive.rank - user_only.rank, dof_den, mse)?,
        user: effect(product_only.rss - additive.rss, additive.rank - product_only.rank, dof_den, mse)?,
        interaction: effect(additive.rss - full.rss, full.rank - additive.rank, dof_den, mse)?,
        residual_ss,
        n_obs,
        n_cells,
    })
}
