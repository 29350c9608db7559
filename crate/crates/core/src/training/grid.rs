use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{Kappa, LossConfig, LossVariant};
use super::trainer::{train_mf, TrainConfig};
use super::{Result, TrainError};
use crate::data::{DataSplit, Dataset};
use crate::evaluation::{
    errors_on, fairness_f, kl_divergence, ranking_accuracy, recommend_for_target, segment_distribution, POSITIVE_THRESHOLD,
};
use crate::recommenders::MfParams;

/// Per-kappa choice of `(lambda, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyCriterion {
    /// Lowest validation MSE.
    #[default]
    Rating,
    /// Highest validation NDCG@k.
    Ranking,
}

/// Choice among the per-kappa winners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessCriterion {
    /// Lowest validation F-statistic of errors.
    #[default]
    ErrorF,
    /// Lowest KL divergence between recommended and observed segment shares.
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub variant: LossVariant,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub kappas: Vec<Kappa>,
    pub accuracy: AccuracyCriterion,
    pub fairness: FairnessCriterion,
    pub k: usize,
}

impl GridSpec {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            alphas: vec![0.5, 1.0, 5.0, 10.0],
            kappas: Kappa::default_grid(),
            accuracy: AccuracyCriterion::Rating,
            fairness: FairnessCriterion::ErrorF,
            k: crate::evaluation::DEFAULT_K,
        }
    }

    /// Every configuration in search order; axes a variant ignores collapse.
    pub fn configs(&self) -> Vec<LossConfig> {
        let kappas = if self.variant.uses_kappa() { self.kappas.clone() } else { vec![Kappa::NONE] };
        let alphas = if self.variant.uses_alpha() { self.alphas.clone() } else { vec![0.0] };
        let mut out = Vec::new();
        for &kappa in &kappas {
            for &lambda in &self.lambdas {
                for &alpha in &alphas {
                    out.push(LossConfig { variant: self.variant, alpha, kappa, lambda });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: LossConfig,
    pub best_epoch: usize,
    pub val_mse: f64,
    pub val_f: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub val_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    /// Row index of the accuracy winner for each kappa, in kappa order.
    pub per_kappa: Vec<usize>,
    pub selected: usize,
}

impl GridOutcome {
    pub fn selected_row(&self) -> &GridRow {
        &self.rows[self.selected]
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "variant\tkappa\tlambda\talpha\tbest_epoch\tval_mse\tval_f\tval_ndcg\tval_kl\tselected")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for (idx, r) in self.rows.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
                r.config.variant.name(),
                r.config.kappa,
                r.config.lambda,
                r.config.alpha,
                r.best_epoch,
                r.val_mse,
                opt(r.val_f),
                opt(r.val_ndcg),
                opt(r.val_kl),
                if idx == self.selected { "*" } else if self.per_kappa.contains(&idx) { "+" } else { "" },
            )?;
        }
        Ok(())
    }
}

fn score_row(ds: &Dataset, split: &DataSplit, spec: &GridSpec, config: LossConfig, cfg: &TrainConfig) -> Result<GridRow> {
    let (params, history) = train_mf(ds, split, &config, cfg)?;
    let target = if split.validation.is_empty() { &split.train } else { &split.validation };
    let (errors, segments) = errors_on(&params, ds, target);
    let val_mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    let val_f = fairness_f(&errors, &segments).ok().map(|f| f.f);
    let val_ndcg = (spec.accuracy == AccuracyCriterion::Ranking)
        .then(|| ranking_accuracy(&params, ds, &split.train, target, spec.k, cfg.seed).ok().map(|r| r.ndcg))
        .flatten();
    let val_kl = (spec.fairness == FairnessCriterion::Kl).then(|| validation_kl(&params, ds, split, target, spec.k)).flatten();
    Ok(GridRow { config, best_epoch: history.best_epoch, val_mse, val_f, val_ndcg, val_kl })
}

fn validation_kl(params: &MfParams, ds: &Dataset, split: &DataSplit, target: &[usize], k: usize) -> Option<f64> {
    let recs = recommend_for_target(params, ds, &split.train, target, k);
    let rec_pairs: Vec<(usize, usize)> = recs.iter().flat_map(|(u, items)| items.iter().map(move |&i| (*u, i))).collect();
    let ref_pairs: Vec<(usize, usize)> = target
        .iter()
        .map(|&idx| &ds.interactions()[idx])
        .filter(|x| x.rating > POSITIVE_THRESHOLD)
        .map(|x| (x.user, x.item))
        .collect();
    let p = segment_distribution(&rec_pairs, ds).ok()?;
    let q = segment_distribution(&ref_pairs, ds).ok()?;
    kl_divergence(&p, &q).ok().map(|d| d.value)
}

/// Lower is better; `None` sorts last. Ties keep the earlier index.
fn argmin_by(indices: &[usize], key: impl Fn(usize) -> Option<f64>) -> usize {
    let val = |i: usize| key(i).filter(|v| !v.is_nan()).unwrap_or(f64::INFINITY);
    indices.iter().copied().fold(indices[0], |best, i| if val(i) < val(best) { i } else { best })
}

/// Two-stage search: for each kappa pick `(lambda, alpha)` by validation
/// accuracy, then pick among those winners by validation fairness.
/// Configurations train concurrently on `threads` workers; results do not
/// depend on the thread count.
pub fn grid_search(ds: &Dataset, split: &DataSplit, spec: &GridSpec, cfg: &TrainConfig, threads: usize) -> Result<GridOutcome> {
    let configs = spec.configs();
    if configs.is_empty() {
        return Err(TrainError::InvalidConfig("empty search grid".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let rows: Vec<GridRow> = pool.install(|| {
        configs.par_iter().map(|c| score_row(ds, split, spec, *c, cfg)).collect::<Result<Vec<_>>>()
    })?;

    let mut kappas: Vec<Kappa> = Vec::new();
    for r in &rows {
        if !kappas.contains(&r.config.kappa) {
            kappas.push(r.config.kappa);
        }
    }
    let per_kappa: Vec<usize> = kappas
        .iter()
        .map(|k| {
            let members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].config.kappa == *k).collect();
            match spec.accuracy {
                AccuracyCriterion::Rating => argmin_by(&members, |i| Some(rows[i].val_mse)),
                AccuracyCriterion::Ranking => argmin_by(&members, |i| rows[i].val_ndcg.map(|v| -v)),
            }
        })
        .collect();
    let selected = match spec.fairness {
        FairnessCriterion::ErrorF => argmin_by(&per_kappa, |i| rows[i].val_f),
        FairnessCriterion::Kl => argmin_by(&per_kappa, |i| rows[i].val_kl),
    };
    Ok(GridOutcome { rows, per_kappa, selected })
}
