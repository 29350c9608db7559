use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{accumulate_loss, accumulate_poisson, BatchEntry, LossBreakdown, LossConfig};
use super::{Result, TrainError};
use crate::data::{DataSplit, Dataset};
use crate::recommenders::{fit_neighbor, softplus, MfParams, Model, NeighborAxis, PoissonParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub d: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, batch_size: 512, d: 10, max_epochs: 200, patience: 5, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("batch_size, d and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Size-weighted mean of batch objectives.
    pub train_loss: f64,
    pub penalty: f64,
    pub skipped_terms: usize,
    pub validation_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation MSE).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub fn batch_entries(ds: &Dataset, indices: &[usize]) -> Vec<BatchEntry> {
    indices
        .iter()
        .map(|&idx| {
            let x = &ds.interactions()[idx];
            BatchEntry { user: x.user, item: x.item, rating: x.rating, segment: ds.segment_of_interaction(idx) }
        })
        .collect()
}

fn mean_rating(entries: &[BatchEntry]) -> f64 {
    entries.iter().map(|x| x.rating).sum::<f64>() / entries.len() as f64
}

/// Parameter coordinates a batch can move: the intercept plus the rows of
/// every user and item present.
fn touched_indices(batch: &[BatchEntry], params: &MfParams) -> Vec<usize> {
    let mut users: Vec<usize> = batch.iter().map(|x| x.user).collect();
    let mut items: Vec<usize> = batch.iter().map(|x| x.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let mut out = vec![0];
    out.extend(users.iter().map(|&u| params.b_user_index(u)));
    out.extend(items.iter().map(|&i| params.b_item_index(i)));
    for &u in &users {
        out.extend(params.gamma_user_range(u));
    }
    for &i in &items {
        out.extend(params.gamma_item_range(i));
    }
    out
}

type GradFn<'a> = dyn Fn(&[BatchEntry], &MfParams, Option<&mut [f64]>) -> Result<LossBreakdown> + 'a;

/// Shared mini-batch loop with early stopping on validation MSE.
fn fit(
    n_users: usize,
    n_items: usize,
    train: &[BatchEntry],
    validation: &[BatchEntry],
    b0: f64,
    cfg: &TrainConfig,
    objective: &GradFn<'_>,
    predict: &dyn Fn(&MfParams, usize, usize) -> f64,
) -> Result<(MfParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MfParams::init(n_users, n_items, cfg.d, b0, &mut rng);
    let mut grad = vec![0.0; params.as_slice().len()];
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() }, grad.len());
    let val_set = if validation.is_empty() { train } else { validation };
    let val_mse = |p: &MfParams| val_set.iter().map(|x| (predict(p, x.user, x.item) - x.rating).powi(2)).sum::<f64>() / val_set.len() as f64;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut penalty_sum, mut skipped) = (0.0, 0.0, 0);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| train[k]));
            let touched = touched_indices(&batch, &params);
            let loss = objective(&batch, &params, Some(&mut grad))?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            adam.step_at(params.as_mut_slice(), &grad, touched.iter().copied());
            if touched.iter().any(|&k| !params.as_slice()[k].is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            for &k in &touched {
                grad[k] = 0.0;
            }
            loss_sum += loss.total * chunk.len() as f64;
            penalty_sum += loss.penalty * chunk.len() as f64;
            skipped += loss.skipped_terms;
        }
        let validation_mse = val_mse(&params);
        let n = train.len() as f64;
        let record = EpochRecord { epoch, train_loss: loss_sum / n, penalty: penalty_sum / n, skipped_terms: skipped, validation_mse };
        log::debug!("epoch {epoch}: loss {:.5} val mse {:.5}", record.train_loss, validation_mse);
        history.epochs.push(record);
        if validation_mse < best.0 {
            best = (validation_mse, params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, history))
}

/// Matrix factorization under any of the rating losses.
pub fn train_mf(ds: &Dataset, split: &DataSplit, loss: &LossConfig, cfg: &TrainConfig) -> Result<(MfParams, TrainHistory)> {
    let train = batch_entries(ds, &split.train);
    let validation = batch_entries(ds, &split.validation);
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    fit(
        ds.n_users(),
        ds.n_items(),
        &train,
        &validation,
        mean_rating(&train),
        cfg,
        &|b, p, g| accumulate_loss(b, p, loss, g),
        &|p, u, i| p.score(u, i),
    )
}

/// Inverse of softplus, for starting the intercept at a target rate.
fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn train_poisson(ds: &Dataset, split: &DataSplit, lambda: f64, cfg: &TrainConfig) -> Result<(PoissonParams, TrainHistory)> {
    let train = batch_entries(ds, &split.train);
    let validation = batch_entries(ds, &split.validation);
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let (params, history) = fit(
        ds.n_users(),
        ds.n_items(),
        &train,
        &validation,
        softplus_inverse(mean_rating(&train)),
        cfg,
        &|b, p, g| accumulate_poisson(b, p, lambda, g),
        &|p, u, i| softplus(p.score(u, i)).max(f64::MIN_POSITIVE),
    )?;
    Ok((PoissonParams(params), history))
}

/// What to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mf { loss: LossConfig },
    PoissonMf { lambda: f64 },
    ItemCf { k: usize },
    UserCf { k: usize },
}

pub fn train_model(ds: &Dataset, split: &DataSplit, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    match spec {
        ModelSpec::Mf { loss } => train_mf(ds, split, loss, cfg).map(|(p, h)| (Model::Mf(p), h)),
        ModelSpec::PoissonMf { lambda } => train_poisson(ds, split, *lambda, cfg).map(|(p, h)| (Model::PoissonMf(p), h)),
        ModelSpec::ItemCf { k } | ModelSpec::UserCf { k } => {
            let axis = if matches!(spec, ModelSpec::ItemCf { .. }) { NeighborAxis::Item } else { NeighborAxis::User };
            let model = fit_neighbor(ds, &split.train, axis, *k).map_err(|_| TrainError::EmptyTrain)?;
            Ok((Model::Neighbor(model), TrainHistory::default()))
        }
    }
}
