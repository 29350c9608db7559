//! Seeded generator of interaction data with known segment structure.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, DatasetBuilder, GroupVocab, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions_per_user: usize,
    pub user_groups: Vec<String>,
    pub item_groups: Vec<String>,
    /// Relative odds that a user of group `m` picks an item of group `n`,
    /// on top of the item group's size. All ones means no selection bias.
    pub selection_bias: Vec<Vec<f64>>,
    /// Additive rating shift per segment.
    pub segment_shift: Vec<Vec<f64>>,
    pub rating_base: f64,
    pub noise_sd: f64,
    pub latent_rank: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::balanced(2, 2)
    }
}

impl SynthConfig {
    /// `m x n` segments with no selection bias and no rating shift.
    pub fn balanced(m: usize, n: usize) -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            interactions_per_user: 20,
            user_groups: (0..m).map(|g| format!("U{g}")).collect(),
            item_groups: (0..n).map(|g| format!("P{g}")).collect(),
            selection_bias: vec![vec![1.0; n]; m],
            segment_shift: vec![vec![0.0; n]; m],
            rating_base: 3.5,
            noise_sd: 0.5,
            latent_rank: 3,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = (self.user_groups.len(), self.item_groups.len());
        let bad = |msg: String| Err(DataError::Invalid(msg));
        if m == 0 || n == 0 {
            return bad("need at least one user group and one item group".into());
        }
        if self.n_users < m || self.n_items < n {
            return bad("fewer users or items than groups".into());
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.n_items {
            return bad(format!("interactions per user must be in 1..={}", self.n_items));
        }
        let shaped = |g: &Vec<Vec<f64>>| g.len() == m && g.iter().all(|r| r.len() == n);
        if !shaped(&self.selection_bias) || !shaped(&self.segment_shift) {
            return bad(format!("selection_bias and segment_shift must be {m} x {n}"));
        }
        if self.selection_bias.iter().flatten().any(|p| !(*p >= 0.0 && p.is_finite()))
            || self.selection_bias.iter().any(|row| row.iter().all(|p| *p == 0.0))
        {
            return bad("propensities must be non-negative with a positive entry per row".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative".into());
        }
        Ok(())
    }
}

/// Group of each entity: the first `groups` entities cover every group once,
/// the rest are uniform.
fn assign_groups(rng: &mut ChaCha8Rng, count: usize, groups: usize) -> Vec<usize> {
    (0..count).map(|k| if k < groups { k } else { rng.random_range(0..groups) }).collect()
}

/// Draws the dataset. Identical configs give identical datasets.
///
/// Each user picks distinct items: first an item group with probability
/// proportional to `selection_bias[m][n] * |items in n|`, then a uniform unpicked
/// item of that group. Ratings are `base + <p_u, q_i> + shift + noise`,
/// clipped to `[1, 5]`, with latent factors scaled so the dot product has
/// variance `noise_sd^2`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (m, n) = (cfg.user_groups.len(), cfg.item_groups.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_group = assign_groups(&mut rng, cfg.n_users, m);
    let item_group = assign_groups(&mut rng, cfg.n_items, n);
    let mut items_by_group: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &g) in item_group.iter().enumerate() {
        items_by_group[g].push(i);
    }

    let d = cfg.latent_rank.max(1);
    let latent_sd = if cfg.latent_rank == 0 { 0.0 } else { (cfg.noise_sd / (d as f64).sqrt()).sqrt() };
    let latent = Normal::new(0.0, latent_sd).expect("finite std");
    let noise = Normal::new(0.0, cfg.noise_sd).expect("finite std");
    let draw_vec = |rng: &mut ChaCha8Rng, count: usize| -> Vec<Vec<f64>> {
        (0..count).map(|_| (0..d).map(|_| latent.sample(rng)).collect()).collect()
    };
    let p = draw_vec(&mut rng, cfg.n_users);
    let q = draw_vec(&mut rng, cfg.n_items);

    let mut builder = DatasetBuilder::new(
        GroupVocab::with_labels("user_attr", cfg.user_groups.iter().cloned())?,
        GroupVocab::with_labels("model_attr", cfg.item_groups.iter().cloned())?,
    );
    for u in 0..cfg.n_users {
        let mg = user_group[u];
        let mut remaining: Vec<Vec<usize>> = items_by_group.clone();
        for t in 0..cfg.interactions_per_user {
            let weights: Vec<f64> =
                (0..n).map(|g| cfg.selection_bias[mg][g] * remaining[g].len() as f64).collect();
            let g = WeightedIndex::new(&weights)
                .map_err(|_| DataError::Invalid(format!("user u{u} ran out of reachable items")))?
                .sample(&mut rng);
            let pick = rng.random_range(0..remaining[g].len());
            let i = remaining[g].swap_remove(pick);
            let dot: f64 = p[u].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
            let raw = cfg.rating_base + dot + cfg.segment_shift[mg][g] + noise.sample(&mut rng);
            builder.push(
                &format!("u{u}"),
                &format!("i{i}"),
                raw.clamp(1.0, 5.0),
                t as i64,
                &cfg.user_groups[mg],
                &cfg.item_groups[g],
                None,
            );
        }
    }
    builder.build()
}
