//! Item-based and user-based neighborhood collaborative filtering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::data::Dataset;

pub const DEFAULT_NEIGHBORS: usize = 50;

/// Minimum number of co-ratings for a non-zero similarity.
pub const MIN_CO_RATINGS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborAxis {
    Item,
    User,
}

/// Fitted neighborhood model.
///
/// Similarities are cosines of mean-centered rating vectors restricted to
/// co-rated coordinates. Each entity is centered on its own mean (item mean
/// for the item axis, user mean for the user axis). The model keeps its
/// training ratings so prediction needs no dataset access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborModel {
    pub axis: NeighborAxis,
    pub k: usize,
    pub global_mean: f64,
    user_mean: Vec<Option<f64>>,
    item_mean: Vec<Option<f64>>,
    /// Per user: `(item, rating)` sorted by item.
    by_user: Vec<Vec<(usize, f64)>>,
    /// Per item: `(user, rating)` sorted by user.
    by_item: Vec<Vec<(usize, f64)>>,
    /// Per axis entity: `(neighbor, similarity)` sorted by neighbor, zeros omitted.
    similarity: Vec<Vec<(usize, f64)>>,
}

fn mean(xs: &[(usize, f64)]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().map(|(_, r)| r).sum::<f64>() / xs.len() as f64)
}

pub fn fit_neighbor(ds: &Dataset, train: &[usize], axis: NeighborAxis, k: usize) -> Result<NeighborModel> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrain);
    }
    // repeated (user, item) pairs are averaged
    let mut cells: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for &idx in train {
        let x = &ds.interactions()[idx];
        let e = cells.entry((x.user, x.item)).or_insert((0.0, 0));
        e.0 += x.rating;
        e.1 += 1;
    }
    let mut by_user = vec![Vec::new(); ds.n_users()];
    let mut by_item = vec![Vec::new(); ds.n_items()];
    for (&(u, i), &(sum, count)) in &cells {
        let r = sum / count as f64;
        by_user[u].push((i, r));
        by_item[i].push((u, r));
    }
    // BTreeMap order leaves by_user sorted; by_item needs sorting by user
    for row in &mut by_item {
        row.sort_by_key(|&(u, _)| u);
    }
    let global_mean = cells.values().map(|(s, c)| s / *c as f64).sum::<f64>() / cells.len() as f64;
    let user_mean: Vec<Option<f64>> = by_user.iter().map(|r| mean(r)).collect();
    let item_mean: Vec<Option<f64>> = by_item.iter().map(|r| mean(r)).collect();

    let (entities, coordinates, entity_mean) = match axis {
        NeighborAxis::Item => (&by_item, &by_user, &item_mean),
        NeighborAxis::User => (&by_user, &by_item, &user_mean),
    };
    let similarity = centered_cosine(entities, coordinates, entity_mean);

    Ok(NeighborModel { axis, k, global_mean, user_mean, item_mean, by_user, by_item, similarity })
}

#[derive(Clone, Copy, Default)]
struct Acc {
    dot: f64,
    norm_a: f64,
    norm_b: f64,
    count: usize,
}

// `entities[a]` lists (coordinate, rating); `coordinates[c]` lists (entity, rating).
fn centered_cosine(
    entities: &[Vec<(usize, f64)>],
    coordinates: &[Vec<(usize, f64)>],
    entity_mean: &[Option<f64>],
) -> Vec<Vec<(usize, f64)>> {
    let n = entities.len();
    let mut scratch = vec![Acc::default(); n];
    let mut touched = Vec::new();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mean_a = match entity_mean[a] {
            Some(m) => m,
            None => {
                out.push(Vec::new());
                continue;
            }
        };
        // coordinates are visited in sorted order, so (a, b) and (b, a)
        // accumulate identical terms in identical order
        for &(c, r_a) in &entities[a] {
            let ca = r_a - mean_a;
            for &(b, r_b) in &coordinates[c] {
                if b == a {
                    continue;
                }
                let cb = r_b - entity_mean[b].expect("rated entity has a mean");
                let acc = &mut scratch[b];
                if acc.count == 0 {
                    touched.push(b);
                }
                acc.dot += ca * cb;
                acc.norm_a += ca * ca;
                acc.norm_b += cb * cb;
                acc.count += 1;
            }
        }
        touched.sort_unstable();
        let mut row = Vec::new();
        for &b in &touched {
            let acc = std::mem::take(&mut scratch[b]);
            if acc.count < MIN_CO_RATINGS {
                continue;
            }
            let den = acc.norm_a.sqrt() * acc.norm_b.sqrt();
            if den > 0.0 {
                let s = (acc.dot / den).clamp(-1.0, 1.0);
                if s != 0.0 {
                    row.push((b, s));
                }
            }
        }
        touched.clear();
        out.push(row);
    }
    out
}

impl NeighborModel {
    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    /// Similarity between two entities of the model's axis (0 when unrelated).
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        let row = &self.similarity[a];
        match row.binary_search_by_key(&b, |&(j, _)| j) {
            Ok(pos) => row[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn similarity_row(&self, a: usize) -> &[(usize, f64)] {
        &self.similarity[a]
    }

    pub fn user_mean(&self, u: usize) -> Option<f64> {
        self.user_mean[u]
    }

    pub fn item_mean(&self, i: usize) -> Option<f64> {
        self.item_mean[i]
    }

    fn fallback(&self, u: usize, i: usize) -> f64 {
        self.user_mean[u].or(self.item_mean[i]).unwrap_or(self.global_mean)
    }

    /// Mean-centered weighted average over the top-k most similar neighbors,
    /// falling back to user mean, then item mean, then global mean.
    pub fn score(&self, u: usize, i: usize) -> f64 {
        // (similarity, neighbor, centered rating)
        let mut candidates: Vec<(f64, usize, f64)> = match self.axis {
            NeighborAxis::Item => self.by_user[u]
                .iter()
                .filter(|&&(j, _)| j != i)
                .filter_map(|&(j, r)| {
                    let s = self.similarity(i, j);
                    (s != 0.0).then(|| (s, j, r - self.item_mean[j].unwrap_or(r)))
                })
                .collect(),
            NeighborAxis::User => self.by_item[i]
                .iter()
                .filter(|&&(v, _)| v != u)
                .filter_map(|&(v, r)| {
                    let s = self.similarity(u, v);
                    (s != 0.0).then(|| (s, v, r - self.user_mean[v].unwrap_or(r)))
                })
                .collect(),
        };
        let base = match self.axis {
            NeighborAxis::Item => self.item_mean[i],
            NeighborAxis::User => self.user_mean[u],
        };
        let base = match base {
            Some(b) if !candidates.is_empty() => b,
            _ => return self.fallback(u, i),
        };
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.truncate(self.k.max(1));
        let weight: f64 = candidates.iter().map(|c| c.0.abs()).sum();
        if weight <= 0.0 {
            return self.fallback(u, i);
        }
        let offset: f64 = candidates.iter().map(|c| c.0 * c.2).sum::<f64>() / weight;
        base + offset
    }

    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        if u >= self.n_users() {
            return Err(ModelError::IndexOutOfRange { what: "user", index: u, size: self.n_users() });
        }
        if i >= self.n_items() {
            return Err(ModelError::IndexOutOfRange { what: "item", index: i, size: self.n_items() });
        }
        Ok(self.score(u, i))
    }
}
