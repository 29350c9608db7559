//! Accuracy and market-fairness metrics for trained recommenders.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, SegmentKey};
use crate::recommenders::Predictor;
use crate::stats::f_sf;

/// Ratings strictly above this count as positive interactions.
pub const POSITIVE_THRESHOLD: f64 = 3.0;
pub const DEFAULT_K: usize = 10;
/// Additive smoothing applied when the reference has an empty cell the
/// compared distribution uses.
pub const KL_SMOOTHING: f64 = 1e-9;
/// Item universes above this size switch AUC to sampled negatives.
pub const EXHAUSTIVE_AUC_LIMIT: usize = 100_000;
pub const SAMPLED_NEGATIVES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate segments: {0}")]
    DegenerateSegments(String),
    #[error("no pairs with known identity")]
    EmptyAfterFiltering,
    #[error("distribution dimensions differ")]
    DimensionMismatch,
    #[error("no users with positive interactions")]
    NoPositives,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Mean squared and mean absolute error.
pub fn accuracy(predictions: &[f64], truths: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = predictions.len() as f64;
    let (se, ae) = predictions
        .iter()
        .zip(truths)
        .fold((0.0, 0.0), |(se, ae), (p, t)| (se + (p - t).powi(2), ae + (p - t).abs()));
    Ok((se / n, ae / n))
}

/// One-way ANOVA F-test of prediction errors against market segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessF {
    pub f: f64,
    pub dof_num: usize,
    pub dof_den: usize,
    pub p_value: f64,
    /// Between-segment variation.
    pub between: f64,
    /// Within-segment variation.
    pub within: f64,
    pub populated_cells: usize,
}

/// F-statistic of errors across populated segments; entries with unknown
/// segment are ignored. Degrees of freedom use the populated cell count.
pub fn fairness_f(errors: &[f64], segments: &[Option<SegmentKey>]) -> Result<FairnessF> {
    if errors.len() != segments.len() {
        return Err(EvalError::LengthMismatch(errors.len(), segments.len()));
    }
    let mut groups: BTreeMap<SegmentKey, (usize, f64)> = BTreeMap::new();
    let mut n = 0usize;
    let mut total = 0.0;
    for (e, seg) in errors.iter().zip(segments) {
        if let Some(key) = seg {
            let g = groups.entry(*key).or_insert((0, 0.0));
            g.0 += 1;
            g.1 += e;
            n += 1;
            total += e;
        }
    }
    let cells = groups.len();
    if cells < 2 {
        return Err(EvalError::DegenerateSegments(format!("{cells} populated segment(s)")));
    }
    if n <= cells {
        return Err(EvalError::DegenerateSegments("no within-segment degrees of freedom".into()));
    }
    let grand = total / n as f64;
    let means: BTreeMap<SegmentKey, f64> = groups.iter().map(|(k, (c, s))| (*k, s / *c as f64)).collect();
    let between = groups.iter().map(|(k, (c, _))| *c as f64 * (means[k] - grand).powi(2)).sum::<f64>() / n as f64;
    let within = errors
        .iter()
        .zip(segments)
        .filter_map(|(e, seg)| seg.map(|k| (e - means[&k]).powi(2)))
        .sum::<f64>()
        / n as f64;
    let (dof_num, dof_den) = (cells - 1, n - cells);
    let f = if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        (between / dof_num as f64) / (within / dof_den as f64)
    };
    let p_value = f_sf(f, dof_num as f64, dof_den as f64).expect("valid F arguments");
    Ok(FairnessF { f, dof_num, dof_den, p_value, between, within, populated_cells: cells })
}

/// Top `k` items by descending score, skipping `exclude` (sorted ascending).
/// Ties go to the smaller item index; NaN scores rank last.
pub fn topk<P: Predictor + ?Sized>(model: &P, user: usize, k: usize, exclude: &[usize]) -> Vec<usize> {
    let scores: Vec<f64> = (0..model.n_items()).map(|i| model.score(user, i)).collect();
    topk_from_scores(&scores, k, exclude)
}

fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    key(b).total_cmp(&key(a)).then(a.cmp(&b))
}

pub fn topk_from_scores(scores: &[f64], k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|i| exclude.binary_search(i).is_err()).collect();
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_by(|&a, &b| rank_cmp(scores, a, b));
    candidates
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub ndcg: f64,
    /// Users with at least one positive target interaction.
    pub n_users: usize,
}

/// Sorted train items per user.
pub fn train_items_by_user(ds: &Dataset, train: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); ds.n_users()];
    for &idx in train {
        let x = &ds.interactions()[idx];
        out[x.user].push(x.item);
    }
    for items in &mut out {
        items.sort_unstable();
        items.dedup();
    }
    out
}

/// Target items rated above [`POSITIVE_THRESHOLD`], grouped by user.
pub fn positives_by_user(ds: &Dataset, target: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &idx in target {
        let x = &ds.interactions()[idx];
        if x.rating > POSITIVE_THRESHOLD {
            out.entry(x.user).or_default().push(x.item);
        }
    }
    for items in out.values_mut() {
        items.sort_unstable();
        items.dedup();
    }
    out
}

/// Binary-gain NDCG of a ranked list against a positive set (sorted).
pub fn ndcg_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.binary_search(i).is_ok())
        .map(|(rank, _)| 1.0 / (rank as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..positives.len().min(k)).map(|rank| 1.0 / (rank as f64 + 2.0).log2()).sum();
    if ideal > 0.0 {
        dcg / ideal
    } else {
        0.0
    }
}

/// Fraction of (positive, negative) pairs ranked correctly; ties count half.
pub fn auc_from_scores(scores: &[f64], positives: &[usize], negatives: &[usize]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut neg: Vec<f64> = negatives.iter().map(|&i| scores[i]).collect();
    neg.sort_by(f64::total_cmp);
    let mut correct = 0.0;
    for &p in positives {
        let s = scores[p];
        let below = neg.partition_point(|&x| x < s);
        let tied = neg[below..].partition_point(|&x| x <= s);
        correct += below as f64 + 0.5 * tied as f64;
    }
    Some(correct / (positives.len() * neg.len()) as f64)
}

/// Per-user AUC and NDCG@k averaged over users with a positive in `target`.
///
/// Negatives are every item outside the user's train set and positive set;
/// above [`EXHAUSTIVE_AUC_LIMIT`] items, [`SAMPLED_NEGATIVES`] negatives per
/// positive are drawn with `seed`.
pub fn ranking_accuracy<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    train: &[usize],
    target: &[usize],
    k: usize,
    seed: u64,
) -> Result<RankingMetrics> {
    if target.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let train_items = train_items_by_user(ds, train);
    let positives = positives_by_user(ds, target);
    if positives.is_empty() {
        return Err(EvalError::NoPositives);
    }
    let n_items = model.n_items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auc_sum, mut auc_users, mut ndcg_sum) = (0.0, 0usize, 0.0);
    let mut scores = vec![0.0; n_items];
    for (&u, pos) in &positives {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = model.score(u, i);
        }
        let excluded = &train_items[u];
        let is_negative = |i: &usize| excluded.binary_search(i).is_err() && pos.binary_search(i).is_err();
        let negatives: Vec<usize> = if n_items > EXHAUSTIVE_AUC_LIMIT {
            let want = SAMPLED_NEGATIVES * pos.len();
            let mut drawn = Vec::with_capacity(want);
            while drawn.len() < want {
                let batch = sample(&mut rng, n_items, want.min(n_items));
                drawn.extend(batch.into_iter().filter(is_negative).take(want - drawn.len()));
            }
            drawn
        } else {
            (0..n_items).filter(is_negative).collect()
        };
        let pos_scorable: Vec<usize> = pos.iter().copied().filter(|i| excluded.binary_search(i).is_err()).collect();
        if let Some(auc) = auc_from_scores(&scores, &pos_scorable, &negatives) {
            auc_sum += auc;
            auc_users += 1;
        }
        let ranked = topk_from_scores(&scores, k, excluded);
        ndcg_sum += ndcg_at_k(&ranked, pos, k);
    }
    let n_users = positives.len();
    let auc = if auc_users > 0 { auc_sum / auc_users as f64 } else { 0.5 };
    Ok(RankingMetrics { auc, ndcg: ndcg_sum / n_users as f64, n_users })
}

/// Normalized frequencies over the `M x N` segment grid (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDistribution {
    pub n_user_groups: usize,
    pub n_item_groups: usize,
    pub probs: Vec<f64>,
    pub count: usize,
}

impl SegmentDistribution {
    pub fn from_counts(n_user_groups: usize, n_item_groups: usize, counts: &[usize]) -> Result<Self> {
        if counts.len() != n_user_groups * n_item_groups {
            return Err(EvalError::DimensionMismatch);
        }
        let count: usize = counts.iter().sum();
        if count == 0 {
            return Err(EvalError::EmptyAfterFiltering);
        }
        let probs = counts.iter().map(|&c| c as f64 / count as f64).collect();
        Ok(Self { n_user_groups, n_item_groups, probs, count })
    }

    pub fn prob(&self, key: SegmentKey) -> f64 {
        self.probs[key.flat(self.n_item_groups)]
    }
}

pub fn segment_distribution(pairs: &[(usize, usize)], ds: &Dataset) -> Result<SegmentDistribution> {
    let (m, n) = (ds.n_user_groups(), ds.n_item_groups());
    let mut counts = vec![0usize; m * n];
    for &(u, i) in pairs {
        if let Some(key) = ds.user_group(u).map(|g| SegmentKey::new(g, ds.item_group(i))) {
            counts[key.flat(n)] += 1;
        }
    }
    SegmentDistribution::from_counts(m, n, &counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlDivergence {
    pub value: f64,
    /// Set when `q` had a zero cell where `p` did not and both were smoothed.
    pub smoothed: bool,
}

/// `sum p ln(p / q)` in nats.
pub fn kl_divergence(p: &SegmentDistribution, q: &SegmentDistribution) -> Result<KlDivergence> {
    if p.probs.len() != q.probs.len() || p.n_item_groups != q.n_item_groups {
        return Err(EvalError::DimensionMismatch);
    }
    let needs_smoothing = p.probs.iter().zip(&q.probs).any(|(&pp, &qq)| pp > 0.0 && qq == 0.0);
    let (pv, qv) = if needs_smoothing {
        let smooth = |xs: &[f64]| -> Vec<f64> {
            let total: f64 = xs.iter().map(|x| x + KL_SMOOTHING).sum();
            xs.iter().map(|x| (x + KL_SMOOTHING) / total).collect()
        };
        (smooth(&p.probs), smooth(&q.probs))
    } else {
        (p.probs.clone(), q.probs.clone())
    };
    let value = pv
        .iter()
        .zip(&qv)
        .filter(|(pp, _)| **pp > 0.0)
        .map(|(pp, qq)| pp * (pp / qq).ln())
        .sum::<f64>()
        .max(0.0);
    Ok(KlDivergence { value, smoothed: needs_smoothing })
}

/// `MSE(outside segment) - MSE(inside segment)` per cell of an `m x n` grid;
/// `None` where either side is empty. Unknown segments are ignored.
pub fn diff_matrix(errors: &[f64], segments: &[Option<SegmentKey>], m: usize, n: usize) -> Vec<Vec<Option<f64>>> {
    let mut sq = vec![0.0; m * n];
    let mut cnt = vec![0usize; m * n];
    for (e, seg) in errors.iter().zip(segments) {
        if let Some(k) = seg {
            sq[k.flat(n)] += e * e;
            cnt[k.flat(n)] += 1;
        }
    }
    let total_sq: f64 = sq.iter().sum();
    let total_cnt: usize = cnt.iter().sum();
    (0..m)
        .map(|a| {
            (0..n)
                .map(|b| {
                    let c = a * n + b;
                    let out_cnt = total_cnt - cnt[c];
                    (cnt[c] > 0 && out_cnt > 0)
                        .then(|| (total_sq - sq[c]) / out_cnt as f64 - sq[c] / cnt[c] as f64)
                })
                .collect()
        })
        .collect()
}

/// Which target interactions define the reference segment distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSet {
    #[default]
    Positives,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub k: usize,
    pub reference: ReferenceSet,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, reference: ReferenceSet::Positives, seed: 0 }
    }
}

/// Accuracy and fairness of one model on one evaluation slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub n_eval: usize,
    pub mse: f64,
    pub mae: f64,
    pub fairness_f: Option<FairnessF>,
    pub k: usize,
    pub auc: Option<f64>,
    pub ndcg_at_k: Option<f64>,
    pub kl: Option<f64>,
    pub kl_smoothed: bool,
    pub diff_matrix: Vec<Vec<Option<f64>>>,
    pub rec_distribution: Option<SegmentDistribution>,
    pub reference_distribution: Option<SegmentDistribution>,
}

/// Top-k lists for every user appearing in `target`, in user order.
pub fn recommend_for_target<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    train: &[usize],
    target: &[usize],
    k: usize,
) -> Vec<(usize, Vec<usize>)> {
    let train_items = train_items_by_user(ds, train);
    let mut users: Vec<usize> = target.iter().map(|&idx| ds.interactions()[idx].user).collect();
    users.sort_unstable();
    users.dedup();
    users.into_iter().map(|u| (u, topk(model, u, k, &train_items[u]))).collect()
}

/// Errors `s - r` and segments of the `target` interactions.
pub fn errors_on<P: Predictor + ?Sized>(model: &P, ds: &Dataset, target: &[usize]) -> (Vec<f64>, Vec<Option<SegmentKey>>) {
    target
        .iter()
        .map(|&idx| {
            let x = &ds.interactions()[idx];
            (model.score(x.user, x.item) - x.rating, ds.segment_of_interaction(idx))
        })
        .unzip()
}

pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    model_name: &str,
    ds: &Dataset,
    dataset_name: &str,
    train: &[usize],
    target: &[usize],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if target.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (errors, segments) = errors_on(model, ds, target);
    let zeros = vec![0.0; errors.len()];
    let (mse, mae) = accuracy(&errors, &zeros)?;
    let fairness = match fairness_f(&errors, &segments) {
        Ok(f) => {
            let cells = ds.n_user_groups() * ds.n_item_groups();
            if f.populated_cells < cells {
                log::info!("fairness F uses {} populated cells of {cells}", f.populated_cells);
            }
            Some(f)
        }
        Err(e) => {
            log::warn!("fairness F unavailable: {e}");
            None
        }
    };
    let ranking = match ranking_accuracy(model, ds, train, target, opts.k, opts.seed) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("ranking metrics unavailable: {e}");
            None
        }
    };
    let recs = recommend_for_target(model, ds, train, target, opts.k);
    let rec_pairs: Vec<(usize, usize)> = recs.iter().flat_map(|(u, items)| items.iter().map(move |&i| (*u, i))).collect();
    let ref_pairs: Vec<(usize, usize)> = target
        .iter()
        .map(|&idx| &ds.interactions()[idx])
        .filter(|x| opts.reference == ReferenceSet::All || x.rating > POSITIVE_THRESHOLD)
        .map(|x| (x.user, x.item))
        .collect();
    let rec_distribution = segment_distribution(&rec_pairs, ds).ok();
    let reference_distribution = segment_distribution(&ref_pairs, ds).ok();
    let kl = match (&rec_distribution, &reference_distribution) {
        (Some(p), Some(q)) => Some(kl_divergence(p, q)?),
        _ => None,
    };
    Ok(MetricsReport {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        n_eval: target.len(),
        mse,
        mae,
        fairness_f: fairness,
        k: opts.k,
        auc: ranking.map(|r| r.auc),
        ndcg_at_k: ranking.map(|r| r.ndcg),
        kl: kl.map(|k| k.value),
        kl_smoothed: kl.is_some_and(|k| k.smoothed),
        diff_matrix: diff_matrix(&errors, &segments, ds.n_user_groups(), ds.n_item_groups()),
        rec_distribution,
        reference_distribution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    struct Table(Vec<Vec<f64>>);

    impl Predictor for Table {
        fn n_users(&self) -> usize {
            self.0.len()
        }
        fn n_items(&self) -> usize {
            self.0[0].len()
        }
        fn score(&self, u: usize, i: usize) -> f64 {
            self.0[u][i]
        }
    }

    fn seg(m: usize, n: usize) -> Option<SegmentKey> {
        Some(SegmentKey::new(m, n))
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(accuracy(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy(&[3.0], &[0.0]).unwrap(), (9.0, 3.0));
        assert_eq!(accuracy(&[], &[]), Err(EvalError::EmptyInput));
        assert_eq!(accuracy(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0)));
    }

    #[test]
    fn fairness_f_hand_example() {
        let errors = [0.0, 1.0, 2.0, 2.0, 3.0, 4.0];
        let segs = [seg(0, 0), seg(0, 0), seg(0, 0), seg(1, 1), seg(1, 1), seg(1, 1)];
        let f = fairness_f(&errors, &segs).unwrap();
        assert_abs_diff_eq!(f.between, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.within, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.f, 6.0, epsilon = 1e-12);
        assert_eq!((f.dof_num, f.dof_den), (1, 4));
        // mpmath reference for P(F(1,4) > 6)
        assert_abs_diff_eq!(f.p_value, 0.070_483_996_910_219_95, epsilon = 1e-12);
    }

    #[test]
    fn fairness_f_equal_means_and_degenerate() {
        let segs = [seg(0, 0), seg(0, 0), seg(1, 0), seg(1, 0)];
        assert_eq!(fairness_f(&[1.0, 3.0, 2.0, 2.0], &segs).unwrap().f, 0.0);
        assert_eq!(fairness_f(&[0.0; 4], &segs).unwrap().f, 0.0);
        assert!(matches!(fairness_f(&[1.0, 2.0], &[seg(0, 0), seg(0, 0)]), Err(EvalError::DegenerateSegments(_))));
        assert!(matches!(fairness_f(&[1.0, 2.0], &[seg(0, 0), seg(1, 0)]), Err(EvalError::DegenerateSegments(_))));
    }

    #[test]
    fn unknown_segments_are_ignored() {
        let errors = [0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 100.0];
        let segs = [seg(0, 0), seg(0, 0), seg(0, 0), seg(1, 1), seg(1, 1), seg(1, 1), None];
        assert_abs_diff_eq!(fairness_f(&errors, &segs).unwrap().f, 6.0, epsilon = 1e-12);
    }

    // Textbook one-way ANOVA with explicit group vectors.
    fn oneway_oracle(groups: &[Vec<f64>]) -> f64 {
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        let grand = all.iter().sum::<f64>() / all.len() as f64;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        let mut k = 0;
        for g in groups.iter().filter(|g| !g.is_empty()) {
            k += 1;
            let m = g.iter().sum::<f64>() / g.len() as f64;
            ssb += g.len() as f64 * (m - grand) * (m - grand);
            ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        (ssb / (k - 1) as f64) / (ssw / (all.len() - k) as f64)
    }

    #[test]
    fn fairness_f_matches_oneway_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n_seg = rng.random_range(2..=6);
            let n = rng.random_range(n_seg + 1..=50);
            let mut groups = vec![Vec::new(); n_seg];
            let mut errors = Vec::new();
            let mut segs = Vec::new();
            for j in 0..n {
                let g = if j < n_seg { j } else { rng.random_range(0..n_seg) };
                let e = rng.random_range(-3.0..3.0) + g as f64 * 0.3;
                groups[g].push(e);
                errors.push(e);
                segs.push(seg(g / 3, g % 3));
            }
            let f = fairness_f(&errors, &segs).unwrap();
            let oracle = oneway_oracle(&groups);
            assert!((f.f - oracle).abs() <= 1e-10 * oracle.max(1.0), "{} vs {}", f.f, oracle);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fairness_f_shift_and_scale_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errors: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
            let segs: Vec<_> = (0..40).map(|j| seg(j % 2, (j / 2) % 2)).collect();
            let base = fairness_f(&errors, &segs).unwrap().f;
            let shifted: Vec<f64> = errors.iter().map(|e| e + shift).collect();
            let scaled: Vec<f64> = errors.iter().map(|e| -scale * e).collect();
            prop_assert!((fairness_f(&shifted, &segs).unwrap().f - base).abs() <= 1e-8 * base.max(1.0));
            prop_assert!((fairness_f(&scaled, &segs).unwrap().f - base).abs() <= 1e-8 * base.max(1.0));
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identity(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..6).map(|_| rng.random_range(0..20)).collect();
            let b: Vec<usize> = (0..6).map(|_| rng.random_range(1..20)).collect();
            if let (Ok(p), Ok(q)) = (SegmentDistribution::from_counts(2, 3, &a), SegmentDistribution::from_counts(2, 3, &b)) {
                let d = kl_divergence(&p, &q).unwrap();
                prop_assert!(d.value >= 0.0);
                prop_assert!(!d.smoothed);
                prop_assert_eq_zero(kl_divergence(&p, &p).unwrap().value)?;
                if p.probs != q.probs {
                    prop_assert!(d.value > 0.0);
                }
            }
        }

        #[test]
        fn topk_excludes_train_and_is_unique(seed in 0u64..10_000, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..15).map(|_| rng.random_range(0..5) as f64).collect();
            let mut exclude: Vec<usize> = (0..15).filter(|_| rng.random_bool(0.3)).collect();
            exclude.sort_unstable();
            let list = topk_from_scores(&scores, k, &exclude);
            prop_assert!(list.len() <= k);
            prop_assert!(list.iter().all(|i| exclude.binary_search(i).is_err()));
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert!(sorted.len() == list.len());
            for w in list.windows(2) {
                prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
            }
        }
    }

    fn prop_assert_eq_zero(v: f64) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
        prop_assert!(v.abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn topk_ordering_and_exclusion() {
        assert_eq!(topk_from_scores(&[1.0, 2.0, 3.0], 2, &[]), vec![2, 1]);
        assert_eq!(topk_from_scores(&[1.0, 2.0, 3.0], 2, &[2]), vec![1, 0]);
        let mut scores = vec![0.0; 9];
        scores[4] = 5.0;
        scores[7] = 5.0;
        assert_eq!(topk_from_scores(&scores, 2, &[]), vec![4, 7]);
        assert_eq!(topk_from_scores(&[f64::NAN, 1.0], 2, &[]), vec![1, 0]);
    }

    #[test]
    fn ndcg_and_auc_by_hand() {
        assert_abs_diff_eq!(ndcg_at_k(&[5, 6, 7, 8], &[7], 10), 0.5, epsilon = 1e-12);
        assert_eq!(ndcg_at_k(&[7, 5], &[7], 10), 1.0);
        let scores = [0.5, 0.1, 0.9, 0.2, 0.7];
        // positive 4 (0.7) beats 0, 1, 3 but not 2
        assert_abs_diff_eq!(auc_from_scores(&scores, &[4], &[0, 1, 2, 3]).unwrap(), 0.75);
        assert_abs_diff_eq!(auc_from_scores(&scores, &[2], &[0, 1, 3, 4]).unwrap(), 1.0);
        assert_abs_diff_eq!(auc_from_scores(&[1.0, 1.0], &[0], &[1]).unwrap(), 0.5);
    }

    fn ranking_ds() -> Dataset {
        use crate::data::{DatasetBuilder, GroupVocab};
        let mut b = DatasetBuilder::new(
            GroupVocab::with_labels("u", ["A", "B"]).unwrap(),
            GroupVocab::with_labels("p", ["X", "Y"]).unwrap(),
        );
        // every user: two train items, one positive test item
        for u in 0..4 {
            let g = if u % 2 == 0 { "A" } else { "B" };
            for i in 0..6 {
                b.push(&format!("u{u}"), &format!("i{i}"), 2.0, 0, g, if i < 3 { "X" } else { "Y" }, None);
            }
        }
        let mut ds = b;
        ds.push("u0", "i0", 5.0, 1, "A", "X", None);
        ds.build().unwrap()
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let ds = ranking_ds();
        // u0 has train items 1..=3 only; target = last row (u0, i0, 5.0); negatives are items 4, 5
        let train: Vec<usize> = (1..24).filter(|i| ![4, 5].contains(i)).collect();
        let target = vec![24];
        let mut table = vec![vec![0.0; 6]; 4];
        table[0][0] = 10.0;
        let r = ranking_accuracy(&Table(table.clone()), &ds, &train, &target, 10, 0).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.ndcg, 1.0);
        assert_eq!(r.n_users, 1);
        table[0][0] = -10.0;
        let r = ranking_accuracy(&Table(table), &ds, &train, &target, 10, 0).unwrap();
        assert_eq!(r.auc, 0.0);
        assert!(matches!(ranking_accuracy(&Table(vec![vec![0.0; 6]; 4]), &ds, &train, &[1], 10, 0), Err(EvalError::NoPositives)));
    }

    #[test]
    fn random_ranking_auc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_items = 60;
        let mut total = 0.0;
        for _ in 0..200 {
            let scores: Vec<f64> = (0..n_items).map(|_| rng.random::<f64>()).collect();
            let positive = rng.random_range(0..n_items);
            let negatives: Vec<usize> = (0..n_items).filter(|&i| i != positive).collect();
            total += auc_from_scores(&scores, &[positive], &negatives).unwrap();
        }
        let mean = total / 200.0;
        assert!((mean - 0.5).abs() <= 0.05, "mean AUC {mean}");
    }

    #[test]
    fn segment_distribution_cases() {
        let ds = ranking_ds();
        // users 0,1 are groups A,B; items 0 and 3 are groups X,Y
        let d = segment_distribution(&[(0, 0), (0, 3), (1, 0), (1, 3)], &ds).unwrap();
        assert_eq!(d.probs, vec![0.25; 4]);
        let d = segment_distribution(&[(1, 3), (3, 4)], &ds).unwrap();
        assert_eq!(d.probs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn kl_cases() {
        let p = SegmentDistribution { n_user_groups: 1, n_item_groups: 2, probs: vec![0.5, 0.5], count: 2 };
        let q = SegmentDistribution { n_user_groups: 1, n_item_groups: 2, probs: vec![0.25, 0.75], count: 4 };
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap().value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.1438, epsilon = 1e-4);
        let point = SegmentDistribution { probs: vec![1.0, 0.0], ..p.clone() };
        assert_abs_diff_eq!(kl_divergence(&point, &p).unwrap().value, std::f64::consts::LN_2, epsilon = 1e-12);
        let r = kl_divergence(&p, &point).unwrap();
        assert!(r.smoothed && r.value > 0.0 && r.value.is_finite());
        let other = SegmentDistribution { n_user_groups: 1, n_item_groups: 3, probs: vec![1.0, 0.0, 0.0], count: 1 };
        assert_eq!(kl_divergence(&p, &other), Err(EvalError::DimensionMismatch));
    }

    #[test]
    fn diff_matrix_cases() {
        let segs = [seg(0, 0), seg(0, 0), seg(1, 1), seg(1, 1)];
        let d = diff_matrix(&[1.0, -1.0, 2.0, 2.0], &segs, 2, 2);
        assert_eq!(d[0][0], Some(3.0));
        assert_eq!(d[1][1], Some(-3.0));
        assert_eq!(d[0][1], None);
        let same = diff_matrix(&[1.0, 1.0, 1.0, -1.0], &segs, 2, 2);
        assert_eq!(same[0][0], Some(0.0));
        let single = diff_matrix(&[1.0, 2.0], &[seg(0, 0), seg(0, 0)], 2, 2);
        assert_eq!(single[0][0], None);
    }

    #[test]
    fn perfect_predictions_report() {
        let ds = ranking_ds();
        let train: Vec<usize> = (1..24).collect();
        let target: Vec<usize> = vec![0, 6, 12, 18, 24];
        let mut table = vec![vec![2.0; 6]; 4];
        table[0][0] = 5.0;
        // rows 0 and 24 are both (u0, i0) with different ratings; drop row 0
        let target = &target[1..];
        let r = evaluate(&Table(table), "oracle", &ds, "toy", &train, target, &EvalOptions::default()).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.fairness_f.unwrap().f, 0.0);
    }
}
