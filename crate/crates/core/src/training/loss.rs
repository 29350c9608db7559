use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::SegmentKey;
use crate::recommenders::{sigmoid, softplus, MfParams};

/// Within-group variation below this makes a penalty term undefined; such
/// terms are skipped for the batch.
pub const MIN_WITHIN_VARIATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Plain,
    /// Penalize segment differences in prediction error.
    CorrError,
    /// Penalize segment differences in predicted value.
    CorrValue,
    /// Average per-group MSE so every group weighs the same.
    Reweighted,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Plain => "plain",
            LossVariant::CorrError => "corr_error",
            LossVariant::CorrValue => "corr_value",
            LossVariant::Reweighted => "reweighted",
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, LossVariant::CorrError | LossVariant::CorrValue)
    }

    pub fn uses_kappa(self) -> bool {
        self != LossVariant::Plain
    }
}

impl FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" | "mse" => Ok(LossVariant::Plain),
            "corr_error" => Ok(LossVariant::CorrError),
            "corr_value" => Ok(LossVariant::CorrValue),
            "reweighted" => Ok(LossVariant::Reweighted),
            other => Err(format!("unknown loss variant {other:?}")),
        }
    }
}

/// Which grouping axes a fairness term acts on. Serialized as `"(u,p,m)"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Kappa {
    pub user: bool,
    pub product: bool,
    pub market: bool,
}

impl Kappa {
    pub const NONE: Kappa = Kappa { user: false, product: false, market: false };

    pub fn new(user: bool, product: bool, market: bool) -> Self {
        Self { user, product, market }
    }

    /// The five combinations searched by default.
    pub fn default_grid() -> Vec<Kappa> {
        vec![
            Kappa::new(true, false, false),
            Kappa::new(false, true, false),
            Kappa::new(false, false, true),
            Kappa::new(true, true, false),
            Kappa::new(true, true, true),
        ]
    }

    pub fn is_empty(self) -> bool {
        !(self.user || self.product || self.market)
    }

    fn terms(self) -> impl Iterator<Item = Term> {
        [(self.user, Term::User), (self.product, Term::Product), (self.market, Term::Market)]
            .into_iter()
            .filter_map(|(on, t)| on.then_some(t))
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.user as u8, self.product as u8, self.market as u8)
    }
}

impl TryFrom<String> for Kappa {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Kappa> for String {
    fn from(k: Kappa) -> String {
        k.to_string()
    }
}

impl FromStr for Kappa {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().trim_start_matches('(').trim_end_matches(')').split(',').map(str::trim).collect();
        let flag = |p: &str| match p {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("kappa entries must be 0 or 1, got {other:?}")),
        };
        match parts.as_slice() {
            [u, p, m] => Ok(Kappa::new(flag(u)?, flag(p)?, flag(m)?)),
            _ => Err(format!("kappa needs three entries, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Term {
    User,
    Product,
    Market,
}

impl Term {
    fn key(self, seg: SegmentKey) -> (usize, usize) {
        match self {
            Term::User => (seg.m, 0),
            Term::Product => (0, seg.n),
            Term::Market => (seg.m, seg.n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Penalty weight for the correlation variants.
    pub alpha: f64,
    pub kappa: Kappa,
    /// L2 weight on offsets and embeddings.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { variant: LossVariant::Plain, alpha: 0.0, kappa: Kappa::NONE, lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn plain(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }
}

/// One training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEntry {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub segment: Option<SegmentKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyValue {
    pub value: f64,
    /// Active terms skipped because fewer than two groups were present or the
    /// within-group variation vanished.
    pub skipped_terms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Plain MSE on the batch (NLL for the Poisson objective).
    pub mse: f64,
    /// Fairness part, before `alpha` scaling for the correlation variants.
    pub penalty: f64,
    pub regularization: f64,
    pub skipped_terms: usize,
}

pub fn mse_loss(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64)
}

/// Sum over active terms of between-group over within-group variation of
/// `values`. Entries with an unknown segment are left out.
pub fn parity_penalty(values: &[f64], segments: &[Option<SegmentKey>], kappa: Kappa) -> PenaltyValue {
    penalty_with_grad(values, segments, kappa, 0.0, None)
}

/// Adds `scale * d(penalty)/d(values[k])` into `grad[k]` when given.
fn penalty_with_grad(
    values: &[f64],
    segments: &[Option<SegmentKey>],
    kappa: Kappa,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> PenaltyValue {
    let mut out = PenaltyValue::default();
    for term in kappa.terms() {
        let mut groups: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
        for (v, seg) in values.iter().zip(segments) {
            if let Some(seg) = seg {
                let g = groups.entry(term.key(*seg)).or_insert((0, 0.0));
                g.0 += 1;
                g.1 += v;
            }
        }
        if groups.len() < 2 {
            out.skipped_terms += 1;
            continue;
        }
        let n: usize = groups.values().map(|g| g.0).sum();
        let nf = n as f64;
        let grand = groups.values().map(|g| g.1).sum::<f64>() / nf;
        let means: BTreeMap<(usize, usize), f64> = groups.iter().map(|(k, (c, s))| (*k, s / *c as f64)).collect();
        let between = groups.iter().map(|(k, (c, _))| *c as f64 * (means[k] - grand).powi(2)).sum::<f64>() / nf;
        let within = values
            .iter()
            .zip(segments)
            .filter_map(|(v, seg)| seg.map(|s| (v - means[&term.key(s)]).powi(2)))
            .sum::<f64>()
            / nf;
        if within < MIN_WITHIN_VARIATION {
            out.skipped_terms += 1;
            continue;
        }
        out.value += between / within;
        if let Some(grad) = grad.as_deref_mut() {
            for (k, (v, seg)) in values.iter().zip(segments).enumerate() {
                if let Some(s) = seg {
                    let mean_g = means[&term.key(*s)];
                    let d_between = 2.0 / nf * (mean_g - grand);
                    let d_within = 2.0 / nf * (v - mean_g);
                    grad[k] += scale * (d_between * within - between * d_within) / (within * within);
                }
            }
        }
    }
    out
}

/// Mean over active terms' groups of per-group MSE, summed over terms.
/// Adds `d/d(errors[k])` into `grad` when given.
fn reweighted_mse(errors: &[f64], segments: &[Option<SegmentKey>], kappa: Kappa, mut grad: Option<&mut [f64]>) -> (f64, usize) {
    let mut value = 0.0;
    let mut skipped = 0;
    for term in kappa.terms() {
        let mut groups: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
        for (e, seg) in errors.iter().zip(segments) {
            if let Some(seg) = seg {
                let g = groups.entry(term.key(*seg)).or_insert((0, 0.0));
                g.0 += 1;
                g.1 += e * e;
            }
        }
        if groups.is_empty() {
            skipped += 1;
            continue;
        }
        let g_count = groups.len() as f64;
        value += groups.values().map(|(c, s)| s / *c as f64).sum::<f64>() / g_count;
        if let Some(grad) = grad.as_deref_mut() {
            for (k, (e, seg)) in errors.iter().zip(segments).enumerate() {
                if let Some(s) = seg {
                    let n_g = groups[&term.key(*s)].0 as f64;
                    grad[k] += 2.0 * e / (n_g * g_count);
                }
            }
        }
    }
    (value, skipped)
}

/// `(lambda / |B|) * sum over entries of b_u^2 + b_i^2 + |gamma_u|^2 + |gamma_i|^2`.
fn regularization(batch: &[BatchEntry], params: &MfParams, lambda: f64, mut grad: Option<&mut [f64]>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let scale = lambda / batch.len() as f64;
    let mut total = 0.0;
    let values = params.as_slice();
    for x in batch {
        let mut touch = |idx: usize| {
            let v = values[idx];
            total += v * v;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += 2.0 * scale * v;
            }
        };
        touch(params.b_user_index(x.user));
        touch(params.b_item_index(x.item));
        for idx in params.gamma_user_range(x.user).chain(params.gamma_item_range(x.item)) {
            touch(idx);
        }
    }
    scale * total
}

/// Chain rule from per-entry score derivatives to parameters.
fn backprop(batch: &[BatchEntry], params: &MfParams, d_score: &[f64], grad: &mut [f64]) {
    for (x, &ds) in batch.iter().zip(d_score) {
        if ds == 0.0 {
            continue;
        }
        grad[0] += ds;
        grad[params.b_user_index(x.user)] += ds;
        grad[params.b_item_index(x.item)] += ds;
        let gu = params.gamma_user_range(x.user);
        let gi = params.gamma_item_range(x.item);
        let vals = params.as_slice();
        for (a, b) in gu.zip(gi) {
            let (ua, ib) = (vals[a], vals[b]);
            grad[a] += ds * ib;
            grad[b] += ds * ua;
        }
    }
}

/// Loss of `params` on `batch`; when `grad` is given, the gradient is added
/// into it (it must have the layout of `params`).
pub fn accumulate_loss(batch: &[BatchEntry], params: &MfParams, cfg: &LossConfig, mut grad: Option<&mut [f64]>) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let scores: Vec<f64> = batch.iter().map(|x| params.score(x.user, x.item)).collect();
    let errors: Vec<f64> = scores.iter().zip(batch).map(|(s, x)| s - x.rating).collect();
    let segments: Vec<Option<SegmentKey>> = batch.iter().map(|x| x.segment).collect();
    let mse = mse_loss(&errors)?;
    let mut d_score = vec![0.0; batch.len()];
    let want_grad = grad.is_some();
    let mut out = LossBreakdown { mse, ..Default::default() };

    match cfg.variant {
        LossVariant::Reweighted if !cfg.kappa.is_empty() => {
            let (value, skipped) = reweighted_mse(&errors, &segments, cfg.kappa, want_grad.then_some(&mut d_score[..]));
            out.penalty = value;
            out.skipped_terms = skipped;
            out.total = value;
        }
        variant => {
            out.total = mse;
            if want_grad {
                for (d, e) in d_score.iter_mut().zip(&errors) {
                    *d = 2.0 * e / n;
                }
            }
            let target = match variant {
                LossVariant::CorrError => Some(&errors),
                LossVariant::CorrValue => Some(&scores),
                _ => None,
            };
            if let Some(values) = target {
                let p = penalty_with_grad(values, &segments, cfg.kappa, cfg.alpha, want_grad.then_some(&mut d_score[..]));
                out.penalty = p.value;
                out.skipped_terms = p.skipped_terms;
                out.total += cfg.alpha * p.value;
            }
        }
    }

    if let Some(g) = grad.as_deref_mut() {
        backprop(batch, params, &d_score, g);
    }
    out.regularization = regularization(batch, params, cfg.lambda, grad);
    out.total += out.regularization;
    Ok(out)
}

pub fn total_loss(batch: &[BatchEntry], params: &MfParams, cfg: &LossConfig) -> Result<LossBreakdown> {
    accumulate_loss(batch, params, cfg, None)
}

/// Loss and its full analytic gradient.
pub fn loss_gradient(batch: &[BatchEntry], params: &MfParams, cfg: &LossConfig) -> Result<(LossBreakdown, MfParams)> {
    let mut grad = params.zeros_like();
    let loss = accumulate_loss(batch, params, cfg, Some(grad.as_mut_slice()))?;
    Ok((loss, grad))
}

/// Mean Poisson negative log-likelihood `rate - r ln(rate)` with rate
/// `softplus(linear score)`, plus the same L2 term as the rating loss.
pub fn accumulate_poisson(batch: &[BatchEntry], params: &MfParams, lambda: f64, mut grad: Option<&mut [f64]>) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut nll = 0.0;
    let mut d_score = vec![0.0; batch.len()];
    for (x, d) in batch.iter().zip(&mut d_score) {
        let z = params.score(x.user, x.item);
        let rate = softplus(z).max(f64::MIN_POSITIVE);
        nll += rate - x.rating * rate.ln();
        *d = (1.0 - x.rating / rate) * sigmoid(z) / n;
    }
    let mut out = LossBreakdown { mse: nll / n, total: nll / n, ..Default::default() };
    if let Some(g) = grad.as_deref_mut() {
        backprop(batch, params, &d_score, g);
    }
    out.regularization = regularization(batch, params, lambda, grad);
    out.total += out.regularization;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(m: usize, n: usize) -> Option<SegmentKey> {
        Some(SegmentKey::new(m, n))
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, -1.0, 2.0]).unwrap(), 2.0);
        assert!(matches!(mse_loss(&[]), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn penalty_hand_example() {
        let values = [0.0, 1.0, 2.0, 2.0, 3.0, 4.0];
        let segs = [seg(0, 0), seg(0, 0), seg(0, 0), seg(1, 1), seg(1, 1), seg(1, 1)];
        let p = parity_penalty(&values, &segs, Kappa::new(false, false, true));
        assert_abs_diff_eq!(p.value, 1.5, epsilon = 1e-12);
        assert_eq!(p.skipped_terms, 0);
        // the two segments also differ on both single axes
        let all = parity_penalty(&values, &segs, Kappa::new(true, true, true));
        assert_abs_diff_eq!(all.value, 4.5, epsilon = 1e-12);
    }

    #[test]
    fn penalty_zero_for_equal_means() {
        let values = [1.0, 3.0, 0.0, 4.0];
        let segs = [seg(0, 0), seg(0, 0), seg(1, 1), seg(1, 1)];
        assert_eq!(parity_penalty(&values, &segs, Kappa::new(true, true, true)).value, 0.0);
    }

    #[test]
    fn penalty_skips_degenerate_terms() {
        let segs = [seg(0, 0), seg(0, 1), seg(0, 0), seg(0, 1)];
        // one user group only: user term skipped
        let p = parity_penalty(&[1.0, 2.0, 3.0, 5.0], &segs, Kappa::new(true, false, false));
        assert_eq!((p.value, p.skipped_terms), (0.0, 1));
        // zero within-group variation
        let p = parity_penalty(&[1.0, 2.0, 1.0, 2.0], &segs, Kappa::new(false, true, false));
        assert_eq!((p.value, p.skipped_terms), (0.0, 1));
        let p = parity_penalty(&[1.0, 2.0], &[None, None], Kappa::new(true, true, true));
        assert_eq!(p.skipped_terms, 3);
    }

    #[test]
    fn corr_error_total_loss() {
        // one user, six items; scores all zero so errors are minus the ratings
        let ratings = [0.0, -1.0, -2.0, -2.0, -3.0, -4.0];
        let params = MfParams::zeros(1, 6, 2);
        let batch: Vec<BatchEntry> = ratings
            .iter()
            .enumerate()
            .map(|(i, &r)| BatchEntry { user: 0, item: i, rating: r, segment: seg(i / 3, i / 3) })
            .collect();
        let cfg = LossConfig { variant: LossVariant::CorrError, alpha: 2.0, kappa: Kappa::new(false, false, true), lambda: 0.0 };
        let l = total_loss(&batch, &params, &cfg).unwrap();
        let mse = ratings.iter().map(|r| r * r).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(l.total, mse + 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.penalty, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn reweighted_balances_groups() {
        let params = MfParams::zeros(1, 4, 1);
        let batch = [
            BatchEntry { user: 0, item: 0, rating: 1.0, segment: seg(0, 0) },
            BatchEntry { user: 0, item: 1, rating: 1.0, segment: seg(0, 0) },
            BatchEntry { user: 0, item: 2, rating: 1.0, segment: seg(0, 0) },
            BatchEntry { user: 0, item: 3, rating: 3.0, segment: seg(0, 1) },
        ];
        let cfg = LossConfig { variant: LossVariant::Reweighted, kappa: Kappa::new(false, true, false), lambda: 0.0, alpha: 0.0 };
        // group MSEs 1 and 9 averaged, where plain MSE would be 3
        assert_abs_diff_eq!(total_loss(&batch, &params, &cfg).unwrap().total, 5.0, epsilon = 1e-12);
        let no_kappa = LossConfig { kappa: Kappa::NONE, ..cfg };
        assert_abs_diff_eq!(total_loss(&batch, &params, &no_kappa).unwrap().total, 3.0, epsilon = 1e-12);
    }

    fn random_problem(seed: u64) -> (Vec<BatchEntry>, MfParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni, d) = (5, 5, 3);
        let mut params = MfParams::zeros(nu, ni, d);
        for v in params.as_mut_slice() {
            *v = rng.random_range(-0.8..0.8);
        }
        params.set_b0(3.0);
        let mut batch = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random_bool(0.7) {
                    let segment = if u == 4 { None } else { seg(u % 2, i % 2) };
                    batch.push(BatchEntry { user: u, item: i, rating: rng.random_range(1..=5) as f64, segment });
                }
            }
        }
        (batch, params)
    }

    fn check_gradient(batch: &[BatchEntry], params: &MfParams, eval: &dyn Fn(&MfParams, Option<&mut [f64]>) -> f64) {
        let mut grad = params.zeros_like();
        eval(params, Some(grad.as_mut_slice()));
        let h = 1e-5;
        for k in 0..params.as_slice().len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[k] -= h;
            let numeric = (eval(&plus, None) - eval(&minus, None)) / (2.0 * h);
            let analytic = grad.as_slice()[k];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(err < 1e-4, "param {k}: analytic {analytic} numeric {numeric} ({} entries)", batch.len());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let variants = [LossVariant::Plain, LossVariant::CorrError, LossVariant::CorrValue, LossVariant::Reweighted];
        for (s, variant) in variants.iter().enumerate() {
            for (j, kappa) in Kappa::default_grid().into_iter().enumerate() {
                let (batch, params) = random_problem(100 * s as u64 + j as u64);
                let cfg = LossConfig { variant: *variant, alpha: 1.5, kappa, lambda: 0.1 };
                check_gradient(&batch, &params, &|p, g| accumulate_loss(&batch, p, &cfg, g).unwrap().total);
            }
        }
    }

    #[test]
    fn poisson_gradient_matches_finite_differences() {
        let (batch, mut params) = random_problem(77);
        params.set_b0(1.0);
        check_gradient(&batch, &params, &|p, g| accumulate_poisson(&batch, p, 0.1, g).unwrap().total);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn penalty_nonnegative(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..30);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let segs: Vec<_> = (0..n).map(|_| seg(rng.random_range(0..2), rng.random_range(0..3))).collect();
            let p = parity_penalty(&values, &segs, Kappa::new(true, true, true));
            prop_assert!(p.value >= 0.0 && p.value.is_finite());
        }

        #[test]
        fn penalty_invariant_to_shift(seed in 0u64..100_000, shift in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
            let segs: Vec<_> = (0..20).map(|k| seg(k % 2, k % 3)).collect();
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let k = Kappa::new(true, true, true);
            let a = parity_penalty(&values, &segs, k).value;
            let b = parity_penalty(&shifted, &segs, k).value;
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn kappa_parse_and_display() {
        for k in Kappa::default_grid() {
            assert_eq!(k.to_string().parse::<Kappa>().unwrap(), k);
        }
        assert_eq!("1,0,1".parse::<Kappa>().unwrap(), Kappa::new(true, false, true));
        assert!("1,2,0".parse::<Kappa>().is_err());
        assert_eq!("corr-error".parse::<LossVariant>().unwrap(), LossVariant::CorrError);
    }
}
