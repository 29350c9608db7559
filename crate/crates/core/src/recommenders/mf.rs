use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Half-width of the uniform embedding initialization.
pub const INIT_SCALE: f64 = 0.01;

/// Matrix factorization parameters `s = b0 + b_i + b_u + <gamma_i, gamma_u>`.
///
/// Stored as one flat vector laid out as
/// `[b0 | b_user | b_item | gamma_user (row-major) | gamma_item (row-major)]`
/// so optimizers and gradients can treat the whole model as a single slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    values: Vec<f64>,
    n_users: usize,
    n_items: usize,
    d: usize,
}

impl MfParams {
    pub fn zeros(n_users: usize, n_items: usize, d: usize) -> Self {
        let len = 1 + n_users + n_items + (n_users + n_items) * d;
        Self { values: vec![0.0; len], n_users, n_items, d }
    }

    /// Offsets zero, intercept `b0`, embeddings uniform in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init<R: Rng + ?Sized>(n_users: usize, n_items: usize, d: usize, b0: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_users, n_items, d);
        p.values[0] = b0;
        let start = p.gamma_user_offset();
        for v in &mut p.values[start..] {
            *v = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        p
    }

    /// Zeroed parameters with the same shape, e.g. for a gradient.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_users, self.n_items, self.d)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn b0(&self) -> f64 {
        self.values[0]
    }

    pub fn set_b0(&mut self, v: f64) {
        self.values[0] = v;
    }

    pub fn b0_mut(&mut self) -> &mut f64 {
        &mut self.values[0]
    }

    pub fn b_user_index(&self, u: usize) -> usize {
        1 + u
    }

    pub fn b_item_index(&self, i: usize) -> usize {
        1 + self.n_users + i
    }

    fn gamma_user_offset(&self) -> usize {
        1 + self.n_users + self.n_items
    }

    pub fn gamma_user_range(&self, u: usize) -> std::ops::Range<usize> {
        let start = self.gamma_user_offset() + u * self.d;
        start..start + self.d
    }

    pub fn gamma_item_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.gamma_user_offset() + self.n_users * self.d + i * self.d;
        start..start + self.d
    }

    pub fn b_user(&self, u: usize) -> f64 {
        self.values[self.b_user_index(u)]
    }

    pub fn b_item(&self, i: usize) -> f64 {
        self.values[self.b_item_index(i)]
    }

    pub fn gamma_user(&self, u: usize) -> &[f64] {
        &self.values[self.gamma_user_range(u)]
    }

    pub fn gamma_item(&self, i: usize) -> &[f64] {
        &self.values[self.gamma_item_range(i)]
    }

    pub fn set_b_user(&mut self, u: usize, v: f64) {
        let idx = self.b_user_index(u);
        self.values[idx] = v;
    }

    pub fn set_b_item(&mut self, i: usize, v: f64) {
        let idx = self.b_item_index(i);
        self.values[idx] = v;
    }

    pub fn gamma_user_mut(&mut self, u: usize) -> &mut [f64] {
        let r = self.gamma_user_range(u);
        &mut self.values[r]
    }

    pub fn gamma_item_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.gamma_item_range(i);
        &mut self.values[r]
    }

    /// Unchecked score; panics on out-of-range indices.
    pub fn score(&self, u: usize, i: usize) -> f64 {
        let dot: f64 = self.gamma_user(u).iter().zip(self.gamma_item(i)).map(|(a, b)| a * b).sum();
        self.b0() + self.b_item(i) + self.b_user(u) + dot
    }

    fn check(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.n_users {
            return Err(ModelError::IndexOutOfRange { what: "user", index: u, size: self.n_users });
        }
        if i >= self.n_items {
            return Err(ModelError::IndexOutOfRange { what: "item", index: i, size: self.n_items });
        }
        Ok(())
    }

    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        self.check(u, i)?;
        Ok(self.score(u, i))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Factorization whose score passes through a softplus link, so every
/// prediction is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams(pub MfParams);

impl PoissonParams {
    pub fn linear(&self) -> &MfParams {
        &self.0
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        // floor keeps the rate positive where softplus underflows
        softplus(self.0.score(u, i)).max(f64::MIN_POSITIVE)
    }

    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        self.0.check(u, i)?;
        Ok(self.score(u, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only() {
        let mut p = MfParams::zeros(3, 4, 2);
        p.set_b0(3.0);
        assert_eq!(p.predict(2, 3).unwrap(), 3.0);
    }

    #[test]
    fn hand_computed_score() {
        let mut p = MfParams::zeros(1, 1, 2);
        p.set_b0(3.0);
        p.set_b_item(0, 0.5);
        p.set_b_user(0, -0.2);
        p.gamma_item_mut(0).copy_from_slice(&[1.0, 2.0]);
        p.gamma_user_mut(0).copy_from_slice(&[0.5, 0.5]);
        assert_abs_diff_eq!(p.predict(0, 0).unwrap(), 4.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_user_embedding_ignores_item_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MfParams::init(2, 3, 4, 1.0, &mut rng);
        p.gamma_user_mut(1).fill(0.0);
        let base = p.score(1, 0);
        p.gamma_item_mut(0).copy_from_slice(&[9.0, -3.0, 7.0, 1.0]);
        assert_eq!(p.score(1, 0), base);
    }

    #[test]
    fn out_of_range() {
        let p = MfParams::zeros(2, 2, 1);
        assert!(matches!(p.predict(0, 2), Err(ModelError::IndexOutOfRange { what: "item", .. })));
        assert!(matches!(p.predict(5, 0), Err(ModelError::IndexOutOfRange { what: "user", .. })));
    }

    #[test]
    fn init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MfParams::init(10, 20, 5, 3.5, &mut rng);
        assert_eq!(p.b0(), 3.5);
        assert!((0..10).all(|u| p.b_user(u) == 0.0));
        assert!((0..20).all(|i| p.b_item(i) == 0.0));
        assert!(p.gamma_item(19).iter().all(|v| v.abs() <= INIT_SCALE));
        assert!(p.gamma_user(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn softplus_values() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(10.0), 10.000_045_398_899_218, epsilon = 1e-12);
        assert_abs_diff_eq!(softplus(-800.0), 0.0);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn poisson_link_at_origin() {
        let p = PoissonParams(MfParams::zeros(1, 1, 1));
        assert_abs_diff_eq!(p.predict(0, 0).unwrap(), 0.693_147_180_559_945_3, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn linear_in_intercept(seed in 0u64..1000, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = MfParams::init(3, 3, 2, 0.0, &mut rng);
            for v in p.as_mut_slice() { *v = rng.random_range(-2.0..2.0); }
            let before: Vec<f64> = (0..9).map(|k| p.score(k / 3, k % 3)).collect();
            let b0 = p.b0();
            p.set_b0(b0 + c);
            for k in 0..9 {
                prop_assert!((p.score(k / 3, k % 3) - before[k] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poisson_positive_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let mut p = MfParams::zeros(1, 1, 3);
            let scale: f64 = rng.random_range(0.0..200.0);
            for v in p.as_mut_slice() {
                *v = rng.random_range(-scale..=scale);
            }
            let pred = PoissonParams(p).predict(0, 0).unwrap();
            assert!(pred > 0.0 && pred.is_finite());
        }
    }
}
