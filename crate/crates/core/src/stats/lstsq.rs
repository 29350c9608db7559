//! Householder QR with column pivoting, used for the nested least-squares
//! fits behind the two-way ANOVA.

/// Residual sum of squares and numerical rank of a least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstsqFit {
    pub rss: f64,
    pub rank: usize,
}

const RANK_TOL: f64 = 1e-10;

/// Fits `y ~ X` where `columns` holds the columns of `X` (each of length `y.len()`).
///
/// Columns whose remaining norm falls below a relative tolerance are treated
/// as linearly dependent and dropped, so collinear indicator designs are fine.
pub fn lstsq(mut columns: Vec<Vec<f64>>, mut y: Vec<f64>) -> LstsqFit {
    let n = y.len();
    let p = columns.len();
    debug_assert!(columns.iter().all(|c| c.len() == n));

    let scale = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    let mut rank = 0;
    for k in 0..p.min(n) {
        // pivot on the largest remaining column norm
        let (best, best_norm) = (k..p)
            .map(|j| (j, columns[j][k..].iter().map(|v| v * v).sum::<f64>().sqrt()))
            .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best_norm <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        columns.swap(k, best);

        let alpha = if columns[k][k] > 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = columns[k][k..].to_vec();
        v[0] -= alpha;
        let v_norm2: f64 = v.iter().map(|x| x * x).sum();
        if v_norm2 > 0.0 {
            for col in columns.iter_mut().skip(k + 1) {
                reflect(&v, v_norm2, &mut col[k..]);
            }
            reflect(&v, v_norm2, &mut y[k..]);
        }
        columns[k][k] = alpha;
        columns[k][k + 1..].iter_mut().for_each(|x| *x = 0.0);
        rank += 1;
    }
    let rss = y[rank..].iter().map(|v| v * v).sum();
    LstsqFit { rss, rank }
}

fn reflect(v: &[f64], v_norm2: f64, target: &mut [f64]) {
    let dot: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
    let s = 2.0 * dot / v_norm2;
    for (t, vi) in target.iter_mut().zip(v) {
        *t -= s * vi;
    }
}
