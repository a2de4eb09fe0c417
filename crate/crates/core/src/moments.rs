//! Sample moments over sets of vectors, plus the seeded random streams every
//! stochastic routine draws from.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

pub fn mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let d = samples.first().map_or(0, |s| s.len());
    let mut m = DVector::zeros(d);
    for s in samples {
        m += s;
    }
    m / samples.len() as f64
}

/// `tr(Σ_XY)` with the unbiased (n − 1) normalization.
pub fn cross_covariance_trace(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let (mx, my) = (mean(xs), mean(ys));
    let sum: f64 = xs.iter().zip(ys).map(|(x, y)| (x - &mx).dot(&(y - &my))).sum();
    sum / (n as f64 - 1.0)
}

/// Total variance `tr(Σ_X)`.
pub fn total_variance(xs: &[DVector<f64>]) -> f64 {
    cross_covariance_trace(xs, xs)
}

/// Linear correlation `tr(Σ_XY) / sqrt(tr(Σ_X)·tr(Σ_Y))`; zero when either
/// side has no spread.
pub fn trace_correlation(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> f64 {
    let denom = (total_variance(xs) * total_variance(ys)).sqrt();
    if denom > 0.0 {
        cross_covariance_trace(xs, ys) / denom
    } else {
        0.0
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&t, &[10.0, 20.0, 30.0, 40.0, 50.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&t, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // one adjacent swap: 1 − 6·2/(5·24) = 0.9
        assert!((spearman(&t, &[1.0, 3.0, 2.0, 4.0, 5.0]) - 0.9).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn moments_of_fixed_sets() {
        let xs: Vec<_> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect();
        // (1 + 1 + 4 + 4) / 3
        assert!((total_variance(&xs) - 10.0 / 3.0).abs() < 1e-14);
        let doubled: Vec<_> = xs.iter().map(|x| x * 2.0).collect();
        assert!((trace_correlation(&xs, &doubled) - 1.0).abs() < 1e-14);
        let consts = vec![DVector::from_row_slice(&[1.0, 1.0]); 4];
        assert_eq!(trace_correlation(&consts, &xs), 0.0);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..4).map(|_| seeded_stream(9, 1).random()).collect();
        let mut r1 = seeded_stream(9, 1);
        let mut r2 = seeded_stream(9, 2);
        let x: f64 = r1.random();
        let y: f64 = r2.random();
        assert_eq!(a[0], x);
        assert_ne!(x, y);
    }
}
