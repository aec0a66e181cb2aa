//! Estimators and test statistics used by the acceptance checks.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Floating-point sum kept exactly as a list of non-overlapping partials
/// (Shewchuk's algorithm). [`ExactSum::value`] is the correctly rounded
/// exact sum, so it does not depend on the order in which terms or partial
/// sums were combined.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.special += x;
            return;
        }
        let mut x = x;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        self.special += other.special;
    }

    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // round half-even across the remaining partials
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Count, sum and sum of squares with exact accumulation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    sum: ExactSum,
    sumsq: ExactSum,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum.add(x);
        self.sumsq.add(x * x);
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum.merge(&other.sum);
        self.sumsq.merge(&other.sumsq);
    }

    pub fn sum(&self) -> f64 {
        self.sum.value()
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum.value() / self.n as f64
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let s = self.sum.value();
        ((self.sumsq.value() - s * s / n) / (n - 1.0)).max(0.0)
    }

    pub fn se(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Sample mean, its standard error and the z-score against a target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZTest {
    pub mean: f64,
    pub se: f64,
    pub target: f64,
    pub z: f64,
}

impl ZTest {
    pub fn new(mean: f64, se: f64, target: f64) -> Self {
        let diff = mean - target;
        let z = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        Self { mean, se, target, z }
    }

    pub fn from_samples(samples: &[f64], target: f64) -> Self {
        let m: Moments = samples.iter().copied().collect();
        Self::new(m.mean(), m.se(), target)
    }

    pub fn from_moments(m: &Moments, target: f64) -> Self {
        Self::new(m.mean(), m.se(), target)
    }

    /// `|mean − target| ≤ k·SE + band`.
    pub fn within(&self, k: f64, band: f64) -> bool {
        (self.mean - self.target).abs() <= k * self.se + band
    }
}

/// Unbiased sample variance and its standard error `sqrt((m₄ − s⁴)/n)`,
/// with `m₄` the fourth central sample moment.
pub fn variance_se(samples: &[f64]) -> (f64, f64) {
    let m: Moments = samples.iter().copied().collect();
    if m.n < 2 {
        return (0.0, f64::NAN);
    }
    let mean = m.mean();
    let n = m.n as f64;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let s2 = m.variance();
    (s2, ((m4 - s2 * s2).max(0.0) / n).sqrt())
}

/// Two-sided z threshold for significance `alpha` split over `tests`
/// comparisons.
pub fn bonferroni_z(alpha: f64, tests: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - alpha / (2.0 * tests.max(1) as f64))
}

pub fn binomial_se(p: f64, n: u64) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Wilson score interval for a binomial proportion at `z` standard errors.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size used for the asymptotic distribution.
    pub effective_n: f64,
}

/// Kolmogorov survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut acc = 0.0;
        for j in 1..=10 {
            let k = (2 * j - 1) as f64;
            acc += (-k * k * pi2 / (8.0 * lambda * lambda)).exp();
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * acc).clamp(0.0, 1.0)
    } else {
        let mut acc = 0.0;
        for j in 1..=100 {
            let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            acc += if j % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        (2.0 * acc).clamp(0.0, 1.0)
    }
}

fn ks_p_value(d: f64, ne: f64) -> f64 {
    let root = ne.sqrt();
    kolmogorov_q((root + 0.12 + 0.11 / root) * d)
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        effective_n: n,
    }
}

/// Two-sample Kolmogorov–Smirnov test. Ties are handled by stepping both
/// empirical CDFs past equal values together.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, ne),
        effective_n: ne,
    }
}

/// Percentile bootstrap interval at `level` for a statistic of resampled
/// indices.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    n: usize,
    statistic: impl Fn(&[usize]) -> f64,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> (f64, f64) {
    if n == 0 || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut idx = vec![0usize; n];
    let mut values: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..n);
            }
            statistic(&idx)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let pos = (q * (resamples - 1) as f64).round() as usize;
        values[pos.min(resamples - 1)]
    };
    (pick(tail), pick(1.0 - tail))
}

/// Ordinary least squares fit `y = intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
    pub se_intercept: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> OlsFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let s2 = rss / (n - 2.0).max(1.0);
    OlsFit {
        slope,
        intercept,
        se_slope: (s2 / sxx).sqrt(),
        se_intercept: (s2 * (1.0 / n + mx * mx / sxx)).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exact_sum_cancels() {
        let s: ExactSum = [1e100, 1.0, -1e100, 1e-30].into_iter().collect();
        assert_eq!(s.value(), 1.0 + 1e-30);
        let t: ExactSum = [0.1; 10].into_iter().collect();
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn all_zero_samples_pass_with_zero_se() {
        let z = ZTest::from_samples(&[0.0; 50], 0.0);
        assert_eq!(z.se, 0.0);
        assert_eq!(z.z, 0.0);
        assert!(z.within(3.0, 0.0));
    }

    #[test]
    fn variance_se_matches_normal_theory() {
        let mut rng = stream(12, 0, StreamTag::Custom(1));
        let xs: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                2.0 * z
            })
            .collect();
        let (var, se) = variance_se(&xs);
        // for N(0, σ²) the variance of s² is 2σ⁴/n
        let expected = 4.0 * (2.0 / 20_000f64).sqrt();
        assert!((se / expected - 1.0).abs() < 0.05, "{se} vs {expected}");
        assert!((var - 4.0).abs() < 3.0 * expected);
    }

    #[test]
    fn normal_samples_have_small_z() {
        let mut rng = stream(11, 0, StreamTag::Custom(1));
        let xs: Vec<f64> = (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + z
            })
            .collect();
        let z = ZTest::from_samples(&xs, 1.0);
        assert!(z.z.abs() < 3.0, "{z:?}");
    }

    #[test]
    fn ks_uniform_self_test() {
        let mut rng = stream(12, 0, StreamTag::Custom(2));
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let r = ks_one_sample(&xs, |x| x.clamp(0.0, 1.0));
        assert!(r.p_value > 0.01, "{r:?}");
        let shifted: Vec<f64> = xs.iter().map(|x| x * 0.9).collect();
        assert!(ks_one_sample(&shifted, |x| x.clamp(0.0, 1.0)).p_value < 1e-6);
    }

    #[test]
    fn ks_two_sample_detects_shift() {
        let mut rng = stream(13, 0, StreamTag::Custom(3));
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
        let c: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &c).p_value < 1e-6);
        // identical lattice samples: statistic 0
        let l = vec![0.0, 0.05, 0.05, 0.1];
        assert_eq!(ks_two_sample(&l, &l).statistic, 0.0);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Q(1.0) = 0.26999967, Q(1.36) ≈ 0.0494
        assert!((kolmogorov_q(1.0) - 0.269_999_67).abs() < 1e-6);
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 5e-4);
        assert!((kolmogorov_q(1.17) - kolmogorov_q(1.19)).abs() < 0.02);
    }

    #[test]
    fn bonferroni_threshold() {
        assert!((bonferroni_z(0.05, 1) - 1.959_964).abs() < 1e-5);
        assert!(bonferroni_z(0.01, 10) > bonferroni_z(0.01, 1));
    }

    #[test]
    fn ols_recovers_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let f = ols(&x, &y);
        assert!((f.slope - 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_covers_mean() {
        let mut rng = stream(14, 0, StreamTag::Bootstrap);
        let xs: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = bootstrap_ci(
            xs.len(),
            |idx| idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64,
            999,
            0.99,
            &mut rng,
        );
        assert!(lo < 0.0 && 0.0 < hi, "({lo}, {hi})");
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson_interval(37, 100, 3.0);
        assert!(lo < 0.37 && 0.37 < hi);
        assert_eq!(wilson_interval(0, 0, 3.0), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn merge_order_is_irrelevant(xs in proptest::collection::vec(-1e6..1e6f64, 1..200), seed in 0u64..1000) {
            let whole: Moments = xs.iter().copied().collect();
            let mut shuffled = xs.clone();
            let mut rng = stream(seed, 0, StreamTag::Custom(4));
            shuffled.shuffle(&mut rng);
            let mut merged = Moments::default();
            for chunk in shuffled.chunks(7).rev() {
                let part: Moments = chunk.iter().copied().collect();
                merged.merge(&part);
            }
            prop_assert_eq!(whole.sum(), merged.sum());
            prop_assert_eq!(whole.mean(), merged.mean());
            prop_assert_eq!(whole.variance(), merged.variance());
        }
    }
}
