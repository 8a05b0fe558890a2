//! Loss-ensemble statistics and scaling-law fits.
//!
//! Power laws `ε = C·N^(-α)` are fit by ordinary least squares of `ln ε`
//! on `ln N`; exponent trends `α = a·ln N + b` by OLS of `α` on `ln N`.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("value {0} must be positive and finite")]
    NonPositive(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("subset size {subset} exceeds ensemble size {n}")]
    SubsetTooLarge { subset: usize, n: usize },
    #[error("mask has {mask} entries for {points} points")]
    MaskLength { mask: usize, points: usize },
    #[error("bin edges must be finite and strictly ascending")]
    BadEdges,
    #[error("value {0} lies outside the histogram range")]
    OutOfRange(f64),
    #[error("abscissae are all equal; slope is undefined")]
    Degenerate,
}

fn check_positive(v: f64) -> Result<f64, StatsError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(StatsError::NonPositive(v))
    }
}

/// Identifies the grid cell an ensemble of losses belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnsembleKey {
    pub target: String,
    pub arch_id: String,
    pub n_m: usize,
    pub n_d: usize,
}

/// Test losses of independently trained realizations of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEnsemble {
    pub key: EnsembleKey,
    losses: Vec<f64>,
}

impl LossEnsemble {
    pub fn new(key: EnsembleKey, losses: Vec<f64>) -> Result<Self, StatsError> {
        for &l in &losses {
            check_positive(l)?;
        }
        Ok(Self { key, losses })
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

/// A location estimate with its dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageReport {
    pub n: usize,
    /// Mean ± standard error.
    pub arith: Estimate,
    /// `exp(mean ln ε)` ± `geo·sd(ln ε)/√n`.
    pub geo: Estimate,
    /// Median ± median absolute deviation.
    pub median: Estimate,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; NaN below two values.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn geometric_mean(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::TooFewPoints { needed: 1, got: 0 });
    }
    let logs = xs
        .iter()
        .map(|&x| check_positive(x).map(f64::ln))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(&logs).exp())
}

/// Arithmetic, geometric and median summaries of positive losses.
pub fn summarize(losses: &[f64]) -> Result<AverageReport, StatsError> {
    if losses.is_empty() {
        return Err(StatsError::TooFewPoints { needed: 1, got: 0 });
    }
    for &l in losses {
        check_positive(l)?;
    }
    let n = losses.len();
    let root_n = (n as f64).sqrt();
    let logs: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    let geo = mean(&logs).exp();
    let med = median(losses);
    let deviations: Vec<f64> = losses.iter().map(|l| (l - med).abs()).collect();
    Ok(AverageReport {
        n,
        arith: Estimate {
            value: mean(losses),
            err: sample_std(losses) / root_n,
        },
        geo: Estimate {
            value: geo,
            err: geo * sample_std(&logs) / root_n,
        },
        median: Estimate {
            value: med,
            err: median(&deviations),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub std: f64,
    pub subsets: usize,
}

/// Geometric means of `n_subsets` random subsets, each drawn without
/// replacement; returns their mean and sample standard deviation.
pub fn bootstrap_geomean(
    losses: &[f64],
    n_subsets: usize,
    subset_size: usize,
    seed: u64,
) -> Result<BootstrapSummary, StatsError> {
    if subset_size > losses.len() {
        return Err(StatsError::SubsetTooLarge {
            subset: subset_size,
            n: losses.len(),
        });
    }
    if subset_size == 0 || n_subsets == 0 {
        return Err(StatsError::TooFewPoints { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..n_subsets)
        .map(|_| {
            let mut picked: Vec<f64> = sample(&mut rng, losses.len(), subset_size)
                .into_iter()
                .map(|i| losses[i])
                .collect();
            // order-free summation keeps identical subsets bit-identical
            picked.sort_by(f64::total_cmp);
            geometric_mean(&picked)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let std = if n_subsets < 2 {
        0.0
    } else {
        sample_std(&means)
    };
    Ok(BootstrapSummary {
        mean: mean(&means),
        std,
        subsets: n_subsets,
    })
}

/// Ordinary least squares `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard errors; absent with only two points.
    pub slope_err: Option<f64>,
    pub intercept_err: Option<f64>,
    pub r_squared: f64,
    pub n: usize,
}

/// Fits are computed on points sorted by `(x, y)`, so the result does not
/// depend on input order down to the last bit.
pub fn ols(points: &[(f64, f64)]) -> Result<LinearFit, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: n });
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let nf = n as f64;
    let x_bar = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let y_bar = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        let (dx, dy) = (x - x_bar, y - y_bar);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(StatsError::Degenerate);
    }
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let ssr: f64 = pts
        .iter()
        .map(|&(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let (slope_err, intercept_err) = if n > 2 {
        let s2 = ssr / (nf - 2.0);
        (
            Some((s2 / sxx).sqrt()),
            Some((s2 * (1.0 / nf + x_bar * x_bar / sxx)).sqrt()),
        )
    } else {
        (None, None)
    };
    Ok(LinearFit {
        slope,
        intercept,
        slope_err,
        intercept_err,
        r_squared,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Exponent α in `ε = C·N^(-α)`.
    pub alpha: f64,
    pub alpha_err: Option<f64>,
    pub log_prefactor: f64,
    pub log_prefactor_err: Option<f64>,
    pub r_squared: f64,
    pub n_points: usize,
    /// Smallest and largest N that entered the fit.
    pub range: (f64, f64),
}

impl PowerLawFit {
    pub fn prefactor(&self) -> f64 {
        self.log_prefactor.exp()
    }

    pub fn predict(&self, n: f64) -> f64 {
        (self.log_prefactor - self.alpha * n.ln()).exp()
    }
}

fn masked(points: &[(f64, f64)], mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>, StatsError> {
    match mask {
        None => Ok(points.to_vec()),
        Some(m) if m.len() != points.len() => Err(StatsError::MaskLength {
            mask: m.len(),
            points: points.len(),
        }),
        Some(m) => Ok(points
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&p, _)| p)
            .collect()),
    }
}

/// Fit `ε = C·N^(-α)` to the `(N, ε)` points selected by `mask`.
pub fn fit_power_law(
    points: &[(f64, f64)],
    mask: Option<&[bool]>,
) -> Result<PowerLawFit, StatsError> {
    let selected = masked(points, mask)?;
    let logs = selected
        .iter()
        .map(|&(n, e)| Ok((check_positive(n)?.ln(), check_positive(e)?.ln())))
        .collect::<Result<Vec<_>, StatsError>>()?;
    let fit = ols(&logs)?;
    let lo = selected.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = selected
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PowerLawFit {
        alpha: -fit.slope,
        alpha_err: fit.slope_err,
        log_prefactor: fit.intercept,
        log_prefactor_err: fit.intercept_err,
        r_squared: fit.r_squared,
        n_points: fit.n,
        range: (lo, hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogFit {
    pub a: f64,
    pub a_err: Option<f64>,
    pub b: f64,
    pub b_err: Option<f64>,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Fit `α = a·ln N + b` to `(N, α)` points.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<LogFit, StatsError> {
    let logs = points
        .iter()
        .map(|&(n, a)| Ok((check_positive(n)?.ln(), a)))
        .collect::<Result<Vec<_>, StatsError>>()?;
    let fit = ols(&logs)?;
    Ok(LogFit {
        a: fit.slope,
        a_err: fit.slope_err,
        b: fit.intercept,
        b_err: fit.intercept_err,
        r_squared: fit.r_squared,
        n_points: fit.n,
    })
}

/// Counts per half-open bin `[edges[k], edges[k+1])`.
pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Vec<usize>, StatsError> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(StatsError::BadEdges);
    }
    let mut counts = vec![0; edges.len() - 1];
    for &v in values {
        // index of the first edge strictly greater than v
        let upper = edges.partition_point(|&e| e <= v);
        if upper == 0 || upper == edges.len() {
            return Err(StatsError::OutOfRange(v));
        }
        counts[upper - 1] += 1;
    }
    Ok(counts)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatsError::TooFewPoints {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Degenerate);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_summaries() {
        let r = summarize(&[4.0, 16.0]).unwrap();
        assert!((r.geo.value - 8.0).abs() < 1e-12);
        assert_eq!(r.arith.value, 10.0);
        assert_eq!(r.median.value, 10.0);

        let r = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((r.median.value, r.median.err), (3.0, 1.0));

        let mut losses = vec![1.0; 19];
        losses.push(100.0);
        let r = summarize(&losses).unwrap();
        assert!((r.geo.value - 100f64.powf(1.0 / 20.0)).abs() < 1e-9);
        assert!((r.arith.value - 5.95).abs() < 1e-9);

        let single = summarize(&[0.5]).unwrap();
        assert!(single.arith.err.is_nan() && single.geo.err.is_nan());
        assert_eq!(summarize(&[1.0, 0.0]), Err(StatsError::NonPositive(0.0)));
        assert!(LossEnsemble::new(
            EnsembleKey {
                target: "J".into(),
                arch_id: "l3n4".into(),
                n_m: 80_049,
                n_d: 256
            },
            vec![1.0, -1.0]
        )
        .is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let same = bootstrap_geomean(&[0.3; 10], 50, 5, 1).unwrap();
        assert!((same.mean - 0.3).abs() < 1e-15);
        assert_eq!(same.std, 0.0);
        let all = bootstrap_geomean(&[1.0, 2.0, 5.0, 0.1], 50, 4, 9).unwrap();
        assert_eq!(all.std, 0.0);
        assert!(matches!(
            bootstrap_geomean(&[1.0, 2.0], 50, 3, 0),
            Err(StatsError::SubsetTooLarge { .. })
        ));
        let data = [0.2, 0.9, 1.7, 0.05, 3.0, 0.4];
        assert_eq!(
            bootstrap_geomean(&data, 50, 3, 7).unwrap(),
            bootstrap_geomean(&data, 50, 3, 7).unwrap()
        );
    }

    #[test]
    fn power_law_exact_cases() {
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|k| 256.0 * 2f64.powi(k))
            .map(|n| (n, 10.0 * n.powf(-1.5)))
            .collect();
        let f = fit_power_law(&pts, None).unwrap();
        assert!((f.alpha - 1.5).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!((f.prefactor() - 10.0).abs() < 1e-9);

        let two = fit_power_law(&[(100.0, 1.0), (10_000.0, 0.01)], None).unwrap();
        assert!((two.alpha - 1.0).abs() < 1e-14);
        assert!(two.alpha_err.is_none());

        assert!(matches!(
            fit_power_law(&[(1.0, 1.0)], None),
            Err(StatsError::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, -1.0)], None),
            Err(StatsError::NonPositive(_))
        ));
    }

    #[test]
    fn mask_selects_fit_points() {
        let mut pts: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&n: &f64| (n, n.powf(-2.0)))
            .collect();
        pts.push((4096.0, 1.0));
        let mask = [true, true, true, true, false];
        let f = fit_power_law(&pts, Some(&mask)).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-12);
        assert_eq!(f.range, (256.0, 2048.0));
        assert!(fit_power_law(&pts, Some(&mask[..3])).is_err());
    }

    #[test]
    fn log_linear_fits() {
        let pts: Vec<(f64, f64)> = [
            224.0, 448.0, 896.0, 1792.0, 3584.0, 7168.0, 14336.0, 28672.0,
        ]
        .iter()
        .map(|&n: &f64| (n, 0.151 * n.ln() - 0.59))
        .collect();
        let f = fit_log_linear(&pts).unwrap();
        assert!((f.a - 0.151).abs() < 1e-12 && (f.b + 0.59).abs() < 1e-12);
        let c = fit_log_linear(&[(10.0, 1.2), (100.0, 1.2), (1000.0, 1.2)]).unwrap();
        assert!(c.a.abs() < 1e-15 && (c.b - 1.2).abs() < 1e-12);
        let two = fit_log_linear(&[(10.0, 1.0), (100.0, 2.0)]).unwrap();
        assert!(two.a_err.is_none() && two.b_err.is_none());
    }

    #[test]
    fn histogram_conventions() {
        let edges = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(histogram(&[0.5, 1.5, 2.5], &edges).unwrap(), vec![1, 1, 1]);
        assert_eq!(histogram(&[1.0], &edges).unwrap(), vec![0, 1, 0]);
        assert_eq!(histogram(&[3.0], &edges), Err(StatsError::OutOfRange(3.0)));
        assert_eq!(histogram(&[0.1], &[1.0, 0.0]), Err(StatsError::BadEdges));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap(), -1.0);
        assert!(
            (spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12
        );
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
