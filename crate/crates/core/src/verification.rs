//! Statistical toolkit shared by the killing and concatenation checks:
//! mergeable Monte Carlo reports, goodness-of-fit tests, convergence-slope
//! fits, and adaptive quadrature for the exact oracles.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Two-sided 99% normal quantile used for the reported confidence interval.
pub const Z99: f64 = 2.5758293035489004;

/// Monte Carlo summary: count-weighted mean, standard error of the mean, a
/// 99% confidence interval, and the seed provenance of the replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub key: String,
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
    pub ci99: (f64, f64),
    pub master_seed: u64,
    pub stream_lo: u64,
    pub stream_hi: u64,
}

impl EstimatorReport {
    pub fn empty(key: impl Into<String>, master_seed: u64) -> Self {
        EstimatorReport {
            key: key.into(),
            n: 0,
            mean: 0.0,
            stderr: 0.0,
            ci99: (0.0, 0.0),
            master_seed,
            stream_lo: 0,
            stream_hi: 0,
        }
    }

    /// Single-pass mean/variance accumulation over the replication values.
    pub fn from_values(
        key: impl Into<String>,
        values: &[f64],
        master_seed: u64,
        stream_lo: u64,
    ) -> Self {
        let n = values.len() as u64;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, &v) in values.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (v - mean);
        }
        let stderr = if n >= 2 {
            (m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        EstimatorReport {
            key: key.into(),
            n,
            mean,
            stderr,
            ci99: (mean - Z99 * stderr, mean + Z99 * stderr),
            master_seed,
            stream_lo,
            stream_hi: stream_lo + n.max(1) - 1,
        }
    }

    fn m2(&self) -> f64 {
        if self.n >= 2 {
            self.stderr * self.stderr * self.n as f64 * (self.n - 1) as f64
        } else {
            0.0
        }
    }

    /// Absolute z-distance of the mean from a reference value.
    pub fn z_against(&self, reference: f64) -> f64 {
        if self.stderr == 0.0 {
            if self.mean == reference {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - reference).abs() / self.stderr
        }
    }
}

/// Pools two reports of the same experiment key: count-weighted mean and the
/// parallel variance-merge formula. Associative and commutative up to
/// floating-point roundoff.
pub fn merge_reports(a: &EstimatorReport, b: &EstimatorReport) -> Result<EstimatorReport> {
    if a.key != b.key {
        return Err(Error::KeyMismatch {
            a: a.key.clone(),
            b: b.key.clone(),
        });
    }
    if a.n == 0 {
        return Ok(b.clone());
    }
    if b.n == 0 {
        return Ok(a.clone());
    }
    let n = a.n + b.n;
    let (na, nb, nf) = (a.n as f64, b.n as f64, n as f64);
    let delta = b.mean - a.mean;
    let mean = a.mean + delta * nb / nf;
    let m2 = a.m2() + b.m2() + delta * delta * na * nb / nf;
    let stderr = if n >= 2 {
        (m2 / (n - 1) as f64 / nf).sqrt()
    } else {
        0.0
    };
    Ok(EstimatorReport {
        key: a.key.clone(),
        n,
        mean,
        stderr,
        ci99: (mean - Z99 * stderr, mean + Z99 * stderr),
        master_seed: a.master_seed,
        stream_lo: a.stream_lo.min(b.stream_lo),
        stream_hi: a.stream_hi.max(b.stream_hi),
    })
}

/// One-sample Kolmogorov-Smirnov distance against a reference cdf, with the
/// asymptotic p-value of the Kolmogorov distribution.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 30 {
        return Err(Error::DegenerateInput(format!(
            "Kolmogorov-Smirnov needs at least 30 samples, got {n}"
        )));
    }
    let mut sorted = samples.to_vec();
    if sorted.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("samples contain NaN".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d
            .max((f - i as f64 / nf).abs())
            .max(((i + 1) as f64 / nf - f).abs());
    }
    Ok((d, ks_p_value(d, n)))
}

/// Survival function of the Kolmogorov distribution at the effective statistic
/// (Stephens' finite-sample correction).
fn ks_p_value(d: f64, n: usize) -> f64 {
    let nf = n as f64;
    let lambda = (nf.sqrt() + 0.12 + 0.11 / nf.sqrt()) * d;
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov distance with the asymptotic p-value at the
/// effective sample size `na nb / (na + nb)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 30 || b.len() < 30 {
        return Err(Error::DegenerateInput(
            "two-sample Kolmogorov-Smirnov needs at least 30 samples per side".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    if sa.iter().chain(sb.iter()).any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("samples contain NaN".into()));
    }
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na as f64 * nb as f64 / (na + nb) as f64).round() as usize;
    Ok((d, ks_p_value(d, ne.max(1))))
}

/// Pearson chi-square goodness of fit of observed counts against cell
/// probabilities. Cells whose expected count falls below 5 are merged into the
/// previous kept cell before the statistic is formed; degrees of freedom are
/// `cells - 1`.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> Result<(f64, f64)> {
    if counts.len() != probs.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            got: counts.len(),
        });
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateInput("need at least two cells".into()));
    }
    let total: u64 = counts.iter().sum();
    if total < 30 {
        return Err(Error::DegenerateInput(format!(
            "chi-square needs at least 30 observations, got {total}"
        )));
    }
    let psum: f64 = probs.iter().sum();
    if probs.iter().any(|p| *p < 0.0) || (psum - 1.0).abs() > 1e-6 {
        return Err(Error::DegenerateInput(format!(
            "cell probabilities must be nonnegative and sum to 1, got {psum}"
        )));
    }
    let n = total as f64;
    // observed mass on a zero-probability cell is an immediate rejection;
    // empty zero-probability cells carry no information and are dropped
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 && c > 0 {
            return Ok((f64::INFINITY, 0.0));
        }
    }
    // merge low-expectation cells left to right
    let mut merged: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            continue;
        }
        let expected = n * p / psum;
        match merged.last_mut() {
            Some(last) if last.1 < 5.0 => {
                last.0 += c as f64;
                last.1 += expected;
            }
            _ => merged.push((c as f64, expected)),
        }
    }
    if let [.., prev, last] = merged.as_mut_slice() {
        if last.1 < 5.0 {
            prev.0 += last.0;
            prev.1 += last.1;
            merged.pop();
        }
    }
    if merged.len() < 2 {
        // a deterministic law: all mass sits in one cell and matches it exactly
        return Ok((0.0, 1.0));
    }
    let stat: f64 = merged
        .iter()
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = (merged.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    Ok((stat, p))
}

/// Chi-square test of independence on a contingency table (rows: strata,
/// columns: outcomes). All-zero rows and columns are dropped first.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<(f64, f64, usize)> {
    let rows: Vec<Vec<u64>> = table
        .iter()
        .filter(|r| r.iter().any(|&c| c > 0))
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(Error::DegenerateInput("empty contingency table".into()));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DegenerateInput("ragged contingency table".into()));
    }
    let keep_cols: Vec<usize> = (0..ncols)
        .filter(|&j| rows.iter().any(|r| r[j] > 0))
        .collect();
    if rows.len() < 2 || keep_cols.len() < 2 {
        return Err(Error::DegenerateInput(
            "contingency table needs at least 2 nonempty rows and columns".into(),
        ));
    }
    let total: u64 = rows.iter().flat_map(|r| r.iter()).sum();
    let row_sums: Vec<f64> = rows.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_sums: Vec<f64> = keep_cols
        .iter()
        .map(|&j| rows.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let mut stat = 0.0;
    for (r, row) in rows.iter().enumerate() {
        for (k, &j) in keep_cols.iter().enumerate() {
            let expected = row_sums[r] * col_sums[k] / total as f64;
            let observed = row[j] as f64;
            stat += (observed - expected) * (observed - expected) / expected;
        }
    }
    let dof = (rows.len() - 1) * (keep_cols.len() - 1);
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    Ok((stat, p, dof))
}

/// Least-squares fit of `log error` against `log h` with a pass band on the
/// slope. Exact cancellations (zero error) are dropped and recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub points: Vec<(f64, f64)>,
    pub dropped: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub band: (f64, f64),
    pub pass: bool,
}

pub fn fit_slope(points: &[(f64, f64)], band: (f64, f64)) -> Result<SlopeReport> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "slope fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.windows(2).any(|w| w[1].0 >= w[0].0) {
        return Err(Error::DegenerateInput(
            "step sizes must be strictly decreasing".into(),
        ));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &(h, err) in points {
        if err > 0.0 {
            kept.push((h, err));
        } else {
            dropped.push(h);
        }
    }
    if kept.len() < 3 {
        return Err(Error::DegenerateInput(
            "fewer than 3 nonzero errors; nothing to fit".into(),
        ));
    }
    let n = kept.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(h, err) in &kept {
        let x = h.ln();
        let y = err.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    Ok(SlopeReport {
        points: kept.clone(),
        dropped,
        slope,
        intercept,
        band,
        pass: band.0 <= slope && slope <= band.1,
    })
}

/// Adaptive Simpson quadrature with an absolute tolerance.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(fa, fm, fb, b - a);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(values: &[f64]) -> EstimatorReport {
        EstimatorReport::from_values("k", values, 1, 0)
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = report(&[1.0, 2.0, 3.0]);
        let e = EstimatorReport::empty("k", 1);
        assert_eq!(merge_reports(&a, &e).unwrap(), a);
        assert_eq!(merge_reports(&e, &a).unwrap(), a);
    }

    #[test]
    fn merge_of_halves_equals_whole() {
        let values: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let whole = report(&values);
        let a = report(&values[..50]);
        let b = EstimatorReport::from_values("k", &values[50..], 1, 50);
        let merged = merge_reports(&a, &b).unwrap();
        assert_abs_diff_eq!(merged.mean, whole.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(merged.stderr, whole.stderr, epsilon = 1e-12);
        assert_eq!(merged.n, whole.n);
        assert_eq!(merged.stream_hi, 99);
    }

    #[test]
    fn merge_rejects_key_mismatch() {
        let a = report(&[1.0, 2.0]);
        let b = EstimatorReport::from_values("other", &[1.0, 2.0], 1, 0);
        assert!(matches!(
            merge_reports(&a, &b),
            Err(Error::KeyMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn prop_merge_order_invariance(
            x in proptest::collection::vec(-5.0..5.0f64, 10..40),
            y in proptest::collection::vec(-5.0..5.0f64, 10..40),
            z in proptest::collection::vec(-5.0..5.0f64, 10..40),
        ) {
            let (a, b, c) = (report(&x), report(&y), report(&z));
            let abc = merge_reports(&merge_reports(&a, &b).unwrap(), &c).unwrap();
            let cab = merge_reports(&c, &merge_reports(&a, &b).unwrap()).unwrap();
            let bca = merge_reports(&merge_reports(&b, &c).unwrap(), &a).unwrap();
            for other in [&cab, &bca] {
                prop_assert!((abc.mean - other.mean).abs() <= 1e-12);
                prop_assert!((abc.stderr - other.stderr).abs() <= 1e-12);
                prop_assert_eq!(abc.n, other.n);
            }

            // direct recomputation over the pooled values
            let mut all = x.clone();
            all.extend_from_slice(&y);
            all.extend_from_slice(&z);
            let direct = report(&all);
            prop_assert!((abc.mean - direct.mean).abs() <= 1e-12);
            prop_assert!((abc.stderr - direct.stderr).abs() <= 1e-12);
        }
    }

    #[test]
    fn ks_accepts_its_own_distribution() {
        // uniform samples against the uniform cdf, 100 seeded repeats
        let mut rejections = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
            let (_, p) = ks_statistic(&samples, |x| x.clamp(0.0, 1.0)).unwrap();
            if p <= 0.001 {
                rejections += 1;
            }
        }
        assert!(rejections <= 1, "{rejections} rejections out of 100");
    }

    #[test]
    fn ks_rejects_shifted_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f64> = (0..10_000).map(|_| 0.2 + 0.8 * rng.random::<f64>()).collect();
        let (_, p) = ks_statistic(&samples, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn ks_needs_enough_samples() {
        assert!(ks_statistic(&[0.5; 10], |x| x).is_err());
    }

    #[test]
    fn chi_square_zero_for_exact_proportions() {
        let (stat, p) = chi_square(&[50, 30, 20], &[0.5, 0.3, 0.2]).unwrap();
        assert_abs_diff_eq!(stat, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn chi_square_rejects_wrong_law() {
        let (_, p) = chi_square(&[900, 50, 50], &[0.5, 0.3, 0.2]).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn chi_square_merges_small_cells() {
        // last cell expects 1 count; it must be folded into its neighbor
        let (stat, p) = chi_square(&[60, 39, 1], &[0.6, 0.39, 0.01]).unwrap();
        assert!(stat.is_finite());
        assert!(p > 0.5);
    }

    #[test]
    fn independence_detects_dependence_and_accepts_independence() {
        let dependent = vec![vec![90u64, 10], vec![10, 90]];
        let (_, p, dof) = chi_square_independence(&dependent).unwrap();
        assert_eq!(dof, 1);
        assert!(p < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut table = vec![vec![0u64; 3]; 2];
        for _ in 0..6000 {
            let r = rng.random_range(0..2usize);
            let c = rng.random_range(0..3usize);
            table[r][c] += 1;
        }
        let (_, p, _) = chi_square_independence(&table).unwrap();
        assert!(p > 0.001);
    }

    #[test]
    fn slope_of_linear_and_quadratic_errors() {
        let hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        let linear: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 3.0 * h)).collect();
        let rep = fit_slope(&linear, (0.8, 1.2)).unwrap();
        assert_abs_diff_eq!(rep.slope, 1.0, epsilon = 1e-9);
        assert!(rep.pass);

        let quad: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 3.0 * h * h)).collect();
        let rep = fit_slope(&quad, (1.8, 2.2)).unwrap();
        assert_abs_diff_eq!(rep.slope, 2.0, epsilon = 1e-9);
        assert!(rep.pass);
    }

    #[test]
    fn slope_of_mixed_terms_stays_near_one() {
        let hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        let mixed: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 2.0 * h + 5.0 * h * h)).collect();
        let rep = fit_slope(&mixed, (0.9, 1.1)).unwrap();
        assert!(rep.pass, "slope {} outside (0.9, 1.1)", rep.slope);
    }

    #[test]
    fn slope_drops_exact_zeros() {
        let pts = [(1e-2, 1e-3), (5e-3, 0.0), (2.5e-3, 2.5e-4), (1.25e-3, 1.25e-4)];
        let rep = fit_slope(&pts, (0.8, 1.2)).unwrap();
        assert_eq!(rep.dropped, vec![5e-3]);
        assert_eq!(rep.points.len(), 3);
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let v = adaptive_simpson(|x| x.exp(), 0.0, 1.0, 1e-12);
        assert_abs_diff_eq!(v, 1.0f64.exp() - 1.0, epsilon = 1e-10);
        let v = adaptive_simpson(|x| (-(x * x)).exp() * x, 0.0, 2.0, 1e-12);
        assert_abs_diff_eq!(v, 0.5 * (1.0 - (-4.0f64).exp()), epsilon = 1e-10);
    }
}
