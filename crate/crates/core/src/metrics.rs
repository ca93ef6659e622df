//! Sample-set comparisons: Gaussian-Fréchet distance on raw features,
//! one-dimensional Wasserstein-1 and Welch's two-sample t-test.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Eigenvalues of the symmetric product down to this value are treated as 0.
pub const EIGEN_CLAMP: f64 = -1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    pub mean_diff_sq: f64,
    pub trace_term: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// Sample mean and unbiased covariance of `n × dim` row-major samples.
pub fn sample_moments(x: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(Error::shape(format!("{} values do not form rows of width {dim}", x.len())));
    }
    let n = x.len() / dim;
    if n < dim + 1 || n < 2 {
        return Err(Error::Metric(format!("{n} samples are too few to fit a {dim}-dimensional Gaussian")));
    }
    let mut mean = DVector::zeros(dim);
    for row in x.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in x.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn check_rank(cov: &DMatrix<f64>, which: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * top.max(1e-300))) {
        return Err(Error::Metric(format!("{which} covariance is rank-deficient")));
    }
    Ok(eig)
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between two Gaussians.
///
/// The trace of `(Σ₁Σ₂)^{1/2}` is taken from the symmetric matrix
/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same spectrum.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::shape("moment dimensions disagree"));
    }
    let e1 = check_rank(cov1, "first")?;
    check_rank(cov2, "second")?;
    let root = DMatrix::from_diagonal(&e1.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = &e1.eigenvectors * root * e1.eigenvectors.transpose();
    let mut m = &s * cov2 * &s;
    m = (&m + m.transpose()) * 0.5;
    let mut tr_sqrt = 0.0;
    for l in SymmetricEigen::new(m).eigenvalues.iter() {
        if *l < EIGEN_CLAMP {
            return Err(Error::Metric(format!("covariance product has eigenvalue {l}")));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let mean_diff_sq = (mu1 - mu2).norm_squared();
    let trace_term = cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    Ok((mean_diff_sq, trace_term))
}

/// Gaussian-Fréchet ("FID on raw features") between `x` (`n × dim`) and `y` (`m × dim`).
pub fn gaussian_frechet(x: &[f64], y: &[f64], dim: usize) -> Result<FrechetResult> {
    let (mu1, c1) = sample_moments(x, dim)?;
    let (mu2, c2) = sample_moments(y, dim)?;
    let (mean_diff_sq, trace_term) = frechet_from_moments(&mu1, &c1, &mu2, &c2)?;
    Ok(FrechetResult {
        distance: mean_diff_sq + trace_term,
        mean_diff_sq,
        trace_term,
        n_x: x.len() / dim,
        n_y: y.len() / dim,
    })
}

fn sorted(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Metric("empty sample".into()));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("NaN in sample".into()));
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `∫₀¹ |F⁻¹(u) − G⁻¹(u)| du` for the empirical distributions of `x` and `y`.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(x)?, sorted(y)?);
    let (n, m) = (a.len() as u128, b.len() as u128);
    // Quantile breakpoints i/n and j/m, measured in units of 1/(n·m).
    let (mut i, mut j) = (0usize, 0usize);
    let (mut pos, mut total) = (0u128, 0.0);
    while i < a.len() && j < b.len() {
        let next = ((i as u128 + 1) * m).min((j as u128 + 1) * n);
        total += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if pos == (i as u128 + 1) * m {
            i += 1;
        }
        if pos == (j as u128 + 1) * n {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Exact `W₁` between the empirical distribution of `x` and `N(mean, sd²)`.
pub fn wasserstein_to_normal(x: &[f64], mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
        return Err(Error::domain(format!("invalid normal N({mean}, {sd}²)")));
    }
    let a = sorted(x)?;
    let n = a.len();
    let std = Normal::standard();
    let q = |k: usize| -> f64 {
        match k {
            0 => f64::NEG_INFINITY,
            k if k == n => f64::INFINITY,
            k => std.inverse_cdf(k as f64 / n as f64),
        }
    };
    let cdf = |z: f64| if z.is_finite() { std.cdf(z) } else if z > 0.0 { 1.0 } else { 0.0 };
    let pdf = |z: f64| if z.is_finite() { std.pdf(z) } else { 0.0 };
    let mut total = 0.0;
    let mut lo = q(0);
    for (k, v) in a.iter().enumerate() {
        let hi = q(k + 1);
        let c = (v - mean) / sd;
        // ∫ (c − z) φ(z) dz = c Φ(z) + φ(z).
        let h = |z: f64| c * cdf(z) + pdf(z);
        total += if c >= hi {
            h(hi) - h(lo)
        } else if c <= lo {
            h(lo) - h(hi)
        } else {
            2.0 * h(c) - h(lo) - h(hi)
        };
        lo = hi;
    }
    Ok(sd * total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test with a two-sided p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("each group needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    if sa + sb == 0.0 {
        return Err(Error::Metric("both groups have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Metric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult { t_statistic: t, degrees_of_freedom: dof, p_value: p })
}

pub const METRIC_HEADER: &str = "metric,scheme,iterations,seed,value";

/// One line of a metric report. `seed` is free text so that summary rows
/// can carry labels such as `all`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub scheme: String,
    pub iterations: u64,
    pub seed: String,
    pub value: f64,
}

pub fn write_metric_rows<W: Write>(w: &mut W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:.16e}", r.metric, r.scheme, r.iterations, r.seed, r.value)?;
    }
    Ok(())
}

pub fn read_metric_rows<R: BufRead>(r: R) -> Result<Vec<MetricRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(METRIC_HEADER) {
        return Err(Error::format(format!("expected header `{METRIC_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(format!("malformed metric row {}: `{line}`", k + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(MetricRow {
            metric: f[0].to_string(),
            scheme: f[1].to_string(),
            iterations: f[2].parse().map_err(|_| bad())?,
            seed: f[3].to_string(),
            value: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn frechet_identical_sets() {
        let x = normals(2000, 1);
        let r = gaussian_frechet(&x, &x, 2).unwrap();
        assert!(r.distance.abs() < 1e-10, "{r:?}");
        assert_eq!((r.n_x, r.n_y), (1000, 1000));
    }

    #[test]
    fn frechet_exact_moment_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (m, t) = frechet_from_moments(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((m + t - 1.0).abs() < 1e-12);

        let z = DVector::zeros(2);
        let (m, t) = frechet_from_moments(&z, &DMatrix::identity(2, 2), &z, &(DMatrix::identity(2, 2) * 4.0)).unwrap();
        assert!((m + t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_non_commuting_covariances() {
        // Closed form for 2×2: tr √M = √(tr M + 2√det M).
        let c1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let c2 = DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 3.0]);
        let z = DVector::zeros(2);
        let (_, t) = frechet_from_moments(&z, &c1, &z, &c2).unwrap();
        let p = &c1 * &c2;
        let expect = c1.trace() + c2.trace() - 2.0 * (p.trace() + 2.0 * p.determinant().sqrt()).sqrt();
        assert!((t - expect).abs() < 1e-12, "{t} {expect}");
    }

    #[test]
    fn frechet_symmetry_and_decomposition() {
        let x = normals(3000, 2);
        let y: Vec<f64> = normals(1500, 3).iter().enumerate().map(|(k, v)| v * (1.0 + (k % 2) as f64) + 0.3).collect();
        let a = gaussian_frechet(&x, &y, 3).unwrap();
        let b = gaussian_frechet(&y, &x, 3).unwrap();
        assert!((a.distance - b.distance).abs() < 1e-10);
        assert!((a.distance - a.mean_diff_sq - a.trace_term).abs() < 1e-10);
    }

    #[test]
    fn frechet_errors() {
        assert!(gaussian_frechet(&[1.0, 2.0], &[1.0, 2.0], 2).is_err());
        let flat: Vec<f64> = (0..20).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let ok = normals(40, 4);
        assert!(matches!(gaussian_frechet(&flat, &ok, 2), Err(Error::Metric(_))));
        assert!(gaussian_frechet(&[1.0, 2.0, 3.0], &ok, 2).is_err());
    }

    #[test]
    fn frechet_shrinks_with_sample_size() {
        let median = |n: usize| {
            let mut d: Vec<f64> = (0..20)
                .map(|s| {
                    let x = normals(2 * n, 100 + s);
                    let y = normals(2 * n, 200 + s);
                    gaussian_frechet(&x, &y, 2).unwrap().distance
                })
                .collect();
            d.sort_by(f64::total_cmp);
            (d[9] + d[10]) / 2.0
        };
        assert!(median(100_000) < median(1000));
    }

    #[test]
    fn w1_basic_cases() {
        let x = normals(500, 5);
        assert_eq!(wasserstein_1d(&x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.75).collect();
        assert!((wasserstein_1d(&shifted, &x).unwrap() - 0.75).abs() < 1e-12);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(wasserstein_1d(&[], &x).is_err());
    }

    /// Midpoint-rule quadrature of `∫₀¹ |σ₁ − σ₂| |Φ⁻¹(u)| du`.
    fn quadrature_w1(s1: f64, s2: f64) -> f64 {
        let n = 200_000;
        let std = Normal::standard();
        (0..n)
            .map(|k| ((k as f64 + 0.5) / n as f64, 1.0 / n as f64))
            .map(|(u, w)| w * (s1 - s2).abs() * std.inverse_cdf(u).abs())
            .sum()
    }

    #[test]
    fn w1_between_centred_gaussians() {
        let analytic = (2.0f64 / std::f64::consts::PI).sqrt();
        assert!((quadrature_w1(1.0, 2.0) - analytic).abs() < 1e-4);
        let n = 1_000_000;
        let x = normals(n, 6);
        let y: Vec<f64> = normals(n, 7).iter().map(|v| 2.0 * v).collect();
        let w = wasserstein_1d(&x, &y).unwrap();
        assert!((w / analytic - 1.0).abs() < 0.02, "{w}");
    }

    #[test]
    fn w1_triangle_inequality() {
        let mut rng = rng_from_seed(8);
        for _ in 0..200 {
            let mut draw = || {
                let n = rng.random_range(1..40);
                (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>()
            };
            let (a, b, c) = (draw(), draw(), draw());
            let ab = wasserstein_1d(&a, &b).unwrap();
            let bc = wasserstein_1d(&b, &c).unwrap();
            let ac = wasserstein_1d(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn w1_to_normal_matches_quadrature() {
        let x = [-1.3, 0.2, 0.25, 2.0, 0.9];
        let (mu, sd) = (0.4, 1.7);
        let n = 400_000;
        let std = Normal::standard();
        let mut a = x.to_vec();
        a.sort_by(f64::total_cmp);
        let quad: f64 = (0..n)
            .map(|k| {
                let u = (k as f64 + 0.5) / n as f64;
                (a[(u * 5.0) as usize] - mu - sd * std.inverse_cdf(u)).abs() / n as f64
            })
            .sum();
        let exact = wasserstein_to_normal(&x, mu, sd).unwrap();
        assert!((exact - quad).abs() < 1e-4, "{exact} {quad}");
        // A single point at the mean is E|Z|·sd away.
        let single = wasserstein_to_normal(&[mu], mu, sd).unwrap();
        assert!((single - sd * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn w1_to_normal_of_normal_samples_is_small() {
        let x = normals(100_000, 9);
        assert!(wasserstein_to_normal(&x, 0.0, 1.0).unwrap() < 0.01);
        assert!(wasserstein_to_normal(&x, 0.0, 0.0).is_err());
    }

    #[test]
    fn welch_cases() {
        let a = normals(100, 10);
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);

        let b: Vec<f64> = normals(100, 11).iter().map(|v| v + 1.0).collect();
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert!(ab.p_value < 1e-6, "{ab:?}");
        assert_eq!(ab.t_statistic, -ba.t_statistic);
        assert_eq!(ab.p_value, ba.p_value);

        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn welch_reference_value() {
        // Equal sizes and variances: Welch reduces to the pooled test with 2n−2 dof.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let r = welch_t_test(&a, &b).unwrap();
        let se = (2.0 * (5.0 / 3.0) / 4.0f64).sqrt();
        assert!((r.t_statistic + 1.0 / se).abs() < 1e-14);
        assert!((r.degrees_of_freedom - 6.0).abs() < 1e-12);
        let p = 2.0 * StudentsT::new(0.0, 1.0, 6.0).unwrap().cdf(-1.0 / se);
        assert!((r.p_value - p).abs() < 1e-14);
    }

    #[test]
    fn p_value_decreases_with_separation() {
        let a = normals(30, 12);
        let mut last = 1.1;
        for shift in [0.0, 0.1, 0.3, 0.6, 1.0] {
            let b: Vec<f64> = a.iter().enumerate().map(|(k, v)| v + shift + 0.01 * k as f64).collect();
            let p = welch_t_test(&a, &b).unwrap().p_value;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn metric_rows_round_trip() {
        let rows = vec![
            MetricRow { metric: "fid".into(), scheme: "told++".into(), iterations: 5000, seed: "3".into(), value: 0.1 + 0.2 },
            MetricRow { metric: "fid_mean".into(), scheme: "told".into(), iterations: 5000, seed: "all".into(), value: -1e-300 },
        ];
        let mut buf = Vec::new();
        write_metric_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_metric_rows(buf.as_slice()).unwrap(), rows);
        assert!(read_metric_rows("bad\n".as_bytes()).is_err());
    }
}
