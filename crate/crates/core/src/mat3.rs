//! 3×3 linear algebra for the drift matrix of the phase-space SDE.
//!
//! Everything here is closed-form or fixed-iteration: cubic roots by the
//! trigonometric / Cardano formulas, a scaling-and-squaring Taylor
//! exponential used as an oracle, and an unrolled Cholesky factorisation.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Imaginary parts at or below this magnitude are treated as round-off.
pub const IMAG_TOL: f64 = 1e-9;
/// Discriminant magnitude below which the cubic is treated as having a repeated root.
pub const DISCRIMINANT_TOL: f64 = 1e-10;
/// Smallest admissible Cholesky pivot.
pub const PIVOT_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn new(rows: [[f64; 3]; 3]) -> Self {
        Mat3(rows)
    }

    pub fn diag(d: [f64; 3]) -> Self {
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            m.0[i][i] = d[i];
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut m = *self;
        m.0.iter_mut().flatten().for_each(|x| *x *= k);
        m
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let a = &self.0;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    /// Inverse by the adjugate; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let a = &self.0;
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                m.0[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
            }
        }
        Some(m)
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let a = &self.0;
        [
            a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
            a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
            a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
        ]
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.0
            .iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat3) -> f64 {
        (*self - *other).max_abs()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..3).all(|i| (0..i).all(|j| (self.0[i][j] - self.0[j][i]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

impl IndexMut<(usize, usize)> for Mat3 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.0[i][j]
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, rhs: Mat3) -> Mat3 {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] += rhs.0[i][j];
            }
        }
        m
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, rhs: Mat3) -> Mat3 {
        self + (-rhs)
    }
}

impl Neg for Mat3 {
    type Output = Mat3;
    fn neg(self) -> Mat3 {
        self.scale(-1.0)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, rhs: Mat3) -> Mat3 {
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        m
    }
}

/// Roots of a real monic cubic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicRoots {
    /// Sorted by real part ascending (ties by imaginary part).
    pub roots: [Complex64; 3],
    pub all_real: bool,
    /// Largest root, present only when all three are real.
    pub max_real_root: Option<f64>,
}

/// Lower coefficients `(c2, c1, c0)` of the characteristic polynomial
/// `λ³ + ξλ² + (γ² + 1)λ + ξ` of the drift matrix.
pub fn char_poly_coeffs(gamma: f64, xi: f64) -> Result<(f64, f64, f64)> {
    if !(gamma.is_finite() && xi.is_finite()) || gamma <= 0.0 || xi <= 0.0 {
        return Err(Error::domain(format!(
            "gamma and xi must be finite and positive (got {gamma}, {xi})"
        )));
    }
    Ok((xi, gamma * gamma + 1.0, xi))
}

fn poly_eval(c: (f64, f64, f64), z: Complex64) -> (Complex64, Complex64) {
    let (c2, c1, c0) = c;
    let p = ((z + c2) * z + c1) * z + c0;
    let dp = (z * 3.0 + 2.0 * c2) * z + c1;
    (p, dp)
}

/// All three roots of `λ³ + c2 λ² + c1 λ + c0`.
pub fn cubic_roots(c2: f64, c1: f64, c0: f64) -> Result<CubicRoots> {
    if !(c2.is_finite() && c1.is_finite() && c0.is_finite()) {
        return Err(Error::domain("cubic coefficients must be finite"));
    }
    // Depressed cubic y³ + p y + q with λ = y − c2/3.
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = 2.0 * c2 * c2 * c2 / 27.0 - c2 * c1 / 3.0 + c0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);

    let mut ys: [Complex64; 3];
    if disc.abs() < DISCRIMINANT_TOL {
        if p.abs() < 1e-6 {
            ys = [Complex64::new(0.0, 0.0); 3];
        } else {
            let single = 3.0 * q / p;
            let double = -1.5 * q / p;
            ys = [
                Complex64::new(single, 0.0),
                Complex64::new(double, 0.0),
                Complex64::new(double, 0.0),
            ];
        }
    } else if disc < 0.0 {
        // Three distinct real roots (p < 0 here).
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        ys = [0usize, 1, 2].map(|k| {
            Complex64::new(
                m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos(),
                0.0,
            )
        });
    } else {
        let sd = disc.sqrt();
        let u = (-q / 2.0 + sd).cbrt();
        let v = (-q / 2.0 - sd).cbrt();
        let re = -(u + v) / 2.0;
        let im = 3f64.sqrt() / 2.0 * (u - v);
        ys = [
            Complex64::new(u + v, 0.0),
            Complex64::new(re, im),
            Complex64::new(re, -im),
        ];
    }

    let coeffs = (c2, c1, c0);
    for y in ys.iter_mut() {
        let mut z = *y - shift;
        let (pz, dpz) = poly_eval(coeffs, z);
        if dpz.norm() > 0.0 {
            let cand = z - pz / dpz;
            if poly_eval(coeffs, cand).0.norm() < pz.norm() {
                z = cand;
            }
        }
        if z.im.abs() <= IMAG_TOL {
            z.im = 0.0;
        }
        *y = z;
    }
    ys.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let all_real = ys.iter().all(|z| z.im == 0.0);
    Ok(CubicRoots {
        roots: ys,
        all_real,
        max_real_root: all_real.then(|| ys[2].re),
    })
}

/// Taylor order used inside [`expm_series`].
const TAYLOR_TERMS: usize = 20;

/// `exp(M t)` by scaling and squaring with a truncated Taylor series.
pub fn expm_series(m: &Mat3, t: f64) -> Result<Mat3> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("time must be non-negative (got {t})")));
    }
    let a = m.scale(t);
    let mut squarings = 0;
    let mut norm = a.norm_inf();
    while norm > 0.5 {
        norm /= 2.0;
        squarings += 1;
    }
    let a = a.scale(0.5f64.powi(squarings));
    let mut term = Mat3::IDENTITY;
    let mut sum = Mat3::IDENTITY;
    for k in 1..=TAYLOR_TERMS {
        term = (term * a).scale(1.0 / k as f64);
        sum = sum + term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    Ok(sum)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky3(sigma: &Mat3) -> Result<Mat3> {
    if !sigma.is_finite() {
        return Err(Error::domain("covariance has non-finite entries"));
    }
    if !sigma.is_symmetric(1e-12) {
        return Err(Error::domain("covariance is not symmetric"));
    }
    let s = &sigma.0;
    let mut l = Mat3::ZERO;
    for j in 0..3 {
        let pivot = s[j][j] - (0..j).map(|k| l.0[j][k] * l.0[j][k]).sum::<f64>();
        if !(pivot > PIVOT_FLOOR) {
            return Err(Error::Decomposition { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l.0[j][j] = d;
        for i in j + 1..3 {
            let acc = s[i][j] - (0..j).map(|k| l.0[i][k] * l.0[j][k]).sum::<f64>();
            l.0[i][j] = acc / d;
        }
    }
    Ok(l)
}

/// Cholesky with one retry after adding `1e-12 · trace / 3` to the diagonal.
///
/// Only the training path uses this; verification code calls [`cholesky3`].
pub fn cholesky3_jittered(sigma: &Mat3) -> Result<Mat3> {
    match cholesky3(sigma) {
        Ok(l) => Ok(l),
        Err(Error::Decomposition { .. }) => {
            let jitter = 1e-12 * sigma.trace() / 3.0;
            cholesky3(&(*sigma + Mat3::IDENTITY.scale(jitter)))
        }
        Err(e) => Err(e),
    }
}

/// Inverse conditional standard deviation of the third coordinate given the
/// first two, evaluated from the Schur-complement formula directly.
pub fn conditional_precision(sigma: &Mat3) -> Result<f64> {
    let s = &sigma.0;
    let (qq, pq, sq) = (s[0][0], s[1][0], s[2][0]);
    let (pp, sp, ss) = (s[1][1], s[2][1], s[2][2]);
    if !(qq > PIVOT_FLOOR) {
        return Err(Error::Decomposition { pivot: 0, value: qq });
    }
    let pp_given_q = pp - pq * pq / qq;
    if !(pp_given_q > PIVOT_FLOOR) {
        return Err(Error::Decomposition { pivot: 1, value: pp_given_q });
    }
    let sp_given_q = sp - sq * pq / qq;
    let var = ss - sq * sq / qq - sp_given_q * sp_given_q / pp_given_q;
    if !(var > PIVOT_FLOOR) {
        return Err(Error::Decomposition { pivot: 2, value: var });
    }
    Ok(var.powf(-0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    fn sqrt3() -> f64 {
        3f64.sqrt()
    }

    fn residual(c: (f64, f64, f64), z: Complex64) -> f64 {
        poly_eval(c, z).0.norm()
    }

    #[test]
    fn char_poly_examples() {
        let (c2, c1, c0) = char_poly_coeffs(2.0 * SQRT2, 3.0 * sqrt3()).unwrap();
        assert!((c2 - 3.0 * sqrt3()).abs() < 1e-15);
        assert!((c1 - 9.0).abs() < 1e-14);
        assert!((c0 - 3.0 * sqrt3()).abs() < 1e-15);

        let (c2, c1, c0) = char_poly_coeffs(10f64.sqrt(), 6.0).unwrap();
        assert_eq!(c2, 6.0);
        assert!((c1 - 11.0).abs() < 1e-14);
        assert_eq!(c0, 6.0);

        assert_eq!(char_poly_coeffs(1.0, 1.0).unwrap(), (1.0, 2.0, 1.0));
    }

    #[test]
    fn char_poly_rejects_bad_input() {
        assert!(char_poly_coeffs(0.0, 1.0).is_err());
        assert!(char_poly_coeffs(1.0, -2.0).is_err());
        assert!(char_poly_coeffs(f64::NAN, 1.0).is_err());
        assert!(char_poly_coeffs(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn critically_damped_triple_root() {
        let c = char_poly_coeffs(2.0 * SQRT2, 3.0 * sqrt3()).unwrap();
        let r = cubic_roots(c.0, c.1, c.2).unwrap();
        assert!(r.all_real);
        for z in r.roots {
            assert!((z.re + sqrt3()).abs() < 1e-9, "{z}");
            assert!(residual(c, z) <= 1e-9);
        }
        assert!((r.max_real_root.unwrap() + sqrt3()).abs() < 1e-9);
    }

    #[test]
    fn told_roots_are_integers() {
        let r = cubic_roots(6.0, 11.0, 6.0).unwrap();
        assert!(r.all_real);
        let want = [-3.0, -2.0, -1.0];
        for (z, w) in r.roots.iter().zip(want) {
            assert!((z.re - w).abs() < 1e-12);
        }
        assert_eq!(r.max_real_root, Some(r.roots[2].re));
    }

    #[test]
    fn zero_cubic() {
        let r = cubic_roots(0.0, 0.0, 0.0).unwrap();
        assert!(r.all_real);
        assert!(r.roots.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn complex_pair_and_double_root() {
        // (λ + 1)(λ² + 1)
        let r = cubic_roots(1.0, 1.0, 1.0).unwrap();
        assert!(!r.all_real);
        assert!(r.max_real_root.is_none());
        assert!((r.roots[0].re + 1.0).abs() < 1e-12 && r.roots[0].im == 0.0);
        assert!((r.roots[1].im.abs() - 1.0).abs() < 1e-12);

        // (λ + 1)²(λ + 4) = λ³ + 6λ² + 9λ + 4
        let r = cubic_roots(6.0, 9.0, 4.0).unwrap();
        assert!(r.all_real);
        assert!((r.roots[0].re + 4.0).abs() < 1e-12);
        assert!((r.roots[1].re + 1.0).abs() < 1e-7);
        assert!((r.roots[2].re + 1.0).abs() < 1e-7);
    }

    #[test]
    fn cubic_rejects_non_finite() {
        assert!(cubic_roots(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn expm_identity_and_diagonal() {
        let m = Mat3::new([[0.3, -2.0, 1.0], [4.0, 0.0, 1.5], [-1.0, 2.0, -3.0]]);
        assert_eq!(expm_series(&m, 0.0).unwrap(), Mat3::IDENTITY);

        let d = Mat3::diag([-1.0, -2.0, -3.0]);
        let e = expm_series(&d, 1.0).unwrap();
        let want = Mat3::diag([(-1f64).exp(), (-2f64).exp(), (-3f64).exp()]);
        assert!(e.max_abs_diff(&want) < 1e-15);

        assert!(expm_series(&m, -0.1).is_err());
    }

    #[test]
    fn expm_large_argument_diagonal() {
        // ‖Mt‖ = 50 at the edge of the documented accuracy range.
        let d = Mat3::diag([-10.0, 5.0, 0.5]);
        let e = expm_series(&d, 5.0).unwrap();
        for (i, v) in [-50.0f64, 25.0, 2.5].iter().enumerate() {
            let rel = (e[(i, i)] - v.exp()).abs() / v.exp().max(1.0);
            assert!(rel < 1e-12, "{i}: {rel}");
        }
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky3(&Mat3::IDENTITY).unwrap(), Mat3::IDENTITY);
        let l = cholesky3(&Mat3::diag([4.0, 9.0, 16.0])).unwrap();
        assert_eq!(l, Mat3::diag([2.0, 3.0, 4.0]));
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let err = cholesky3(&Mat3::diag([1.0, -1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::Decomposition { pivot: 1, .. }));
        // rank one
        let v = [1.0, 2.0, 3.0];
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = v[i] * v[j];
            }
        }
        let err = cholesky3(&m).unwrap_err();
        assert!(matches!(err, Error::Decomposition { pivot: 1, .. }));
        assert!(cholesky3(&Mat3::new([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])).is_err());
    }

    #[test]
    fn jitter_rescues_tiny_negative_pivot() {
        let m = Mat3::diag([1.0, 1.0, 5e-15]);
        assert!(cholesky3(&m).is_err());
        let l = cholesky3_jittered(&m).unwrap();
        assert!(l[(2, 2)] > 0.0);
    }

    #[test]
    fn conditional_precision_examples() {
        assert_eq!(conditional_precision(&Mat3::IDENTITY).unwrap(), 1.0);
        assert_eq!(conditional_precision(&Mat3::diag([1.0, 1.0, 4.0])).unwrap(), 0.5);
        assert!(conditional_precision(&Mat3::diag([1.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let m = Mat3::new([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let inv = m.inverse().unwrap();
        assert!((m * inv).max_abs_diff(&Mat3::IDENTITY) < 1e-14);
        assert!(Mat3::ZERO.inverse().is_none());
    }

    fn random_pd(a: [f64; 9], eps: f64) -> Mat3 {
        let a = Mat3::new([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]);
        let mut s = a * a.transpose() + Mat3::IDENTITY.scale(eps);
        // exact symmetry
        for i in 0..3 {
            for j in 0..i {
                s[(j, i)] = s[(i, j)];
            }
        }
        s
    }

    proptest! {
        #[test]
        fn bound_on_largest_real_root(gamma in 0.1f64..20.0, xi in 0.1f64..20.0) {
            let (c2, c1, c0) = char_poly_coeffs(gamma, xi).unwrap();
            let r = cubic_roots(c2, c1, c0).unwrap();
            if let Some(max) = r.max_real_root {
                prop_assert!(max >= -3f64.sqrt() - 1e-6);
            }
        }

        #[test]
        fn roots_have_small_residual(c2 in -20.0f64..20.0, c1 in -20.0f64..20.0, c0 in -20.0f64..20.0) {
            let r = cubic_roots(c2, c1, c0).unwrap();
            for z in r.roots {
                let scale = 1.0 + z.norm().powi(3);
                prop_assert!(residual((c2, c1, c0), z) <= 1e-9 * scale);
            }
        }

        #[test]
        fn expm_semigroup(
            a in proptest::array::uniform9(-2.0f64..2.0),
            s in 0.0f64..3.0,
            t in 0.0f64..3.0,
        ) {
            let m = Mat3::new([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]);
            let lhs = expm_series(&m, s + t).unwrap();
            let rhs = expm_series(&m, s).unwrap() * expm_series(&m, t).unwrap();
            let scale = lhs.max_abs().max(1.0);
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9 * scale);
        }

        #[test]
        fn cholesky_round_trip(a in proptest::array::uniform9(-3.0f64..3.0), eps in 1e-3f64..1.0) {
            let s = random_pd(a, eps);
            let l = cholesky3(&s).unwrap();
            prop_assert!((l * l.transpose()).max_abs_diff(&s) <= 1e-12);
            prop_assert!((0..3).all(|i| l[(i, i)] > 0.0));
            prop_assert!(l[(0, 1)] == 0.0 && l[(0, 2)] == 0.0 && l[(1, 2)] == 0.0);
        }

        #[test]
        fn conditional_precision_matches_cholesky(a in proptest::array::uniform9(-3.0f64..3.0), eps in 1e-2f64..1.0) {
            let s = random_pd(a, eps);
            let l = cholesky3(&s).unwrap();
            let prec = conditional_precision(&s).unwrap();
            prop_assert!((prec * l[(2, 2)] - 1.0).abs() <= 1e-10);
        }
    }
}
