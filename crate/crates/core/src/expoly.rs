//! Exponential polynomials `Σ_k P_k(t) e^{a_k t}` with closed-form products
//! and integrals. Every entry of `exp(Ft)` and every covariance integrand is
//! of this shape, so the kernel moments reduce to evaluating these.

/// Rates closer than this are merged into one term.
const RATE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct ExpPoly {
    /// `(rate, ascending polynomial coefficients)`.
    terms: Vec<(f64, Vec<f64>)>,
}

impl ExpPoly {
    pub(crate) fn term(rate: f64, coeffs: Vec<f64>) -> Self {
        let mut e = ExpPoly::default();
        e.push(rate, coeffs);
        e
    }

    fn push(&mut self, rate: f64, coeffs: Vec<f64>) {
        if let Some((_, c)) = self.terms.iter_mut().find(|(r, _)| (r - rate).abs() < RATE_TOL) {
            if c.len() < coeffs.len() {
                c.resize(coeffs.len(), 0.0);
            }
            c.iter_mut().zip(&coeffs).for_each(|(a, b)| *a += b);
        } else {
            self.terms.push((rate, coeffs));
        }
    }

    pub(crate) fn add(&self, other: &ExpPoly) -> ExpPoly {
        let mut out = self.clone();
        for (r, c) in &other.terms {
            out.push(*r, c.clone());
        }
        out
    }

    pub(crate) fn mul(&self, other: &ExpPoly) -> ExpPoly {
        let mut out = ExpPoly::default();
        for (ra, ca) in &self.terms {
            for (rb, cb) in &other.terms {
                let mut c = vec![0.0; ca.len() + cb.len() - 1];
                for (i, a) in ca.iter().enumerate() {
                    for (j, b) in cb.iter().enumerate() {
                        c[i + j] += a * b;
                    }
                }
                out.push(ra + rb, c);
            }
        }
        out
    }

    /// `t ↦ ∫₀ᵗ self(s) ds`, itself an exponential polynomial.
    pub(crate) fn integral_from_zero(&self) -> ExpPoly {
        let mut out = ExpPoly::default();
        let mut constant = 0.0;
        for (rate, coeffs) in &self.terms {
            if rate.abs() < RATE_TOL {
                let mut c = vec![0.0; coeffs.len() + 1];
                for (k, a) in coeffs.iter().enumerate() {
                    c[k + 1] = a / (k + 1) as f64;
                }
                out.push(0.0, c);
                continue;
            }
            let mut q = vec![0.0; coeffs.len()];
            for (k, a) in coeffs.iter().enumerate() {
                let anti = antiderivative(k, *rate);
                for (j, b) in anti.iter().enumerate() {
                    q[j] += a * b;
                }
            }
            constant -= q[0];
            out.push(*rate, q);
        }
        if constant != 0.0 {
            out.push(0.0, vec![constant]);
        }
        out
    }

    pub(crate) fn eval(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|(rate, c)| {
                let poly = c.iter().rev().fold(0.0, |acc, x| acc * t + x);
                if *rate == 0.0 {
                    poly
                } else {
                    poly * (rate * t).exp()
                }
            })
            .sum()
    }
}

/// Coefficients `b_j` with `∫ tᵏ e^{at} dt = e^{at} Σ_j b_j tʲ` (a ≠ 0):
/// `b_{k−i} = (−1)^i k!/(k−i)! / a^{i+1}`.
pub(crate) fn antiderivative(k: usize, a: f64) -> Vec<f64> {
    let mut b = vec![0.0; k + 1];
    let mut falling = 1.0;
    for i in 0..=k {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        b[k - i] = sign * falling / a.powi(i as i32 + 1);
        falling *= (k - i) as f64;
    }
    b
}
