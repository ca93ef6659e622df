#![allow(dead_code)]

use nalgebra::{Matrix3, SymmetricEigen};
use told::dynamics::{covariance_from, diffusion_matrix, drift_matrix};
use told::{DynamicsParams, Mat3, PhaseState};

pub const T_GRID: [f64; 7] = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0];

/// RK4 integration of `dΣ/dt = AΣ + ΣAᵀ + Q` from `sigma0` over `[0, t]`.
pub fn rk4_lyapunov(a: &Mat3, q: &Mat3, sigma0: Mat3, t: f64, h: f64) -> Mat3 {
    let rhs = |s: &Mat3| *a * *s + *s * a.transpose() + *q;
    let n = (t / h).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let mut s = sigma0;
    for _ in 0..n {
        let k1 = rhs(&s);
        let k2 = rhs(&(s + k1.scale(h / 2.0)));
        let k3 = rhs(&(s + k2.scale(h / 2.0)));
        let k4 = rhs(&(s + k3.scale(h)));
        s = s + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
    }
    s
}

/// Forward covariance oracle from `Σ₀ = (α/L) I`.
pub fn rk4_covariance(params: &DynamicsParams, t: f64, h: f64) -> Mat3 {
    let g = diffusion_matrix(params);
    let v = params.initial_variance();
    rk4_lyapunov(&drift_matrix(params), &(g * g.transpose()), Mat3::diag([v; 3]), t, h)
}

pub fn spectral_norm(m: &Mat3) -> f64 {
    let a = Matrix3::from_fn(|i, j| m[(i, j)]);
    let eig = SymmetricEigen::new(a.transpose() * a);
    eig.eigenvalues.max().max(0.0).sqrt()
}

/// Exact s-channel score `−(Σ_t⁻¹ x)_s` of the forward marginal when the data
/// are `N(0, data_var)` in one dimension.
pub struct GaussianScore {
    pub params: DynamicsParams,
    pub data_var: f64,
}

impl GaussianScore {
    pub fn marginal(&self, t: f64) -> Mat3 {
        let v = self.params.initial_variance();
        covariance_from(&self.params, t, [self.data_var, v, v]).unwrap()
    }

    pub fn eval(&self, x: &PhaseState, t: f64) -> Vec<f64> {
        let prec = self.marginal(t).inverse().expect("marginal covariance is invertible");
        (0..x.q.len())
            .map(|k| -(prec[(2, 0)] * x.q[k] + prec[(2, 1)] * x.p[k] + prec[(2, 2)] * x.s[k]))
            .collect()
    }
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` with step `h`, using `|a − n| / max(|a|, |n|, floor)`.
pub fn max_fd_error<F: FnMut(&[f64]) -> f64>(theta: &[f64], analytic: &[f64], h: f64, floor: f64, mut f: F) -> f64 {
    let mut worst = 0.0f64;
    let mut x = theta.to_vec();
    for k in 0..theta.len() {
        x[k] = theta[k] + h;
        let up = f(&x);
        x[k] = theta[k] - h;
        let down = f(&x);
        x[k] = theta[k];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}
