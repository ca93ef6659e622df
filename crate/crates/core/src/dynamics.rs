//! Third-order Langevin forward dynamics and their Gaussian perturbation
//! kernels.
//!
//! The phase state is `x = (q, p, s)` (position, momentum, acceleration) with
//! linear drift `F` and noise entering only the acceleration channel. The
//! kernel `q(x_t | x_0) = N(exp(Ft) x_0, Σ_t)` is evaluated in closed form for
//! both schemes: the critically-damped scheme through the nilpotent expansion
//! around its triple eigenvalue `−√3`, and the original scheme through
//! Lagrange interpolation over its eigenvalues `{−1, −2, −3}`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::expoly::ExpPoly;
use crate::mat3::{self, cholesky3, cholesky3_jittered, conditional_precision, Mat3};

/// Parameter scheme of the drift matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// `γ = √10, ξ = 6`: distinct eigenvalues `{−1, −2, −3}`.
    Told,
    /// `γ = 2√2, ξ = 3√3`: triple eigenvalue `−√3` (critical damping).
    ToldPP,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Told, Scheme::ToldPP];

    pub fn gamma(self) -> f64 {
        match self {
            Scheme::Told => 10f64.sqrt(),
            Scheme::ToldPP => 2.0 * std::f64::consts::SQRT_2,
        }
    }

    pub fn xi(self) -> f64 {
        match self {
            Scheme::Told => 6.0,
            Scheme::ToldPP => 3.0 * 3f64.sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Told => "told",
            Scheme::ToldPP => "told++",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "told" => Ok(Scheme::Told),
            "told++" | "toldpp" | "told-pp" => Ok(Scheme::ToldPP),
            other => Err(Error::domain(format!(
                "unknown scheme `{other}` (expected `told` or `told++`)"
            ))),
        }
    }
}

/// Scheme plus the potential's Lipschitz constant `L`, the initial
/// covariance scale `α` and the diffusion horizon `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsParams {
    scheme: Scheme,
    gamma: f64,
    xi: f64,
    lipschitz: f64,
    alpha: f64,
    horizon: f64,
}

impl DynamicsParams {
    pub fn new(scheme: Scheme, lipschitz: f64, alpha: f64, horizon: f64) -> Result<Self> {
        for (name, v) in [("lipschitz", lipschitz), ("alpha", alpha), ("horizon", horizon)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be finite and positive (got {v})")));
            }
        }
        Ok(DynamicsParams {
            scheme,
            gamma: scheme.gamma(),
            xi: scheme.xi(),
            lipschitz,
            alpha,
            horizon,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Initial variance `α/L` of every channel.
    pub fn initial_variance(&self) -> f64 {
        self.alpha / self.lipschitz
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        DynamicsParams::new(scheme, self.lipschitz, self.alpha, self.horizon)
            .expect("validated on construction")
    }
}

/// `F = [[0, 1, 0], [−1, 0, γ], [0, −γ, −ξ]]`.
pub fn drift_matrix(params: &DynamicsParams) -> Mat3 {
    let (g, x) = (params.gamma, params.xi);
    Mat3::new([[0.0, 1.0, 0.0], [-1.0, 0.0, g], [0.0, -g, -x]])
}

/// Noise amplitude `√(2ξ/L)` on the acceleration channel.
pub fn diffusion_coefficient(params: &DynamicsParams) -> f64 {
    (2.0 * params.xi / params.lipschitz).sqrt()
}

/// `G = diag(0, 0, √(2ξ/L))`.
pub fn diffusion_matrix(params: &DynamicsParams) -> Mat3 {
    Mat3::diag([0.0, 0.0, diffusion_coefficient(params)])
}

/// Entries `f_ij(t)` of `exp(Ft)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub t: f64,
    pub f: Mat3,
}

/// Six distinct entries of a symmetric 3×3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov6 {
    pub qq: f64,
    pub qp: f64,
    pub qs: f64,
    pub pp: f64,
    pub ps: f64,
    pub ss: f64,
}

impl Cov6 {
    pub fn from_mat3(m: &Mat3) -> Self {
        Cov6 {
            qq: m[(0, 0)],
            qp: m[(0, 1)],
            qs: m[(0, 2)],
            pp: m[(1, 1)],
            ps: m[(1, 2)],
            ss: m[(2, 2)],
        }
    }

    pub fn to_mat3(&self) -> Mat3 {
        Mat3::new([
            [self.qq, self.qp, self.qs],
            [self.qp, self.pp, self.ps],
            [self.qs, self.ps, self.ss],
        ])
    }
}

/// Lower Cholesky factor entries of the kernel covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chol6 {
    pub qq: f64,
    pub pq: f64,
    pub pp: f64,
    pub sq: f64,
    pub sp: f64,
    pub ss: f64,
}

impl Chol6 {
    pub fn from_mat3(l: &Mat3) -> Self {
        Chol6 {
            qq: l[(0, 0)],
            pq: l[(1, 0)],
            pp: l[(1, 1)],
            sq: l[(2, 0)],
            sp: l[(2, 1)],
            ss: l[(2, 2)],
        }
    }

    pub fn to_mat3(&self) -> Mat3 {
        Mat3::new([
            [self.qq, 0.0, 0.0],
            [self.pq, self.pp, 0.0],
            [self.sq, self.sp, self.ss],
        ])
    }
}

/// Analytic moments of the perturbation kernel at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelMoments {
    pub t: f64,
    /// Matrix applied to `x_0` to obtain the mean, i.e. `exp(Ft)`.
    pub mean_coeffs: Mat3,
    pub cov: Cov6,
    pub chol: Chol6,
    /// Inverse conditional standard deviation of `s_t` given `(q_t, p_t)`.
    pub l_t: f64,
}

/// Batch of phase-space points, each channel stored row-major `batch × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    dim: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub s: Vec<f64>,
}

impl PhaseState {
    pub fn new(dim: usize, q: Vec<f64>, p: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("dimension must be positive"));
        }
        if q.len() % dim != 0 || p.len() != q.len() || s.len() != q.len() {
            return Err(Error::shape(format!(
                "channels of lengths {}, {}, {} do not form batches of dimension {dim}",
                q.len(),
                p.len(),
                s.len()
            )));
        }
        if !q.iter().chain(&p).chain(&s).all(|x| x.is_finite()) {
            return Err(Error::domain("phase state has non-finite entries"));
        }
        Ok(PhaseState { dim, q, p, s })
    }

    pub fn zeros(dim: usize, batch: usize) -> Self {
        let n = dim * batch;
        PhaseState { dim, q: vec![0.0; n], p: vec![0.0; n], s: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_size(&self) -> usize {
        self.q.len() / self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).chain(&self.s).all(|x| x.is_finite())
    }

    /// Applies a 3×3 channel-mixing matrix to every scalar triple.
    pub(crate) fn mix(&self, m: &Mat3) -> PhaseState {
        let mut out = PhaseState::zeros(self.dim, self.batch_size());
        for k in 0..self.q.len() {
            let [q, p, s] = m.mul_vec([self.q[k], self.p[k], self.s[k]]);
            out.q[k] = q;
            out.p[k] = p;
            out.s[k] = s;
        }
        out
    }
}

struct SchemeForms {
    transition: [[ExpPoly; 3]; 3],
    /// `∫₀ᵗ f_i3(u) f_j3(u) du` for (qq, qp, qs, pp, ps, ss).
    noise: [ExpPoly; 6],
}

const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

impl SchemeForms {
    fn build(scheme: Scheme) -> SchemeForms {
        let params = DynamicsParams::new(scheme, 1.0, 1.0, 1.0).expect("unit params are valid");
        let f = drift_matrix(&params);
        let mut transition: [[ExpPoly; 3]; 3] = Default::default();
        match scheme {
            Scheme::ToldPP => {
                // (F − λI)³ = 0, so exp(Ft) = e^{λt}[I + tN + t²N²/2].
                let lambda = -(3f64.sqrt());
                let n = f - Mat3::IDENTITY.scale(lambda);
                let n2 = (n * n).scale(0.5);
                for i in 0..3 {
                    for j in 0..3 {
                        let c0 = if i == j { 1.0 } else { 0.0 };
                        transition[i][j] = ExpPoly::term(lambda, vec![c0, n[(i, j)], n2[(i, j)]]);
                    }
                }
            }
            Scheme::Told => {
                let (c2, c1, c0) = mat3::char_poly_coeffs(params.gamma, params.xi)
                    .expect("scheme parameters are positive");
                let roots = mat3::cubic_roots(c2, c1, c0).expect("finite coefficients");
                let lambdas = roots.roots.map(|z| z.re);
                for k in 0..3 {
                    let mut proj = Mat3::IDENTITY;
                    for j in (0..3).filter(|&j| j != k) {
                        proj = proj * (f - Mat3::IDENTITY.scale(lambdas[j]))
                            .scale(1.0 / (lambdas[k] - lambdas[j]));
                    }
                    for i in 0..3 {
                        for j in 0..3 {
                            transition[i][j] = transition[i][j]
                                .add(&ExpPoly::term(lambdas[k], vec![proj[(i, j)]]));
                        }
                    }
                }
            }
        }
        let noise = PAIRS.map(|(i, j)| transition[i][2].mul(&transition[j][2]).integral_from_zero());
        SchemeForms { transition, noise }
    }

    fn get(scheme: Scheme) -> &'static SchemeForms {
        static TOLD: OnceLock<SchemeForms> = OnceLock::new();
        static TOLD_PP: OnceLock<SchemeForms> = OnceLock::new();
        match scheme {
            Scheme::Told => TOLD.get_or_init(|| SchemeForms::build(Scheme::Told)),
            Scheme::ToldPP => TOLD_PP.get_or_init(|| SchemeForms::build(Scheme::ToldPP)),
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("time must be finite and non-negative (got {t})")));
    }
    Ok(())
}

fn exp_ft(scheme: Scheme, t: f64) -> Mat3 {
    let forms = SchemeForms::get(scheme);
    let mut m = Mat3::ZERO;
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = forms.transition[i][j].eval(t);
        }
    }
    m
}

/// Closed-form `exp(Ft)`.
pub fn transition(params: &DynamicsParams, t: f64) -> Result<TransitionMatrix> {
    check_time(t)?;
    Ok(TransitionMatrix { t, f: exp_ft(params.scheme, t) })
}

/// Kernel mean `(exp(Ft) ⊗ I_d) x_0`.
pub fn mean(params: &DynamicsParams, x0: &PhaseState, t: f64) -> Result<PhaseState> {
    check_time(t)?;
    Ok(x0.mix(&exp_ft(params.scheme, t)))
}

/// `Σ_t = exp(Ft) Σ_0 exp(Ft)ᵀ + (2ξ/L) ∫₀ᵗ f_{·3}(u) f_{·3}(u)ᵀ du` for a
/// diagonal `Σ_0 = diag(initial_diag)`.
pub fn covariance_from(params: &DynamicsParams, t: f64, initial_diag: [f64; 3]) -> Result<Mat3> {
    check_time(t)?;
    let e = exp_ft(params.scheme, t);
    let forms = SchemeForms::get(params.scheme);
    let noise = 2.0 * params.xi / params.lipschitz;
    let mut sigma = Mat3::ZERO;
    for (k, &(i, j)) in PAIRS.iter().enumerate() {
        let init: f64 = (0..3).map(|m| e[(i, m)] * e[(j, m)] * initial_diag[m]).sum();
        let v = init + noise * forms.noise[k].eval(t);
        sigma[(i, j)] = v;
        sigma[(j, i)] = v;
    }
    Ok(sigma)
}

fn moments_with(
    params: &DynamicsParams,
    t: f64,
    factor: fn(&Mat3) -> Result<Mat3>,
) -> Result<KernelMoments> {
    let v0 = params.initial_variance();
    let sigma = covariance_from(params, t, [v0; 3])?;
    let l = factor(&sigma)?;
    let l_t = 1.0 / l[(2, 2)];
    Ok(KernelMoments {
        t,
        mean_coeffs: exp_ft(params.scheme, t),
        cov: Cov6::from_mat3(&sigma),
        chol: Chol6::from_mat3(&l),
        l_t,
    })
}

/// Kernel moments with `Σ_0 = (α/L) I₃`.
///
/// A Cholesky failure is returned as an error rather than regularised.
pub fn covariance(params: &DynamicsParams, t: f64) -> Result<KernelMoments> {
    let mut m = moments_with(params, t, cholesky3)?;
    m.l_t = conditional_precision(&m.cov.to_mat3())?;
    Ok(m)
}

/// Same as [`covariance`] but with the jittered Cholesky of the training path.
pub(crate) fn covariance_for_training(params: &DynamicsParams, t: f64) -> Result<KernelMoments> {
    moments_with(params, t, cholesky3_jittered)
}

/// Draw from the perturbation kernel at a single time.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSample {
    pub z: PhaseState,
    pub eps3: Vec<f64>,
    pub l_t: f64,
}

/// Perturbed batch with one diffusion time per element.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct PerturbedBatch {
    pub z: PhaseState,
    pub eps3: Vec<f64>,
    /// One `l_t` per batch element.
    pub l: Vec<f64>,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Training-time sampler: draws `p_0, s_0 ~ N(0, α/L)`, forms the mean and adds
/// `L_t ε` with `ε ~ N(0, I)`, one time per batch element.
///
/// Draw order is fixed (`p_0`, `s_0`, `ε₁`, `ε₂`, `ε₃`, each for the whole
/// batch) so that both schemes consume identical random streams.
pub(crate) fn perturb<R: Rng + ?Sized>(
    params: &DynamicsParams,
    q0: &[f64],
    dim: usize,
    times: &[f64],
    rng: &mut R,
    strict: bool,
) -> Result<PerturbedBatch> {
    if dim == 0 || q0.len() % dim != 0 || q0.len() / dim != times.len() {
        return Err(Error::shape(format!(
            "{} data values, dimension {dim} and {} times are inconsistent",
            q0.len(),
            times.len()
        )));
    }
    let n = q0.len();
    let sd0 = params.initial_variance().sqrt();
    let p0 = normals(rng, n, sd0);
    let s0 = normals(rng, n, sd0);
    let e1 = normals(rng, n, 1.0);
    let e2 = normals(rng, n, 1.0);
    let e3 = normals(rng, n, 1.0);

    let mut z = PhaseState::zeros(dim, times.len());
    let mut l = Vec::with_capacity(times.len());
    for (b, &t) in times.iter().enumerate() {
        let m = if strict {
            covariance(params, t)?
        } else {
            covariance_for_training(params, t)?
        };
        let c = &m.chol;
        for k in b * dim..(b + 1) * dim {
            let [mq, mp, ms] = m.mean_coeffs.mul_vec([q0[k], p0[k], s0[k]]);
            z.q[k] = mq + c.qq * e1[k];
            z.p[k] = mp + c.pq * e1[k] + c.pp * e2[k];
            z.s[k] = ms + c.sq * e1[k] + c.sp * e2[k] + c.ss * e3[k];
        }
        l.push(m.l_t);
    }
    Ok(PerturbedBatch { z, eps3: e3, l })
}

/// One draw of `z_t` for a batch of data points `q0` (row-major `batch × dim`).
pub fn kernel_sample<R: Rng + ?Sized>(
    params: &DynamicsParams,
    q0: &[f64],
    dim: usize,
    t: f64,
    rng: &mut R,
) -> Result<KernelSample> {
    if !(t > 0.0 && t <= params.horizon) {
        return Err(Error::domain(format!(
            "sampling time must lie in (0, {}] (got {t})",
            params.horizon
        )));
    }
    let batch = if dim == 0 { 0 } else { q0.len() / dim };
    let out = perturb(params, q0, dim, &vec![t; batch], rng, true)?;
    let l_t = covariance(params, t)?.l_t;
    Ok(KernelSample { z: out.z, eps3: out.eps3, l_t })
}
