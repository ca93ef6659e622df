//! Euler–Maruyama integration of the forward SDE `dx = F x dt + G dw` and of
//! its time reversal driven by an estimate of `∇_s log p_t`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{diffusion_coefficient, diffusion_matrix, drift_matrix, DynamicsParams, PhaseState};
use crate::error::{Error, Result};
use crate::mat3::Mat3;

/// Uniform-grid Euler–Maruyama settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub n_steps: usize,
    pub horizon: f64,
    /// Multiplier on the Brownian increments; 0 integrates the drift only.
    pub noise_scale: f64,
}

impl EmConfig {
    pub fn new(n_steps: usize, horizon: f64, noise_scale: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::domain("n_steps must be at least 1"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive (got {horizon})")));
        }
        if !(0.0..=1.0).contains(&noise_scale) {
            return Err(Error::domain(format!("noise_scale must lie in [0, 1] (got {noise_scale})")));
        }
        Ok(EmConfig { n_steps, horizon, noise_scale })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

/// States at every step boundary, `n_steps + 1` frames from `t = 0` to the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<(f64, PhaseState)>,
}

impl Trajectory {
    pub fn terminal(&self) -> &PhaseState {
        &self.frames.last().expect("trajectory has at least one frame").1
    }
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Euler–Maruyama for a general linear SDE `dx = A x dt + B dw` applied to
/// each scalar triple of `x0`. Only Brownian components that feed a non-zero
/// column of `B` are drawn.
pub fn simulate_linear<R, O>(
    drift: &Mat3,
    diffusion: &Mat3,
    x0: PhaseState,
    cfg: &EmConfig,
    rng: &mut R,
    mut observer: O,
) -> Result<PhaseState>
where
    R: Rng + ?Sized,
    O: FnMut(usize, f64, &PhaseState),
{
    let dt = cfg.dt();
    let step_b = diffusion.scale(cfg.noise_scale * dt.sqrt());
    let active: Vec<usize> = (0..3)
        .filter(|&c| (0..3).any(|r| step_b[(r, c)] != 0.0))
        .collect();
    let step_a = drift.scale(dt);
    let mut x = x0;
    observer(0, 0.0, &x);
    for step in 1..=cfg.n_steps {
        for k in 0..x.q.len() {
            let v = [x.q[k], x.p[k], x.s[k]];
            let mut d = step_a.mul_vec(v);
            for &c in &active {
                let z: f64 = rng.sample(StandardNormal);
                for (r, dr) in d.iter_mut().enumerate() {
                    *dr += step_b[(r, c)] * z;
                }
            }
            x.q[k] += d[0];
            x.p[k] += d[1];
            x.s[k] += d[2];
        }
        if !x.is_finite() {
            return Err(Error::Simulation { step });
        }
        observer(step, step as f64 * dt, &x);
    }
    Ok(x)
}

/// Forward simulation from data `q0` with `p_0, s_0 ~ N(0, α/L)`, reporting
/// every frame to `observer`. Returns the terminal state.
pub fn forward_simulate_with<R, O>(
    params: &DynamicsParams,
    q0: &[f64],
    dim: usize,
    cfg: &EmConfig,
    rng: &mut R,
    observer: O,
) -> Result<PhaseState>
where
    R: Rng + ?Sized,
    O: FnMut(usize, f64, &PhaseState),
{
    let sd0 = params.initial_variance().sqrt();
    let p0 = normals(rng, q0.len(), sd0);
    let s0 = normals(rng, q0.len(), sd0);
    let x0 = PhaseState::new(dim, q0.to_vec(), p0, s0)?;
    simulate_linear(&drift_matrix(params), &diffusion_matrix(params), x0, cfg, rng, observer)
}

/// Forward simulation keeping every frame.
pub fn forward_simulate<R: Rng + ?Sized>(
    params: &DynamicsParams,
    q0: &[f64],
    dim: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut frames = Vec::with_capacity(cfg.n_steps + 1);
    forward_simulate_with(params, q0, dim, cfg, rng, |_, t, x| frames.push((t, x.clone())))?;
    Ok(Trajectory { frames })
}

/// Estimate of the acceleration-channel score `∇_s log p_t(x)`, one
/// `dim`-vector per batch element.
pub trait ScoreFn: Sync {
    fn score(&self, state: &PhaseState, t: f64) -> Result<Vec<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&PhaseState, f64) -> Vec<f64> + Sync,
{
    fn score(&self, state: &PhaseState, t: f64) -> Result<Vec<f64>> {
        Ok(self(state, t))
    }
}

/// Reverse-time sampler. Starts from the equilibrium `N(0, I/L)` on all three
/// channels and integrates in sampler time `τ`, querying the score at forward
/// time `t = T − τ`. Returns the terminal position batch (`n_samples × dim`).
pub fn reverse_sample<R, S>(
    params: &DynamicsParams,
    score: &S,
    cfg: &EmConfig,
    rng: &mut R,
    n_samples: usize,
    dim: usize,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    S: ScoreFn + ?Sized,
{
    let n = n_samples * dim;
    let sd = params.lipschitz().recip().sqrt();
    let q = normals(rng, n, sd);
    let p = normals(rng, n, sd);
    let s = normals(rng, n, sd);
    let mut x = PhaseState::new(dim, q, p, s)?;

    let (gamma, xi) = (params.gamma(), params.xi());
    let score_gain = 2.0 * xi / params.lipschitz();
    let dt = cfg.dt();
    let noise = cfg.noise_scale * diffusion_coefficient(params) * dt.sqrt();
    for step in 0..cfg.n_steps {
        let t = cfg.horizon - step as f64 * dt;
        let sc = score.score(&x, t)?;
        if sc.len() != n {
            return Err(Error::shape(format!("score returned {} values, expected {n}", sc.len())));
        }
        for k in 0..n {
            let (q, p, s) = (x.q[k], x.p[k], x.s[k]);
            x.q[k] = q - p * dt;
            x.p[k] = p + (q - gamma * s) * dt;
            x.s[k] = s + (gamma * p + xi * s + score_gain * sc[k]) * dt;
            if noise != 0.0 {
                x.s[k] += noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !x.is_finite() {
            return Err(Error::Simulation { step: step + 1 });
        }
    }
    Ok(x.q)
}

/// Binning of the position channel used for density exports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistogramSpec {
    /// Densities (count / (n · width)); samples outside `[lo, hi)` are dropped.
    pub fn densities(&self, values: &[f64]) -> Vec<f64> {
        let width = (self.hi - self.lo) / self.bins as f64;
        let mut counts = vec![0usize; self.bins];
        for &v in values {
            if v >= self.lo && v < self.hi {
                let b = (((v - self.lo) / width) as usize).min(self.bins - 1);
                counts[b] += 1;
            }
        }
        let norm = values.len().max(1) as f64 * width;
        counts.into_iter().map(|c| c as f64 / norm).collect()
    }
}

/// Writes `step,t,bin_left,bin_right,density` rows for the q-channel of one frame.
pub fn write_q_histogram<W: Write>(
    w: &mut W,
    spec: &HistogramSpec,
    step: usize,
    t: f64,
    state: &PhaseState,
) -> Result<()> {
    let width = (spec.hi - spec.lo) / spec.bins as f64;
    for (b, d) in spec.densities(&state.q).into_iter().enumerate() {
        let left = spec.lo + b as f64 * width;
        writeln!(w, "{step},{t:.16e},{left:.16e},{:.16e},{d:.16e}", left + width)?;
    }
    Ok(())
}

pub const HISTOGRAM_HEADER: &str = "step,t,bin_left,bin_right,density";

/// Exports every frame of a trajectory as histogram rows, header included.
pub fn write_trajectory_histograms<W: Write>(
    w: &mut W,
    spec: &HistogramSpec,
    trajectory: &Trajectory,
) -> Result<()> {
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (step, (t, x)) in trajectory.frames.iter().enumerate() {
        write_q_histogram(w, spec, step, *t, x)?;
    }
    Ok(())
}
