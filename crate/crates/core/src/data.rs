//! Toy datasets: a 1-D Gaussian mixture and a normalised 2-D Swiss roll.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Anything that can produce i.i.d. batches of `dim`-vectors (row-major).
pub trait DataSource {
    fn dim(&self) -> usize;
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    /// Second parameter of `N(x | mean, ·)`, read as a variance.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    components: Vec<GmmComponent>,
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::domain("mixture needs at least one component"));
        }
        if components.iter().any(|c| !(c.weight > 0.0) || !(c.variance >= 0.0) || !c.mean.is_finite()) {
            return Err(Error::domain("mixture weights must be positive and variances non-negative"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(GmmSpec { components })
    }

    /// `0.2·N(0, 0.5) + 0.4·N(5, 1) + 0.4·N(−5, 1)`.
    pub fn benchmark() -> Self {
        GmmSpec::new(vec![
            GmmComponent { weight: 0.2, mean: 0.0, variance: 0.5 },
            GmmComponent { weight: 0.4, mean: 5.0, variance: 1.0 },
            GmmComponent { weight: 0.4, mean: -5.0, variance: 1.0 },
        ])
        .expect("benchmark mixture is valid")
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let second: f64 = self
            .components
            .iter()
            .map(|c| c.weight * (c.variance + c.mean * c.mean))
            .sum();
        second - self.mean().powi(2)
    }
}

/// Mixture samples together with the index of the component each came from.
pub fn sample_gmm_labeled<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let last = spec.components.len() - 1;
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = last;
        for (i, c) in spec.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &spec.components[k];
        let z: f64 = rng.sample(StandardNormal);
        xs.push(c.mean + c.variance.sqrt() * z);
        labels.push(k);
    }
    (xs, labels)
}

pub fn sample_gmm<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> Vec<f64> {
    sample_gmm_labeled(spec, n, rng).0
}

impl DataSource for GmmSpec {
    fn dim(&self) -> usize {
        1
    }
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        sample_gmm(self, n, rng)
    }
}

/// Spiral `θ(cos θ, sin θ)` with `θ ~ U(1.5π, 1.5π + 2π·n_turns)`, isotropic
/// Gaussian jitter, then standardised with the population moments of that
/// construction and scaled to per-axis std `scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwissRollSpec {
    pub n_turns: f64,
    pub noise_std: f64,
    pub scale: f64,
}

impl Default for SwissRollSpec {
    fn default() -> Self {
        SwissRollSpec { n_turns: 1.5, noise_std: 0.5, scale: 1.0 }
    }
}

impl SwissRollSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_turns > 0.0 && self.noise_std >= 0.0 && self.scale > 0.0)
            || !(self.n_turns.is_finite() && self.noise_std.is_finite() && self.scale.is_finite())
        {
            return Err(Error::domain("swiss roll needs n_turns > 0, noise_std ≥ 0, scale > 0"));
        }
        Ok(())
    }

    pub fn theta_range(&self) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        (1.5 * pi, 1.5 * pi + 2.0 * pi * self.n_turns)
    }

    /// Population mean and per-axis standard deviation of the raw spiral.
    pub fn raw_moments(&self) -> ([f64; 2], [f64; 2]) {
        let (a, b) = self.theta_range();
        let w = b - a;
        let at = |f: &dyn Fn(f64) -> f64| f(b) - f(a);
        let mx = at(&|t| t * t.sin() + t.cos()) / w;
        let my = at(&|t| t.sin() - t * t.cos()) / w;
        let cube = at(&|t| t.powi(3) / 3.0);
        let osc = at(&|t| t * t * (2.0 * t).sin() / 2.0 + t * (2.0 * t).cos() / 2.0 - (2.0 * t).sin() / 4.0);
        let ex2 = (cube + osc) / (2.0 * w);
        let ey2 = (cube - osc) / (2.0 * w);
        let n2 = self.noise_std * self.noise_std;
        ([mx, my], [(ex2 - mx * mx + n2).sqrt(), (ey2 - my * my + n2).sqrt()])
    }

    /// Undo the normalisation of one point.
    pub fn to_raw(&self, point: [f64; 2]) -> [f64; 2] {
        let (m, s) = self.raw_moments();
        [0, 1].map(|i| point[i] / self.scale * s[i] + m[i])
    }
}

pub fn sample_swiss_roll<R: Rng + ?Sized>(spec: &SwissRollSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let (a, b) = spec.theta_range();
    let (m, s) = spec.raw_moments();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let theta = a + (b - a) * rng.random::<f64>();
        let mut p = [theta * theta.cos(), theta * theta.sin()];
        if spec.noise_std > 0.0 {
            for x in &mut p {
                *x += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..2 {
            out.push((p[i] - m[i]) / s[i] * spec.scale);
        }
    }
    out
}

impl DataSource for SwissRollSpec {
    fn dim(&self) -> usize {
        2
    }
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        sample_swiss_roll(self, n, rng)
    }
}

/// One row per sample, header `x0,x1,…`, 17 significant digits.
pub fn write_csv<W: Write>(w: &mut W, dim: usize, data: &[f64]) -> Result<()> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::shape(format!("{} values do not form rows of width {dim}", data.len())));
    }
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in data.chunks_exact(dim) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_csv`]; returns `(dim, data)`.
pub fn read_csv<R: BufRead>(r: R) -> Result<(usize, Vec<f64>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty dataset file"))??;
    let dim = header.split(',').count();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != dim {
            return Err(Error::format(format!("row {} has {} fields, expected {dim}", i + 2, row.len())));
        }
        for cell in row {
            data.push(cell.trim().parse::<f64>().map_err(|e| Error::format(format!("row {}: {e}", i + 2)))?);
        }
    }
    Ok((dim, data))
}
