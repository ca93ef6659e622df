//! Fully connected score network with SiLU hidden activations and a
//! hand-written reverse pass.
//!
//! Parameters live in one flat buffer; layer `l` occupies a row-major
//! `out × in` weight block followed by its `out` biases.

use rand::Rng;

use crate::dynamics::PhaseState;
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Elementwise SiLU over a batch.
pub fn silu_batch(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| silu(x)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the reverse pass.
pub(crate) struct ForwardCache {
    batch: usize,
    /// Layer inputs (post-activation), `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// `c (m × n) = a (m × k) · bᵀ` with `b` stored row-major `n × k`, added onto `c`.
fn gemm_abt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m × n) = aᵀ · b` with `a` row-major `k × m` and `b` row-major `k × n`.
fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m × n) = a (m × k) · b (k × n)`, all row-major.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl ScoreNet {
    /// Network for `data_dim`-dimensional data: input `3·data_dim + 1`, the
    /// given hidden widths, output `data_dim`. Hidden layers get fan-in
    /// scaled uniform weights, the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(data_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if data_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::shape("layer widths must be positive"));
        }
        let mut dims = vec![3 * data_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let mut net = ScoreNet { params: vec![0.0; param_count(&dims)], layer_dims: dims };
        for l in 0..net.n_layers() - 1 {
            let bound = 1.0 / (net.layer_dims[l] as f64).sqrt();
            let (w, b) = net.layer_ranges(l);
            for x in &mut net.params[w.start..b.end] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_parts(layer_dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("need at least two positive layer widths"));
        }
        let out = *layer_dims.last().unwrap();
        if layer_dims[0] != 3 * out + 1 {
            return Err(Error::shape(format!(
                "input width {} must equal 3 × output width + 1 = {}",
                layer_dims[0],
                3 * out + 1
            )));
        }
        if params.len() != param_count(&layer_dims) {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                param_count(&layer_dims),
                params.len()
            )));
        }
        Ok(ScoreNet { layer_dims, params })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn data_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight and bias index ranges of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = param_count(&self.layer_dims[..=l]);
        let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
        (start..start + o * i, start + o * i..start + o * i + o)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub(crate) fn forward_cached(&self, input: &[f64], batch: usize) -> (Vec<f64>, ForwardCache) {
        debug_assert_eq!(input.len(), batch * self.input_dim());
        let mut inputs = vec![input.to_vec()];
        let mut pre = Vec::with_capacity(self.n_layers() - 1);
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            let (wr, br) = self.layer_ranges(l);
            let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let bias = &self.params[br];
            let mut z: Vec<f64> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
            gemm_abt_acc(batch, i, o, inputs.last().unwrap(), &self.params[wr], &mut z);
            if l + 1 == self.n_layers() {
                out = z;
            } else {
                inputs.push(silu_batch(&z));
                pre.push(z);
            }
        }
        (out, ForwardCache { batch, inputs, pre })
    }

    /// Gradient of a scalar objective with respect to all parameters, given
    /// its gradient `d_out` with respect to the network output.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Vec<f64> {
        let batch = cache.batch;
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = d_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (wr, br) = self.layer_ranges(l);
            let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
            gemm_atb(o, batch, i, &dz, &cache.inputs[l], &mut grads[wr.clone()]);
            let db = &mut grads[br];
            for row in dz.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            if l > 0 {
                let mut da = vec![0.0; batch * i];
                gemm_ab(batch, o, i, &dz, &self.params[wr], &mut da);
                for (d, &z) in da.iter_mut().zip(&cache.pre[l - 1]) {
                    *d *= silu_grad(z);
                }
                dz = da;
            }
        }
        grads
    }

    /// Plain forward pass on an assembled input matrix (`batch × input_dim`).
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} is not {batch} rows of width {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(self.forward_cached(input, batch).0)
    }
}

/// Rows `[q, p, s, t]` for each batch element.
pub(crate) fn assemble_input(z: &PhaseState, t: &[f64]) -> Result<Vec<f64>> {
    let (d, n) = (z.dim(), z.batch_size());
    if t.len() != n {
        return Err(Error::shape(format!("{} times for a batch of {n}", t.len())));
    }
    let mut input = Vec::with_capacity(n * (3 * d + 1));
    for b in 0..n {
        let r = b * d..(b + 1) * d;
        input.extend_from_slice(&z.q[r.clone()]);
        input.extend_from_slice(&z.p[r.clone()]);
        input.extend_from_slice(&z.s[r]);
        input.push(t[b]);
    }
    Ok(input)
}

/// Score estimate `s_θ(z, t)`, one `dim`-vector per batch element.
pub fn forward_score(net: &ScoreNet, z: &PhaseState, t: &[f64]) -> Result<Vec<f64>> {
    if z.dim() != net.data_dim() {
        return Err(Error::shape(format!(
            "state dimension {} does not match network output {}",
            z.dim(),
            net.data_dim()
        )));
    }
    let input = assemble_input(z, t)?;
    net.forward(&input, z.batch_size())
}

impl crate::sde::ScoreFn for ScoreNet {
    fn score(&self, state: &PhaseState, t: f64) -> Result<Vec<f64>> {
        forward_score(self, state, &vec![t; state.batch_size()])
    }
}
