//! Denoising score-matching loss and the training loop.

use std::io::Write;

use rand::Rng;

use crate::data::DataSource;
use crate::dynamics::{perturb, DynamicsParams};
use crate::error::{Error, Result};
use crate::score::adam::{adam_step, AdamState};
use crate::score::checkpoint::{Checkpoint, RngState};
use crate::score::mlp::{assemble_input, ScoreNet};
use crate::seeding::{rng_from_seed, SimRng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Lower end of the diffusion-time distribution `U(t_min, T)`.
    pub t_min: f64,
    pub checkpoint_interval: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            n_iterations: 5000,
            learning_rate: 5e-3,
            seed: 0,
            t_min: 1e-3,
            checkpoint_interval: 1000,
            hidden: vec![64, 64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, params: &DynamicsParams) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::domain("batch_size and checkpoint_interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning_rate must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min < params.horizon()) {
            return Err(Error::domain(format!(
                "t_min must lie in (0, {}) (got {})",
                params.horizon(),
                self.t_min
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::domain("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// `‖ε₃ + s_θ/l_t‖²` averaged over the batch, and its gradient with respect
/// to the scores.
pub fn denoising_loss(scores: &[f64], eps3: &[f64], l: &[f64], dim: usize) -> (f64, Vec<f64>) {
    let n = l.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for b in 0..n {
        for k in b * dim..(b + 1) * dim {
            let r = eps3[k] + scores[k] / l[b];
            loss += r * r;
            grad[k] = 2.0 * r / (l[b] * n as f64);
        }
    }
    (loss / n as f64, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// One evaluation of the training objective on a data batch `q0`
/// (`batch × dim`): times `t ~ U(t_min, T)` per element, kernel draws, network
/// scores, and exact parameter gradients.
pub fn loss<R: Rng + ?Sized>(
    net: &ScoreNet,
    params: &DynamicsParams,
    q0: &[f64],
    t_min: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    let dim = net.data_dim();
    if q0.is_empty() || q0.len() % dim != 0 {
        return Err(Error::shape(format!("{} values do not form a batch of dimension {dim}", q0.len())));
    }
    let batch = q0.len() / dim;
    let span = params.horizon() - t_min;
    let times: Vec<f64> = (0..batch).map(|_| t_min + span * rng.random::<f64>()).collect();
    let pert = perturb(params, q0, dim, &times, rng, false)?;
    let input = assemble_input(&pert.z, &times)?;
    let (scores, cache) = net.forward_cached(&input, batch);
    let (loss, d_scores) = denoising_loss(&scores, &pert.eps3, &pert.l, dim);
    let grads = net.backward(&cache, &d_scores);
    Ok(LossOutput { loss, grads })
}

/// Training state that can be checkpointed and resumed bit-exactly.
pub struct Trainer<'a, D: DataSource> {
    params: DynamicsParams,
    data: &'a D,
    cfg: TrainConfig,
    net: ScoreNet,
    adam: AdamState,
    rng: SimRng,
    iteration: u64,
}

impl<'a, D: DataSource> Trainer<'a, D> {
    /// Fresh network; initial weights are the first draws of the seeded stream.
    pub fn new(params: DynamicsParams, data: &'a D, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&params)?;
        let mut rng = rng_from_seed(cfg.seed);
        let net = ScoreNet::new(data.dim(), &cfg.hidden, &mut rng)?;
        let adam = AdamState::new(net.params().len(), cfg.learning_rate);
        Ok(Trainer { params, data, cfg, net, adam, rng, iteration: 0 })
    }

    pub fn resume(params: DynamicsParams, data: &'a D, cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate(&params)?;
        if ckpt.scheme != params.scheme() {
            return Err(Error::format(format!(
                "checkpoint was trained with {} but {} was requested",
                ckpt.scheme,
                params.scheme()
            )));
        }
        let net = ScoreNet::from_parts(ckpt.layer_dims, ckpt.params)?;
        if net.data_dim() != data.dim() {
            return Err(Error::shape("checkpoint network does not match the dataset dimension"));
        }
        Ok(Trainer {
            params,
            data,
            cfg,
            net,
            adam: ckpt.adam,
            rng: ckpt.rng.restore(),
            iteration: ckpt.iteration,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn into_net(self) -> ScoreNet {
        self.net
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.n_iterations
    }

    /// One data batch, one loss evaluation, one Adam update. Returns the loss.
    pub fn step(&mut self) -> Result<f64> {
        let iteration = self.iteration + 1;
        let fail = |reason: String| Error::Training { iteration, reason };
        let q0 = self.data.sample(self.cfg.batch_size, &mut self.rng);
        let out = loss(&self.net, &self.params, &q0, self.cfg.t_min, &mut self.rng)
            .map_err(|e| fail(e.to_string()))?;
        if !out.loss.is_finite() {
            return Err(fail(format!("non-finite loss {}", out.loss)));
        }
        adam_step(&mut self.adam, &mut self.net, &out.grads)?;
        if !self.net.is_finite() {
            return Err(fail("non-finite parameters after update".into()));
        }
        self.iteration = iteration;
        Ok(out.loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scheme: self.params.scheme(),
            lipschitz: self.params.lipschitz(),
            alpha: self.params.alpha(),
            horizon: self.params.horizon(),
            iteration: self.iteration,
            layer_dims: self.net.layer_dims().to_vec(),
            params: self.net.params().to_vec(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Runs to `n_iterations`, calling `on_step(trainer, loss)` after every
    /// iteration and `on_checkpoint` at multiples of `checkpoint_interval`.
    pub fn run<S, C>(&mut self, mut on_step: S, mut on_checkpoint: C) -> Result<()>
    where
        S: FnMut(&Self, f64) -> Result<()>,
        C: FnMut(&Self) -> Result<()>,
    {
        while !self.is_done() {
            let l = self.step()?;
            on_step(self, l)?;
            if self.iteration % self.cfg.checkpoint_interval == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub net: ScoreNet,
    /// `(iteration, loss)` pairs, one per iteration.
    pub history: Vec<(u64, f64)>,
}

/// Trains from scratch for `cfg.n_iterations` iterations.
pub fn train<D: DataSource>(params: &DynamicsParams, data: &D, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(*params, data, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.n_iterations as usize);
    trainer.run(
        |t, l| {
            history.push((t.iteration(), l));
            Ok(())
        },
        |_| Ok(()),
    )?;
    Ok(TrainOutcome { net: trainer.into_net(), history })
}

pub const LOSS_HEADER: &str = "iteration,loss";

pub fn write_loss_csv<W: Write>(w: &mut W, history: &[(u64, f64)], header: bool) -> Result<()> {
    if header {
        writeln!(w, "{LOSS_HEADER}")?;
    }
    for (i, l) in history {
        writeln!(w, "{i},{l:.16e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SwissRollSpec;
    use crate::dynamics::Scheme;
    use crate::score::mlp::forward_score;

    fn params() -> DynamicsParams {
        DynamicsParams::new(Scheme::ToldPP, 4.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn teacher_forced_optimum_has_zero_loss() {
        let eps3 = vec![0.3, -1.2, 0.8, 2.0];
        let l = vec![1.7, 0.4];
        let scores: Vec<f64> = eps3.iter().enumerate().map(|(k, e)| -l[k / 2] * e).collect();
        let (loss, grad) = denoising_loss(&scores, &eps3, &l, 2);
        assert!(loss < 1e-28);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn zero_network_loss_is_data_dimension() {
        let data = SwissRollSpec::default();
        let net = ScoreNet::new(2, &[8], &mut rng_from_seed(0)).unwrap();
        let mut rng = rng_from_seed(1);
        let n = 100_000;
        let q0 = data.sample(n, &mut rng);
        // The zero network gives per-element loss ‖ε₃‖² ~ χ²₂ (variance 4).
        let out = loss(&net, &params(), &q0, 1e-3, &mut rng).unwrap();
        let se = (4.0 / n as f64).sqrt();
        assert!((out.loss - 2.0).abs() < 3.0 * se, "{}", out.loss);
    }

    #[test]
    fn zero_iterations_return_initialisation() {
        let data = SwissRollSpec::default();
        let cfg = TrainConfig { n_iterations: 0, hidden: vec![8], ..Default::default() };
        let out = train(&params(), &data, &cfg).unwrap();
        let init = ScoreNet::new(2, &[8], &mut rng_from_seed(cfg.seed)).unwrap();
        assert_eq!(out.net, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn config_validation() {
        let p = params();
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate(&p).is_err());
        assert!(TrainConfig { t_min: 0.0, ..Default::default() }.validate(&p).is_err());
        assert!(TrainConfig { t_min: 2.0, ..Default::default() }.validate(&p).is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate(&p).is_err());
        assert!(TrainConfig::default().validate(&p).is_ok());
    }

    #[test]
    fn loss_rejects_bad_batch() {
        let net = ScoreNet::new(2, &[4], &mut rng_from_seed(0)).unwrap();
        assert!(loss(&net, &params(), &[], 1e-3, &mut rng_from_seed(0)).is_err());
        assert!(loss(&net, &params(), &[1.0, 2.0, 3.0], 1e-3, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn schemes_share_the_random_stream() {
        let data = SwissRollSpec::default();
        let cfg = TrainConfig { n_iterations: 3, batch_size: 64, hidden: vec![8], ..Default::default() };
        let mut words = Vec::new();
        for scheme in Scheme::ALL {
            let p = params().with_scheme(scheme);
            let mut tr = Trainer::new(p, &data, cfg.clone()).unwrap();
            tr.run(|_, _| Ok(()), |_| Ok(())).unwrap();
            words.push(tr.checkpoint().rng);
        }
        assert_eq!(words[0], words[1]);
    }

    #[test]
    fn short_training_reduces_loss_and_keeps_scores_finite() {
        let data = SwissRollSpec::default();
        let cfg = TrainConfig { n_iterations: 200, batch_size: 256, hidden: vec![32, 32], ..Default::default() };
        let out = train(&params(), &data, &cfg).unwrap();
        let first: f64 = out.history[..20].iter().map(|h| h.1).sum::<f64>() / 20.0;
        let last: f64 = out.history[180..].iter().map(|h| h.1).sum::<f64>() / 20.0;
        assert!(last < first, "{first} -> {last}");
        let z = crate::dynamics::PhaseState::zeros(2, 3);
        assert!(forward_score(&out.net, &z, &[0.5; 3]).unwrap().iter().all(|x| x.is_finite()));
    }
}
