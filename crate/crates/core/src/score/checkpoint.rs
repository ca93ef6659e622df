//! Plain-text checkpoints. Every float is written with 17 significant digits,
//! so a save/load cycle reproduces the training state bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;

use crate::dynamics::{DynamicsParams, Scheme};
use crate::error::{Error, Result};
use crate::score::adam::AdamState;
use crate::seeding::SimRng;

const MAGIC: &str = "told-checkpoint 1";

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &SimRng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> SimRng {
        let mut rng = SimRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scheme: Scheme,
    pub lipschitz: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub iteration: u64,
    pub layer_dims: Vec<usize>,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub rng: RngState,
}

fn floats(out: &mut String, key: &str, xs: &[f64]) {
    let _ = write!(out, "{key} {}", xs.len());
    for x in xs {
        let _ = write!(out, " {x:.16e}");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn dynamics(&self) -> Result<DynamicsParams> {
        DynamicsParams::new(self.scheme, self.lipschitz, self.alpha, self.horizon)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.adam;
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "scheme {}", self.scheme);
        let _ = writeln!(s, "lipschitz {:.16e}", self.lipschitz);
        let _ = writeln!(s, "alpha {:.16e}", self.alpha);
        let _ = writeln!(s, "horizon {:.16e}", self.horizon);
        let _ = writeln!(s, "iteration {}", self.iteration);
        let _ = writeln!(s, "layer_dims {}", dims.join(" "));
        let _ = writeln!(s, "adam_step {}", a.step);
        let _ = writeln!(
            s,
            "adam_hyper {:.16e} {:.16e} {:.16e} {:.16e}",
            a.learning_rate, a.beta1, a.beta2, a.epsilon
        );
        let _ = writeln!(s, "rng_seed {}", hex::encode(self.rng.seed));
        let _ = writeln!(s, "rng_stream {}", self.rng.stream);
        let _ = writeln!(s, "rng_word_pos {}", self.rng.word_pos);
        floats(&mut s, "params", &self.params);
        floats(&mut s, "adam_m", &a.m);
        floats(&mut s, "adam_v", &a.v);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::format(format!("missing `{MAGIC}` header")));
        }
        let mut field = |key: &str| -> Result<Vec<&str>> {
            let line = lines.next().ok_or_else(|| Error::format(format!("missing field `{key}`")))?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                other => Err(Error::format(format!("expected `{key}`, found {other:?}"))),
            }
        };
        fn one<'a>(key: &str, v: Vec<&'a str>) -> Result<&'a str> {
            match v.as_slice() {
                [x] => Ok(x),
                _ => Err(Error::format(format!("`{key}` expects one value"))),
            }
        }
        fn num<T: std::str::FromStr>(key: &str, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::format(format!("bad value `{s}` for `{key}`")))
        }
        fn list(key: &str, v: Vec<&str>) -> Result<Vec<f64>> {
            let (n, rest) = v.split_first().ok_or_else(|| Error::format(format!("`{key}` is empty")))?;
            let n: usize = num(key, n)?;
            if rest.len() != n {
                return Err(Error::format(format!("`{key}` declares {n} values, has {}", rest.len())));
            }
            rest.iter().map(|x| num(key, x)).collect()
        }

        let scheme: Scheme = one("scheme", field("scheme")?)?.parse()?;
        let lipschitz = num("lipschitz", one("lipschitz", field("lipschitz")?)?)?;
        let alpha = num("alpha", one("alpha", field("alpha")?)?)?;
        let horizon = num("horizon", one("horizon", field("horizon")?)?)?;
        let iteration = num("iteration", one("iteration", field("iteration")?)?)?;
        let layer_dims = field("layer_dims")?
            .into_iter()
            .map(|d| num("layer_dims", d))
            .collect::<Result<Vec<usize>>>()?;
        let step = num("adam_step", one("adam_step", field("adam_step")?)?)?;
        let hyper = field("adam_hyper")?
            .into_iter()
            .map(|x| num("adam_hyper", x))
            .collect::<Result<Vec<f64>>>()?;
        let [learning_rate, beta1, beta2, epsilon] = hyper[..] else {
            return Err(Error::format("`adam_hyper` expects four values"));
        };
        let seed_hex = one("rng_seed", field("rng_seed")?)?;
        let seed: [u8; 32] = hex::decode(seed_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::format("`rng_seed` must be 64 hex digits"))?;
        let stream = num("rng_stream", one("rng_stream", field("rng_stream")?)?)?;
        let word_pos = num("rng_word_pos", one("rng_word_pos", field("rng_word_pos")?)?)?;
        let params = list("params", field("params")?)?;
        let m = list("adam_m", field("adam_m")?)?;
        let v = list("adam_v", field("adam_v")?)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::format("optimizer moments do not match the parameter count"));
        }
        let ckpt = Checkpoint {
            scheme,
            lipschitz,
            alpha,
            horizon,
            iteration,
            layer_dims,
            params,
            adam: AdamState { m, v, step, learning_rate, beta1, beta2, epsilon },
            rng: RngState { seed, stream, word_pos },
        };
        ckpt.dynamics()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
