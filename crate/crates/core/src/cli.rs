//! The `told` command-line tool.
//!
//! Settings resolve in three layers: per-command defaults, then an optional
//! flat `key = value` file (`--config`), then flags. Unknown keys are
//! rejected. Every seeded command writes byte-identical files on re-runs;
//! wall-clock timings only ever go to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::data::{DataSource, GmmSpec, SwissRollSpec};
use crate::dynamics::{self, DynamicsParams, Scheme};
use crate::error::{Error, Result};
use crate::mat3::{char_poly_coeffs, cubic_roots};
use crate::metrics::{
    gaussian_frechet, read_metric_rows, wasserstein_to_normal, welch_t_test, write_metric_rows, MetricRow,
};
use crate::score::{write_loss_csv, Checkpoint, ScoreNet, TrainConfig, Trainer};
use crate::sde::{forward_simulate_with, reverse_sample, write_q_histogram, EmConfig, HistogramSpec, HISTOGRAM_HEADER};
use crate::seeding::{rng_from_seed, substream_seed};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TOLD_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Gmm,
    SwissRoll,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Gmm => "gmm",
            Dataset::SwissRoll => "swiss_roll",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gmm" => Ok(Dataset::Gmm),
            "swiss_roll" | "swiss-roll" | "swissroll" => Ok(Dataset::SwissRoll),
            other => Err(Error::domain(format!("unknown dataset `{other}` (expected gmm or swiss_roll)"))),
        }
    }
}

/// Every tunable of every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub dataset: Dataset,
    pub lipschitz: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub noise_scale: f64,
    /// Trajectories for `forward`, samples per FID batch for `evaluate`.
    pub samples: usize,
    pub batch_size: usize,
    pub n_iterations: u64,
    pub learning_rate: f64,
    pub t_min: f64,
    pub checkpoint_interval: u64,
    pub hidden: Vec<usize>,
    /// FID batches per network.
    pub batches: usize,
    pub bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub const CONFIG_KEYS: [&str; 20] = [
    "scheme",
    "dataset",
    "lipschitz",
    "alpha",
    "horizon",
    "n_steps",
    "noise_scale",
    "samples",
    "batch_size",
    "n_iterations",
    "learning_rate",
    "t_min",
    "checkpoint_interval",
    "hidden",
    "batches",
    "bins",
    "hist_lo",
    "hist_hi",
    "seed",
    "out_dir",
];

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

impl Default for RunConfig {
    /// Swiss-roll training settings at desk scale.
    fn default() -> Self {
        RunConfig {
            scheme: Scheme::ToldPP,
            dataset: Dataset::SwissRoll,
            lipschitz: 4.0,
            alpha: 0.1,
            horizon: 1.0,
            n_steps: 200,
            noise_scale: 1.0,
            samples: 8192,
            batch_size: 4096,
            n_iterations: 5000,
            learning_rate: 5e-3,
            t_min: 1e-3,
            checkpoint_interval: 1000,
            hidden: vec![64, 64, 64],
            batches: 5,
            bins: 100,
            hist_lo: -10.0,
            hist_hi: 10.0,
            seed: 0,
            out_dir: default_out_dir(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::format(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Gaussian-mixture forward-convergence settings (50 steps, `T = 1`, `L = 1`, 1024 samples).
    pub fn forward_defaults() -> Self {
        RunConfig {
            dataset: Dataset::Gmm,
            lipschitz: 1.0,
            n_steps: 50,
            samples: 1024,
            ..RunConfig::default()
        }
    }

    /// Full-size network and the 10 × 10 FID protocol with `2²⁰`-sample batches.
    pub fn apply_paper_scale(&mut self) {
        self.hidden = vec![128; 7];
        self.batches = 10;
        self.samples = 1 << 20;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scheme" => self.scheme = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "lipschitz" => self.lipschitz = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "horizon" => self.horizon = parse_value(key, v)?,
            "n_steps" => self.n_steps = parse_value(key, v)?,
            "noise_scale" => self.noise_scale = parse_value(key, v)?,
            "samples" => self.samples = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "n_iterations" => self.n_iterations = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "t_min" => self.t_min = parse_value(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|h| parse_value(key, h)).collect::<Result<_>>()?
                }
            }
            "batches" => self.batches = parse_value(key, v)?,
            "bins" => self.bins = parse_value(key, v)?,
            "hist_lo" => self.hist_lo = parse_value(key, v)?,
            "hist_hi" => self.hist_hi = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::format(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected `key = value`", n + 1)))?;
            if seen.insert(key.trim().to_string(), n).is_some() {
                return Err(Error::format(format!("line {}: duplicate key `{}`", n + 1, key.trim())));
            }
            self.set(key, value)
                .map_err(|e| Error::format(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "scheme" => self.scheme.to_string(),
            "dataset" => self.dataset.to_string(),
            "lipschitz" => self.lipschitz.to_string(),
            "alpha" => self.alpha.to_string(),
            "horizon" => self.horizon.to_string(),
            "n_steps" => self.n_steps.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "samples" => self.samples.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_iterations" => self.n_iterations.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "t_min" => self.t_min.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "hidden" => self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "batches" => self.batches.to_string(),
            "bins" => self.bins.to_string(),
            "hist_lo" => self.hist_lo.to_string(),
            "hist_hi" => self.hist_hi.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// One `key = value` line per key, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn dynamics(&self) -> Result<DynamicsParams> {
        DynamicsParams::new(self.scheme, self.lipschitz, self.alpha, self.horizon)
    }

    pub fn em(&self) -> Result<EmConfig> {
        EmConfig::new(self.n_steps, self.horizon, self.noise_scale)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            n_iterations: self.n_iterations,
            learning_rate: self.learning_rate,
            seed: self.seed,
            t_min: self.t_min,
            checkpoint_interval: self.checkpoint_interval,
            hidden: self.hidden.clone(),
        }
    }

    pub fn histogram(&self) -> HistogramSpec {
        HistogramSpec { lo: self.hist_lo, hi: self.hist_hi, bins: self.bins }
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.dynamics()?;
        self.em()?;
        self.train_config().validate(&params)?;
        if self.samples == 0 || self.batches == 0 || self.bins == 0 {
            return Err(Error::domain("samples, batches and bins must be positive"));
        }
        if !(self.hist_lo < self.hist_hi) || !self.hist_lo.is_finite() || !self.hist_hi.is_finite() {
            return Err(Error::domain("histogram range needs hist_lo < hist_hi"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::domain("out_dir is empty"));
        }
        let parent = self.out_dir.parent().filter(|p| !p.as_os_str().is_empty());
        if !self.out_dir.is_dir() && parent.is_some_and(|p| !p.is_dir()) {
            return Err(Error::domain(format!(
                "neither {} nor its parent directory exists",
                self.out_dir.display()
            )));
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "told", version, about = "Third-order Langevin diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Eigen-analysis of the drift matrix for given (gamma, xi).
    Analyze {
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long, allow_hyphen_values = true)]
        xi: f64,
    },
    /// Forward diffusion of the Gaussian mixture under both schemes.
    Forward(RunArgs),
    /// Train a score network on the configured dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Gaussian-Fréchet evaluation of checkpoints, or a t-test between two result files.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Two metric files (one per scheme) to compare with Welch's t-test.
        #[arg(long, value_name = "PATH", num_args = 2)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time transition + covariance evaluation for both schemes.
    Benchmark {
        #[arg(long, default_value_t = 1_000_000)]
        calls: u64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Full-size network and 10 × 10 FID protocol.
    #[arg(long)]
    paper_scale: bool,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

impl RunArgs {
    fn resolve(&self, defaults: RunConfig) -> std::result::Result<RunConfig, Failure> {
        let mut cfg = defaults;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text).map_err(usage)?;
        }
        if self.paper_scale {
            cfg.apply_paper_scale();
        }
        let mut flags: Vec<(String, String)> = Vec::new();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("scheme", self.scheme.clone());
        flag("dataset", self.dataset.clone());
        flag("samples", self.samples.map(|v| v.to_string()));
        flag("n_steps", self.steps.map(|v| v.to_string()));
        flag("n_iterations", self.iterations.map(|v| v.to_string()));
        flag("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            flags.push((k.to_string(), v.to_string()));
        }
        for (k, v) in flags {
            cfg.set(&k, &v).map_err(usage)?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Analyze { gamma, xi } => {
            if !(gamma > 0.0 && gamma.is_finite() && xi > 0.0 && xi.is_finite()) {
                return Err(usage(format!("--gamma and --xi must be positive and finite (got {gamma}, {xi})")));
            }
            print!("{}", analyze_report(gamma, xi)?);
            Ok(())
        }
        Command::Forward(run) => {
            let cfg = run.resolve(RunConfig::forward_defaults())?;
            Ok(cmd_forward(&cfg)?)
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve(RunConfig::default())?;
            Ok(cmd_train(&cfg, resume.as_deref())?)
        }
        Command::Evaluate { run, checkpoints, compare, output } => {
            let cfg = run.resolve(RunConfig::default())?;
            match (checkpoints.is_empty(), compare.is_empty()) {
                (false, true) => Ok(cmd_evaluate(&cfg, &checkpoints, output.as_deref())?),
                (true, false) => Ok(cmd_compare(&cfg, &compare[0], &compare[1], output.as_deref())?),
                _ => Err(usage("pass either --checkpoint (one or more) or --compare A B")),
            }
        }
        Command::Benchmark { calls } => {
            if calls == 0 {
                return Err(usage("--calls must be positive"));
            }
            print!("{}", cmd_benchmark(calls)?);
            Ok(())
        }
    }
}

/// Compact decimal form: 7 decimals, trailing zeros removed.
fn short(x: f64) -> String {
    let s = format!("{x:.7}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

/// Roots closer than this are reported as one repeated eigenvalue.
const MULTIPLICITY_TOL: f64 = 1e-7;

/// Human-readable spectral report for the drift matrix with `(γ, ξ)`.
pub fn analyze_report(gamma: f64, xi: f64) -> Result<String> {
    let (c2, c1, c0) = char_poly_coeffs(gamma, xi)?;
    let roots = cubic_roots(c2, c1, c0)?;
    let disc = 18.0 * c2 * c1 * c0 - 4.0 * c2.powi(3) * c0 + c2 * c2 * c1 * c1 - 4.0 * c1.powi(3) - 27.0 * c0 * c0;
    let mut out = String::new();
    let w = &mut out;
    use fmt::Write as _;
    let _ = writeln!(w, "gamma = {gamma:.16e}, xi = {xi:.16e}");
    let _ = writeln!(w, "characteristic polynomial: λ^3 + {} λ^2 + {} λ + {}", short(c2), short(c1), short(c0));
    let _ = writeln!(w, "discriminant: {disc:.16e}");

    let summary = if roots.all_real {
        let mut r: Vec<f64> = roots.roots.iter().map(|z| z.re).collect();
        r.sort_by(|a, b| b.total_cmp(a));
        let same01 = (r[0] - r[1]).abs() <= MULTIPLICITY_TOL;
        let same12 = (r[1] - r[2]).abs() <= MULTIPLICITY_TOL;
        match (same01, same12) {
            (true, true) => format!("critically damped, λ = {} (×3)", short(r[1])),
            (true, false) => format!("critically damped (double root), λ = {} (×2), {}", short(r[0]), short(r[2])),
            (false, true) => format!("critically damped (double root), λ = {}, {} (×2)", short(r[0]), short(r[1])),
            (false, false) => format!(
                "overdamped, real eigenvalues {}, {}, {}",
                short(r[0]),
                short(r[1]),
                short(r[2])
            ),
        }
    } else {
        let real = roots.roots.iter().find(|z| z.im == 0.0).map(|z| z.re).unwrap_or(f64::NAN);
        let pair = roots.roots.iter().find(|z| z.im > 0.0).copied().unwrap_or_default();
        format!(
            "underdamped, eigenvalues {} ± {}i, {}",
            short(pair.re),
            short(pair.im),
            short(real)
        )
    };
    let _ = writeln!(w, "{summary}");
    for (k, z) in roots.roots.iter().enumerate() {
        let _ = writeln!(w, "eigenvalue {k}: {:.16e} {:+.16e}i", z.re, z.im);
    }
    let gap = -roots.roots.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let _ = writeln!(w, "spectral gap (-max Re λ): {gap:.16e}");
    for scheme in Scheme::ALL {
        let ref_roots = {
            let (a, b, c) = char_poly_coeffs(scheme.gamma(), scheme.xi())?;
            cubic_roots(a, b, c)?
        };
        let ref_gap = -ref_roots.max_real_root.unwrap_or(f64::NAN);
        let _ = writeln!(
            w,
            "vs {scheme} (gamma = {}, xi = {}): gap {} , ratio {}",
            short(scheme.gamma()),
            short(scheme.xi()),
            short(ref_gap),
            short(gap / ref_gap)
        );
    }
    if let Some(max) = roots.max_real_root {
        let bound = -3f64.sqrt();
        let _ = writeln!(
            w,
            "real-spectrum bound max λ ≥ -√3: {} (margin {:.3e})",
            if max >= bound - 1e-6 { "holds" } else { "VIOLATED" },
            max - bound
        );
    }
    Ok(out)
}

fn create_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub const FORWARD_HISTOGRAM_FILE: &str = "forward_histograms.csv";
pub const FORWARD_W1_FILE: &str = "forward_w1.csv";
pub const FORWARD_W1_HEADER: &str = "scheme,step,t,w1";

/// Per-frame `W₁(q_t, N(0, 1/L))` for one scheme on the Gaussian mixture.
/// Also writes histogram rows (prefixed by the scheme) when `hist` is given.
pub fn forward_w1_curve(
    cfg: &RunConfig,
    scheme: Scheme,
    mut hist: Option<&mut dyn Write>,
) -> Result<Vec<(usize, f64, f64)>> {
    let params = cfg.dynamics()?.with_scheme(scheme);
    let em = cfg.em()?;
    let spec = cfg.histogram();
    let sd = params.lipschitz().recip().sqrt();
    // Same seed for both schemes: identical data and noise streams.
    let mut rng = rng_from_seed(cfg.seed);
    let q0 = GmmSpec::benchmark().sample(cfg.samples, &mut rng);
    let mut curve = Vec::with_capacity(em.n_steps + 1);
    let mut failure = None;
    let mut buf = Vec::new();
    forward_simulate_with(&params, &q0, 1, &em, &mut rng, |step, t, x| {
        if failure.is_some() {
            return;
        }
        match wasserstein_to_normal(&x.q, 0.0, sd) {
            Ok(w) => curve.push((step, t, w)),
            Err(e) => failure = Some(e),
        }
        if let Some(h) = hist.as_deref_mut() {
            buf.clear();
            let res = write_q_histogram(&mut buf, &spec, step, t, x).and_then(|_| {
                for line in String::from_utf8_lossy(&buf).lines() {
                    writeln!(h, "{scheme},{line}")?;
                }
                Ok(())
            });
            if let Err(e) = res {
                failure = Some(e);
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(curve),
    }
}

fn cmd_forward(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.dataset != Dataset::Gmm {
        bail!("forward runs on the gmm dataset only (got {})", cfg.dataset);
    }
    create_out_dir(&cfg.out_dir)?;
    let hist_path = cfg.out_dir.join(FORWARD_HISTOGRAM_FILE);
    let w1_path = cfg.out_dir.join(FORWARD_W1_FILE);
    let mut hist = create(&hist_path)?;
    let mut w1 = create(&w1_path)?;
    writeln!(hist, "scheme,{HISTOGRAM_HEADER}")?;
    writeln!(w1, "{FORWARD_W1_HEADER}")?;
    for scheme in Scheme::ALL {
        let curve = forward_w1_curve(cfg, scheme, Some(&mut hist)).with_context(|| format!("forward run for {scheme}"))?;
        for (step, t, w) in &curve {
            writeln!(w1, "{scheme},{step},{t:.16e},{w:.16e}")?;
        }
        let (_, t, w) = curve.last().copied().unwrap_or((0, 0.0, f64::NAN));
        println!("{scheme}: W1(q_t, N(0, 1/L)) at t = {} is {w:.6}", short(t));
    }
    hist.flush()?;
    w1.flush()?;
    println!("wrote {} and {}", hist_path.display(), w1_path.display());
    Ok(())
}

fn scheme_tag(scheme: Scheme) -> &'static str {
    match scheme {
        Scheme::Told => "told",
        Scheme::ToldPP => "toldpp",
    }
}

pub fn loss_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(format!("{}_seed{}_loss.csv", scheme_tag(cfg.scheme), cfg.seed))
}

pub fn checkpoint_path(cfg: &RunConfig, iteration: u64) -> PathBuf {
    cfg.out_dir
        .join(format!("{}_seed{}_iter{iteration:06}.ckpt", scheme_tag(cfg.scheme), cfg.seed))
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    match cfg.dataset {
        Dataset::SwissRoll => train_on(cfg, &SwissRollSpec::default(), resume),
        Dataset::Gmm => train_on(cfg, &GmmSpec::benchmark(), resume),
    }
}

/// Loss rows already on disk up to and including `iteration`.
fn previous_losses(path: &Path, iteration: u64) -> anyhow::Result<Vec<(u64, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let (i, l) = line.split_once(',').with_context(|| format!("malformed line `{line}` in {}", path.display()))?;
        let i: u64 = i.parse()?;
        if i <= iteration {
            rows.push((i, l.parse()?));
        }
    }
    Ok(rows)
}

fn train_on<D: DataSource>(cfg: &RunConfig, data: &D, resume: Option<&Path>) -> anyhow::Result<()> {
    create_out_dir(&cfg.out_dir)?;
    let params = cfg.dynamics()?;
    let tc = cfg.train_config();
    let loss_file = loss_path(cfg);
    let (mut trainer, mut history) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.dynamics()? != params {
                bail!("checkpoint dynamics ({}, L={}, α={}, T={}) differ from the configuration", ck.scheme, ck.lipschitz, ck.alpha, ck.horizon);
            }
            let history = previous_losses(&loss_file, ck.iteration)?;
            (Trainer::resume(params, data, tc.clone(), ck)?, history)
        }
        None => (Trainer::new(params, data, tc.clone())?, Vec::new()),
    };
    let start = Instant::now();
    let first = trainer.iteration();
    let report_every = (tc.n_iterations / 20).max(1);
    let mut last_ckpt = None;
    trainer.run(
        |t, l| {
            history.push((t.iteration(), l));
            if t.iteration() % report_every == 0 {
                let done = (t.iteration() - first) as f64;
                let ms = start.elapsed().as_secs_f64() * 1e3 / done;
                eprintln!("iteration {:>7}  loss {l:.5}  {ms:.2} ms/iteration", t.iteration());
            }
            Ok(())
        },
        |t| {
            let path = checkpoint_path(cfg, t.iteration());
            t.checkpoint().save(&path)?;
            last_ckpt = Some(t.iteration());
            Ok(())
        },
    )?;
    if last_ckpt != Some(trainer.iteration()) {
        trainer.checkpoint().save(&checkpoint_path(cfg, trainer.iteration()))?;
    }
    let mut w = create(&loss_file)?;
    write_loss_csv(&mut w, &history, true)?;
    w.flush()?;
    let ran = trainer.iteration() - first;
    if ran > 0 {
        eprintln!(
            "trained {ran} iterations in {:.1} s ({:.2} ms/iteration)",
            start.elapsed().as_secs_f64(),
            start.elapsed().as_secs_f64() * 1e3 / ran as f64
        );
    }
    if let Some((i, l)) = history.last() {
        println!("{}: final loss {l:.6} at iteration {i}", cfg.scheme);
    }
    println!("checkpoint {}", checkpoint_path(cfg, trainer.iteration()).display());
    println!("loss history {}", loss_file.display());
    Ok(())
}

/// FID protocol for one network: `batches` rounds of reverse-sampling
/// `samples` points and comparing them with a fresh data batch of equal size.
/// Round `b` of network `net_index` uses its own seeded substream, so equal
/// indices give both schemes the same random numbers.
pub fn evaluate_fid<D: DataSource>(
    net: &ScoreNet,
    params: &DynamicsParams,
    data: &D,
    n_steps: usize,
    samples: usize,
    batches: usize,
    seed: u64,
    net_index: usize,
) -> Result<Vec<f64>> {
    if net.data_dim() != data.dim() {
        return Err(Error::shape(format!(
            "network outputs {} dimensions, dataset has {}",
            net.data_dim(),
            data.dim()
        )));
    }
    let em = EmConfig::new(n_steps, params.horizon(), 1.0)?;
    (0..batches)
        .map(|b| {
            let mut rng = rng_from_seed(substream_seed(seed, (net_index * batches + b) as u64));
            let generated = reverse_sample(params, net, &em, &mut rng, samples, data.dim())?;
            let reference = data.sample(samples, &mut rng);
            Ok(gaussian_frechet(&generated, &reference, data.dim())?.distance)
        })
        .collect()
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

/// Mean, sample standard deviation and count rows for each `(scheme, iterations)` group.
pub fn summary_rows(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == "fid") {
        groups.entry((r.scheme.clone(), r.iterations)).or_default().push(r.value);
    }
    let mut out = Vec::new();
    for ((scheme, iterations), values) in groups {
        let (m, s) = mean_std(&values);
        for (metric, value) in [("fid_mean", m), ("fid_std", s), ("fid_count", values.len() as f64)] {
            out.push(MetricRow { metric: metric.into(), scheme: scheme.clone(), iterations, seed: "all".into(), value });
        }
    }
    out
}

fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], output: Option<&Path>) -> anyhow::Result<()> {
    create_out_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for (k, path) in checkpoints.iter().enumerate() {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let params = ck.dynamics()?;
        let net = ScoreNet::from_parts(ck.layer_dims.clone(), ck.params.clone())?;
        let start = Instant::now();
        let fids = match cfg.dataset {
            Dataset::SwissRoll => {
                evaluate_fid(&net, &params, &SwissRollSpec::default(), cfg.n_steps, cfg.samples, cfg.batches, cfg.seed, k)
            }
            Dataset::Gmm => {
                evaluate_fid(&net, &params, &GmmSpec::benchmark(), cfg.n_steps, cfg.samples, cfg.batches, cfg.seed, k)
            }
        }
        .with_context(|| format!("evaluating {}", path.display()))?;
        eprintln!("evaluated {} in {:.1} s", path.display(), start.elapsed().as_secs_f64());
        for (b, v) in fids.into_iter().enumerate() {
            rows.push(MetricRow {
                metric: "fid".into(),
                scheme: ck.scheme.to_string(),
                iterations: ck.iteration,
                seed: format!("net{k}_batch{b}"),
                value: v,
            });
        }
    }
    let summary = summary_rows(&rows);
    for r in &summary {
        println!("{} {} iterations {}: {:.6}", r.scheme, r.iterations, r.metric, r.value);
    }
    rows.extend(summary);
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("fid.csv"));
    let mut w = create(&path)?;
    write_metric_rows(&mut w, &rows)?;
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Welch test between the `fid` rows of two result sets, each holding a
/// single scheme at a single iteration count.
pub fn compare_rows(a: &[MetricRow], b: &[MetricRow]) -> Result<Vec<MetricRow>> {
    let pick = |rows: &[MetricRow], which: &str| -> Result<(String, u64, Vec<f64>)> {
        let fid: Vec<&MetricRow> = rows.iter().filter(|r| r.metric == "fid").collect();
        let first = fid.first().ok_or_else(|| Error::Metric(format!("{which} result file has no fid rows")))?;
        if fid.iter().any(|r| r.scheme != first.scheme || r.iterations != first.iterations) {
            return Err(Error::Metric(format!("{which} result file mixes schemes or iteration counts")));
        }
        Ok((first.scheme.clone(), first.iterations, fid.iter().map(|r| r.value).collect()))
    };
    let (sa, ia, va) = pick(a, "first")?;
    let (sb, ib, vb) = pick(b, "second")?;
    if ia != ib {
        return Err(Error::Metric(format!("iteration counts differ ({ia} vs {ib})")));
    }
    let t = welch_t_test(&va, &vb)?;
    let label = format!("{sa}_vs_{sb}");
    let (ma, _) = mean_std(&va);
    let (mb, _) = mean_std(&vb);
    Ok([
        ("fid_mean_diff", ma - mb),
        ("welch_t", t.t_statistic),
        ("welch_dof", t.degrees_of_freedom),
        ("welch_p", t.p_value),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow { metric: metric.into(), scheme: label.clone(), iterations: ia, seed: "all".into(), value })
    .collect())
}

fn cmd_compare(cfg: &RunConfig, a: &Path, b: &Path, output: Option<&Path>) -> anyhow::Result<()> {
    let read = |p: &Path| -> anyhow::Result<Vec<MetricRow>> {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        Ok(read_metric_rows(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?)
    };
    let rows = compare_rows(&read(a)?, &read(b)?)?;
    let get = |m: &str| rows.iter().find(|r| r.metric == m).map(|r| r.value).unwrap_or(f64::NAN);
    let p = get("welch_p");
    println!(
        "{}: mean difference {:.6}, t = {:.4}, dof = {:.2}, p = {:.3e} ({} at 0.05)",
        rows[0].scheme,
        get("fid_mean_diff"),
        get("welch_t"),
        get("welch_dof"),
        p,
        if p < 0.05 { "significant" } else { "not significant" }
    );
    create_out_dir(&cfg.out_dir)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("ttest.csv"));
    let mut w = create(&path)?;
    write_metric_rows(&mut w, &rows)?;
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Mean nanoseconds per `transition` + `covariance` evaluation.
pub fn time_kernel(scheme: Scheme, calls: u64) -> Result<f64> {
    let params = DynamicsParams::new(scheme, 1.0, 0.1, 10.0)?;
    // Warm the per-scheme closed-form cache outside the timed loop.
    dynamics::covariance(&params, 1.0)?;
    let start = Instant::now();
    let mut acc = 0.0;
    for k in 0..calls {
        let t = 0.01 + (k % 1000) as f64 * 0.005;
        let f = dynamics::transition(&params, t)?;
        let m = dynamics::covariance(&params, t)?;
        acc += f.f[(0, 0)] + m.l_t;
    }
    std::hint::black_box(acc);
    Ok(start.elapsed().as_nanos() as f64 / calls as f64)
}

fn cmd_benchmark(calls: u64) -> anyhow::Result<String> {
    let told = time_kernel(Scheme::Told, calls)?;
    let toldpp = time_kernel(Scheme::ToldPP, calls)?;
    Ok(format!(
        "calls per scheme: {calls}\ntold: {told:.1} ns/call\ntold++: {toldpp:.1} ns/call\nratio told++/told: {:.3}\n",
        toldpp / told
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_the_experiment_settings() {
        let c = RunConfig::default();
        assert_eq!((c.lipschitz, c.horizon, c.alpha, c.learning_rate), (4.0, 1.0, 0.1, 5e-3));
        assert_eq!(c.batch_size, 4096);
        let f = RunConfig::forward_defaults();
        assert_eq!((f.lipschitz, f.n_steps, f.samples, f.dataset), (1.0, 50, 1024, Dataset::Gmm));
        let mut p = RunConfig::default();
        p.apply_paper_scale();
        assert_eq!((p.batches, p.hidden.len(), p.samples), (10, 7, 1 << 20));
    }

    #[test]
    fn text_layer_overrides_and_rejects() {
        let cfg = RunConfig::from_text("# comment\nseed = 7\nscheme=told\nhidden = 8, 9\n\n", RunConfig::default()).unwrap();
        assert_eq!((cfg.seed, cfg.scheme, cfg.hidden.clone()), (7, Scheme::Told, vec![8, 9]));
        assert!(RunConfig::from_text("colour = red", RunConfig::default()).is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2", RunConfig::default()).is_err());
        assert!(RunConfig::from_text("seed", RunConfig::default()).is_err());
        assert!(RunConfig::from_text("lipschitz = fast", RunConfig::default()).is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig { out_dir: std::env::temp_dir().join("told-cli-validate"), ..RunConfig::default() };
        assert!(c.validate().is_ok());
        c.lipschitz = 0.0;
        assert!(c.validate().is_err());
        let c = RunConfig { out_dir: PathBuf::from("/definitely/not/here/out"), ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { hist_lo: 1.0, hist_hi: 1.0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_format() {
        assert_eq!(short(-1.0000000001), "-1");
        assert_eq!(short(-1.7320508075688772), "-1.7320508");
        assert_eq!(short(-0.0), "0");
        assert_eq!(short(2.5), "2.5");
    }

    #[test]
    fn analyze_named_schemes() {
        let pp = analyze_report(2.0 * 2f64.sqrt(), 3.0 * 3f64.sqrt()).unwrap();
        assert!(pp.contains("critically damped, λ = -1.7320508 (×3)"), "{pp}");
        let t = analyze_report(10f64.sqrt(), 6.0).unwrap();
        assert!(t.contains("overdamped, real eigenvalues -1, -2, -3"), "{t}");
        let u = analyze_report(3.0, 0.5).unwrap();
        assert!(u.contains("underdamped"), "{u}");
    }

    #[test]
    fn summary_and_comparison() {
        let row = |s: &str, v: f64| MetricRow { metric: "fid".into(), scheme: s.into(), iterations: 10, seed: "x".into(), value: v };
        let a = vec![row("told++", 1.0), row("told++", 1.2), row("told++", 1.1)];
        let b = vec![row("told", 2.0), row("told", 2.2), row("told", 2.1)];
        let s = summary_rows(&a);
        assert_eq!(s.len(), 3);
        assert!((s[0].value - 1.1).abs() < 1e-12);
        assert!((s[1].value - 0.1).abs() < 1e-12);
        let c = compare_rows(&a, &b).unwrap();
        let p = c.iter().find(|r| r.metric == "welch_p").unwrap().value;
        assert!(p < 1e-3);
        assert!(compare_rows(&a, &[row("told", 1.0)]).is_err());
        let mut mixed = b.clone();
        mixed[0].iterations = 20;
        assert!(compare_rows(&a, &mixed).is_err());
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            (any::<bool>(), any::<bool>(), 1e-3f64..1e3, 1e-3f64..1.0, 0.01f64..100.0, 1usize..10_000, 0.0f64..=1.0),
            (1usize..1 << 20, 1usize..1 << 16, 0u64..100_000, 1e-6f64..1.0, 1e-6f64..1e-2, 1u64..10_000),
            (prop::collection::vec(1usize..512, 0..8), 1usize..20, 1usize..1000, -50.0f64..0.0, 0.1f64..50.0),
            (any::<u64>(), "[a-z0-9_/.]{1,20}"),
        )
            .prop_map(|(a, b, c, d)| RunConfig {
                scheme: if a.0 { Scheme::Told } else { Scheme::ToldPP },
                dataset: if a.1 { Dataset::Gmm } else { Dataset::SwissRoll },
                lipschitz: a.2,
                alpha: a.3,
                horizon: a.4,
                n_steps: a.5,
                noise_scale: a.6,
                samples: b.0,
                batch_size: b.1,
                n_iterations: b.2,
                learning_rate: b.3,
                t_min: b.4,
                checkpoint_interval: b.5,
                hidden: c.0,
                batches: c.1,
                bins: c.2,
                hist_lo: c.3,
                hist_hi: c.4,
                seed: d.0,
                out_dir: PathBuf::from(d.1),
            })
    }

    proptest! {
        #[test]
        fn config_round_trip(cfg in arb_config()) {
            let text = cfg.to_text();
            let back = RunConfig::from_text(&text, RunConfig::forward_defaults()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
