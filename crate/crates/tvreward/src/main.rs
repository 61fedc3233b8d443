//! Command-line front end. Each subcommand builds a [`RunConfig`] — either
//! from flags, or from a saved config/manifest with flags as overrides —
//! and hands it to [`io::run`].
//!
//! Exit codes: 0 on success, 1 on any stage error, 2 when a solver failed
//! to converge and `--allow-nonconverged` was not given.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tvreward::bench::GridSpec;
use tvreward::io::{
    self, load_gridspec, load_manifest, AriConfig, EstimateConfig, GenConfig, LowRankConfig,
    MinSwitchConfig, RewardSpecConfig, RunConfig, TransferConfig,
};
use tvreward::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tvreward",
    version,
    about = "Recover time-varying rewards from soft-optimal policies and demonstrations"
)]
struct Cli {
    /// Worker threads for batch scoring (default: TVREWARD_WORKERS or all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a gridworld instance: model, true reward, policy, rollouts.
    Gen(GenArgs),
    /// Recover a minimally-switching reward from a policy or rollouts.
    Minswitch(MinswitchArgs),
    /// Recover a low-rank reward by nuclear-norm minimization.
    Lowrank(LowrankArgs),
    /// Estimate a policy with confidence bounds from rollouts.
    Estimate(EstimateArgs),
    /// Compare two interval labelings by adjusted Rand index.
    Ari(AriArgs),
    /// Score saved rewards across target environments.
    Transfer(TransferArgs),
}

fn missing(flag: &str) -> Error {
    Error::Usage(format!("{flag} is required when --config is not given"))
}

fn wrong_kind(expected: &str, found: &str) -> Error {
    Error::Usage(format!("--config holds a '{found}' run, expected '{expected}'"))
}

#[derive(Args)]
struct GenArgs {
    /// Saved configuration or manifest to start from; other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid description file (walls, sticky cells, landmarks).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Open-grid width when no --grid file is given.
    #[arg(long)]
    width: Option<usize>,
    /// Open-grid height when no --grid file is given.
    #[arg(long)]
    height: Option<usize>,
    /// Wind probability for the open grid.
    #[arg(long)]
    wind: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Number of reward switches (piecewise-constant truth).
    #[arg(long)]
    switches: Option<usize>,
    #[arg(long)]
    beta_low: Option<f64>,
    #[arg(long)]
    beta_high: Option<f64>,
    /// Number of landmark features (switches to the low-rank truth).
    #[arg(long)]
    features: Option<usize>,
    /// Random-walk step size for feature weights.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of rollouts to sample (0 = none).
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => match load_manifest(p)?.config {
                RunConfig::Gen(c) => c,
                other => return Err(wrong_kind("gen", other.kind())),
            },
            None => GenConfig {
                grid: GridSpec::open(
                    self.width.unwrap_or(5),
                    self.height.unwrap_or(5),
                    self.wind.unwrap_or(0.15),
                ),
                gamma: 0.9,
                horizon: 50,
                reward: RewardSpecConfig::Piecewise {
                    switches: 5,
                    beta_low: 0.2,
                    beta_high: 1.0,
                },
                trajectories: 0,
                seed: 0,
                out: self.out.clone().ok_or_else(|| missing("--out"))?,
            },
        };
        if let Some(p) = &self.grid {
            cfg.grid = load_gridspec(p)?;
        } else if self.config.is_some()
            && (self.width.is_some() || self.height.is_some() || self.wind.is_some())
        {
            cfg.grid = GridSpec::open(
                self.width.unwrap_or(cfg.grid.width),
                self.height.unwrap_or(cfg.grid.height),
                self.wind.unwrap_or(cfg.grid.wind_prob),
            );
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(n) = self.trajectories {
            cfg.trajectories = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if let Some(k) = self.features {
            cfg.reward = RewardSpecConfig::Feature {
                features: k,
                sigma: self.sigma.unwrap_or(0.15),
            };
        } else if self.switches.is_some() || self.beta_low.is_some() || self.beta_high.is_some() {
            let (prev_k, prev_lo, prev_hi) = match cfg.reward {
                RewardSpecConfig::Piecewise {
                    switches,
                    beta_low,
                    beta_high,
                } => (switches, beta_low, beta_high),
                RewardSpecConfig::Feature { .. } => (5, 0.2, 1.0),
            };
            cfg.reward = RewardSpecConfig::Piecewise {
                switches: self.switches.unwrap_or(prev_k),
                beta_low: self.beta_low.unwrap_or(prev_lo),
                beta_high: self.beta_high.unwrap_or(prev_hi),
            };
        } else if let (RewardSpecConfig::Feature { sigma, .. }, Some(s)) =
            (&mut cfg.reward, self.sigma)
        {
            *sigma = s;
        }
        Ok(RunConfig::Gen(cfg))
    }
}

#[derive(Args)]
struct MinswitchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file produced by `gen`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Exact policy input (conflicts with --trajectories).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Demonstration input; switches to the robust interval constraints.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Confidence level for finite-sample bounds.
    #[arg(long)]
    delta: Option<f64>,
    /// Feasibility slack for interval verification.
    #[arg(long)]
    tol: Option<f64>,
    /// True labels; when given an ari.txt is emitted.
    #[arg(long)]
    truth_labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl MinswitchArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => match load_manifest(p)?.config {
                RunConfig::Minswitch(c) => c,
                other => return Err(wrong_kind("minswitch", other.kind())),
            },
            None => MinSwitchConfig {
                model: self.model.clone().ok_or_else(|| missing("--model"))?,
                policy: None,
                trajectories: None,
                delta: 0.99,
                tol: 1e-7,
                truth_labels: None,
                out: self.out.clone().ok_or_else(|| missing("--out"))?,
            },
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if self.policy.is_some() || self.trajectories.is_some() {
            cfg.policy = self.policy;
            cfg.trajectories = self.trajectories;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if self.truth_labels.is_some() {
            cfg.truth_labels = self.truth_labels;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        Ok(RunConfig::Minswitch(cfg))
    }
}

#[derive(Args)]
struct LowrankArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    /// Initial augmented-Lagrangian penalty.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Primal and dual residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Relative singular-value cutoff for the rank decision.
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Reference basis to align the decomposition against.
    #[arg(long)]
    ref_basis: Option<PathBuf>,
    /// Reference weights fixing per-feature signs.
    #[arg(long)]
    ref_weights: Option<PathBuf>,
    /// Exit 0 even when the solver stops at its iteration cap.
    #[arg(long)]
    allow_nonconverged: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl LowrankArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => match load_manifest(p)?.config {
                RunConfig::Lowrank(c) => c,
                other => return Err(wrong_kind("lowrank", other.kind())),
            },
            None => LowRankConfig {
                model: self.model.clone().ok_or_else(|| missing("--model"))?,
                policy: None,
                trajectories: None,
                delta: 0.99,
                rho: 1.0,
                max_iter: 5000,
                tol: 1e-6,
                rank_tol: 1e-4,
                ref_basis: None,
                ref_weights: None,
                allow_nonconverged: false,
                out: self.out.clone().ok_or_else(|| missing("--out"))?,
            },
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if self.policy.is_some() || self.trajectories.is_some() {
            cfg.policy = self.policy;
            cfg.trajectories = self.trajectories;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(r) = self.rho {
            cfg.rho = r;
        }
        if let Some(i) = self.max_iter {
            cfg.max_iter = i;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if let Some(t) = self.rank_tol {
            cfg.rank_tol = t;
        }
        if self.ref_basis.is_some() {
            cfg.ref_basis = self.ref_basis;
        }
        if self.ref_weights.is_some() {
            cfg.ref_weights = self.ref_weights;
        }
        if self.allow_nonconverged {
            cfg.allow_nonconverged = true;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        Ok(RunConfig::Lowrank(cfg))
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EstimateArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => match load_manifest(p)?.config {
                RunConfig::Estimate(c) => c,
                other => return Err(wrong_kind("estimate", other.kind())),
            },
            None => EstimateConfig {
                model: self.model.clone().ok_or_else(|| missing("--model"))?,
                trajectories: self
                    .trajectories
                    .clone()
                    .ok_or_else(|| missing("--trajectories"))?,
                delta: 0.99,
                out: self.out.clone().ok_or_else(|| missing("--out"))?,
            },
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(t) = self.trajectories {
            cfg.trajectories = t;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        Ok(RunConfig::Estimate(cfg))
    }
}

#[derive(Args)]
struct AriArgs {
    /// First label file.
    a: PathBuf,
    /// Second label file.
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Reward files to score (rows of the output grid).
    #[arg(long, required = true, num_args = 1..)]
    rewards: Vec<PathBuf>,
    /// Target model files (columns of the output grid).
    #[arg(long, required = true, num_args = 1..)]
    targets: Vec<PathBuf>,
    /// Reference rollouts, one file per target.
    #[arg(long, required = true, num_args = 1..)]
    samples: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl Command {
    fn into_config(self) -> Result<RunConfig> {
        match self {
            Command::Gen(a) => a.into_config(),
            Command::Minswitch(a) => a.into_config(),
            Command::Lowrank(a) => a.into_config(),
            Command::Estimate(a) => a.into_config(),
            Command::Ari(a) => Ok(RunConfig::Ari(AriConfig {
                a: a.a,
                b: a.b,
                out: a.out,
            })),
            Command::Transfer(a) => Ok(RunConfig::Transfer(TransferConfig {
                rewards: a.rewards,
                targets: a.targets,
                samples: a.samples,
                out: a.out,
            })),
        }
    }
}

fn real_main(cli: Cli) -> Result<i32> {
    let workers = cli.workers.or_else(|| {
        std::env::var("TVREWARD_WORKERS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(w) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let config = cli.command.into_config()?;
    let allow = matches!(&config, RunConfig::Lowrank(c) if c.allow_nonconverged);
    let outcome = io::run(&config)?;
    println!("{}", outcome.summary);
    for path in &outcome.written {
        println!("  wrote {}", path.display());
    }
    if outcome.nonconverged && !allow {
        eprintln!("solver did not converge; rerun with --allow-nonconverged to accept anyway");
        return Ok(2);
    }
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
