//! Experiment configuration: JSON file plus flag overrides, validation with
//! field diagnostics, and the content hash stamped on every output row.

use std::fmt;
use std::path::PathBuf;

use clap::Args;
use perturbhom::environment::DistributionSpec;
use perturbhom::lattice::TorusGeometry;
use perturbhom::solver::SolverConfig;
use serde::{Deserialize, Serialize};

/// A rejected configuration; the message names the offending field (and the
/// file position when it came from a config file).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Command-line flags shared by the data-producing subcommands. Every field
/// mirrors a config-file key; a flag given on the command line overrides the
/// file value.
#[derive(Args, Clone, Debug)]
pub struct CommonArgs {
    /// JSON configuration file; individual flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Lattice dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Torus half-width; the box spans {-n..n} per axis.
    #[arg(long)]
    pub n: Option<usize>,
    /// Direction vector, comma separated, one entry per dimension.
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
    pub xi: Option<Vec<f64>>,
    /// Base conductance law as inline JSON.
    #[arg(long, value_name = "JSON")]
    pub dist0: Option<String>,
    /// Replacement conductance law as inline JSON; defaults to dist0.
    #[arg(long, value_name = "JSON")]
    pub dist1: Option<String>,
    /// Replacement probability to evaluate.
    #[arg(long)]
    pub p: Option<f64>,
    /// Replacement probabilities (ahom) or offsets from p_bar (sweep),
    /// comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub p_grid: Option<Vec<f64>>,
    /// Expansion point for a1 and sweep.
    #[arg(long)]
    pub p_bar: Option<f64>,
    /// Mass of the regularized corrector equation, where used.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Number of Monte Carlo samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Master seed; every sample seed derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Relative solver tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// CSV file experiment rows are appended to.
    #[arg(long, value_name = "FILE")]
    pub output_path: Option<PathBuf>,
    /// Directory for binary environment cache files.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; defaults to PERTURBHOM_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Config-file shape: everything optional so flags can fill the gaps.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    d: Option<usize>,
    n: Option<usize>,
    xi: Option<Vec<f64>>,
    dist0: Option<DistributionSpec>,
    dist1: Option<DistributionSpec>,
    p: Option<f64>,
    p_grid: Option<Vec<f64>>,
    p_bar: Option<f64>,
    mu: Option<f64>,
    samples: Option<usize>,
    seed: Option<u64>,
    tolerance: Option<f64>,
    output_path: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    threads: Option<usize>,
}

/// Which probability fields a subcommand needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbabilityUse {
    /// Needs `p` or `p_grid` (exactly one) as absolute probabilities.
    PointList,
    /// Needs `p_grid` as offsets from `p_bar`.
    OffsetGrid,
    /// Uses only `p_bar`.
    ExpansionPoint,
}

/// Fully resolved experiment description. Serialization covers exactly the
/// fields that determine the numbers, so the serialized form doubles as the
/// hash input; paths and thread counts stay out of it.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n: usize,
    pub xi: Vec<f64>,
    pub dist0: DistributionSpec,
    pub dist1: DistributionSpec,
    pub p: Option<f64>,
    pub p_grid: Option<Vec<f64>>,
    pub p_bar: f64,
    pub mu: Option<f64>,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    #[serde(skip)]
    pub output_path: PathBuf,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            rel_tolerance: self.tolerance,
            ..SolverConfig::default()
        }
    }

    /// The probabilities a PointList command evaluates.
    pub fn p_list(&self) -> Vec<f64> {
        match (&self.p, &self.p_grid) {
            (Some(p), _) => vec![*p],
            (None, Some(grid)) => grid.clone(),
            (None, None) => Vec::new(),
        }
    }
}

fn parse_file(path: &PathBuf) -> Result<PartialConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        bad(format!(
            "config {}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn parse_dist(flag: &str, text: &str) -> Result<DistributionSpec, ConfigError> {
    serde_json::from_str(text).map_err(|e| bad(format!("flag --{flag}: {e}")))
}

fn check_probability(field: &str, value: f64) -> Result<(), ConfigError> {
    if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
        return Err(bad(format!("field {field}: must lie in [0, 1], got {value}")));
    }
    Ok(())
}

/// Merges the config file (if any) with flag overrides and validates the
/// result for the given subcommand before any solve happens.
pub fn resolve(args: &CommonArgs, usage: ProbabilityUse) -> Result<ExperimentConfig, ConfigError> {
    let file = match &args.config {
        Some(path) => parse_file(path)?,
        None => PartialConfig::default(),
    };

    let dist0_flag = args
        .dist0
        .as_deref()
        .map(|s| parse_dist("dist0", s))
        .transpose()?;
    let dist1_flag = args
        .dist1
        .as_deref()
        .map(|s| parse_dist("dist1", s))
        .transpose()?;

    let d = args.d.or(file.d).ok_or_else(|| bad("field d: required"))?;
    let n = args.n.or(file.n).ok_or_else(|| bad("field n: required"))?;
    TorusGeometry::new(d, n).map_err(|e| bad(format!("fields d, n: {e}")))?;

    let dist0 = dist0_flag
        .or(file.dist0)
        .ok_or_else(|| bad("field dist0: required"))?;
    dist0
        .validate()
        .map_err(|e| bad(format!("field dist0: {e}")))?;
    let dist1 = dist1_flag.or(file.dist1).unwrap_or_else(|| dist0.clone());
    dist1
        .validate()
        .map_err(|e| bad(format!("field dist1: {e}")))?;

    let xi = args.xi.clone().or(file.xi).unwrap_or_else(|| {
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        e1
    });
    if xi.len() != d {
        return Err(bad(format!(
            "field xi: needs {d} entries for d={d}, got {}",
            xi.len()
        )));
    }
    if xi.iter().any(|v| !v.is_finite()) || xi.iter().all(|v| *v == 0.0) {
        return Err(bad("field xi: must be finite and not all zero"));
    }

    let p = args.p.or(file.p);
    let p_grid = args.p_grid.clone().or(file.p_grid);
    let p_bar = args.p_bar.or(file.p_bar).unwrap_or(0.0);
    check_probability("p_bar", p_bar)?;

    match usage {
        ProbabilityUse::PointList => match (&p, &p_grid) {
            (None, None) => return Err(bad("field p: required (or p_grid)")),
            (Some(_), Some(_)) => {
                return Err(bad("fields p, p_grid: give one or the other, not both"))
            }
            _ => {
                if let Some(v) = p {
                    check_probability("p", v)?;
                }
                if let Some(grid) = &p_grid {
                    if grid.is_empty() {
                        return Err(bad("field p_grid: must not be empty"));
                    }
                    for &v in grid {
                        check_probability("p_grid", v)?;
                    }
                }
            }
        },
        ProbabilityUse::OffsetGrid => {
            let grid = p_grid
                .as_ref()
                .ok_or_else(|| bad("field p_grid: required"))?;
            if grid.is_empty() {
                return Err(bad("field p_grid: must not be empty"));
            }
            for &v in grid {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad(format!(
                        "field p_grid: offsets must be nonnegative, got {v}"
                    )));
                }
            }
        }
        ProbabilityUse::ExpansionPoint => {}
    }

    let mu = args.mu.or(file.mu);
    if let Some(m) = mu {
        if !(m.is_finite() && m > 0.0) {
            return Err(bad(format!("field mu: must be positive, got {m}")));
        }
        let safe_n = 3.0 / m.sqrt();
        if (n as f64) < safe_n {
            eprintln!(
                "warning: n = {n} is below 3*mu^(-1/2) = {safe_n:.1}; \
                 regularized solves may feel the periodic wraparound"
            );
        }
    }

    let samples = args
        .samples
        .or(file.samples)
        .ok_or_else(|| bad("field samples: required"))?;
    if samples == 0 {
        return Err(bad("field samples: must be at least 1"));
    }
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| bad("field seed: required"))?;

    let tolerance = args.tolerance.or(file.tolerance).unwrap_or(1e-10);
    let solver_cfg = SolverConfig {
        rel_tolerance: tolerance,
        ..SolverConfig::default()
    };
    solver_cfg
        .validate()
        .map_err(|e| bad(format!("field tolerance: {e}")))?;

    let output_path = args
        .output_path
        .clone()
        .or(file.output_path)
        .ok_or_else(|| bad("field output_path: required"))?;
    let cache_dir = args.cache_dir.clone().or(file.cache_dir);
    let threads = args.threads.or(file.threads);
    if threads == Some(0) {
        return Err(bad("field threads: must be at least 1"));
    }

    Ok(ExperimentConfig {
        d,
        n,
        xi,
        dist0,
        dist1,
        p,
        p_grid,
        p_bar,
        mu,
        samples,
        seed,
        tolerance,
        output_path,
        cache_dir,
        threads,
    })
}

/// Builds the global worker pool from the config field, the
/// PERTURBHOM_THREADS variable, or the machine's parallelism, in that order.
pub fn init_thread_pool(threads: Option<usize>) -> Result<(), ConfigError> {
    let count = match threads {
        Some(t) => t,
        None => match std::env::var("PERTURBHOM_THREADS") {
            Ok(text) => text
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| {
                    bad(format!(
                        "PERTURBHOM_THREADS: expected a positive integer, got {text:?}"
                    ))
                })?,
            Err(_) => std::thread::available_parallelism()
                .map(|t| t.get())
                .unwrap_or(1),
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(count)
        .build_global()
        .map_err(|e| bad(format!("thread pool: {e}")))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Content hash over the result-determining fields; identical configs hash
/// identically across runs and machines.
pub fn config_hash(cfg: &ExperimentConfig) -> u64 {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    fnv1a(canon.as_bytes())
}
