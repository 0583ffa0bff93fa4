//! The data-producing subcommands: shared row plumbing, the per-sample
//! environment cache, and one entry point per command.

use std::path::Path;
use std::time::Instant;

use perturbhom::environment::{sample_coupled, CoupledEnvironment, DistributionSpec};
use perturbhom::homogenize::{
    a1_forced_forms, a1_mc, a1_sample_seed, a1_series, a1_spatial_average, ahom_periodic_mc,
    ahom_periodic_sample, ahom_sample_seed, append_csv_rows, expansion_fit, MonteCarloEstimate,
    ResultRow,
};
use perturbhom::lattice::TorusGeometry;
use perturbhom::Error;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{config_hash, fnv1a, ExperimentConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_SELFTEST: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_CROSS_CHECK: u8 = 4;

const CROSS_CHECK_TOLERANCE: f64 = 1e-6;
/// The origin series costs one solve pair per torus edge, so the cross-check
/// leg that drives it only runs on small boxes.
const SERIES_CHECK_MAX_N: usize = 4;
const SERIES_CHECK_MAX_SAMPLES: usize = 16;

/// Maps a runtime failure to the exit code contract: errors that mean the
/// request itself was unusable exit 2, everything that failed while computing
/// exits 3.
fn exit_for_error(err: &Error) -> u8 {
    fn root(e: &Error) -> &Error {
        match e {
            Error::SampleFailed { source, .. } => root(source),
            other => other,
        }
    }
    match root(err) {
        Error::InvalidParameter { .. }
        | Error::SizeMismatch { .. }
        | Error::InvalidDistribution(_)
        | Error::DegenerateGrid(_)
        | Error::EnumerationTooLarge { .. }
        | Error::TooLargeForDense { .. }
        | Error::DuplicateDefect { .. } => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

fn report_error(context: &str, err: &Error) -> u8 {
    eprintln!("{context}: {err}");
    let mut source = std::error::Error::source(err);
    while let Some(inner) = source {
        eprintln!("  caused by: {inner}");
        source = inner.source();
    }
    exit_for_error(err)
}

fn geometry(cfg: &ExperimentConfig) -> TorusGeometry {
    TorusGeometry::new(cfg.d, cfg.n).expect("geometry was validated with the config")
}

fn result_row(
    label: &str,
    cfg: &ExperimentConfig,
    p: f64,
    est: &MonteCarloEstimate,
    wall_time_s: f64,
) -> ResultRow {
    ResultRow {
        label: label.to_string(),
        d: cfg.d,
        n: cfg.n,
        p,
        mean: est.mean,
        std_error: est.std_error,
        n_samples: est.n_samples,
        seed: est.seed,
        wall_time_s,
    }
}

fn print_summary(command: &str, cfg: &ExperimentConfig, hash: u64, results: serde_json::Value) {
    let doc = json!({
        "command": command,
        "config_hash": format!("{hash:016x}"),
        "config": cfg,
        "results": results,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("summary serializes")
    );
}

/// Cache key component identifying the distribution pair; environments with
/// the same derived seed but different laws must not share a file.
fn dist_pair_hash(spec0: &DistributionSpec, spec1: &DistributionSpec) -> u64 {
    let canon = serde_json::to_string(&(spec0, spec1)).expect("distributions serialize");
    fnv1a(canon.as_bytes())
}

/// Returns the environment for `env_seed`, reading it from the cache
/// directory when a valid file is present and writing it there otherwise.
/// A corrupt or mismatched file is regenerated in place.
fn cached_env(
    dir: &Path,
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    pair_hash: u64,
    env_seed: u64,
) -> Result<CoupledEnvironment, Error> {
    let name = format!(
        "env-{pair_hash:016x}-d{}-n{}-{env_seed:016x}.phom",
        geom.d(),
        geom.n()
    );
    let path = dir.join(name);
    if path.exists() {
        if let Ok(env) = CoupledEnvironment::read_cache(&path) {
            let g = env.geometry();
            if g.d() == geom.d() && g.n() == geom.n() && env.seed() == env_seed {
                return Ok(env);
            }
        }
    }
    let env = sample_coupled(geom, spec0, spec1, env_seed)?;
    env.write_cache(&path)?;
    Ok(env)
}

fn prepare_cache_dir(cfg: &ExperimentConfig) -> Result<(), Error> {
    if let Some(dir) = &cfg.cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Indexed parallel map over samples with the same failure wrapping and
/// sequential reduction the library estimators use, so cached and uncached
/// runs agree bit for bit.
fn collect_indexed<F>(samples: usize, f: F) -> Result<Vec<f64>, Error>
where
    F: Fn(usize) -> Result<f64, Error> + Sync,
{
    (0..samples)
        .into_par_iter()
        .map(|k| {
            f(k).map_err(|e| Error::SampleFailed {
                index: k,
                source: Box::new(e),
            })
        })
        .collect()
}

fn ahom_estimate(
    cfg: &ExperimentConfig,
    geom: &TorusGeometry,
    p: f64,
) -> Result<MonteCarloEstimate, Error> {
    let solver_cfg = cfg.solver_config();
    match &cfg.cache_dir {
        None => ahom_periodic_mc(
            geom,
            &cfg.dist0,
            &cfg.dist1,
            p,
            &cfg.xi,
            cfg.samples,
            cfg.seed,
            &solver_cfg,
        ),
        Some(dir) => {
            let pair = dist_pair_hash(&cfg.dist0, &cfg.dist1);
            let values = collect_indexed(cfg.samples, |k| {
                let env = cached_env(
                    dir,
                    geom,
                    &cfg.dist0,
                    &cfg.dist1,
                    pair,
                    ahom_sample_seed(cfg.seed, k),
                )?;
                ahom_periodic_sample(geom, &env, p, &cfg.xi, &solver_cfg)
            })?;
            Ok(MonteCarloEstimate::from_samples("ahom", cfg.seed, &values))
        }
    }
}

pub fn run_ahom(cfg: &ExperimentConfig) -> u8 {
    let geom = geometry(cfg);
    let hash = config_hash(cfg);
    let label = format!("ahom#{hash:016x}");
    if let Err(e) = prepare_cache_dir(cfg) {
        return report_error("ahom", &e);
    }
    let p_list = cfg.p_list();
    let mut estimates = Vec::with_capacity(p_list.len());
    for &p in &p_list {
        let start = Instant::now();
        let est = match ahom_estimate(cfg, &geom, p) {
            Ok(est) => est,
            Err(e) => return report_error(&format!("ahom p={p}"), &e),
        };
        let elapsed = start.elapsed().as_secs_f64();
        let row = result_row(&label, cfg, p, &est, elapsed);
        if let Err(e) = append_csv_rows(&cfg.output_path, &[row]) {
            return report_error("ahom output", &e);
        }
        eprintln!("ahom p={p}: {:.3}s", elapsed);
        estimates.push(est);
    }
    print_summary(
        "ahom",
        cfg,
        hash,
        json!({ "p": p_list, "estimates": estimates }),
    );
    EXIT_OK
}

struct CrossCheckOutcome {
    max_box_local_dev: f64,
    worst_sample: usize,
    series: serde_json::Value,
    series_hard_dev: Option<f64>,
}

/// Per-sample identity check: the local and whole-box forms of the
/// derivative must agree to solver accuracy on every single environment.
/// On boxes small enough, the origin series is driven as a further leg.
fn run_cross_check(
    cfg: &ExperimentConfig,
    geom: &TorusGeometry,
) -> Result<(MonteCarloEstimate, CrossCheckOutcome), Error> {
    let solver_cfg = cfg.solver_config();
    let pair = dist_pair_hash(&cfg.dist0, &cfg.dist1);
    let per_sample: Vec<(f64, f64)> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64), Error> {
            let run = || -> Result<(f64, f64), Error> {
                let env = sample_env(cfg, geom, pair, a1_sample_seed(cfg.seed, k))?;
                let forms = a1_forced_forms(geom, &env, cfg.p_bar, &cfg.xi, &solver_cfg)?;
                Ok((forms.local, (forms.box_sum - forms.local).abs()))
            };
            run().map_err(|e| Error::SampleFailed {
                index: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    let locals: Vec<f64> = per_sample.iter().map(|&(v, _)| v).collect();
    let est = MonteCarloEstimate::from_samples("a1", cfg.seed, &locals);
    let (worst_sample, max_box_local_dev) = per_sample
        .iter()
        .enumerate()
        .map(|(k, &(_, dev))| (k, dev))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });

    let deterministic = matches!(cfg.dist0, DistributionSpec::PointMass { .. })
        && matches!(cfg.dist1, DistributionSpec::PointMass { .. });
    let mut series_hard_dev = None;
    let series = if cfg.n > SERIES_CHECK_MAX_N {
        json!({ "skipped": format!("requires n <= {SERIES_CHECK_MAX_N}") })
    } else if deterministic {
        // One deterministic environment; the full-box series must reproduce
        // its local form exactly up to solver error.
        let env = sample_env(cfg, geom, pair, a1_sample_seed(cfg.seed, 0))?;
        let series = a1_series(geom, &env, cfg.p_bar, &cfg.xi, cfg.n, None, &solver_cfg)?;
        let dev = (series - locals[0]).abs();
        series_hard_dev = Some(dev);
        json!({ "value": series, "deviation": dev, "tolerance": CROSS_CHECK_TOLERANCE })
    } else {
        // Random media: the series and the local form share only their
        // expectation, so compare means and report.
        let count = cfg.samples.min(SERIES_CHECK_MAX_SAMPLES);
        let values = collect_indexed(count, |k| {
            let env = sample_env(cfg, geom, pair, a1_sample_seed(cfg.seed, k))?;
            a1_series(geom, &env, cfg.p_bar, &cfg.xi, cfg.n, None, &solver_cfg)
        })?;
        let series_est = MonteCarloEstimate::from_samples("a1_series", cfg.seed, &values);
        let gap = (series_est.mean - est.mean).abs();
        let combined = (series_est.std_error.powi(2) + est.std_error.powi(2)).sqrt();
        if combined > 0.0 && gap > 3.0 * combined {
            eprintln!(
                "warning: series mean {:.6e} vs sample mean {:.6e} differ by more than \
                 3 combined standard errors ({:.2e})",
                series_est.mean, est.mean, combined
            );
        }
        json!({ "estimate": series_est, "mean_gap": gap })
    };

    Ok((
        est,
        CrossCheckOutcome {
            max_box_local_dev,
            worst_sample,
            series,
            series_hard_dev,
        },
    ))
}

fn sample_env(
    cfg: &ExperimentConfig,
    geom: &TorusGeometry,
    pair: u64,
    env_seed: u64,
) -> Result<CoupledEnvironment, Error> {
    match &cfg.cache_dir {
        Some(dir) => cached_env(dir, geom, &cfg.dist0, &cfg.dist1, pair, env_seed),
        None => sample_coupled(geom, &cfg.dist0, &cfg.dist1, env_seed),
    }
}

pub fn run_a1(cfg: &ExperimentConfig, cross_check: bool) -> u8 {
    let geom = geometry(cfg);
    let hash = config_hash(cfg);
    let label = format!("a1#{hash:016x}");
    if let Err(e) = prepare_cache_dir(cfg) {
        return report_error("a1", &e);
    }
    let solver_cfg = cfg.solver_config();
    let start = Instant::now();

    let (est, outcome) = if cross_check {
        match run_cross_check(cfg, &geom) {
            Ok(pair) => (pair.0, Some(pair.1)),
            Err(e) => return report_error("a1 cross-check", &e),
        }
    } else {
        let est = match &cfg.cache_dir {
            None => a1_mc(
                &geom,
                &cfg.dist0,
                &cfg.dist1,
                cfg.p_bar,
                &cfg.xi,
                cfg.samples,
                cfg.seed,
                &solver_cfg,
            ),
            Some(dir) => {
                let pair = dist_pair_hash(&cfg.dist0, &cfg.dist1);
                collect_indexed(cfg.samples, |k| {
                    let env = cached_env(
                        dir,
                        &geom,
                        &cfg.dist0,
                        &cfg.dist1,
                        pair,
                        a1_sample_seed(cfg.seed, k),
                    )?;
                    a1_spatial_average(&geom, &env, cfg.p_bar, &cfg.xi, &solver_cfg)
                })
                .map(|values| MonteCarloEstimate::from_samples("a1", cfg.seed, &values))
            }
        };
        match est {
            Ok(est) => (est, None),
            Err(e) => return report_error("a1", &e),
        }
    };

    let elapsed = start.elapsed().as_secs_f64();
    let row = result_row(&label, cfg, cfg.p_bar, &est, elapsed);
    if let Err(e) = append_csv_rows(&cfg.output_path, &[row]) {
        return report_error("a1 output", &e);
    }
    eprintln!("a1 p_bar={}: {:.3}s", cfg.p_bar, elapsed);

    let cross_json = outcome.as_ref().map(|o| {
        json!({
            "max_box_local_dev": o.max_box_local_dev,
            "worst_sample": o.worst_sample,
            "tolerance": CROSS_CHECK_TOLERANCE,
            "series": o.series,
        })
    });
    print_summary(
        "a1",
        cfg,
        hash,
        json!({ "estimate": est, "cross_check": cross_json }),
    );

    if let Some(o) = &outcome {
        if o.max_box_local_dev > CROSS_CHECK_TOLERANCE {
            eprintln!(
                "cross-check failed: local and box forms differ by {:.3e} on sample {}",
                o.max_box_local_dev, o.worst_sample
            );
            return EXIT_CROSS_CHECK;
        }
        if let Some(dev) = o.series_hard_dev {
            if dev > CROSS_CHECK_TOLERANCE {
                eprintln!("cross-check failed: origin series off by {dev:.3e}");
                return EXIT_CROSS_CHECK;
            }
        }
    }
    EXIT_OK
}

pub fn run_sweep(cfg: &ExperimentConfig) -> u8 {
    let geom = geometry(cfg);
    let hash = config_hash(cfg);
    let solver_cfg = cfg.solver_config();
    let grid = cfg.p_grid.clone().expect("sweep config requires p_grid");
    let start = Instant::now();
    let report = match expansion_fit(
        &geom,
        &cfg.dist0,
        &cfg.dist1,
        cfg.p_bar,
        &grid,
        &cfg.xi,
        cfg.samples,
        cfg.seed,
        &solver_cfg,
    ) {
        Ok(report) => report,
        Err(e) => return report_error("sweep", &e),
    };
    let elapsed = start.elapsed().as_secs_f64();

    let ahom_label = format!("sweep_ahom#{hash:016x}");
    let diff_label = format!("sweep_diff#{hash:016x}");
    let mut rows = Vec::with_capacity(2 * report.p_grid.len());
    for (j, &offset) in report.p_grid.iter().enumerate() {
        let p = cfg.p_bar + offset;
        rows.push(result_row(
            &ahom_label,
            cfg,
            p,
            &report.ahom_estimates[j],
            elapsed,
        ));
        rows.push(result_row(
            &diff_label,
            cfg,
            p,
            &report.difference_estimates[j],
            elapsed,
        ));
    }
    if let Err(e) = append_csv_rows(&cfg.output_path, &rows) {
        return report_error("sweep output", &e);
    }
    eprintln!("sweep over {} grid points: {:.3}s", report.p_grid.len(), elapsed);

    print_summary("sweep", cfg, hash, json!({ "report": report }));
    EXIT_OK
}
