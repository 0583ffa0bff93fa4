//! Effective-coefficient estimation.
//!
//! The quantity of interest is the quadratic form ξ·A_homξ of the
//! homogenized coefficient, approximated on a finite torus by the
//! corrector energy, and its first-order response a₁ to raising the
//! replacement probability p. Three routes to a₁ coexist deliberately:
//! a spatial-average form needing O(d) corrector solves per sample, a
//! literal sum over single-edge brackets, and exact enumeration over all
//! conductance assignments on tiny tori. They validate one another; none
//! is allowed to replace the others' tests.
//!
//! Monte Carlo accumulation is deterministic: each sample's environment
//! seed is a pure function of (run seed, sample index), samples are
//! collected in index order, and reductions are compensated sums, so the
//! same inputs give bit-identical estimates under any thread count.

use std::fs::OpenOptions;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corrector::{
    periodic_corrector, regularized_corrector, single_edge_delta, CorrectorSolution,
};
use crate::environment::{
    derive_seed, sample_coupled, CoupledEnvironment, DistributionSpec, ForcedState,
};
use crate::error::Error;
use crate::lattice::{kahan_sum, ConductanceField, EdgeId, TorusGeometry};
use crate::solver::SolverConfig;

/// Cap on the number of enumerated conductance assignments.
pub const ENUMERATION_CAP: u128 = 1 << 30;

const DOMAIN_AHOM: u64 = 1;
const DOMAIN_A1: u64 = 2;
const DOMAIN_SWEEP: u64 = 3;
const DOMAIN_A1_REFERENCE: u64 = 4;
const DOMAIN_LINEARIZATION: u64 = 5;

/// Sample mean with its standard error.
#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    /// Sample standard deviation over √n; NaN when fewer than 2 samples.
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub label: String,
}

impl MonteCarloEstimate {
    pub fn from_samples(label: impl Into<String>, seed: u64, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            kahan_sum(values.iter().copied()) / n as f64
        };
        let std_error = if n >= 2 {
            let ss = kahan_sum(values.iter().map(|&v| (v - mean) * (v - mean)));
            (ss / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            mean,
            std_error,
            n_samples: n,
            seed,
            label: label.into(),
        }
    }
}

fn check_samples(samples: usize, minimum: usize) -> Result<(), Error> {
    if samples < minimum {
        return Err(Error::invalid(
            "samples",
            format!("need at least {minimum}, got {samples}"),
        ));
    }
    Ok(())
}

fn check_specs(spec0: &DistributionSpec, spec1: &DistributionSpec) -> Result<(), Error> {
    spec0.validate()?;
    spec1.validate()?;
    Ok(())
}

/// Runs `f(sample_index)` for every index, in parallel, and returns the
/// values in index order. A failed sample aborts the run with its index
/// attached.
fn collect_samples<F>(samples: usize, f: F) -> Result<Vec<f64>, Error>
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

/// Σ over edges of ξ_i·ω·(ξ_i + ∇_iφ), the energy pairing the tilt against
/// the corrected flux.
pub fn tilted_energy_sum(
    geom: &TorusGeometry,
    a: &ConductanceField,
    sol: &CorrectorSolution,
) -> f64 {
    let d = geom.d();
    kahan_sum((0..geom.edge_count()).map(|slot| {
        let xi_i = sol.xi[slot % d];
        xi_i * a.values[slot] * (xi_i + sol.grad_phi.values[slot])
    }))
}

/// The same energy pairing restricted to the edges leaving one site.
pub fn tilted_energy_at(
    geom: &TorusGeometry,
    a: &ConductanceField,
    sol: &CorrectorSolution,
    site: usize,
) -> f64 {
    let d = geom.d();
    (0..d)
        .map(|i| {
            let slot = site * d + i;
            sol.xi[i] * a.values[slot] * (sol.xi[i] + sol.grad_phi.values[slot])
        })
        .sum()
}

/// Per-environment effective energy |B_n|⁻¹ Σ_x ξ·A(ξ+∇φ)(x) at replacement
/// probability p.
pub fn ahom_periodic_sample(
    geom: &TorusGeometry,
    env: &CoupledEnvironment,
    p: f64,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<f64, Error> {
    let (field, _) = env.realize(p)?;
    let sol = periodic_corrector(geom, &field, xi, cfg)?;
    Ok(tilted_energy_sum(geom, &field, &sol) / geom.site_count() as f64)
}

/// Seed of the k-th environment drawn by `ahom_periodic_mc`, so callers can
/// rebuild or cache exactly the environments that run would sample.
pub fn ahom_sample_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, DOMAIN_AHOM, k as u64)
}

/// Seed of the k-th environment drawn by `a1_mc`.
pub fn a1_sample_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, DOMAIN_A1, k as u64)
}

/// Monte Carlo estimate of ξ·A_hom^(p)ξ over independent coupled
/// environments.
pub fn ahom_periodic_mc(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    p: f64,
    xi: &[f64],
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<MonteCarloEstimate, Error> {
    check_samples(samples, 1)?;
    check_specs(spec0, spec1)?;
    let values = collect_samples(samples, |k| {
        let env = sample_coupled(geom, spec0, spec1, derive_seed(seed, DOMAIN_AHOM, k as u64))?;
        ahom_periodic_sample(geom, &env, p, xi, cfg)
    })?;
    Ok(MonteCarloEstimate::from_samples("ahom", seed, &values))
}

/// Corrector of the environment realized at p̄ with one edge forced to the
/// given state; reuses `realized` when the forced state is what the
/// realization already chose.
fn forced_corrector(
    geom: &TorusGeometry,
    env: &CoupledEnvironment,
    p_bar: f64,
    edge: EdgeId,
    state: ForcedState,
    realized: &CorrectorSolution,
    realized_field: &ConductanceField,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<(CorrectorSolution, ConductanceField), Error> {
    let slot = geom.edge_slot(edge);
    let naturally_replaced = env.coupling_values()[slot] < p_bar;
    let matches_realization = match state {
        ForcedState::Replacement => naturally_replaced,
        ForcedState::Base => !naturally_replaced,
    };
    if matches_realization {
        return Ok((realized.clone(), realized_field.clone()));
    }
    let field = env.force_edge(p_bar, edge, state)?;
    let sol = periodic_corrector(geom, &field, xi, cfg)?;
    Ok((sol, field))
}

/// The two per-environment forms of the first-order coefficient computed
/// from the same forced-edge corrector solves.
#[derive(Clone, Copy, Debug)]
pub struct A1Forms {
    /// Σ over origin edges of (ξ+∇φ^{e−})·C^e(ξ+∇φ^{e+}) at the origin.
    pub local: f64,
    /// Σ over origin edges of the whole-box energy difference between the
    /// forced-up and forced-down environments.
    pub box_sum: f64,
}

/// Computes both a₁ forms for one environment. Their agreement is pure
/// algebra (summation by parts against the two corrector equations), so a
/// deviation beyond solver tolerance indicates a defect.
pub fn a1_forced_forms(
    geom: &TorusGeometry,
    env: &CoupledEnvironment,
    p_bar: f64,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<A1Forms, Error> {
    let d = geom.d();
    let (realized_field, _) = env.realize(p_bar)?;
    let realized = periodic_corrector(geom, &realized_field, xi, cfg)?;
    let mut local = 0.0;
    let mut box_sum = 0.0;
    for axis in 0..d {
        let edge = EdgeId { base: 0, axis };
        let slot = axis;
        let delta = env.delta(slot);
        if delta == 0.0 {
            continue;
        }
        let (minus, minus_field) = forced_corrector(
            geom, env, p_bar, edge, ForcedState::Base, &realized, &realized_field, xi, cfg,
        )?;
        let (plus, plus_field) = forced_corrector(
            geom,
            env,
            p_bar,
            edge,
            ForcedState::Replacement,
            &realized,
            &realized_field,
            xi,
            cfg,
        )?;
        local += delta * minus.tilted_gradient(geom, slot) * plus.tilted_gradient(geom, slot);
        box_sum += tilted_energy_sum(geom, &plus_field, &plus)
            - tilted_energy_sum(geom, &minus_field, &minus);
    }
    Ok(A1Forms { local, box_sum })
}

/// Per-environment first-order coefficient: the local form
/// Σ_{e: e̲=0} (ξ+∇φ^{e−})·C^e(ξ+∇φ^{e+})(0), with φ^{e±} the periodic
/// correctors of the environment forced down/up at e. Costs at most d+1
/// corrector solves: the realized solve is reused whenever a forced state
/// coincides with the realization, edges with δ_e = 0 are skipped, and the
/// forced-up solve is skipped when the forced-down factor already vanishes.
pub fn a1_spatial_average(
    geom: &TorusGeometry,
    env: &CoupledEnvironment,
    p_bar: f64,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<f64, Error> {
    let d = geom.d();
    let (realized_field, _) = env.realize(p_bar)?;
    let mut realized: Option<CorrectorSolution> = None;
    let mut total = 0.0;
    for axis in 0..d {
        let edge = EdgeId { base: 0, axis };
        let slot = axis;
        let delta = env.delta(slot);
        if delta == 0.0 {
            continue;
        }
        if realized.is_none() {
            realized = Some(periodic_corrector(geom, &realized_field, xi, cfg)?);
        }
        let base_sol = realized.as_ref().unwrap();
        let (minus, _) = forced_corrector(
            geom,
            env,
            p_bar,
            edge,
            ForcedState::Base,
            base_sol,
            &realized_field,
            xi,
            cfg,
        )?;
        let t_minus = minus.tilted_gradient(geom, slot);
        if t_minus == 0.0 {
            continue;
        }
        let (plus, _) = forced_corrector(
            geom,
            env,
            p_bar,
            edge,
            ForcedState::Replacement,
            base_sol,
            &realized_field,
            xi,
            cfg,
        )?;
        total += delta * t_minus * plus.tilted_gradient(geom, slot);
    }
    Ok(total)
}

/// Truncated single-edge series for a₁: sums the bracket
/// [ξ·A^{e+}(ξ+∇φ^{e+}) − ξ·A^{e−}(ξ+∇φ^{e−})](0) over every edge whose
/// base lies within max-norm distance `radius` of the origin. With
/// `mu = None` the correctors are periodic; with `Some(μ)` they are
/// regularized, which exists to observe the μ → 0 convergence. One solve
/// pair per edge, so this is a cross-check tool for small radii.
pub fn a1_series(
    geom: &TorusGeometry,
    env: &CoupledEnvironment,
    p_bar: f64,
    xi: &[f64],
    radius: usize,
    mu: Option<f64>,
    cfg: &SolverConfig,
) -> Result<f64, Error> {
    if radius > geom.n() {
        return Err(Error::invalid(
            "truncation_radius",
            format!("radius {radius} exceeds torus half-width {}", geom.n()),
        ));
    }
    if let Some(m) = mu {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::invalid("mu", format!("must be positive, got {m}")));
        }
    }
    let d = geom.d();
    let solve = |field: &ConductanceField| -> Result<CorrectorSolution, Error> {
        match mu {
            None => periodic_corrector(geom, field, xi, cfg),
            Some(m) => regularized_corrector(geom, field, xi, m, cfg),
        }
    };
    let mut terms = Vec::new();
    let mut offset = vec![-(radius as i64); d];
    loop {
        let site = geom.shifted_site(0, &offset);
        for axis in 0..d {
            let slot = site * d + axis;
            if env.delta(slot) == 0.0 {
                continue;
            }
            let edge = EdgeId { base: site, axis };
            let plus_field = env.force_edge(p_bar, edge, ForcedState::Replacement)?;
            let minus_field = env.force_edge(p_bar, edge, ForcedState::Base)?;
            let plus = solve(&plus_field)?;
            let minus = solve(&minus_field)?;
            terms.push(
                tilted_energy_at(geom, &plus_field, &plus, 0)
                    - tilted_energy_at(geom, &minus_field, &minus, 0),
            );
        }
        let mut carry = 0;
        while carry < d {
            offset[carry] += 1;
            if offset[carry] <= radius as i64 {
                break;
            }
            offset[carry] = -(radius as i64);
            carry += 1;
        }
        if carry == d {
            break;
        }
    }
    Ok(kahan_sum(terms.into_iter()))
}

/// Monte Carlo estimate of a₁ via the spatial-average form.
pub fn a1_mc(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    p_bar: f64,
    xi: &[f64],
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<MonteCarloEstimate, Error> {
    check_samples(samples, 2)?;
    check_specs(spec0, spec1)?;
    let values = collect_samples(samples, |k| {
        let env = sample_coupled(geom, spec0, spec1, derive_seed(seed, DOMAIN_A1, k as u64))?;
        a1_spatial_average(geom, &env, p_bar, xi, cfg)
    })?;
    Ok(MonteCarloEstimate::from_samples("a1", seed, &values))
}

/// First-order expansion data around p̄.
#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub p_bar: f64,
    /// Offsets from p̄, starting at 0.
    pub p_grid: Vec<f64>,
    /// Absolute energy estimate at each grid point.
    pub ahom_estimates: Vec<MonteCarloEstimate>,
    /// Coupled-difference estimate (energy at p̄+p minus at p̄, same
    /// environments) at each grid point.
    pub difference_estimates: Vec<MonteCarloEstimate>,
    /// Weighted through-origin slope of the differences against p.
    pub slope_fit: f64,
    pub slope_std_error: f64,
    /// Independent a₁ estimate the slope should reproduce.
    pub a1_reference: MonteCarloEstimate,
    /// Log-log exponent of the residuals after removing p·slope; None when
    /// the residuals are indistinguishable from noise.
    pub error_exponent_fit: Option<f64>,
}

fn validate_grid(p_bar: f64, p_grid: &[f64]) -> Result<Vec<f64>, Error> {
    let mut grid: Vec<f64> = Vec::with_capacity(p_grid.len() + 1);
    if p_grid.first() != Some(&0.0) {
        grid.push(0.0);
    }
    grid.extend_from_slice(p_grid);
    if grid.len() < 4 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 3 nonzero offsets, got {}",
            grid.len() - 1
        )));
    }
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::DegenerateGrid(format!(
                "offsets must increase strictly, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    let top = *grid.last().unwrap();
    if !top.is_finite() || p_bar + top > 1.0 {
        return Err(Error::DegenerateGrid(format!(
            "largest offset {top} pushes p beyond 1 from p̄ = {p_bar}"
        )));
    }
    Ok(grid)
}

/// Estimates the expansion p ↦ ξ·A_hom^(p̄+p)ξ on a grid of offsets with
/// common random numbers: each sample reuses one coupled environment across
/// the whole grid, so the differences carry O(p) variance instead of O(1).
/// Fits the through-origin slope by weighted least squares (the per-sample
/// slope functional, averaged; its spread gives an honest standard error
/// under the cross-p correlation), then fits a log-log exponent to the
/// residuals where they stand out from noise.
pub fn expansion_fit(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    p_bar: f64,
    p_grid: &[f64],
    xi: &[f64],
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<ExpansionReport, Error> {
    check_samples(samples, 2)?;
    check_specs(spec0, spec1)?;
    let grid = validate_grid(p_bar, p_grid)?;
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let run = || -> Result<Vec<f64>, Error> {
                let env = sample_coupled(
                    geom,
                    spec0,
                    spec1,
                    derive_seed(seed, DOMAIN_SWEEP, k as u64),
                )?;
                grid.iter()
                    .map(|&p| ahom_periodic_sample(geom, &env, p_bar + p, xi, cfg))
                    .collect()
            };
            run().map_err(|e| Error::SampleFailed {
                index: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;

    let npts = grid.len();
    let mut ahom_estimates = Vec::with_capacity(npts);
    let mut difference_estimates = Vec::with_capacity(npts);
    for (j, &p) in grid.iter().enumerate() {
        let absolute: Vec<f64> = per_sample.iter().map(|row| row[j]).collect();
        let diffs: Vec<f64> = per_sample.iter().map(|row| row[j] - row[0]).collect();
        ahom_estimates.push(MonteCarloEstimate::from_samples(
            format!("ahom p={p}"),
            seed,
            &absolute,
        ));
        difference_estimates.push(MonteCarloEstimate::from_samples(
            format!("difference p={p}"),
            seed,
            &diffs,
        ));
    }

    // Inverse-variance weights from the pooled spread; uniform fallback when
    // any difference is deterministic.
    let uniform = difference_estimates[1..]
        .iter()
        .any(|e| !(e.std_error > 0.0));
    let weights: Vec<f64> = difference_estimates[1..]
        .iter()
        .map(|e| {
            if uniform {
                1.0
            } else {
                1.0 / (e.std_error * e.std_error)
            }
        })
        .collect();
    let denom: f64 = weights
        .iter()
        .zip(&grid[1..])
        .map(|(&w, &p)| w * p * p)
        .sum();
    let (slope_fit, slope_std_error) = if denom > 0.0 {
        let per_sample_slope: Vec<f64> = per_sample
            .iter()
            .map(|row| {
                let num: f64 = weights
                    .iter()
                    .zip(grid[1..].iter().enumerate())
                    .map(|(&w, (j, &p))| w * p * (row[j + 1] - row[0]))
                    .sum();
                num / denom
            })
            .collect();
        let est = MonteCarloEstimate::from_samples("slope", seed, &per_sample_slope);
        (est.mean, est.std_error)
    } else {
        (0.0, 0.0)
    };

    let a1_reference = a1_mc(
        geom,
        spec0,
        spec1,
        p_bar,
        xi,
        samples,
        derive_seed(seed, DOMAIN_A1_REFERENCE, 0),
        cfg,
    )?;

    // Residuals that clear 3 standard errors carry signal; fit their decay.
    let mut log_points = Vec::new();
    for (j, &p) in grid.iter().enumerate().skip(1) {
        let est = &difference_estimates[j];
        let residual = est.mean - p * slope_fit;
        if est.std_error > 0.0 && residual.abs() > 3.0 * est.std_error {
            log_points.push((p.ln(), residual.abs().ln()));
        }
    }
    let error_exponent_fit = if log_points.len() >= 2 {
        let m = log_points.len() as f64;
        let sx: f64 = log_points.iter().map(|&(x, _)| x).sum();
        let sy: f64 = log_points.iter().map(|&(_, y)| y).sum();
        let sxx: f64 = log_points.iter().map(|&(x, _)| x * x).sum();
        let sxy: f64 = log_points.iter().map(|&(x, y)| x * y).sum();
        Some((m * sxy - sx * sy) / (m * sxx - sx * sx))
    } else {
        None
    };

    Ok(ExpansionReport {
        p_bar,
        p_grid: grid,
        ahom_estimates,
        difference_estimates,
        slope_fit,
        slope_std_error,
        a1_reference,
        error_exponent_fit,
    })
}

/// Monte Carlo estimate of the gradient gap at the origin between the true
/// perturbed corrector and its single-edge superposition, for each p. One
/// environment per sample serves every p through the monotone coupling; the
/// superposition reuses each edge's response across the nested defect sets.
pub fn linearization_error_scaling(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    mu: f64,
    p_values: &[f64],
    xi: &[f64],
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Vec<(f64, MonteCarloEstimate)>, Error> {
    check_samples(samples, 2)?;
    check_specs(spec0, spec1)?;
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
    }
    for &p in p_values {
        crate::environment::check_probability("p", p)?;
    }
    if p_values.is_empty() {
        return Ok(Vec::new());
    }
    let d = geom.d();
    let p_max = p_values.iter().cloned().fold(0.0f64, f64::max);

    let run_sample = |k: usize| -> Result<Vec<f64>, Error> {
        let env = sample_coupled(
            geom,
            spec0,
            spec1,
            derive_seed(seed, DOMAIN_LINEARIZATION, k as u64),
        )?;
        let (base_field, _) = env.realize(0.0)?;
        let phi0 = regularized_corrector(geom, &base_field, xi, mu, cfg)?;
        let (_, widest) = env.realize(p_max)?;
        // Origin-gradient components of each edge's response; valid for
        // every smaller p because the defect sets are nested.
        let mut response_grad: Vec<(usize, Vec<f64>)> = Vec::with_capacity(widest.len());
        for &edge in &widest {
            let slot = geom.edge_slot(edge);
            let delta = env.delta(slot);
            let resp = single_edge_delta(geom, &base_field, &phi0, edge, delta, mu, cfg)?;
            let g: Vec<f64> = (0..d)
                .map(|i| resp.values[geom.neighbor_fwd(0, i)] - resp.values[0])
                .collect();
            response_grad.push((slot, g));
        }
        p_values
            .iter()
            .map(|&p| -> Result<f64, Error> {
                if p == 0.0 {
                    return Ok(0.0);
                }
                let (field, _) = env.realize(p)?;
                let direct = regularized_corrector(geom, &field, xi, mu, cfg)?;
                let mut gap_sq = 0.0;
                for i in 0..d {
                    let mut tilde_grad = phi0.grad_phi.values[i];
                    for (slot, g) in &response_grad {
                        if env.coupling_values()[*slot] < p {
                            tilde_grad += g[i];
                        }
                    }
                    let diff = direct.grad_phi.values[i] - tilde_grad;
                    gap_sq += diff * diff;
                }
                Ok(gap_sq.sqrt())
            })
            .collect()
    };
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            run_sample(k).map_err(|e| Error::SampleFailed {
                index: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;

    Ok(p_values
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let vals: Vec<f64> = per_sample.iter().map(|row| row[j]).collect();
            (
                p,
                MonteCarloEstimate::from_samples(
                    format!("linearization_error p={p}"),
                    seed,
                    &vals,
                ),
            )
        })
        .collect())
}

/// Direct elimination for the tiny periodic systems the enumeration visits,
/// reusing its buffers across configurations. The constant mode is pinned by
/// the rank-one shift toward constants, which leaves the mean-zero solution
/// untouched.
struct MicroSolver {
    nsites: usize,
    m: Vec<f64>,
    rhs: Vec<f64>,
    grad: Vec<f64>,
}

impl MicroSolver {
    fn new(geom: &TorusGeometry) -> Self {
        let nsites = geom.site_count();
        Self {
            nsites,
            m: vec![0.0; nsites * nsites],
            rhs: vec![0.0; nsites],
            grad: vec![0.0; geom.edge_count()],
        }
    }

    /// Energy density |B_n|⁻¹ Σ ξ·A(ξ+∇φ) of the periodic corrector for the
    /// given conductance values.
    fn periodic_energy(
        &mut self,
        geom: &TorusGeometry,
        values: &[f64],
        xi: &[f64],
    ) -> Result<f64, Error> {
        let n = self.nsites;
        let d = geom.d();
        let shift = 1.0 / n as f64;
        self.m.fill(shift);
        self.rhs.fill(0.0);
        for site in 0..n {
            for axis in 0..d {
                let w = values[site * d + axis];
                let head = geom.neighbor_fwd(site, axis);
                self.m[site * n + site] += w;
                self.m[head * n + head] += w;
                self.m[site * n + head] -= w;
                self.m[head * n + site] -= w;
                let flux = w * xi[axis];
                self.rhs[site] += flux;
                self.rhs[head] -= flux;
            }
        }
        gauss_solve(&mut self.m, &mut self.rhs, n)?;
        let phi = &self.rhs;
        for site in 0..n {
            for axis in 0..d {
                self.grad[site * d + axis] = phi[geom.neighbor_fwd(site, axis)] - phi[site];
            }
        }
        let mut energy = 0.0;
        for slot in 0..geom.edge_count() {
            let xi_i = xi[slot % d];
            energy += xi_i * values[slot] * (xi_i + self.grad[slot]);
        }
        Ok(energy / n as f64)
    }
}

/// In-place Gaussian elimination with partial pivoting; the solution
/// replaces `b`.
fn gauss_solve(m: &mut [f64], b: &mut [f64], n: usize) -> Result<(), Error> {
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return Err(Error::SingularSystem);
        }
        if piv != col {
            for c in col..n {
                m.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor != 0.0 {
                for c in col + 1..n {
                    m[row * n + c] -= factor * m[col * n + c];
                }
                b[row] -= factor * b[col];
            }
            m[row * n + col] = 0.0;
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= m[col * n + c] * b[c];
        }
        b[col] = s / m[col * n + col];
    }
    Ok(())
}

/// Cap on sites for exact enumeration; each configuration costs a dense
/// solve.
pub const ENUMERATION_SITE_CAP: usize = 16;

struct EnumerationSetup {
    /// Distinct conductance values appearing in either law.
    values: Vec<f64>,
    /// Probability of each value under the base law.
    prob0: Vec<f64>,
    /// Probability of each value under the replacement law.
    prob1: Vec<f64>,
    configs: u128,
}

fn enumeration_setup(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
) -> Result<EnumerationSetup, Error> {
    check_specs(spec0, spec1)?;
    if geom.site_count() > ENUMERATION_SITE_CAP {
        return Err(Error::invalid(
            "geometry",
            format!(
                "enumeration limited to {ENUMERATION_SITE_CAP} sites, geometry has {}",
                geom.site_count()
            ),
        ));
    }
    let support0 = spec0.finite_support().ok_or_else(|| {
        Error::InvalidDistribution("enumeration requires finite-support laws".into())
    })?;
    let support1 = spec1.finite_support().ok_or_else(|| {
        Error::InvalidDistribution("enumeration requires finite-support laws".into())
    })?;
    let mut values: Vec<f64> = Vec::new();
    for &(v, _) in support0.iter().chain(&support1) {
        if !values.contains(&v) {
            values.push(v);
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lookup = |support: &[(f64, f64)], v: f64| {
        support
            .iter()
            .find(|&&(sv, _)| sv == v)
            .map(|&(_, p)| p)
            .unwrap_or(0.0)
    };
    let prob0: Vec<f64> = values.iter().map(|&v| lookup(&support0, v)).collect();
    let prob1: Vec<f64> = values.iter().map(|&v| lookup(&support1, v)).collect();
    let s = values.len() as u128;
    let mut configs: u128 = 1;
    for _ in 0..geom.edge_count() {
        configs = configs.saturating_mul(s);
        if configs > ENUMERATION_CAP {
            return Err(Error::EnumerationTooLarge {
                configurations: configs,
                cap: ENUMERATION_CAP,
            });
        }
    }
    Ok(EnumerationSetup {
        values,
        prob0,
        prob1,
        configs,
    })
}

/// Exact expectation of the effective energy and its exact derivative in p,
/// for each requested p, by enumerating every conductance assignment.
///
/// Edges are independent, so the weight of an assignment is the product of
/// per-edge mixture masses m_p(v) = (1−p)·P₀(v) + p·P₁(v), a polynomial in
/// p; the derivative follows by the product rule with explicit bookkeeping
/// of vanishing factors (at p ∈ {0,1} a factor can be exactly zero while its
/// p-derivative still contributes). The energy of each assignment is
/// computed once and shared across all requested p.
pub fn exact_enumeration_grid(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    p_list: &[f64],
    xi: &[f64],
) -> Result<Vec<(f64, f64)>, Error> {
    for &p in p_list {
        crate::environment::check_probability("p", p)?;
    }
    if xi.len() != geom.d() {
        return Err(Error::SizeMismatch {
            what: "direction vector",
            got: xi.len(),
            want: geom.d(),
        });
    }
    let setup = enumeration_setup(geom, spec0, spec1)?;
    let nedges = geom.edge_count();
    let nvals = setup.values.len();
    let npts = p_list.len();
    let configs = setup.configs as u64;

    // Per-value mixture mass and its p-derivative, tabulated per grid point.
    let mass: Vec<Vec<f64>> = p_list
        .iter()
        .map(|&p| {
            (0..nvals)
                .map(|vi| (1.0 - p) * setup.prob0[vi] + p * setup.prob1[vi])
                .collect()
        })
        .collect();
    let dmass: Vec<f64> = (0..nvals)
        .map(|vi| setup.prob1[vi] - setup.prob0[vi])
        .collect();

    // Fixed chunking keeps the reduction order independent of thread count.
    let chunk_count = 64u64.min(configs).max(1);
    let chunk_len = configs.div_ceil(chunk_count);

    let chunk_sums: Vec<Result<(Vec<f64>, Vec<f64>), Error>> = (0..chunk_count)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * chunk_len;
            let end = (start + chunk_len).min(configs);
            let mut digits = vec![0usize; nedges];
            let mut rem = start;
            for digit in digits.iter_mut() {
                *digit = (rem % nvals as u64) as usize;
                rem /= nvals as u64;
            }
            let mut conductances = vec![0.0f64; nedges];
            let mut micro = MicroSolver::new(geom);
            let mut energy_acc = vec![0.0f64; npts];
            let mut energy_c = vec![0.0f64; npts];
            let mut deriv_acc = vec![0.0f64; npts];
            let mut deriv_c = vec![0.0f64; npts];
            let kahan_add = |acc: &mut f64, comp: &mut f64, term: f64| {
                let y = term - *comp;
                let t = *acc + y;
                *comp = (t - *acc) - y;
                *acc = t;
            };
            for _config in start..end {
                for (w, &digit) in conductances.iter_mut().zip(&digits) {
                    *w = setup.values[digit];
                }
                let energy = micro.periodic_energy(geom, &conductances, xi)?;
                for (j, masses) in mass.iter().enumerate() {
                    let mut weight = 1.0f64;
                    let mut ratio = 0.0f64;
                    let mut zeros = 0usize;
                    let mut zero_deriv = 0.0f64;
                    for &digit in &digits {
                        let m = masses[digit];
                        if m == 0.0 {
                            zeros += 1;
                            if zeros > 1 {
                                break;
                            }
                            zero_deriv = dmass[digit];
                        } else {
                            weight *= m;
                            ratio += dmass[digit] / m;
                        }
                    }
                    let (w, dw) = match zeros {
                        0 => (weight, weight * ratio),
                        1 => (0.0, zero_deriv * weight),
                        _ => (0.0, 0.0),
                    };
                    if w != 0.0 {
                        kahan_add(&mut energy_acc[j], &mut energy_c[j], w * energy);
                    }
                    if dw != 0.0 {
                        kahan_add(&mut deriv_acc[j], &mut deriv_c[j], dw * energy);
                    }
                }
                let mut carry = 0;
                while carry < nedges {
                    digits[carry] += 1;
                    if digits[carry] < nvals {
                        break;
                    }
                    digits[carry] = 0;
                    carry += 1;
                }
            }
            Ok((energy_acc, deriv_acc))
        })
        .collect();

    let mut energy_total = vec![0.0f64; npts];
    let mut deriv_total = vec![0.0f64; npts];
    let mut partials: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(chunk_sums.len());
    for r in chunk_sums {
        partials.push(r?);
    }
    for j in 0..npts {
        energy_total[j] = kahan_sum(partials.iter().map(|(e, _)| e[j]));
        deriv_total[j] = kahan_sum(partials.iter().map(|(_, dv)| dv[j]));
    }
    Ok((0..npts)
        .map(|j| (energy_total[j], deriv_total[j]))
        .collect())
}

/// Single-p wrapper around `exact_enumeration_grid`: returns
/// (exact expected energy, exact derivative of that expectation in p).
pub fn exact_enumeration(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    p: f64,
    xi: &[f64],
) -> Result<(f64, f64), Error> {
    let out = exact_enumeration_grid(geom, spec0, spec1, &[p], xi)?;
    Ok(out[0])
}

/// One line of experiment output.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub label: String,
    pub d: usize,
    pub n: usize,
    pub p: f64,
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

const CSV_COLUMNS: [&str; 9] = [
    "label",
    "d",
    "n",
    "p",
    "mean",
    "std_error",
    "n_samples",
    "seed",
    "wall_time_s",
];

/// Appends rows to a CSV file, creating it (with a header line) when absent
/// or empty. Floats are written with 17 significant digits so a rerun is
/// byte-comparable.
pub fn append_csv_rows(path: &Path, rows: &[ResultRow]) -> Result<(), Error> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let empty = file.metadata().map_err(io_err)?.len() == 0;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::CRLF)
        .from_writer(file);
    let record_err = |source: csv::Error| match source.into_kind() {
        csv::ErrorKind::Io(io) => io_err(io),
        other => io_err(std::io::Error::other(format!("csv: {other:?}"))),
    };
    if empty {
        writer.write_record(CSV_COLUMNS).map_err(record_err)?;
    }
    for row in rows {
        writer
            .write_record([
                row.label.as_str(),
                &row.d.to_string(),
                &row.n.to_string(),
                &format!("{:.16e}", row.p),
                &format!("{:.16e}", row.mean),
                &format!("{:.16e}", row.std_error),
                &row.n_samples.to_string(),
                &row.seed.to_string(),
                &format!("{:.16e}", row.wall_time_s),
            ])
            .map_err(record_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}
