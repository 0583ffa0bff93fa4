//! Linear solvers for μf - ∇*·A∇f = rhs on the torus.
//!
//! The iterative path is conjugate gradients with a Jacobi preconditioner,
//! applied matrix-free through the lattice stencil. For μ = 0 the operator is
//! singular with the constants as kernel; the mean-zero solve works in the
//! complement and projects the constant mode back out at a fixed cadence to
//! stop round-off drift. A dense LU factorization over the full system serves
//! as an independent oracle for small tori.
//!
//! Solves are sequential and allocation-stable, so a given input always
//! produces bit-identical output.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::lattice::{
    apply_operator_into, operator_diagonal, ConductanceField, ScalarField, TorusGeometry,
};

/// Site-count cap for the dense oracle.
pub const DENSE_SITE_CAP: usize = 4096;

/// Tolerances and budgets for the conjugate-gradient solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Target for ‖rhs - (μ - ∇*·A∇)u‖₂ / ‖rhs‖₂; must lie in (0, 1e-4].
    pub rel_tolerance: f64,
    /// Iteration cap; `None` means 10 × site count.
    pub max_iterations: Option<usize>,
    /// How often the μ = 0 solve projects out the constant mode.
    pub recenter_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tolerance: 1e-10,
            max_iterations: None,
            recenter_every: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance <= 1e-4) {
            return Err(Error::invalid(
                "rel_tolerance",
                format!("must lie in (0, 1e-4], got {}", self.rel_tolerance),
            ));
        }
        if let Some(0) = self.max_iterations {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.recenter_every == 0 {
            return Err(Error::invalid("recenter_every", "must be at least 1"));
        }
        Ok(())
    }

    fn iteration_cap(&self, site_count: usize) -> usize {
        self.max_iterations.unwrap_or(10 * site_count)
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final relative residual ‖rhs - Au‖₂ / ‖rhs‖₂ (0 for a zero rhs).
    pub final_residual: f64,
    pub converged: bool,
}

fn check_inputs(
    geom: &TorusGeometry,
    a: &ConductanceField,
    rhs: &ScalarField,
    cfg: &SolverConfig,
) -> Result<(), Error> {
    cfg.validate()?;
    if a.values.len() != geom.edge_count() {
        return Err(Error::SizeMismatch {
            what: "conductance field",
            got: a.values.len(),
            want: geom.edge_count(),
        });
    }
    if rhs.values.len() != geom.site_count() {
        return Err(Error::SizeMismatch {
            what: "right-hand side",
            got: rhs.values.len(),
            want: geom.site_count(),
        });
    }
    Ok(())
}

/// Solves (μ - ∇*·A∇)u = rhs for μ > 0. Non-convergence is an error, never a
/// silently degraded answer.
pub fn solve_regularized(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    rhs: &ScalarField,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport), Error> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
    }
    check_inputs(geom, a, rhs, cfg)?;
    pcg(geom, a, mu, rhs, cfg, false)
}

/// Solves -∇*·A∇u = rhs with Σ u = 0, for a mean-zero rhs. The constant mode
/// is projected out every `recenter_every` iterations and at the end.
pub fn solve_mean_zero(
    geom: &TorusGeometry,
    a: &ConductanceField,
    rhs: &ScalarField,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport), Error> {
    check_inputs(geom, a, rhs, cfg)?;
    check_mean_zero(&rhs.values)?;
    pcg(geom, a, 0.0, rhs, cfg, true)
}

fn check_mean_zero(rhs: &[f64]) -> Result<(), Error> {
    let total: f64 = crate::lattice::kahan_sum(rhs.iter().copied());
    let norm1: f64 = rhs.iter().map(|v| v.abs()).sum();
    let limit = 1e-9 * norm1;
    if total.abs() > limit {
        return Err(Error::NotMeanZero {
            imbalance: total.abs(),
            limit,
        });
    }
    Ok(())
}

/// Jacobi-preconditioned conjugate gradients on the lattice operator.
fn pcg(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    rhs: &ScalarField,
    cfg: &SolverConfig,
    project_kernel: bool,
) -> Result<(ScalarField, SolveReport), Error> {
    let nsites = geom.site_count();
    let b_norm = rhs.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok((
            ScalarField {
                values: vec![0.0; nsites],
            },
            SolveReport {
                iterations: 0,
                final_residual: 0.0,
                converged: true,
            },
        ));
    }

    let mut diag = vec![0.0; nsites];
    operator_diagonal(geom, &a.values, mu, &mut diag);
    let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();

    let mut u = vec![0.0; nsites];
    let mut r = rhs.values.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(&ri, &di)| ri * di).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; nsites];
    let mut rho: f64 = r.iter().zip(&z).map(|(&ri, &zi)| ri * zi).sum();

    let cap = cfg.iteration_cap(nsites);
    let target = cfg.rel_tolerance * b_norm;
    let mut iterations = 0usize;
    let mut res_norm = b_norm;

    while iterations < cap {
        iterations += 1;
        apply_operator_into(geom, &a.values, mu, &p, &mut q);
        let pq: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * qi).sum();
        if !(pq.is_finite() && pq > 0.0) {
            return Err(Error::SingularSystem);
        }
        let alpha = rho / pq;
        for i in 0..nsites {
            u[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if project_kernel && iterations % cfg.recenter_every == 0 {
            subtract_mean(&mut u);
            subtract_mean(&mut r);
        }
        res_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res_norm <= target {
            if project_kernel {
                subtract_mean(&mut u);
            }
            return Ok((
                ScalarField { values: u },
                SolveReport {
                    iterations,
                    final_residual: res_norm / b_norm,
                    converged: true,
                },
            ));
        }
        for i in 0..nsites {
            z[i] = r[i] * inv_diag[i];
        }
        let rho_next: f64 = r.iter().zip(&z).map(|(&ri, &zi)| ri * zi).sum();
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..nsites {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence {
        iterations,
        residual: res_norm / b_norm,
    })
}

fn subtract_mean(v: &mut [f64]) {
    let mean = crate::lattice::kahan_sum(v.iter().copied()) / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Column of the Green function: solves (μ - ∇*·A∇)g = 1_{source}, so
/// g(x) = G_μ(x, source).
pub fn green_column(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    source: usize,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport), Error> {
    if source >= geom.site_count() {
        return Err(Error::invalid(
            "source",
            format!("site {source} outside geometry with {} sites", geom.site_count()),
        ));
    }
    let mut rhs = ScalarField::zeros(geom);
    rhs.values[source] = 1.0;
    solve_regularized(geom, a, mu, &rhs, cfg)
}

/// Direct elimination oracle for small systems. For μ = 0 the rhs must be
/// mean-zero; the kernel is pinned with a rank-one shift toward the constants
/// and the returned solution is mean-zero.
pub fn dense_solve(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    rhs: &ScalarField,
) -> Result<ScalarField, Error> {
    let nsites = geom.site_count();
    if nsites > DENSE_SITE_CAP {
        return Err(Error::TooLargeForDense {
            site_count: nsites,
            cap: DENSE_SITE_CAP,
        });
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::invalid("mu", format!("must be >= 0, got {mu}")));
    }
    if a.values.len() != geom.edge_count() {
        return Err(Error::SizeMismatch {
            what: "conductance field",
            got: a.values.len(),
            want: geom.edge_count(),
        });
    }
    if rhs.values.len() != nsites {
        return Err(Error::SizeMismatch {
            what: "right-hand side",
            got: rhs.values.len(),
            want: nsites,
        });
    }
    let singular = mu == 0.0;
    if singular {
        check_mean_zero(&rhs.values)?;
    }

    let mut m = DMatrix::<f64>::zeros(nsites, nsites);
    if singular {
        // Rank-one shift (1/N)·𝟙𝟙ᵀ pins the constant mode without touching
        // the mean-zero subspace.
        let shift = 1.0 / nsites as f64;
        m.fill(shift);
    }
    for i in 0..nsites {
        m[(i, i)] += mu;
    }
    let d = geom.d();
    for site in 0..nsites {
        for axis in 0..d {
            let w = a.values[site * d + axis];
            let head = geom.neighbor_fwd(site, axis);
            m[(site, site)] += w;
            m[(head, head)] += w;
            m[(site, head)] -= w;
            m[(head, site)] -= w;
        }
    }
    let b = DVector::from_column_slice(&rhs.values);
    let solved = m.lu().solve(&b).ok_or(Error::SingularSystem)?;
    let mut out = ScalarField {
        values: solved.as_slice().to_vec(),
    };
    if singular {
        out.subtract_mean();
    }
    Ok(out)
}
