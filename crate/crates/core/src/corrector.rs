//! Correctors and their response to local conductance changes.
//!
//! A corrector φ makes the tilted profile ξ·x + φ(x) harmonic for the
//! operator −∇*·A∇, either exactly (periodic, μ = 0, mean-zero) or with a
//! μφ damping term that localizes the solution. Changing a single edge
//! conductance moves the corrector by an explicitly solvable amount: the
//! response is a scaled dipole solve on the perturbed conductances. Summing
//! those one-edge responses over a defect set gives a linear approximation
//! to the multi-edge corrector, and `multi_edge_residual` reconstructs the
//! gap between the two from dipole solves alone.

use crate::environment::{apply_defects, DefectSet};
use crate::error::Error;
use crate::lattice::{
    backward_divergence, forward_gradient, ConductanceField, EdgeField, EdgeId, ScalarField,
    TorusGeometry,
};
use crate::solver::{solve_mean_zero, solve_regularized, SolveReport, SolverConfig};

/// A solved corrector problem together with the data defining it.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    /// The corrector values; mean-zero when `mu` is zero.
    pub phi: ScalarField,
    /// Forward gradient of `phi`, cached because every consumer needs it.
    pub grad_phi: EdgeField,
    /// Tilt direction, one entry per axis.
    pub xi: Vec<f64>,
    pub mu: f64,
    pub report: SolveReport,
}

impl CorrectorSolution {
    /// ξ_i + ∇_iφ at the given edge slot, the corrected gradient the
    /// perturbation formulas consume.
    pub fn tilted_gradient(&self, geom: &TorusGeometry, slot: usize) -> f64 {
        self.xi[slot % geom.d()] + self.grad_phi.values[slot]
    }
}

fn check_xi(geom: &TorusGeometry, xi: &[f64]) -> Result<(), Error> {
    if xi.len() != geom.d() {
        return Err(Error::SizeMismatch {
            what: "direction vector",
            got: xi.len(),
            want: geom.d(),
        });
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("xi", "entries must be finite"));
    }
    Ok(())
}

/// Right-hand side ∇*·(Aξ): the edge field with slot (x,i) value ω(x,i)·ξ_i
/// fed through the backward divergence. Telescoping over the torus makes it
/// mean-zero by construction.
fn tilt_rhs(geom: &TorusGeometry, a: &ConductanceField, xi: &[f64]) -> Result<ScalarField, Error> {
    let d = geom.d();
    let flux = EdgeField::from_values(
        geom,
        a.values
            .iter()
            .enumerate()
            .map(|(slot, &w)| w * xi[slot % d])
            .collect(),
    )?;
    backward_divergence(geom, &flux)
}

/// Solves −∇*·A(ξ + ∇φ) = 0 with φ mean-zero.
pub fn periodic_corrector(
    geom: &TorusGeometry,
    a: &ConductanceField,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<CorrectorSolution, Error> {
    check_xi(geom, xi)?;
    let rhs = tilt_rhs(geom, a, xi)?;
    let (phi, report) = solve_mean_zero(geom, a, &rhs, cfg)?;
    let grad_phi = forward_gradient(geom, &phi)?;
    Ok(CorrectorSolution {
        phi,
        grad_phi,
        xi: xi.to_vec(),
        mu: 0.0,
        report,
    })
}

/// Solves μφ − ∇*·A(ξ + ∇φ) = 0 for μ > 0.
pub fn regularized_corrector(
    geom: &TorusGeometry,
    a: &ConductanceField,
    xi: &[f64],
    mu: f64,
    cfg: &SolverConfig,
) -> Result<CorrectorSolution, Error> {
    check_xi(geom, xi)?;
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
    }
    let rhs = tilt_rhs(geom, a, xi)?;
    let (phi, report) = solve_regularized(geom, a, mu, &rhs, cfg)?;
    let grad_phi = forward_gradient(geom, &phi)?;
    Ok(CorrectorSolution {
        phi,
        grad_phi,
        xi: xi.to_vec(),
        mu,
        report,
    })
}

/// Dipole solve on the given conductances: u(x) = G_μ(x, head) − G_μ(x, base)
/// for the edge's endpoints, obtained from one solve with rhs
/// δ_head − δ_base.
fn dipole_response(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    edge: EdgeId,
    cfg: &SolverConfig,
) -> Result<ScalarField, Error> {
    let (base, head) = geom.edge_endpoints(edge);
    let mut rhs = ScalarField::zeros(geom);
    rhs.values[head] += 1.0;
    rhs.values[base] -= 1.0;
    let (u, _) = solve_regularized(geom, a, mu, &rhs, cfg)?;
    Ok(u)
}

/// Exact corrector response to changing one edge conductance by `delta`:
/// with i the edge direction and u the dipole response on the perturbed
/// conductances A^e,
///
/// ```text
///   φ̄^e(x) = −u(x) · δ · (ξ_i + ∇_iφ°(e̲)),
/// ```
///
/// so that φ° + φ̄^e reproduces the corrector of A^e without re-solving the
/// full tilted problem. The dipole must run on the perturbed conductances;
/// the unperturbed column gives a different, wrong scale.
pub fn single_edge_delta(
    geom: &TorusGeometry,
    a: &ConductanceField,
    phi0: &CorrectorSolution,
    edge: EdgeId,
    delta: f64,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<ScalarField, Error> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
    }
    if phi0.mu != mu {
        return Err(Error::invalid(
            "mu",
            format!("base corrector was solved at mu = {}, not {mu}", phi0.mu),
        ));
    }
    if edge.base >= geom.site_count() || edge.axis >= geom.d() {
        return Err(Error::invalid(
            "edge",
            format!("{edge} outside geometry with {} sites", geom.site_count()),
        ));
    }
    if !delta.is_finite() {
        return Err(Error::invalid("delta", "must be finite"));
    }
    if delta == 0.0 {
        return Ok(ScalarField::zeros(geom));
    }
    let defects = DefectSet::new(vec![(edge, delta)])?;
    let perturbed = apply_defects(geom, a, &defects)?;
    let u = dipole_response(geom, &perturbed, mu, edge, cfg)?;
    let slot = geom.edge_slot(edge);
    let scale = -delta * phi0.tilted_gradient(geom, slot);
    Ok(ScalarField {
        values: u.values.iter().map(|&v| scale * v).collect(),
    })
}

/// φ̃ = φ° + Σ_e φ̄^e, the superposition of one-edge responses.
pub fn linear_approximation(
    phi0: &CorrectorSolution,
    responses: &[ScalarField],
) -> Result<ScalarField, Error> {
    let nsites = phi0.phi.values.len();
    let mut out = phi0.phi.clone();
    for r in responses {
        if r.values.len() != nsites {
            return Err(Error::SizeMismatch {
                what: "single-edge response",
                got: r.values.len(),
                want: nsites,
            });
        }
        for (o, &v) in out.values.iter_mut().zip(&r.values) {
            *o += v;
        }
    }
    Ok(out)
}

/// Both sides of the multi-edge discrepancy identity.
#[derive(Clone, Debug)]
pub struct MultiEdgeResidual {
    /// φ^E − φ̃^E from direct solves.
    pub lhs: ScalarField,
    /// The same field reassembled from dipole solves on A^E.
    pub rhs: ScalarField,
    /// ‖lhs − rhs‖∞.
    pub max_dev: f64,
}

/// Measures how far the superposed one-edge responses sit from the true
/// multi-edge corrector, and independently rebuilds that gap:
///
/// ```text
///   φ^E − φ̃^E = −Σ_{e'∈E} u_{e'} · δ_{e'} · Σ_{e∈E, e≠e'} ∇_{i'}φ̄^e(e̲')
/// ```
///
/// with u_{e'} the dipole response of edge e' on the fully perturbed
/// conductances A^E. The left side costs one tilted solve plus the one-edge
/// responses; the right side costs |E| dipole solves; their agreement is a
/// nontrivial consistency check on both.
pub fn multi_edge_residual(
    geom: &TorusGeometry,
    a: &ConductanceField,
    defects: &DefectSet,
    xi: &[f64],
    mu: f64,
    cfg: &SolverConfig,
) -> Result<MultiEdgeResidual, Error> {
    if defects.len() < 2 {
        return Err(Error::invalid(
            "defects",
            format!("need at least 2 edges, got {}", defects.len()),
        ));
    }
    let phi0 = regularized_corrector(geom, a, xi, mu, cfg)?;
    let responses: Vec<ScalarField> = defects
        .entries()
        .iter()
        .map(|&(edge, delta)| single_edge_delta(geom, a, &phi0, edge, delta, mu, cfg))
        .collect::<Result<_, _>>()?;
    let tilde = linear_approximation(&phi0, &responses)?;

    let full = apply_defects(geom, a, defects)?;
    let direct = regularized_corrector(geom, &full, xi, mu, cfg)?;
    let lhs = ScalarField {
        values: direct
            .phi
            .values
            .iter()
            .zip(&tilde.values)
            .map(|(&x, &y)| x - y)
            .collect(),
    };

    let mut rhs = ScalarField::zeros(geom);
    let entries = defects.entries();
    for (k, &(edge, delta)) in entries.iter().enumerate() {
        // Cross gradients of every other edge's response at this edge.
        let mut cross = 0.0;
        for (j, r) in responses.iter().enumerate() {
            if j == k {
                continue;
            }
            let (base, head) = geom.edge_endpoints(edge);
            cross += r.values[head] - r.values[base];
        }
        if delta == 0.0 || cross == 0.0 {
            continue;
        }
        let u = dipole_response(geom, &full, mu, edge, cfg)?;
        let scale = -delta * cross;
        for (o, &v) in rhs.values.iter_mut().zip(&u.values) {
            *o += scale * v;
        }
    }

    let max_dev = lhs
        .values
        .iter()
        .zip(&rhs.values)
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()));
    Ok(MultiEdgeResidual { lhs, rhs, max_dev })
}
