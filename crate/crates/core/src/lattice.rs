//! Periodic lattice geometry and discrete difference operators.
//!
//! Sites of the torus {0, …, L-1}^d with L = 2n+1 are addressed by flat
//! indices in lexicographic coordinate order, coordinate 0 most significant.
//! Edges are nearest-neighbour bonds identified by a base site and an axis;
//! edge slots are laid out site-major, axis-minor, so the bond leaving site x
//! along axis i occupies slot x·d + i.
//!
//! The operators follow the convention
//!
//! ```text
//! (∇f)(x, i)   = f(x + e_i) - f(x)
//! (∇*·F)(x)    = Σ_i F(x, i) - F(x - e_i, i)
//! (∇*·A∇f)(x)  = Σ_{y~x} ω_xy (f(y) - f(x))
//! ```
//!
//! so that -∇*·A∇ has the nonnegative quadratic form Σ_e ω_e (∇f)_e² and
//! μf - ∇*·A∇f is positive definite for μ > 0.

use crate::error::Error;

/// Torus {0, …, 2n}^d with flat site and edge indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TorusGeometry {
    d: usize,
    n: usize,
    side: usize,
    site_count: usize,
    edge_count: usize,
    strides: Vec<usize>,
}

impl TorusGeometry {
    /// Builds the torus of half-width `n` in dimension `d`; the side length is
    /// 2n+1 and the origin is the site with all coordinates zero.
    pub fn new(d: usize, n: usize) -> Result<Self, Error> {
        if d == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        if n == 0 {
            return Err(Error::invalid("n", "half-width must be at least 1"));
        }
        let side = 2 * n + 1;
        let mut site_count = 1usize;
        for _ in 0..d {
            site_count = site_count
                .checked_mul(side)
                .ok_or_else(|| Error::invalid("n", "site count overflows usize"))?;
        }
        let edge_count = site_count
            .checked_mul(d)
            .ok_or_else(|| Error::invalid("d", "edge count overflows usize"))?;
        let mut strides = vec![0usize; d];
        let mut s = 1usize;
        for i in (0..d).rev() {
            strides[i] = s;
            s *= side;
        }
        Ok(Self {
            d,
            n,
            side,
            site_count,
            edge_count,
            strides,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Side length L = 2n+1.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn site_count(&self) -> usize {
        self.site_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Flat index of the site with the given coordinates in [0, L)^d.
    pub fn site_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        coords
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| c * s)
            .sum()
    }

    /// Coordinates in [0, L)^d of the given flat site index.
    pub fn site_coords(&self, site: usize) -> Vec<usize> {
        debug_assert!(site < self.site_count);
        self.strides
            .iter()
            .map(|&s| (site / s) % self.side)
            .collect()
    }

    /// Neighbour of `site` one step forward along `axis`, with wraparound.
    #[inline]
    pub fn neighbor_fwd(&self, site: usize, axis: usize) -> usize {
        let stride = self.strides[axis];
        let coord = (site / stride) % self.side;
        if coord + 1 == self.side {
            site - (self.side - 1) * stride
        } else {
            site + stride
        }
    }

    /// Neighbour of `site` one step backward along `axis`, with wraparound.
    #[inline]
    pub fn neighbor_bwd(&self, site: usize, axis: usize) -> usize {
        let stride = self.strides[axis];
        let coord = (site / stride) % self.side;
        if coord == 0 {
            site + (self.side - 1) * stride
        } else {
            site - stride
        }
    }

    /// Flat slot of the edge leaving `base` along `axis`.
    #[inline]
    pub fn edge_slot(&self, edge: EdgeId) -> usize {
        debug_assert!(edge.base < self.site_count && edge.axis < self.d);
        edge.base * self.d + edge.axis
    }

    /// Edge occupying the given flat slot.
    #[inline]
    pub fn edge_at(&self, slot: usize) -> EdgeId {
        debug_assert!(slot < self.edge_count);
        EdgeId {
            base: slot / self.d,
            axis: slot % self.d,
        }
    }

    /// The two endpoints of an edge: its base and the forward neighbour.
    pub fn edge_endpoints(&self, edge: EdgeId) -> (usize, usize) {
        (edge.base, self.neighbor_fwd(edge.base, edge.axis))
    }

    /// Site reached from `site` by the lattice shift `offset` (entries may be
    /// negative), with periodic wraparound.
    pub fn shifted_site(&self, site: usize, offset: &[i64]) -> usize {
        debug_assert_eq!(offset.len(), self.d);
        let l = self.side as i64;
        let mut idx = 0usize;
        for (axis, &o) in offset.iter().enumerate() {
            let stride = self.strides[axis];
            let coord = ((site / stride) % self.side) as i64;
            let wrapped = (coord + o).rem_euclid(l) as usize;
            idx += wrapped * stride;
        }
        idx
    }
}

/// Undirected nearest-neighbour bond from `base` to `base + e_axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId {
    /// Flat index of the tail site.
    pub base: usize,
    /// Axis of the bond, in [0, d).
    pub axis: usize,
}

impl std::fmt::Display for EdgeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(site {}, axis {})", self.base, self.axis)
    }
}

/// Real-valued function on sites, indexed by flat site index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(geom: &TorusGeometry) -> Self {
        Self {
            values: vec![0.0; geom.site_count()],
        }
    }

    pub fn from_values(geom: &TorusGeometry, values: Vec<f64>) -> Result<Self, Error> {
        check_len("scalar field", values.len(), geom.site_count())?;
        Ok(Self { values })
    }

    pub fn mean(&self) -> f64 {
        kahan_sum(self.values.iter().copied()) / self.values.len() as f64
    }

    pub fn subtract_mean(&mut self) {
        let m = self.mean();
        for v in &mut self.values {
            *v -= m;
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Real-valued function on edge slots, laid out site-major, axis-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeField {
    pub values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(geom: &TorusGeometry) -> Self {
        Self {
            values: vec![0.0; geom.edge_count()],
        }
    }

    pub fn from_values(geom: &TorusGeometry, values: Vec<f64>) -> Result<Self, Error> {
        check_len("edge field", values.len(), geom.edge_count())?;
        Ok(Self { values })
    }
}

/// Strictly positive, finite conductance per edge slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConductanceField {
    pub values: Vec<f64>,
}

impl ConductanceField {
    /// Wraps the per-slot values after checking length and strict positivity.
    pub fn from_values(geom: &TorusGeometry, values: Vec<f64>) -> Result<Self, Error> {
        check_len("conductance field", values.len(), geom.edge_count())?;
        for (slot, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                let edge = geom.edge_at(slot);
                return Err(Error::NonElliptic {
                    base: edge.base,
                    axis: edge.axis,
                    value: v,
                });
            }
        }
        Ok(Self { values })
    }

    /// Homogeneous field with every conductance equal to `value`.
    pub fn constant(geom: &TorusGeometry, value: f64) -> Result<Self, Error> {
        Self::from_values(geom, vec![value; geom.edge_count()])
    }

    /// Smallest and largest conductance present.
    pub fn bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

fn check_len(what: &'static str, got: usize, want: usize) -> Result<(), Error> {
    if got == want {
        Ok(())
    } else {
        Err(Error::SizeMismatch { what, got, want })
    }
}

/// Forward difference along each axis: (∇f)(x, i) = f(x+e_i) - f(x).
pub fn forward_gradient(geom: &TorusGeometry, f: &ScalarField) -> Result<EdgeField, Error> {
    check_len("scalar field", f.values.len(), geom.site_count())?;
    let mut out = vec![0.0; geom.edge_count()];
    forward_gradient_into(geom, &f.values, &mut out);
    Ok(EdgeField { values: out })
}

pub(crate) fn forward_gradient_into(geom: &TorusGeometry, f: &[f64], out: &mut [f64]) {
    let d = geom.d();
    for site in 0..geom.site_count() {
        for axis in 0..d {
            out[site * d + axis] = f[geom.neighbor_fwd(site, axis)] - f[site];
        }
    }
}

/// Backward divergence: (∇*·F)(x) = Σ_i F(x, i) - F(x-e_i, i).
pub fn backward_divergence(geom: &TorusGeometry, flux: &EdgeField) -> Result<ScalarField, Error> {
    check_len("edge field", flux.values.len(), geom.edge_count())?;
    let d = geom.d();
    let mut out = vec![0.0; geom.site_count()];
    for (site, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for axis in 0..d {
            acc += flux.values[site * d + axis];
            acc -= flux.values[geom.neighbor_bwd(site, axis) * d + axis];
        }
        *o = acc;
    }
    Ok(ScalarField { values: out })
}

/// Applies μf - ∇*·A∇f, where (∇*·A∇f)(x) = Σ_{y~x} ω_xy (f(y) - f(x)).
pub fn apply_operator(
    geom: &TorusGeometry,
    a: &ConductanceField,
    mu: f64,
    f: &ScalarField,
) -> Result<ScalarField, Error> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::invalid("mu", format!("must be finite and >= 0, got {mu}")));
    }
    check_len("conductance field", a.values.len(), geom.edge_count())?;
    check_len("scalar field", f.values.len(), geom.site_count())?;
    let mut out = vec![0.0; geom.site_count()];
    apply_operator_into(geom, &a.values, mu, &f.values, &mut out);
    Ok(ScalarField { values: out })
}

/// Hot kernel behind `apply_operator`; callers guarantee matching lengths.
pub(crate) fn apply_operator_into(
    geom: &TorusGeometry,
    a: &[f64],
    mu: f64,
    f: &[f64],
    out: &mut [f64],
) {
    let d = geom.d();
    for (site, o) in out.iter_mut().enumerate() {
        let fx = f[site];
        let mut acc = mu * fx;
        for axis in 0..d {
            let fwd = geom.neighbor_fwd(site, axis);
            let bwd = geom.neighbor_bwd(site, axis);
            acc -= a[site * d + axis] * (f[fwd] - fx);
            acc -= a[bwd * d + axis] * (f[bwd] - fx);
        }
        *o = acc;
    }
}

/// Diagonal of μ - ∇*·A∇: μ plus the sum of conductances incident to each site.
pub(crate) fn operator_diagonal(geom: &TorusGeometry, a: &[f64], mu: f64, out: &mut [f64]) {
    let d = geom.d();
    for (site, o) in out.iter_mut().enumerate() {
        let mut acc = mu;
        for axis in 0..d {
            acc += a[site * d + axis];
            acc += a[geom.neighbor_bwd(site, axis) * d + axis];
        }
        *o = acc;
    }
}

/// Compensated sum; the order of the iterator fixes the result bit-for-bit.
pub(crate) fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d: usize, n: usize) -> TorusGeometry {
        TorusGeometry::new(d, n).unwrap()
    }

    /// Deterministic pseudo-random field values for tests.
    fn test_values(len: usize, seed: u64) -> Vec<f64> {
        let mut z = seed;
        (0..len)
            .map(|_| {
                z = z.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((z >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn geometry_counts_and_indexing_roundtrip() {
        let g = geom(2, 1);
        assert_eq!(g.side(), 3);
        assert_eq!(g.site_count(), 9);
        assert_eq!(g.edge_count(), 18);
        for site in 0..g.site_count() {
            assert_eq!(g.site_index(&g.site_coords(site)), site);
        }
        let g3 = geom(3, 2);
        assert_eq!(g3.site_count(), 125);
        assert_eq!(g3.edge_count(), 375);
    }

    #[test]
    fn geometry_rejects_degenerate_dimensions() {
        assert!(TorusGeometry::new(0, 3).is_err());
        assert!(TorusGeometry::new(2, 0).is_err());
    }

    #[test]
    fn neighbors_wrap_around() {
        let g = geom(2, 1);
        let origin = g.site_index(&[0, 0]);
        assert_eq!(g.neighbor_fwd(origin, 0), g.site_index(&[1, 0]));
        assert_eq!(g.neighbor_fwd(origin, 1), g.site_index(&[0, 1]));
        assert_eq!(g.neighbor_bwd(origin, 0), g.site_index(&[2, 0]));
        assert_eq!(g.neighbor_bwd(origin, 1), g.site_index(&[0, 2]));
        for site in 0..g.site_count() {
            for axis in 0..2 {
                assert_eq!(g.neighbor_bwd(g.neighbor_fwd(site, axis), axis), site);
            }
        }
    }

    #[test]
    fn shifted_site_handles_negative_offsets() {
        let g = geom(2, 2);
        let s = g.site_index(&[1, 4]);
        assert_eq!(g.shifted_site(s, &[-2, 1]), g.site_index(&[4, 0]));
        assert_eq!(g.shifted_site(s, &[0, 0]), s);
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = geom(2, 2);
        let f = ScalarField::from_values(&g, vec![7.0; g.site_count()]).unwrap();
        let grad = forward_gradient(&g, &f).unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_indicator_hits_expected_slots() {
        let g = geom(2, 1);
        let origin = g.site_index(&[0, 0]);
        let mut f = ScalarField::zeros(&g);
        f.values[origin] = 1.0;
        let grad = forward_gradient(&g, &f).unwrap();
        for axis in 0..2 {
            let out_slot = g.edge_slot(EdgeId { base: origin, axis });
            assert_eq!(grad.values[out_slot], -1.0, "outgoing slot on axis {axis}");
            let behind = g.neighbor_bwd(origin, axis);
            let in_slot = g.edge_slot(EdgeId { base: behind, axis });
            assert_eq!(grad.values[in_slot], 1.0, "incoming slot on axis {axis}");
        }
        let nonzero = grad.values.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn gradient_is_linear() {
        let g = geom(3, 1);
        let f = ScalarField::from_values(&g, test_values(g.site_count(), 11)).unwrap();
        let h = ScalarField::from_values(&g, test_values(g.site_count(), 12)).unwrap();
        let (a, b) = (2.5, -0.75);
        let combo = ScalarField::from_values(
            &g,
            f.values
                .iter()
                .zip(&h.values)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let gf = forward_gradient(&g, &f).unwrap();
        let gh = forward_gradient(&g, &h).unwrap();
        let gc = forward_gradient(&g, &combo).unwrap();
        for slot in 0..g.edge_count() {
            let expect = a * gf.values[slot] + b * gh.values[slot];
            assert!(
                (gc.values[slot] - expect).abs() <= 1e-12,
                "slot {slot}: {} vs {expect}",
                gc.values[slot]
            );
        }
    }

    #[test]
    fn divergence_of_constant_flux_vanishes_and_sums_telescope() {
        let g = geom(2, 2);
        let flux = EdgeField::from_values(&g, vec![3.25; g.edge_count()]).unwrap();
        let div = backward_divergence(&g, &flux).unwrap();
        assert!(div.values.iter().all(|&v| v == 0.0));

        let flux = EdgeField::from_values(&g, test_values(g.edge_count(), 5)).unwrap();
        let div = backward_divergence(&g, &flux).unwrap();
        let total: f64 = div.values.iter().sum();
        assert!(total.abs() <= 1e-12, "divergence total {total}");
    }

    #[test]
    fn gradient_and_divergence_are_adjoint() {
        let g = geom(2, 3);
        let f = ScalarField::from_values(&g, test_values(g.site_count(), 21)).unwrap();
        let flux = EdgeField::from_values(&g, test_values(g.edge_count(), 22)).unwrap();
        let div = backward_divergence(&g, &flux).unwrap();
        let grad = forward_gradient(&g, &f).unwrap();
        let lhs: f64 = f
            .values
            .iter()
            .zip(&div.values)
            .map(|(&a, &b)| a * b)
            .sum();
        let rhs: f64 = grad
            .values
            .iter()
            .zip(&flux.values)
            .map(|(&a, &b)| a * b)
            .sum();
        assert!(
            (lhs + rhs).abs() <= 1e-10,
            "summation by parts violated: {lhs} vs {}",
            -rhs
        );
    }

    #[test]
    fn operator_stencil_on_unit_conductances() {
        let g = geom(2, 1);
        let a = ConductanceField::constant(&g, 1.0).unwrap();
        let origin = g.site_index(&[0, 0]);
        let mut f = ScalarField::zeros(&g);
        f.values[origin] = 1.0;
        let out = apply_operator(&g, &a, 0.0, &f).unwrap();
        assert_eq!(out.values[origin], 4.0);
        for axis in 0..2 {
            assert_eq!(out.values[g.neighbor_fwd(origin, axis)], -1.0);
            assert_eq!(out.values[g.neighbor_bwd(origin, axis)], -1.0);
        }
        let touched = out.values.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(touched, 5);
    }

    #[test]
    fn operator_on_constant_reduces_to_mass_term() {
        let g = geom(3, 1);
        let a = ConductanceField::from_values(&g, test_values(g.edge_count(), 31).iter().map(|v| v + 1.0).collect()).unwrap();
        let f = ScalarField::from_values(&g, vec![4.0; g.site_count()]).unwrap();
        let out = apply_operator(&g, &a, 1.0, &f).unwrap();
        for &v in &out.values {
            assert!((v - 4.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn operator_is_symmetric() {
        let g = geom(2, 2);
        let a = ConductanceField::from_values(
            &g,
            test_values(g.edge_count(), 41).iter().map(|v| v + 1.5).collect(),
        )
        .unwrap();
        let f = ScalarField::from_values(&g, test_values(g.site_count(), 42)).unwrap();
        let h = ScalarField::from_values(&g, test_values(g.site_count(), 43)).unwrap();
        let af = apply_operator(&g, &a, 0.3, &f).unwrap();
        let ah = apply_operator(&g, &a, 0.3, &h).unwrap();
        let haf: f64 = h.values.iter().zip(&af.values).map(|(&x, &y)| x * y).sum();
        let fah: f64 = f.values.iter().zip(&ah.values).map(|(&x, &y)| x * y).sum();
        assert!((haf - fah).abs() <= 1e-10 * haf.abs().max(1.0));
    }

    #[test]
    fn quadratic_form_matches_weighted_gradient_energy() {
        let g = geom(2, 2);
        let a = ConductanceField::from_values(
            &g,
            test_values(g.edge_count(), 51).iter().map(|v| v + 2.0).collect(),
        )
        .unwrap();
        let f = ScalarField::from_values(&g, test_values(g.site_count(), 52)).unwrap();
        let af = apply_operator(&g, &a, 0.0, &f).unwrap();
        let form: f64 = f.values.iter().zip(&af.values).map(|(&x, &y)| x * y).sum();
        let grad = forward_gradient(&g, &f).unwrap();
        let energy: f64 = grad
            .values
            .iter()
            .zip(&a.values)
            .map(|(&gv, &w)| w * gv * gv)
            .sum();
        assert!((form - energy).abs() <= 1e-10 * energy.max(1.0));
        let (lo, hi) = a.bounds();
        let plain: f64 = grad.values.iter().map(|&gv| gv * gv).sum();
        assert!(form >= lo * plain - 1e-10);
        assert!(form <= hi * plain + 1e-10);
    }

    #[test]
    fn operators_reject_mismatched_lengths_and_negative_mu() {
        let g = geom(2, 1);
        let short = ScalarField {
            values: vec![0.0; 4],
        };
        assert!(matches!(
            forward_gradient(&g, &short),
            Err(Error::SizeMismatch { .. })
        ));
        let a = ConductanceField::constant(&g, 1.0).unwrap();
        let f = ScalarField::zeros(&g);
        assert!(matches!(
            apply_operator(&g, &a, -0.5, &f),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn conductance_field_rejects_nonpositive_values() {
        let g = geom(2, 1);
        let mut vals = vec![1.0; g.edge_count()];
        vals[3] = 0.0;
        assert!(matches!(
            ConductanceField::from_values(&g, vals),
            Err(Error::NonElliptic { .. })
        ));
    }
}
