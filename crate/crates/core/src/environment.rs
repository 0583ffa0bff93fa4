//! Coupled random conductance environments.
//!
//! Every edge e carries an independent triple (ω_e, ω¹_e, u_e): a base
//! conductance drawn from one distribution, a replacement conductance drawn
//! from another, and a uniform coupling variable in [0, 1). The environment at
//! replacement probability p uses ω¹_e exactly where u_e < p, so the set of
//! replaced edges is monotone in p and environments at different p share all
//! randomness.
//!
//! Draws are counter-based: the value for (seed, edge, stream) is a pure
//! function of its arguments, evaluated splitmix-style, so sampling is
//! reproducible independent of order and thread count.
//!
//! # Cache file format
//!
//! An environment serializes to a little-endian binary file:
//!
//! ```text
//! magic    4 bytes  "PHOM"
//! version  u32      currently 1
//! d        u32
//! n        u32
//! seed     u64
//! triples  edge_count × 3 × f64   (base, replacement, coupling) per edge,
//!                                 in slot order
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::lattice::{ConductanceField, EdgeId, TorusGeometry};

const CACHE_MAGIC: &[u8; 4] = b"PHOM";
const CACHE_VERSION: u32 = 1;

/// 64-bit finalizer used by splitmix64; bijective on u64.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The k-th output of splitmix64 seeded with `seed`; a pure function of
/// (seed, counter).
#[inline]
pub(crate) fn counter_u64(seed: u64, counter: u64) -> u64 {
    mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Uniform draw in [0, 1) with 53 random bits.
#[inline]
pub(crate) fn counter_uniform(seed: u64, counter: u64) -> f64 {
    (counter_u64(seed, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent child seed for (domain, index); used to give each
/// Monte Carlo sample and each auxiliary stream its own environment seed.
pub(crate) fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    mix64(
        mix64(seed ^ domain.wrapping_mul(0xD134_2543_DE82_EF95))
            .wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)),
    )
}

/// Per-edge conductance law. All support points must be strictly positive and
/// finite; probabilities must be in [0, 1] and sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    /// Deterministic conductance.
    PointMass { value: f64 },
    /// `a` with probability `prob_a`, else `b`.
    TwoPoint { a: f64, b: f64, prob_a: f64 },
    /// Uniform on [lo, hi].
    UniformInterval { lo: f64, hi: f64 },
    /// Finitely many values with given probabilities.
    DiscreteList { values: Vec<f64>, probs: Vec<f64> },
}

const PROB_SUM_SLACK: f64 = 1e-12;

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            DistributionSpec::PointMass { value } => {
                if !positive(*value) {
                    return Err(Error::InvalidDistribution(format!(
                        "point_mass value must be positive and finite, got {value}"
                    )));
                }
            }
            DistributionSpec::TwoPoint { a, b, prob_a } => {
                if !positive(*a) || !positive(*b) {
                    return Err(Error::InvalidDistribution(format!(
                        "two_point values must be positive and finite, got a={a}, b={b}"
                    )));
                }
                if !(*prob_a >= 0.0 && *prob_a <= 1.0) {
                    return Err(Error::InvalidDistribution(format!(
                        "two_point prob_a must lie in [0, 1], got {prob_a}"
                    )));
                }
            }
            DistributionSpec::UniformInterval { lo, hi } => {
                if !positive(*lo) || !positive(*hi) || lo > hi {
                    return Err(Error::InvalidDistribution(format!(
                        "uniform_interval needs 0 < lo <= hi, got lo={lo}, hi={hi}"
                    )));
                }
            }
            DistributionSpec::DiscreteList { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::InvalidDistribution(format!(
                        "discrete_list needs equally many values and probs, got {} and {}",
                        values.len(),
                        probs.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !positive(**v)) {
                    return Err(Error::InvalidDistribution(format!(
                        "discrete_list values must be positive and finite, got {v}"
                    )));
                }
                if let Some(p) = probs.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
                    return Err(Error::InvalidDistribution(format!(
                        "discrete_list probs must lie in [0, 1], got {p}"
                    )));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > PROB_SUM_SLACK {
                    return Err(Error::InvalidDistribution(format!(
                        "discrete_list probs must sum to 1 within {PROB_SUM_SLACK:e}, got {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest and largest support point.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            DistributionSpec::PointMass { value } => (*value, *value),
            DistributionSpec::TwoPoint { a, b, prob_a } => {
                if *prob_a >= 1.0 {
                    (*a, *a)
                } else if *prob_a <= 0.0 {
                    (*b, *b)
                } else {
                    (a.min(*b), a.max(*b))
                }
            }
            DistributionSpec::UniformInterval { lo, hi } => (*lo, *hi),
            DistributionSpec::DiscreteList { values, probs } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (v, p) in values.iter().zip(probs) {
                    if *p > 0.0 {
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Expected value.
    pub fn mean(&self) -> f64 {
        match self {
            DistributionSpec::PointMass { value } => *value,
            DistributionSpec::TwoPoint { a, b, prob_a } => prob_a * a + (1.0 - prob_a) * b,
            DistributionSpec::UniformInterval { lo, hi } => 0.5 * (lo + hi),
            DistributionSpec::DiscreteList { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
        }
    }

    /// Support points with nonzero probability together with their weights;
    /// a uniform interval has no finite support and returns None.
    pub fn finite_support(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            DistributionSpec::PointMass { value } => Some(vec![(*value, 1.0)]),
            DistributionSpec::TwoPoint { a, b, prob_a } => {
                let mut out = Vec::new();
                if *prob_a > 0.0 {
                    out.push((*a, *prob_a));
                }
                if *prob_a < 1.0 {
                    out.push((*b, 1.0 - prob_a));
                }
                if out.len() == 2 && out[0].0 == out[1].0 {
                    out = vec![(out[0].0, 1.0)];
                }
                Some(out)
            }
            DistributionSpec::UniformInterval { .. } => None,
            DistributionSpec::DiscreteList { values, probs } => {
                let mut merged: Vec<(f64, f64)> = Vec::new();
                for (&v, &p) in values.iter().zip(probs) {
                    if p == 0.0 {
                        continue;
                    }
                    if let Some(entry) = merged.iter_mut().find(|(w, _)| *w == v) {
                        entry.1 += p;
                    } else {
                        merged.push((v, p));
                    }
                }
                Some(merged)
            }
        }
    }

    /// Quantile transform: maps u ∈ [0, 1) to a draw from the law.
    pub fn sample(&self, u: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&u));
        match self {
            DistributionSpec::PointMass { value } => *value,
            DistributionSpec::TwoPoint { a, b, prob_a } => {
                if u < *prob_a {
                    *a
                } else {
                    *b
                }
            }
            DistributionSpec::UniformInterval { lo, hi } => lo + u * (hi - lo),
            DistributionSpec::DiscreteList { values, probs } => {
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("validated non-empty")
            }
        }
    }
}

/// Edge streams within one environment seed.
const STREAM_BASE: u64 = 0;
const STREAM_REPLACEMENT: u64 = 1;
const STREAM_COUPLING: u64 = 2;

/// One sampled triple (base, replacement, coupling) per edge of a torus.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledEnvironment {
    geom: TorusGeometry,
    base: Vec<f64>,
    replacement: Vec<f64>,
    coupling: Vec<f64>,
    seed: u64,
}

/// Draws the per-edge triples for the given seed. The draw for each edge is a
/// pure function of (seed, edge slot, stream), so any two environments with
/// equal arguments are identical.
pub fn sample_coupled(
    geom: &TorusGeometry,
    spec0: &DistributionSpec,
    spec1: &DistributionSpec,
    seed: u64,
) -> Result<CoupledEnvironment, Error> {
    spec0.validate()?;
    spec1.validate()?;
    let m = geom.edge_count();
    let mut base = Vec::with_capacity(m);
    let mut replacement = Vec::with_capacity(m);
    let mut coupling = Vec::with_capacity(m);
    for slot in 0..m as u64 {
        base.push(spec0.sample(counter_uniform(seed, slot * 3 + STREAM_BASE)));
        replacement.push(spec1.sample(counter_uniform(seed, slot * 3 + STREAM_REPLACEMENT)));
        coupling.push(counter_uniform(seed, slot * 3 + STREAM_COUPLING));
    }
    Ok(CoupledEnvironment {
        geom: geom.clone(),
        base,
        replacement,
        coupling,
        seed,
    })
}

/// Which of the two coupled conductances a forced edge uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcedState {
    /// The edge takes its replacement conductance ω¹_e.
    Replacement,
    /// The edge keeps its base conductance ω_e.
    Base,
}

impl CoupledEnvironment {
    pub fn geometry(&self) -> &TorusGeometry {
        &self.geom
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_values(&self) -> &[f64] {
        &self.base
    }

    pub fn replacement_values(&self) -> &[f64] {
        &self.replacement
    }

    pub fn coupling_values(&self) -> &[f64] {
        &self.coupling
    }

    /// Replacement minus base conductance at the given slot.
    pub fn delta(&self, slot: usize) -> f64 {
        self.replacement[slot] - self.base[slot]
    }

    /// Environment at replacement probability p: edge e takes ω¹_e exactly
    /// where u_e < p. Returns the conductances together with the replaced
    /// edges in slot order.
    pub fn realize(&self, p: f64) -> Result<(ConductanceField, Vec<EdgeId>), Error> {
        check_probability("p", p)?;
        let mut values = self.base.clone();
        let mut replaced = Vec::new();
        for slot in 0..values.len() {
            if self.coupling[slot] < p {
                values[slot] = self.replacement[slot];
                replaced.push(self.geom.edge_at(slot));
            }
        }
        let field = ConductanceField::from_values(&self.geom, values)?;
        Ok((field, replaced))
    }

    /// Environment at probability p with one edge forced to the given state
    /// regardless of its coupling variable.
    pub fn force_edge(
        &self,
        p: f64,
        edge: EdgeId,
        state: ForcedState,
    ) -> Result<ConductanceField, Error> {
        let (mut field, _) = self.realize(p)?;
        let slot = self.geom.edge_slot(edge);
        field.values[slot] = match state {
            ForcedState::Replacement => self.replacement[slot],
            ForcedState::Base => self.base[slot],
        };
        Ok(field)
    }

    /// Writes the environment in the binary cache format.
    pub fn write_cache(&self, path: &Path) -> Result<(), Error> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        let io_err = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        w.write_all(CACHE_MAGIC).map_err(io_err)?;
        w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.geom.d() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.geom.n() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.seed.to_le_bytes()).map_err(io_err)?;
        for slot in 0..self.geom.edge_count() {
            w.write_all(&self.base[slot].to_le_bytes()).map_err(io_err)?;
            w.write_all(&self.replacement[slot].to_le_bytes()).map_err(io_err)?;
            w.write_all(&self.coupling[slot].to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Reads an environment previously written by [`write_cache`].
    ///
    /// [`write_cache`]: CoupledEnvironment::write_cache
    pub fn read_cache(path: &Path) -> Result<Self, Error> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut r = BufReader::new(file);
        let bad = |reason: String| Error::CacheFormat {
            path: path.to_owned(),
            reason,
        };
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != CACHE_MAGIC {
            return Err(bad(format!("magic {magic:?} is not {CACHE_MAGIC:?}")));
        }
        let version = read_u32(&mut r, path)?;
        if version != CACHE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d = read_u32(&mut r, path)? as usize;
        let n = read_u32(&mut r, path)? as usize;
        let seed = read_u64(&mut r, path)?;
        let geom = TorusGeometry::new(d, n)
            .map_err(|e| bad(format!("invalid geometry in header: {e}")))?;
        let m = geom.edge_count();
        let mut base = Vec::with_capacity(m);
        let mut replacement = Vec::with_capacity(m);
        let mut coupling = Vec::with_capacity(m);
        for _ in 0..m {
            base.push(read_f64(&mut r, path)?);
            replacement.push(read_f64(&mut r, path)?);
            coupling.push(read_f64(&mut r, path)?);
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after edge triples".into())),
            Err(source) => {
                return Err(Error::Io {
                    path: path.to_owned(),
                    source,
                })
            }
        }
        Ok(Self {
            geom,
            base,
            replacement,
            coupling,
            seed,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<(), Error> {
    r.read_exact(buf).map_err(|source| {
        if source.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CacheFormat {
                path: path.to_owned(),
                reason: "file truncated".into(),
            }
        } else {
            Error::Io {
                path: path.to_owned(),
                source,
            }
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64, Error> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64, Error> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn check_probability(field: &'static str, p: f64) -> Result<(), Error> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must lie in [0, 1], got {p}")))
    }
}

/// Sparse diagonal perturbation: per-edge additive changes to a conductance
/// field, with each edge listed at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct DefectSet {
    entries: Vec<(EdgeId, f64)>,
}

impl DefectSet {
    /// Validates that every delta is finite and no edge repeats.
    pub fn new(entries: Vec<(EdgeId, f64)>) -> Result<Self, Error> {
        let mut seen = BTreeSet::new();
        for (edge, delta) in &entries {
            if !delta.is_finite() {
                return Err(Error::invalid("delta", format!("must be finite, got {delta}")));
            }
            if !seen.insert(*edge) {
                return Err(Error::DuplicateDefect {
                    base: edge.base,
                    axis: edge.axis,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Deltas ω¹_e - ω_e taken from an environment at the listed edges.
    pub fn from_environment(env: &CoupledEnvironment, edges: &[EdgeId]) -> Result<Self, Error> {
        let entries = edges
            .iter()
            .map(|&e| (e, env.delta(env.geometry().edge_slot(e))))
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(EdgeId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same edges with every delta negated.
    pub fn negated(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|&(e, d)| (e, -d)).collect(),
        }
    }

    /// Same edges with every delta scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|&(e, d)| (e, s * d)).collect(),
        }
    }
}

/// Adds each defect delta to the base conductance at its edge. Fails if any
/// resulting conductance is not strictly positive and finite.
pub fn apply_defects(
    geom: &TorusGeometry,
    base: &ConductanceField,
    defects: &DefectSet,
) -> Result<ConductanceField, Error> {
    if base.values.len() != geom.edge_count() {
        return Err(Error::SizeMismatch {
            what: "conductance field",
            got: base.values.len(),
            want: geom.edge_count(),
        });
    }
    let mut values = base.values.clone();
    for &(edge, delta) in defects.entries() {
        let slot = geom.edge_slot(edge);
        let v = values[slot] + delta;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonElliptic {
                base: edge.base,
                axis: edge.axis,
                value: v,
            });
        }
        values[slot] = v;
    }
    Ok(ConductanceField { values })
}
