//! Discretized parameter spaces and probability masses on them.
//!
//! A [`SupportGrid`] holds the atoms of a one- or two-dimensional parameter
//! space together with a quadrature weight per atom. A [`MixingDensity`]
//! stores probability *masses* per atom; density values are recovered as
//! `mass / quad_weight`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::stable_sum;

/// Tolerance on the total mass of a [`MixingDensity`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Sums closer to one than this are treated as already normalized.
const RENORM_SLACK: f64 = 4e-15;

/// Default number of atoms per dimension for continuous supports.
pub const DEFAULT_ATOMS_PER_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    dim: usize,
    atoms: Vec<f64>,
    quad_weights: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    // Per-axis coordinates when the grid is a Cartesian product.
    axes: Option<Vec<Vec<f64>>>,
}

/// One axis of a uniform grid, written `lo:hi:K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite bounds {lo}:{hi}")));
        }
        if count == 0 {
            return Err(Error::InvalidGrid("axis with zero atoms".into()));
        }
        if count > 1 && lo >= hi {
            return Err(Error::InvalidGrid(format!("need lo < hi, got {lo}:{hi}")));
        }
        if count == 1 && lo > hi {
            return Err(Error::InvalidGrid(format!("need lo <= hi, got {lo}:{hi}")));
        }
        Ok(AxisSpec { lo, hi, count })
    }

    fn points(&self) -> (Vec<f64>, f64) {
        if self.count == 1 {
            let w = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
            return (vec![0.5 * (self.lo + self.hi)], w);
        }
        let h = (self.hi - self.lo) / (self.count - 1) as f64;
        let mut pts: Vec<f64> = (0..self.count).map(|j| self.lo + h * j as f64).collect();
        // pin the endpoint so rounding never pushes it outside the bounds
        pts[self.count - 1] = self.hi;
        (pts, h)
    }
}

impl SupportGrid {
    /// Uniform 1D grid with `count` atoms spanning `[lo, hi]` inclusive.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let axis = AxisSpec::new(lo, hi, count)?;
        let (pts, w) = axis.points();
        Ok(SupportGrid {
            dim: 1,
            quad_weights: vec![w; pts.len()],
            bounds: vec![(lo, hi)],
            axes: Some(vec![pts.clone()]),
            atoms: pts,
        })
    }

    /// Cartesian product of two uniform axes. Atoms are ordered
    /// lexicographically (first coordinate major).
    pub fn product(first: AxisSpec, second: AxisSpec) -> Result<Self> {
        let first = AxisSpec::new(first.lo, first.hi, first.count)?;
        let second = AxisSpec::new(second.lo, second.hi, second.count)?;
        let (p1, w1) = first.points();
        let (p2, w2) = second.points();
        let mut atoms = Vec::with_capacity(2 * p1.len() * p2.len());
        for &a in &p1 {
            for &b in &p2 {
                atoms.push(a);
                atoms.push(b);
            }
        }
        Ok(SupportGrid {
            dim: 2,
            quad_weights: vec![w1 * w2; p1.len() * p2.len()],
            bounds: vec![(first.lo, first.hi), (second.lo, second.hi)],
            axes: Some(vec![p1, p2]),
            atoms,
        })
    }

    /// Finite 1D support with unit quadrature weight per atom.
    pub fn discrete(atoms: Vec<f64>) -> Result<Self> {
        let n = atoms.len();
        let lo = atoms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::from_parts(1, atoms, vec![1.0; n], vec![(lo, hi)])
    }

    /// General constructor; validates every invariant.
    pub fn from_parts(
        dim: usize,
        atoms: Vec<f64>,
        quad_weights: Vec<f64>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not supported")));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if atoms.len() % dim != 0 || atoms.len() / dim != quad_weights.len() {
            return Err(Error::InvalidGrid("atom/weight length mismatch".into()));
        }
        if bounds.len() != dim {
            return Err(Error::InvalidGrid("bounds must have one interval per dimension".into()));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidGrid("non-finite atom".into()));
        }
        if quad_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidGrid("quadrature weights must be positive".into()));
        }
        for (k, atom) in atoms.chunks(dim).enumerate() {
            for (d, &c) in atom.iter().enumerate() {
                let (lo, hi) = bounds[d];
                if c < lo || c > hi {
                    return Err(Error::InvalidGrid(format!("atom {k} outside bounds")));
                }
            }
        }
        for (k, pair) in atoms.chunks(dim).collect::<Vec<_>>().windows(2).enumerate() {
            if pair[0].partial_cmp(pair[1]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::InvalidGrid(format!(
                    "atoms must be strictly increasing (violated at {})",
                    k + 1
                )));
            }
        }
        Ok(SupportGrid {
            dim,
            atoms,
            quad_weights,
            bounds,
            axes: None,
        })
    }

    /// Parses `lo:hi:K`, `lo1:hi1:K1,lo2:hi2:K2`, or `atoms:a,b,c`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("atoms:") {
            let atoms = rest
                .split(',')
                .map(|s| parse_f64(s, spec))
                .collect::<Result<Vec<_>>>()?;
            return Self::discrete(atoms);
        }
        let axes = spec
            .split(',')
            .map(|part| {
                let fields: Vec<&str> = part.split(':').collect();
                if fields.len() != 3 {
                    return Err(Error::parse("grid spec", format!("expected lo:hi:K in `{spec}`")));
                }
                let count = fields[2]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse("grid spec", format!("{e} in `{spec}`")))?;
                AxisSpec::new(parse_f64(fields[0], spec)?, parse_f64(fields[1], spec)?, count)
            })
            .collect::<Result<Vec<_>>>()?;
        match axes.as_slice() {
            [a] => Self::uniform(a.lo, a.hi, a.count),
            [a, b] => Self::product(*a, *b),
            _ => Err(Error::parse("grid spec", format!("1 or 2 axes expected in `{spec}`"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.quad_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quad_weights.is_empty()
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.dim..(k + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks(self.dim)
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Coordinates along axis `d` for product and uniform grids.
    pub fn axis(&self, d: usize) -> Option<&[f64]> {
        self.axes.as_ref().and_then(|a| a.get(d)).map(Vec::as_slice)
    }

    /// Index of the atom closest (Euclidean) to `point`.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, atom) in self.atoms().enumerate() {
            let d: f64 = atom.iter().zip(point).map(|(a, p)| (a - p) * (a - p)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Label used in CSV headers, e.g. `2.5` or `5_2`.
    pub fn atom_label(&self, k: usize) -> String {
        self.atom(k)
            .iter()
            .map(|c| format!("{c}"))
            .collect::<Vec<_>>()
            .join("_")
    }
}

fn parse_f64(s: &str, spec: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::parse("grid spec", format!("{e} in `{spec}`")))
}

impl fmt::Display for SupportGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SupportGrid(dim={}, atoms={})", self.dim, self.len())
    }
}

/// Probability masses over the atoms of a [`SupportGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDensity {
    grid: Arc<SupportGrid>,
    masses: Vec<f64>,
}

impl MixingDensity {
    /// Wraps already-normalized masses, checking every invariant.
    pub fn new(grid: Arc<SupportGrid>, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != grid.len() {
            return Err(Error::DegenerateDensity(format!(
                "{} masses for {} atoms",
                masses.len(),
                grid.len()
            )));
        }
        if masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::DegenerateDensity("negative or non-finite mass".into()));
        }
        let total = stable_sum(masses.iter().copied());
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::DegenerateDensity(format!("masses sum to {total}")));
        }
        Ok(MixingDensity { grid, masses })
    }

    /// Unit mass on atom `k`.
    pub fn point_mass(grid: Arc<SupportGrid>, k: usize) -> Result<Self> {
        if k >= grid.len() {
            return Err(Error::InvalidParameter(format!("atom index {k} out of range")));
        }
        let mut masses = vec![0.0; grid.len()];
        masses[k] = 1.0;
        Ok(MixingDensity { grid, masses })
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.masses
    }

    pub fn mass(&self, k: usize) -> f64 {
        self.masses[k]
    }

    pub fn total(&self) -> f64 {
        stable_sum(self.masses.iter().copied())
    }

    /// Density values (mass per unit quadrature weight).
    pub fn density_values(&self) -> Vec<f64> {
        self.masses
            .iter()
            .zip(self.grid.quad_weights())
            .map(|(m, w)| m / w)
            .collect()
    }

    /// Total mass on atoms satisfying `pred`.
    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        stable_sum(
            self.grid
                .atoms()
                .zip(&self.masses)
                .filter(|(a, _)| pred(a))
                .map(|(_, &m)| m),
        )
    }

    /// Masses summed over every axis except `d` (product grids only).
    pub fn axis_marginal(&self, d: usize) -> Option<Vec<(f64, f64)>> {
        let axis = self.grid.axis(d)?;
        if self.grid.dim() == 1 {
            return Some(axis.iter().copied().zip(self.masses.iter().copied()).collect());
        }
        let n2 = self.grid.axis(1)?.len();
        let mut out: Vec<(f64, f64)> = axis.iter().map(|&c| (c, 0.0)).collect();
        for (k, &m) in self.masses.iter().enumerate() {
            let idx = if d == 0 { k / n2 } else { k % n2 };
            out[idx].1 += m;
        }
        Some(out)
    }
}

/// Rescales nonnegative raw masses to sum to one.
pub fn normalize(raw_masses: &[f64], grid: &Arc<SupportGrid>) -> Result<MixingDensity> {
    if raw_masses.len() != grid.len() {
        return Err(Error::DegenerateDensity(format!(
            "{} masses for {} atoms",
            raw_masses.len(),
            grid.len()
        )));
    }
    let masses = normalized_masses(raw_masses.to_vec())?;
    Ok(MixingDensity {
        grid: Arc::clone(grid),
        masses,
    })
}

pub(crate) fn normalized_masses(mut masses: Vec<f64>) -> Result<Vec<f64>> {
    if masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::DegenerateDensity("negative or non-finite entry".into()));
    }
    let total = stable_sum(masses.iter().copied());
    if !(total > 0.0) {
        return Err(Error::DegenerateDensity("all-zero input".into()));
    }
    if (total - 1.0).abs() > RENORM_SLACK {
        for m in &mut masses {
            *m /= total;
        }
    }
    Ok(masses)
}

/// Equal mass on every atom.
pub fn uniform_density(grid: &Arc<SupportGrid>) -> Result<MixingDensity> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    let k = grid.len();
    Ok(MixingDensity {
        grid: Arc::clone(grid),
        masses: vec![1.0 / k as f64; k],
    })
}

/// Wire form of a grid in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridSpec(pub String);

impl GridSpec {
    pub fn build(&self) -> Result<Arc<SupportGrid>> {
        SupportGrid::parse(&self.0).map(Arc::new)
    }
}
