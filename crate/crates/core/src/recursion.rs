//! The predictive-recursion engine.
//!
//! Each observation `X_i` moves the current mixing density toward its
//! posterior given `X_i`:
//!
//! ```text
//! f_i(theta) = (1 - w_i) f_{i-1}(theta) + w_i p(X_i | theta) f_{i-1}(theta) / m_{i-1}(X_i)
//! ```
//!
//! The update is applied to probability masses, so total mass is conserved
//! up to rounding, and atoms with zero mass stay at zero.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{kl_mixing, MarginalProbe, TrueMarginal};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KERNEL_FLOOR};
use crate::numeric::stable_sum;
use crate::processes::ObservationStream;
use crate::support::{normalized_masses, MixingDensity};

/// Largest admissible first step for a power schedule.
pub const MAX_FIRST_WEIGHT: f64 = 0.99;

/// Step-size sequence `w_i`, `i >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `w_i = c * i^(-alpha)`.
    Power { alpha: f64, c: f64 },
    /// `w_i = 1 / (i + 1)`.
    Harmonic,
}

impl WeightSchedule {
    pub fn power(alpha: f64, c: f64) -> Result<Self> {
        WeightSchedule::Power { alpha, c }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if let WeightSchedule::Power { alpha, c } = self {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidParameter(format!("exponent must be > 0, got {alpha}")));
            }
            if !(c > 0.0 && c <= MAX_FIRST_WEIGHT) {
                return Err(Error::InvalidParameter(format!(
                    "scale must lie in (0, {MAX_FIRST_WEIGHT}], got {c}"
                )));
            }
        }
        Ok(self)
    }

    /// Decay exponent; the harmonic schedule behaves like `alpha = 1`.
    pub fn exponent(&self) -> f64 {
        match *self {
            WeightSchedule::Power { alpha, .. } => alpha,
            WeightSchedule::Harmonic => 1.0,
        }
    }

    pub fn weight(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Err(Error::InvalidParameter("weights are indexed from 1".into()));
        }
        Ok(self.weight_unchecked(i))
    }

    #[inline]
    pub(crate) fn weight_unchecked(&self, i: usize) -> f64 {
        match *self {
            WeightSchedule::Power { alpha, c } => c * (i as f64).powf(-alpha),
            WeightSchedule::Harmonic => 1.0 / (i as f64 + 1.0),
        }
    }

    /// `w_i ~ i^-alpha` with `alpha in (0.5, 1]`.
    pub fn satisfies_b1(&self) -> bool {
        let a = self.exponent();
        a > 0.5 && a <= 1.0
    }

    /// The stronger decay requirement `alpha in (0.75, 1]` used by the rate results.
    pub fn satisfies_b1_prime(&self) -> bool {
        let a = self.exponent();
        a > 0.75 && a <= 1.0
    }

    /// Every `q`-spaced subsequence of weights has a divergent sum while the
    /// squares are summable. For power laws both hold exactly when
    /// `alpha in (0.5, 1]`, independent of `q`.
    pub fn satisfies_a1(&self) -> bool {
        self.satisfies_b1()
    }
}

/// How often the trace records a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stride {
    /// Iterations 1..=100, then every `ceil(n / 1000)`-th, plus the last.
    #[default]
    Default,
    /// Every `s`-th iteration plus the last.
    Every(usize),
}

impl Stride {
    fn records(&self, i: usize, n: usize) -> bool {
        if i == n {
            return true;
        }
        match *self {
            Stride::Default => i <= 100 || i % n.div_ceil(1000).max(1) == 0,
            Stride::Every(s) => i % s.max(1) == 0,
        }
    }
}

/// What a fit should record along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSpec {
    pub stride: Stride,
    /// Atoms whose masses are recorded at every trace point.
    pub atoms: Vec<usize>,
    /// Iterations at which the full density is kept.
    pub checkpoints: Vec<usize>,
}

impl TraceSpec {
    /// Records every atom when the grid is small, none otherwise.
    pub fn for_grid_size(k: usize) -> Self {
        TraceSpec {
            atoms: if k <= 10 { (0..k).collect() } else { Vec::new() },
            ..Default::default()
        }
    }
}

/// Ground truth available for simulated data.
#[derive(Debug, Clone, Default)]
pub struct Truth {
    /// True mixing density on the fitting grid.
    pub mixing: Option<MixingDensity>,
    /// True marginal density of the observations.
    pub marginal: Option<TrueMarginal>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub iters: Vec<usize>,
    pub weights: Vec<f64>,
    pub atoms: Vec<usize>,
    /// One row per recorded iteration, one column per entry of `atoms`.
    pub masses: Vec<Vec<f64>>,
    pub kn: Vec<Option<f64>>,
    pub kn_star: Vec<Option<f64>>,
    pub hellinger: Vec<Option<f64>>,
    /// Full densities at the requested checkpoints.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.iters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iters.is_empty()
    }

    /// `(n, K_n*)` pairs where the marginal divergence was recorded.
    pub fn kn_star_points(&self) -> Vec<(usize, f64)> {
        self.iters
            .iter()
            .zip(&self.kn_star)
            .filter_map(|(&i, k)| k.map(|k| (i, k)))
            .collect()
    }
}

/// Scratch space for repeated steps on one grid.
struct Stepper {
    column: Vec<f64>,
}

impl Stepper {
    fn new(k: usize) -> Self {
        Stepper {
            column: vec![0.0; k],
        }
    }

    /// Updates `masses` in place. Returns the observation's marginal under
    /// the previous density.
    fn step(
        &mut self,
        f: &mut MixingDensity,
        x: f64,
        w: f64,
        kernel: &Kernel,
        covariate: Option<f64>,
    ) -> Result<f64> {
        let grid = Arc::clone(f.grid());
        kernel.fill_column(x, covariate, &grid, &mut self.column);
        let masses = f.masses();
        let raw: f64 = self.column.iter().zip(masses).map(|(p, m)| p * m).sum();
        if !(raw > 0.0 && raw.is_finite()) {
            return Err(Error::OutsideSupport { x });
        }
        for p in &mut self.column {
            *p = p.max(KERNEL_FLOOR);
        }
        let floored: f64 = self.column.iter().zip(masses).map(|(p, m)| p * m).sum();
        let updated: Vec<f64> = masses
            .iter()
            .zip(&self.column)
            .map(|(&m, &p)| m * (1.0 + w * (p / floored - 1.0)))
            .collect();
        *f = MixingDensity::new(grid, normalized_masses(updated)?)?;
        Ok(raw)
    }
}

fn check_step_inputs(f: &MixingDensity, x: f64, w: f64, kernel: &Kernel, covariate: Option<f64>) -> Result<()> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::InvalidParameter(format!("step size must lie in [0, 1), got {w}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("observation {x}")));
    }
    kernel.check_grid(f.grid())?;
    kernel.check_covariate(covariate)
}

/// One predictive-recursion update.
pub fn pr_step(
    f_prev: &MixingDensity,
    x: f64,
    w: f64,
    kernel: &Kernel,
    covariate: Option<f64>,
) -> Result<MixingDensity> {
    check_step_inputs(f_prev, x, w, kernel, covariate)?;
    let mut f = f_prev.clone();
    Stepper::new(f.grid().len()).step(&mut f, x, w, kernel, covariate)?;
    Ok(f)
}

/// Runs the recursion over `stream` in order, starting from `f0`.
pub fn pr_fit(
    stream: &ObservationStream,
    f0: &MixingDensity,
    schedule: &WeightSchedule,
    kernel: &Kernel,
    trace_spec: &TraceSpec,
    truth: &Truth,
) -> Result<(MixingDensity, FitTrace)> {
    let n = stream.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty observation stream".into()));
    }
    schedule.validated()?;
    kernel.check_grid(f0.grid())?;
    if kernel.is_covariate_indexed() && stream.covariates().is_none() {
        return Err(Error::MissingCovariate);
    }
    if let Some(&k) = trace_spec.atoms.iter().find(|&&k| k >= f0.grid().len()) {
        return Err(Error::InvalidParameter(format!("trace atom {k} out of range")));
    }

    let same_grid = |d: &MixingDensity| Arc::ptr_eq(d.grid(), f0.grid()) || d.grid() == f0.grid();
    let mixing_truth = truth.mixing.as_ref().filter(|d| same_grid(d));
    let probe = match &truth.marginal {
        Some(tm) if !kernel.is_covariate_indexed() => Some(MarginalProbe::new(tm, kernel, f0.grid())?),
        _ => None,
    };

    let mut trace = FitTrace {
        atoms: trace_spec.atoms.clone(),
        ..Default::default()
    };
    let mut f = f0.clone();
    let mut stepper = Stepper::new(f.grid().len());
    let covariates = stream.covariates();
    for (idx, &x) in stream.values().iter().enumerate() {
        let i = idx + 1;
        let w = schedule.weight_unchecked(i);
        let t = covariates.map(|c| c[idx]);
        stepper
            .step(&mut f, x, w, kernel, t)
            .map_err(|e| Error::Step {
                index: i,
                source: Box::new(e),
            })?;

        if trace_spec.stride.records(i, n) {
            trace.iters.push(i);
            trace.weights.push(w);
            trace
                .masses
                .push(trace_spec.atoms.iter().map(|&k| f.mass(k)).collect());
            trace.kn.push(mixing_truth.map(|t| kl_mixing(t, &f)).transpose()?);
            let (ks, h) = match &probe {
                Some(p) => {
                    let (ks, h) = p.divergences(f.masses());
                    (Some(ks), Some(h))
                }
                None => (None, None),
            };
            trace.kn_star.push(ks);
            trace.hellinger.push(h);
        }
        if trace_spec.checkpoints.contains(&i) {
            trace.snapshots.push((i, f.masses().to_vec()));
        }
    }
    Ok((f, trace))
}

/// Marginals after one step, computed by the marginal recursion
///
/// ```text
/// m_i(x) = m_{i-1}(x) { 1 + w ( int p(x|t) p(X_i|t) f_{i-1}(t) dt / (m_{i-1}(x) m_{i-1}(X_i)) - 1 ) }
/// ```
///
/// at each probe point, given the previous marginals `m_prev_at_xs` there.
/// Must agree with the marginal of [`pr_step`]'s output.
pub fn marginal_step_check(
    m_prev_at_xs: &[f64],
    probes: &[f64],
    f_prev: &MixingDensity,
    x_i: f64,
    w: f64,
    kernel: &Kernel,
    covariate: Option<f64>,
) -> Result<Vec<f64>> {
    check_step_inputs(f_prev, x_i, w, kernel, covariate)?;
    if m_prev_at_xs.len() != probes.len() {
        return Err(Error::InvalidParameter("probe values and points differ in length".into()));
    }
    let grid = f_prev.grid();
    let mut col_obs = vec![0.0; grid.len()];
    kernel.fill_column(x_i, covariate, grid, &mut col_obs);
    let raw: f64 = col_obs.iter().zip(f_prev.masses()).map(|(p, m)| p * m).sum();
    if !(raw > 0.0) {
        return Err(Error::OutsideSupport { x: x_i });
    }
    for p in &mut col_obs {
        *p = p.max(KERNEL_FLOOR);
    }
    let m_obs = stable_sum(col_obs.iter().zip(f_prev.masses()).map(|(p, m)| p * m));
    let mut col_probe = vec![0.0; grid.len()];
    probes
        .iter()
        .zip(m_prev_at_xs)
        .map(|(&x, &m_prev)| {
            kernel.fill_column(x, covariate, grid, &mut col_probe);
            let cross = stable_sum(
                col_probe
                    .iter()
                    .zip(&col_obs)
                    .zip(f_prev.masses())
                    .map(|((a, b), m)| a * b * m),
            );
            if m_prev > 0.0 {
                Ok(m_prev * (1.0 + w * (cross / (m_prev * m_obs) - 1.0)))
            } else {
                Ok(w * cross / m_obs)
            }
        })
        .collect()
}
