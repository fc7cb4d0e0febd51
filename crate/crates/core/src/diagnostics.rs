//! Convergence and dependence diagnostics.
//!
//! Divergences between marginals are computed by composite trapezoid
//! quadrature on a fixed node set. The dependence estimator measures, for a
//! simulated process, the expected chi-square divergence between the
//! conditional density of `X_{i+n}` given the past and the stationary
//! marginal, as a function of the lag `n`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::numeric::{linear_fit, normal_pdf, trapezoid_rule};
use crate::processes::{ma_autocorrelation, ProcessConfig, ProcessKind, ThetaLaw};
use crate::recursion::FitTrace;
use crate::support::{MixingDensity, SupportGrid};

/// Default number of quadrature nodes for marginal divergences.
pub const DEFAULT_QUAD_NODES: usize = 2000;

/// Minimum number of quadrature nodes accepted.
pub const MIN_QUAD_NODES: usize = 400;

/// Half-width of the quadrature range in kernel standard deviations.
pub const QUAD_SIGMAS: f64 = 8.0;

/// Minimum Monte Carlo size for the dependence estimator.
pub const MIN_MC_SIZE: usize = 10_000;

/// Composite trapezoid rule on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl QuadSpec {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        let q = QuadSpec { lo, hi, nodes };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::InvalidParameter(format!(
                "quadrature range must be finite with lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.nodes < MIN_QUAD_NODES {
            return Err(Error::InvalidParameter(format!(
                "at least {MIN_QUAD_NODES} quadrature nodes required, got {}",
                self.nodes
            )));
        }
        Ok(())
    }

    /// Range covering `QUAD_SIGMAS` kernel standard deviations beyond the
    /// extreme locations.
    pub fn covering(mu_min: f64, mu_max: f64, sigma_max: f64) -> Self {
        QuadSpec {
            lo: mu_min - QUAD_SIGMAS * sigma_max,
            hi: mu_max + QUAD_SIGMAS * sigma_max,
            nodes: DEFAULT_QUAD_NODES,
        }
    }

    pub fn rule(&self) -> (Vec<f64>, Vec<f64>) {
        trapezoid_rule(self.lo, self.hi, self.nodes)
    }
}

/// True marginal density of a simulated process: a finite Gaussian mixture
/// `sum_j mass_j p(x | location_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueMarginal {
    kernel: Kernel,
    locations: Vec<f64>,
    masses: Vec<f64>,
}

impl TrueMarginal {
    pub fn new(kernel: Kernel, pairs: Vec<(f64, f64)>) -> Result<Self> {
        if kernel.is_covariate_indexed() {
            return Err(Error::InvalidParameter("marginal truth needs a covariate-free kernel".into()));
        }
        let (locations, masses): (Vec<f64>, Vec<f64>) = pairs.into_iter().filter(|(_, m)| *m > 0.0).unzip();
        if locations.is_empty() {
            return Err(Error::DegenerateDensity("empty true marginal".into()));
        }
        let total: f64 = masses.iter().sum();
        let masses = masses.into_iter().map(|m| m / total).collect();
        Ok(TrueMarginal {
            kernel,
            locations,
            masses,
        })
    }

    pub fn from_density(kernel: Kernel, f: &MixingDensity) -> Result<Self> {
        if f.grid().dim() != 1 {
            return Err(Error::InvalidGrid("marginal truth needs a 1D mixing density".into()));
        }
        let pairs = f.grid().atoms().map(|a| a[0]).zip(f.masses().iter().copied()).collect();
        Self::new(kernel, pairs)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let var = self.kernel.sigma2();
        self.locations
            .iter()
            .zip(&self.masses)
            .map(|(&mu, &m)| m * normal_pdf(x, mu, var))
            .sum()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn location_range(&self) -> (f64, f64) {
        self.locations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    /// Quadrature range covering this marginal and one fitted with
    /// `fit_kernel` on `grid`.
    pub fn quad_with(&self, fit_kernel: &Kernel, grid: &SupportGrid) -> QuadSpec {
        let (lo, hi) = self.location_range();
        let (glo, ghi) = grid.bounds()[0];
        let sd = self.kernel.sigma2().max(fit_kernel.sigma2()).sqrt();
        QuadSpec::covering(lo.min(glo), hi.max(ghi), sd)
    }
}

/// Precomputed quadrature for repeatedly comparing fitted marginals on one
/// grid with a fixed true marginal.
pub(crate) struct MarginalProbe {
    weights: Vec<f64>,
    truth: Vec<f64>,
    // row-major nodes x atoms
    kernel_matrix: Vec<f64>,
    atoms: usize,
}

impl MarginalProbe {
    pub(crate) fn new(truth: &TrueMarginal, kernel: &Kernel, grid: &Arc<SupportGrid>) -> Result<Self> {
        kernel.check_grid(grid)?;
        let quad = truth.quad_with(kernel, grid);
        let (xs, ws) = quad.rule();
        let k = grid.len();
        let mut kernel_matrix = vec![0.0; xs.len() * k];
        for (row, &x) in kernel_matrix.chunks_mut(k).zip(&xs) {
            kernel.fill_column(x, None, grid, row);
        }
        Ok(MarginalProbe {
            truth: xs.iter().map(|&x| truth.eval(x)).collect(),
            weights: ws,
            kernel_matrix,
            atoms: k,
        })
    }

    /// `(K_n*, Hellinger)` for the fitted masses.
    pub(crate) fn divergences(&self, masses: &[f64]) -> (f64, f64) {
        let est: Vec<f64> = self
            .kernel_matrix
            .chunks(self.atoms)
            .map(|row| row.iter().zip(masses).map(|(p, m)| p * m).sum())
            .collect();
        (
            kl_from_values(&self.weights, &self.truth, &est),
            hellinger_from_values(&self.weights, &self.truth, &est),
        )
    }
}

fn kl_from_values(weights: &[f64], truth: &[f64], est: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((&w, &m), &me) in weights.iter().zip(truth).zip(est) {
        if m <= 0.0 {
            continue;
        }
        if !(me > 0.0) {
            if m > 1e-12 {
                return f64::INFINITY;
            }
            continue;
        }
        total += w * m * (m / me).ln();
    }
    total.max(0.0)
}

fn hellinger_from_values(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let h2: f64 = weights
        .iter()
        .zip(a)
        .zip(b)
        .map(|((&w, &p), &q)| {
            let d = p.max(0.0).sqrt() - q.max(0.0).sqrt();
            w * d * d
        })
        .sum();
    h2.sqrt().clamp(0.0, std::f64::consts::SQRT_2)
}

/// `K_n = sum_k f_k log(f_k / g_k)` between mixing densities on one grid.
/// Returns `f64::INFINITY` when `f_est` vanishes where `f_true` does not.
pub fn kl_mixing(f_true: &MixingDensity, f_est: &MixingDensity) -> Result<f64> {
    if f_true.grid() != f_est.grid() {
        return Err(Error::InvalidGrid("divergence needs densities on the same grid".into()));
    }
    let mut total = 0.0;
    for (&p, &q) in f_true.masses().iter().zip(f_est.masses()) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += p * (p / q).ln();
    }
    Ok(total.max(0.0))
}

fn tabulate(
    m1: &dyn Fn(f64) -> f64,
    m2: &dyn Fn(f64) -> f64,
    quad: &QuadSpec,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    quad.validate()?;
    let (xs, ws) = quad.rule();
    let a = xs.iter().map(|&x| m1(x)).collect();
    let b = xs.iter().map(|&x| m2(x)).collect();
    Ok((ws, a, b))
}

/// `K_n* = int m log(m / m_est) dx` by trapezoid quadrature.
pub fn kl_marginal(
    m_true: &dyn Fn(f64) -> f64,
    m_est: &dyn Fn(f64) -> f64,
    quad: &QuadSpec,
) -> Result<f64> {
    let (ws, a, b) = tabulate(m_true, m_est, quad)?;
    Ok(kl_from_values(&ws, &a, &b))
}

/// Hellinger distance `sqrt(int (sqrt m1 - sqrt m2)^2 dx)`, in `[0, sqrt 2]`.
pub fn hellinger(
    m1: &dyn Fn(f64) -> f64,
    m2: &dyn Fn(f64) -> f64,
    quad: &QuadSpec,
) -> Result<f64> {
    let (ws, a, b) = tabulate(m1, m2, quad)?;
    Ok(hellinger_from_values(&ws, &a, &b))
}

/// Dependence at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceEntry {
    pub lag: usize,
    pub chi2: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceEstimate {
    pub lags: Vec<usize>,
    pub chi2: Vec<f64>,
    pub stderr: Vec<f64>,
    pub mc_size: usize,
}

impl DependenceEstimate {
    /// Geometric decay rate `rho` from `chi2(n) ~ c^2 rho^(2n)`, fitted by
    /// least squares on lags whose estimate exceeds ten standard errors.
    pub fn rho_hat(&self) -> Option<f64> {
        let (lags, logs): (Vec<f64>, Vec<f64>) = self
            .lags
            .iter()
            .zip(&self.chi2)
            .zip(&self.stderr)
            .filter(|((_, &c), &se)| c > 0.0 && c > 10.0 * se)
            .map(|((&l, &c), _)| (l as f64, c.ln()))
            .unzip();
        if lags.len() < 2 {
            return None;
        }
        let (slope, _, _) = linear_fit(&lags, &logs);
        Some((0.5 * slope).exp())
    }
}

/// Conditional structure of a process used by the dependence estimator.
enum ConditionalModel {
    /// `X = I A + (1 - I) B`, `A` unit AR(1) with coefficient `r`.
    Ar1Switch { p: f64, r: f64, mu2: f64 },
    /// `X = S + G` with iid shift `S` on atoms and a unit-variance Gaussian
    /// `G` whose lag correlation is given by `corr`.
    AdditiveShift {
        atoms: Vec<f64>,
        probs: Vec<f64>,
        law: Option<ThetaLaw>,
        corr: Box<dyn Fn(usize) -> f64 + Send + Sync>,
    },
}

/// Cells used to discretize a continuous latent law in the estimator.
const LATENT_CELLS: usize = 41;

impl ConditionalModel {
    fn from_process(process: &ProcessConfig) -> Result<Self> {
        process.validate()?;
        match &process.kind {
            &ProcessKind::Ar1Mixture { p, r, mu2 } => Ok(ConditionalModel::Ar1Switch { p, r, mu2 }),
            ProcessKind::MeanMixtureAr1 { theta_law, r } => {
                let (atoms, probs) = coarse_atoms(theta_law);
                let r = *r;
                Ok(ConditionalModel::AdditiveShift {
                    atoms,
                    probs,
                    law: Some(theta_law.clone()),
                    corr: Box::new(move |n| r.powi(n as i32)),
                })
            }
            ProcessKind::MaQ { psi, p, mu2, .. } => {
                let psi = psi.clone();
                let (atoms, probs) = if *mu2 == 0.0 {
                    (vec![0.0], vec![1.0])
                } else {
                    (vec![0.0, *mu2], vec![*p, 1.0 - p])
                };
                Ok(ConditionalModel::AdditiveShift {
                    atoms,
                    probs,
                    law: None,
                    corr: Box::new(move |n| ma_autocorrelation(&psi, n)),
                })
            }
            ProcessKind::GpDrift { .. } => Err(Error::NoTractableConditional("gp_drift".into())),
        }
    }

    fn location_range(&self) -> (f64, f64) {
        match self {
            ConditionalModel::Ar1Switch { mu2, .. } => (mu2.min(0.0), mu2.max(0.0)),
            ConditionalModel::AdditiveShift { atoms, .. } => (
                atoms.iter().copied().fold(f64::INFINITY, f64::min),
                atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }

    fn marginal(&self, y: f64) -> f64 {
        match *self {
            ConditionalModel::Ar1Switch { p, mu2, .. } => p * normal_pdf(y, 0.0, 1.0) + (1.0 - p) * normal_pdf(y, mu2, 1.0),
            ConditionalModel::AdditiveShift { ref atoms, ref probs, .. } => atoms
                .iter()
                .zip(probs)
                .map(|(&a, &q)| q * normal_pdf(y, a, 1.0))
                .sum(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match self {
            ConditionalModel::Ar1Switch { p, mu2, .. } => {
                if rng.random::<f64>() < *p {
                    z
                } else {
                    mu2 + z
                }
            }
            ConditionalModel::AdditiveShift { atoms, probs, law, .. } => {
                let s = match law {
                    Some(l) => l.sample(rng),
                    None => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = atoms[atoms.len() - 1];
                        for (&a, &q) in atoms.iter().zip(probs) {
                            acc += q;
                            if u < acc {
                                pick = a;
                                break;
                            }
                        }
                        pick
                    }
                };
                s + z
            }
        }
    }

    fn lag_correlation(&self, lag: usize) -> f64 {
        match self {
            ConditionalModel::Ar1Switch { r, .. } => r.powi(lag as i32),
            ConditionalModel::AdditiveShift { corr, .. } => corr(lag),
        }
    }

    /// Conditional density of `X_{i+lag}` at each node given `X_i = x`.
    fn conditional(&self, x: f64, rho: f64, nodes: &[f64], shifted: &ShiftedMixture<'_>, out: &mut [f64]) {
        let v = 1.0 - rho * rho;
        match *self {
            ConditionalModel::Ar1Switch { p, mu2, .. } => {
                let a = p * normal_pdf(x, 0.0, 1.0);
                let b = (1.0 - p) * normal_pdf(x, mu2, 1.0);
                let post = if a + b > 0.0 { a / (a + b) } else { 0.0 };
                for (o, &y) in out.iter_mut().zip(nodes) {
                    let ar = if v > 0.0 { normal_pdf(y, rho * x, v) } else { 0.0 };
                    *o = p * (post * ar + (1.0 - post) * normal_pdf(y, 0.0, 1.0)) + (1.0 - p) * normal_pdf(y, mu2, 1.0);
                }
            }
            ConditionalModel::AdditiveShift { ref atoms, ref probs, .. } => {
                let mut post: Vec<f64> = atoms.iter().zip(probs).map(|(&a, &q)| q * normal_pdf(x, a, 1.0)).collect();
                let total: f64 = post.iter().sum();
                if total > 0.0 {
                    post.iter_mut().for_each(|w| *w /= total);
                } else {
                    post.copy_from_slice(probs);
                }
                for (o, &y) in out.iter_mut().zip(nodes) {
                    *o = atoms
                        .iter()
                        .zip(&post)
                        .filter(|(_, &ps)| ps >= 1e-300)
                        .map(|(&s, &ps)| ps * shifted.eval(y - rho * (x - s)))
                        .sum();
                }
            }
        }
    }
}

/// Tabulated `h(u) = sum_b q_b N(u; s_b, v)` with linear interpolation; exact
/// evaluation outside the table.
struct ShiftedMixture<'a> {
    atoms: &'a [f64],
    probs: &'a [f64],
    var: f64,
    lo: f64,
    step: f64,
    table: Vec<f64>,
}

/// Table points per conditional standard deviation.
const TABLE_DENSITY: f64 = 64.0;

impl<'a> ShiftedMixture<'a> {
    fn new(atoms: &'a [f64], probs: &'a [f64], var: f64, lo: f64, hi: f64) -> Self {
        let step = var.sqrt() / TABLE_DENSITY;
        let len = (((hi - lo) / step).ceil() as usize + 1).min(4_000_000);
        let mut me = ShiftedMixture {
            atoms,
            probs,
            var,
            lo,
            step,
            table: Vec::new(),
        };
        me.table = (0..len).map(|j| me.exact(lo + step * j as f64)).collect();
        me
    }

    fn empty() -> ShiftedMixture<'static> {
        ShiftedMixture {
            atoms: &[],
            probs: &[],
            var: 1.0,
            lo: 0.0,
            step: 1.0,
            table: Vec::new(),
        }
    }

    fn exact(&self, u: f64) -> f64 {
        self.atoms
            .iter()
            .zip(self.probs)
            .map(|(&a, &q)| q * normal_pdf(u, a, self.var))
            .sum()
    }

    fn eval(&self, u: f64) -> f64 {
        let pos = (u - self.lo) / self.step;
        if pos >= 0.0 && pos + 1.0 < self.table.len() as f64 {
            let j = pos as usize;
            let frac = pos - j as f64;
            self.table[j] * (1.0 - frac) + self.table[j + 1] * frac
        } else {
            self.exact(u)
        }
    }
}

fn coarse_atoms(law: &ThetaLaw) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = match law {
        ThetaLaw::PointMass { at } => return (vec![*at], vec![1.0]),
        _ => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            collect_range(law, &mut lo, &mut hi);
            (lo, hi)
        }
    };
    let mut atoms: Vec<f64> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    let mut point_masses = Vec::new();
    collect_points(law, 1.0, &mut point_masses);
    let h = (hi - lo) / LATENT_CELLS as f64;
    let mut prev = law.cdf(lo - 1e-12);
    for j in 0..LATENT_CELLS {
        let b = if j + 1 == LATENT_CELLS { hi } else { lo + h * (j + 1) as f64 };
        let c = law.cdf(b);
        // continuous part only; point masses are listed separately
        let pm: f64 = point_masses
            .iter()
            .filter(|(x, _)| *x > b - h && *x <= b)
            .map(|(_, w)| *w)
            .sum();
        let mass = (c - prev - pm).max(0.0);
        if mass > 0.0 {
            atoms.push(b - 0.5 * h);
            probs.push(mass);
        }
        prev = c;
    }
    for (x, w) in point_masses {
        atoms.push(x);
        probs.push(w);
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    (atoms, probs)
}

fn collect_range(law: &ThetaLaw, lo: &mut f64, hi: &mut f64) {
    match law {
        ThetaLaw::PointMass { at } => {
            *lo = lo.min(*at);
            *hi = hi.max(*at);
        }
        ThetaLaw::TruncNormal { lo: a, hi: b, .. } => {
            *lo = lo.min(*a);
            *hi = hi.max(*b);
        }
        ThetaLaw::Mixture { components } => components.iter().for_each(|(_, c)| collect_range(c, lo, hi)),
    }
}

fn collect_points(law: &ThetaLaw, weight: f64, out: &mut Vec<(f64, f64)>) {
    match law {
        ThetaLaw::PointMass { at } => out.push((*at, weight)),
        ThetaLaw::TruncNormal { .. } => {}
        ThetaLaw::Mixture { components } => components.iter().for_each(|(w, c)| collect_points(c, weight * w, out)),
    }
}

/// Samples per deterministic Monte Carlo chunk.
const MC_CHUNK: usize = 1000;

/// Monte Carlo estimate of
/// `E[ int (m(y | past) / m(y) - 1)^2 m(y) dy ]` at the given lag, for a
/// stationary process.
///
/// The past enters through the latest observation and the posterior of its
/// latent component; for the AR(1)-based mixtures this is exact. The inner
/// integral is a trapezoid rule, the outer expectation is sampled.
pub fn dependence_coefficient(process: &ProcessConfig, lag: usize, mc_size: usize, seed: u64) -> Result<DependenceEntry> {
    if lag == 0 {
        return Err(Error::InvalidParameter("lag must be at least 1".into()));
    }
    if mc_size < MIN_MC_SIZE {
        return Err(Error::InvalidParameter(format!("Monte Carlo size must be at least {MIN_MC_SIZE}")));
    }
    let model = ConditionalModel::from_process(process)?;
    let rho = model.lag_correlation(lag);
    if rho == 0.0 {
        return Ok(DependenceEntry { lag, chi2: 0.0, stderr: 0.0 });
    }
    let cond_sd = (1.0 - rho * rho).sqrt();
    let (lo, hi) = model.location_range();
    let (a, b) = (lo - 10.0, hi + 10.0);
    let nodes = (((b - a) / (cond_sd / 4.0)).ceil() as usize).clamp(MIN_QUAD_NODES, 20_000);
    let (ys, ws) = trapezoid_rule(a, b, nodes);
    let marg: Vec<f64> = ys.iter().map(|&y| model.marginal(y)).collect();
    let shifted = match &model {
        ConditionalModel::AdditiveShift { atoms, probs, .. } => {
            let reach = rho.abs() * (hi - lo + 12.0);
            ShiftedMixture::new(atoms, probs, cond_sd * cond_sd, a - reach, b + reach)
        }
        ConditionalModel::Ar1Switch { .. } => ShiftedMixture::empty(),
    };

    let chunks = mc_size.div_ceil(MC_CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let count = MC_CHUNK.min(mc_size - c * MC_CHUNK);
            let mut cond = vec![0.0; ys.len()];
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..count {
                let x = model.sample(&mut rng);
                model.conditional(x, rho, &ys, &shifted, &mut cond);
                let v: f64 = ws
                    .iter()
                    .zip(&cond)
                    .zip(&marg)
                    .filter(|(_, &m)| m > 1e-300)
                    .map(|((w, c), m)| w * c * c / m)
                    .sum::<f64>()
                    - 1.0;
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let n = mc_size as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(DependenceEntry {
        lag,
        chi2: mean.max(0.0),
        stderr: (var / n).sqrt(),
    })
}

/// Dependence estimates over several lags, each with its own derived seed.
pub fn dependence_profile(process: &ProcessConfig, lags: &[usize], mc_size: usize, seed: u64) -> Result<DependenceEstimate> {
    if lags.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("lags must be strictly increasing".into()));
    }
    let entries = lags
        .iter()
        .map(|&lag| dependence_coefficient(process, lag, mc_size, seed.wrapping_add(lag as u64 * 0x9E37_79B9)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DependenceEstimate {
        lags: lags.to_vec(),
        chi2: entries.iter().map(|e| e.chi2).collect(),
        stderr: entries.iter().map(|e| e.stderr).collect(),
        mc_size,
    })
}

/// Envelope `c_u * sum_{k,l in H} p(x | theta_k) b / (p(x | theta_l) a)`
/// for the ratio of any two marginals at `x`.
pub fn a1_bound(
    kernel: &Kernel,
    theta_h: &[Vec<f64>],
    a: f64,
    b: f64,
    c_u: f64,
    x: f64,
    covariate: Option<f64>,
) -> Result<f64> {
    if theta_h.is_empty() {
        return Err(Error::InvalidParameter("extreme-point set must be nonempty".into()));
    }
    if !(a > 0.0 && a < 1.0) || !(b > 1.0 && b.is_finite()) || !(c_u >= 1.0 && c_u.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need a in (0,1), b > 1, c_u >= 1; got a={a}, b={b}, c_u={c_u}"
        )));
    }
    let values = theta_h
        .iter()
        .map(|t| kernel.eval(x, t, covariate))
        .collect::<Result<Vec<_>>>()?;
    if values.iter().any(|&v| v == 0.0) {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = values.iter().sum();
    let inv_sum: f64 = values.iter().map(|v| 1.0 / v).sum();
    Ok(c_u * (b / a) * sum * inv_sum)
}

/// Power-law fit of `K_n*` against `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub gamma_slope: f64,
    pub window: (usize, usize),
    pub r2: f64,
    pub points: usize,
}

/// Least-squares slope of `log K_n*` on `log n` over trace points with
/// `n_lo <= n <= n_hi`.
pub fn rate_fit(trace: &FitTrace, window: (usize, usize)) -> Result<RateEstimate> {
    rate_fit_points(&trace.kn_star_points(), window)
}

pub fn rate_fit_points(points: &[(usize, f64)], window: (usize, usize)) -> Result<RateEstimate> {
    let (lo, hi) = window;
    if lo < 100 || lo >= hi {
        return Err(Error::InvalidParameter(format!("window must satisfy 100 <= lo < hi, got ({lo}, {hi})")));
    }
    let inside: Vec<(usize, f64)> = points.iter().copied().filter(|&(n, _)| n >= lo && n <= hi).collect();
    if inside.len() < 10 {
        return Err(Error::TooFewPoints { needed: 10, got: inside.len() });
    }
    if let Some(&(n, v)) = inside.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!("K_n* must be positive and finite, got {v} at n = {n}")));
    }
    let xs: Vec<f64> = inside.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = inside.iter().map(|&(_, v)| v.ln()).collect();
    let (slope, _, r2) = linear_fit(&xs, &ys);
    Ok(RateEstimate {
        gamma_slope: slope,
        window,
        r2,
        points: inside.len(),
    })
}
