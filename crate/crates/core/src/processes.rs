//! Seeded simulators for dependent processes whose marginal is a known
//! mixture.
//!
//! Every simulator is a pure function of its configuration and seed. The
//! generator is ChaCha8, so streams are identical across platforms.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::TrueMarginal;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::numeric::{std_normal_cdf, std_normal_quantile};
use crate::support::{normalize, MixingDensity, SupportGrid};

/// Largest stream a Gaussian-process simulator accepts.
pub const GP_MAX_LEN: usize = 5000;

/// Diagonal jitter added to the GP covariance before factorization.
pub const GP_JITTER: f64 = 1e-10;

/// Number of cells used when a continuous law is turned into point masses.
const LAW_DISCRETIZATION: usize = 801;

/// Ordered observations with optional covariates and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStream {
    values: Vec<f64>,
    covariates: Option<Vec<f64>>,
    /// Latent per-observation parameters, when the simulator exposes them.
    pub latent: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub meta: Option<ProcessMeta>,
}

impl ObservationStream {
    pub fn new(values: Vec<f64>, covariates: Option<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("empty observation stream".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("observation {} is {}", i + 1, values[i])));
        }
        if let Some(c) = &covariates {
            if c.len() != values.len() {
                return Err(Error::InvalidParameter("covariates and values differ in length".into()));
            }
            check_increasing(c)?;
        }
        Ok(ObservationStream {
            values,
            covariates,
            latent: None,
            seed: None,
            meta: None,
        })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::new(values, None)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn covariates(&self) -> Option<&[f64]> {
        self.covariates.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First `n` observations (with matching covariates).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        ObservationStream {
            values: self.values[..n].to_vec(),
            covariates: self.covariates.as_ref().map(|c| c[..n].to_vec()),
            latent: self.latent.as_ref().map(|c| c[..n].to_vec()),
            seed: self.seed,
            meta: self.meta.clone(),
        }
    }
}

fn check_increasing(ts: &[f64]) -> Result<()> {
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("covariate".into()));
    }
    if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!(
            "times must be strictly increasing (violated at index {})",
            i + 2
        )));
    }
    Ok(())
}

/// Distribution of a scalar latent parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ThetaLaw {
    PointMass { at: f64 },
    /// Normal(mu, sigma2) truncated to `[lo, hi]`.
    TruncNormal { mu: f64, sigma2: f64, lo: f64, hi: f64 },
    /// Finite mixture; weights must sum to one.
    Mixture { components: Vec<(f64, ThetaLaw)> },
}

impl ThetaLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThetaLaw::PointMass { at } if !at.is_finite() => {
                Err(Error::InvalidParameter("point mass location must be finite".into()))
            }
            ThetaLaw::PointMass { .. } => Ok(()),
            &ThetaLaw::TruncNormal { mu, sigma2, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidParameter(format!("truncation bounds must be finite with lo < hi, got [{lo}, {hi}]")));
                }
                if !(sigma2 > 0.0 && sigma2.is_finite() && mu.is_finite()) {
                    return Err(Error::InvalidParameter("truncated normal needs finite mean and positive variance".into()));
                }
                let (a, b) = self.standardized_bounds();
                if !(std_normal_cdf(b) - std_normal_cdf(a) > 0.0) {
                    return Err(Error::InvalidParameter("truncation interval has no mass".into()));
                }
                Ok(())
            }
            ThetaLaw::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidParameter("empty mixture".into()));
                }
                let total: f64 = components.iter().map(|(w, _)| *w).sum();
                if components.iter().any(|(w, _)| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter("mixture weights must be in [0,1] and sum to 1".into()));
                }
                components.iter().try_for_each(|(_, c)| c.validate())
            }
        }
    }

    fn standardized_bounds(&self) -> (f64, f64) {
        match *self {
            ThetaLaw::TruncNormal { mu, sigma2, lo, hi } => {
                let s = sigma2.sqrt();
                ((lo - mu) / s, (hi - mu) / s)
            }
            _ => unreachable!(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ThetaLaw::PointMass { at } => *at,
            &ThetaLaw::TruncNormal { mu, sigma2, lo, hi } => {
                let (a, b) = self.standardized_bounds();
                let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
                let u: f64 = rng.random();
                let z = std_normal_quantile(fa + u * (fb - fa));
                (mu + sigma2.sqrt() * z).clamp(lo, hi)
            }
            ThetaLaw::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (w, c) in components {
                    acc += w;
                    if u < acc {
                        return c.sample(rng);
                    }
                }
                components.last().expect("validated non-empty").1.sample(rng)
            }
        }
    }

    /// Probability of `(-inf, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            ThetaLaw::PointMass { at } => {
                if x >= *at {
                    1.0
                } else {
                    0.0
                }
            }
            &ThetaLaw::TruncNormal { mu, sigma2, lo, hi } => {
                if x < lo {
                    return 0.0;
                }
                if x >= hi {
                    return 1.0;
                }
                let (a, b) = self.standardized_bounds();
                let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
                (std_normal_cdf((x - mu) / sigma2.sqrt()) - fa) / (fb - fa)
            }
            ThetaLaw::Mixture { components } => components.iter().map(|(w, c)| w * c.cdf(x)).sum(),
        }
    }

    fn range(&self) -> (f64, f64) {
        match self {
            ThetaLaw::PointMass { at } => (*at, *at),
            ThetaLaw::TruncNormal { lo, hi, .. } => (*lo, *hi),
            ThetaLaw::Mixture { components } => components.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), (_, c)| {
                    let (a, b) = c.range();
                    (lo.min(a), hi.max(b))
                },
            ),
        }
    }

    /// Point masses plus discretized continuous parts, as (location, mass).
    fn to_atoms(&self) -> Vec<(f64, f64)> {
        match self {
            ThetaLaw::PointMass { at } => vec![(*at, 1.0)],
            &ThetaLaw::TruncNormal { lo, hi, .. } => {
                let k = LAW_DISCRETIZATION;
                let h = (hi - lo) / k as f64;
                (0..k)
                    .map(|j| {
                        let a = lo + h * j as f64;
                        let b = if j + 1 == k { hi } else { a + h };
                        (0.5 * (a + b), self.cdf(b) - self.cdf(a))
                    })
                    .collect()
            }
            ThetaLaw::Mixture { components } => components
                .iter()
                .flat_map(|(w, c)| c.to_atoms().into_iter().map(move |(x, m)| (x, w * m)))
                .collect(),
        }
    }

    /// Law mass per cell of a sorted 1D grid. Cells are bounded by the
    /// midpoints between neighboring atoms; the outer cells are unbounded.
    pub fn discretize(&self, grid: &Arc<SupportGrid>) -> Result<MixingDensity> {
        if grid.dim() != 1 {
            return Err(Error::InvalidGrid("scalar law needs a 1D grid".into()));
        }
        let k = grid.len();
        let mut masses = Vec::with_capacity(k);
        let mut prev = 0.0;
        for j in 0..k {
            let upper = if j + 1 == k {
                1.0
            } else {
                self.cdf(0.5 * (grid.atom(j)[0] + grid.atom(j + 1)[0]))
            };
            masses.push((upper - prev).max(0.0));
            prev = upper;
        }
        normalize(&masses, grid)
    }
}

/// Mode of the Gaussian-process example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GpMode {
    /// `Y(t) = X(t) + Z * shift`.
    TwoPointShift { shift: f64 },
    /// `Y(t) = X(t) + Z * (alpha + beta * t / time_scale)`.
    LinearDrift { alpha: f64, beta: f64, time_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessKind {
    /// `X_i = I_i A_i + (1 - I_i) B_i` with `A` a unit-variance AR(1),
    /// `B_i ~ N(mu2, 1)` iid and `P(I_i = 1) = p`.
    Ar1Mixture { p: f64, r: f64, mu2: f64 },
    /// `X_i = theta_i + Z_i`, `theta_i` iid from `theta_law`, `Z` a
    /// unit-variance AR(1).
    MeanMixtureAr1 { theta_law: ThetaLaw, r: f64 },
    /// Unit-variance MA(q-1) plus an iid shift: 0 with probability `p`,
    /// `mu2` otherwise.
    MaQ { q: usize, psi: Vec<f64>, p: f64, mu2: f64 },
    /// Gaussian-process path plus Bernoulli-switched drift.
    GpDrift {
        gp_mean: f64,
        amplitude: f64,
        length_scale2: f64,
        bernoulli_p: f64,
        #[serde(flatten)]
        mode: GpMode,
        /// Observation times; `1..=n` when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        times: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessConfig {
    pub n: usize,
    #[serde(flatten)]
    pub kind: ProcessKind,
}

impl ProcessKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessKind::Ar1Mixture { .. } => "ar1_mixture",
            ProcessKind::MeanMixtureAr1 { .. } => "mean_mixture_ar1",
            ProcessKind::MaQ { .. } => "ma_q",
            ProcessKind::GpDrift { .. } => "gp_drift",
        }
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("{what} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_ar(r: f64) -> Result<()> {
    if !(r > -1.0 && r < 1.0) {
        return Err(Error::InvalidParameter(format!("AR coefficient must satisfy |r| < 1, got {r}")));
    }
    Ok(())
}

impl ProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        match &self.kind {
            ProcessKind::Ar1Mixture { p, r, mu2 } => {
                check_prob(*p, "mixing probability")?;
                check_ar(*r)?;
                if !mu2.is_finite() {
                    return Err(Error::InvalidParameter("mu2 must be finite".into()));
                }
            }
            ProcessKind::MeanMixtureAr1 { theta_law, r } => {
                check_ar(*r)?;
                theta_law.validate()?;
            }
            ProcessKind::MaQ { q, psi, p, mu2 } => {
                if *q < 1 {
                    return Err(Error::InvalidParameter("q must be at least 1".into()));
                }
                if psi.len() != q - 1 {
                    return Err(Error::InvalidParameter(format!("need {} MA coefficients, got {}", q - 1, psi.len())));
                }
                if psi.iter().any(|c| !c.is_finite()) || !mu2.is_finite() {
                    return Err(Error::InvalidParameter("MA parameters must be finite".into()));
                }
                check_prob(*p, "shift probability")?;
            }
            ProcessKind::GpDrift {
                amplitude,
                length_scale2,
                bernoulli_p,
                times,
                gp_mean,
                mode,
            } => {
                if self.n > GP_MAX_LEN {
                    return Err(Error::InvalidParameter(format!("GP streams are limited to {GP_MAX_LEN} points")));
                }
                if !(*amplitude >= 0.0) || !(*length_scale2 > 0.0) || !gp_mean.is_finite() {
                    return Err(Error::InvalidParameter("GP needs amplitude >= 0 and length scale > 0".into()));
                }
                check_prob(*bernoulli_p, "Bernoulli probability")?;
                if let GpMode::LinearDrift { time_scale, .. } = mode {
                    if *time_scale == 0.0 {
                        return Err(Error::InvalidParameter("time scale must be nonzero".into()));
                    }
                }
                if let Some(ts) = times {
                    if ts.len() != self.n {
                        return Err(Error::InvalidParameter("times must have length n".into()));
                    }
                    check_increasing(ts)?;
                }
            }
        }
        Ok(())
    }

    /// The mixing law of the stationary marginal.
    pub fn true_mixing(&self) -> TrueMixing {
        match &self.kind {
            ProcessKind::Ar1Mixture { p, mu2, .. } | ProcessKind::MaQ { p, mu2, .. } => {
                TrueMixing::atoms(1, vec![(vec![0.0], *p), (vec![*mu2], 1.0 - p)])
            }
            ProcessKind::MeanMixtureAr1 { theta_law, .. } => TrueMixing::Law(theta_law.clone()),
            ProcessKind::GpDrift {
                gp_mean,
                bernoulli_p,
                mode,
                ..
            } => match *mode {
                GpMode::TwoPointShift { shift } => TrueMixing::atoms(
                    1,
                    vec![(vec![*gp_mean], 1.0 - bernoulli_p), (vec![gp_mean + shift], *bernoulli_p)],
                ),
                GpMode::LinearDrift { alpha, beta, .. } => TrueMixing::atoms(
                    2,
                    vec![
                        (vec![*gp_mean, 0.0], 1.0 - bernoulli_p),
                        (vec![gp_mean + alpha, beta], *bernoulli_p),
                    ],
                ),
            },
        }
    }
}

/// Ground-truth mixing distribution of a simulated process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrueMixing {
    Atoms {
        dim: usize,
        atoms: Vec<Vec<f64>>,
        masses: Vec<f64>,
    },
    Law(ThetaLaw),
}

impl TrueMixing {
    fn atoms(dim: usize, pairs: Vec<(Vec<f64>, f64)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().filter(|(_, m)| *m > 0.0).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite atoms"));
        // merge coincident atoms
        let mut merged: Vec<(Vec<f64>, f64)> = Vec::new();
        for (a, m) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == a => last.1 += m,
                _ => merged.push((a, m)),
            }
        }
        let (atoms, masses) = merged.into_iter().unzip();
        TrueMixing::Atoms { dim, atoms, masses }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrueMixing::Atoms { dim, .. } => *dim,
            TrueMixing::Law(_) => 1,
        }
    }

    /// Mass assigned to each atom of `grid`: point masses go to their
    /// nearest atom, continuous laws are integrated over grid cells.
    pub fn on_grid(&self, grid: &Arc<SupportGrid>) -> Result<MixingDensity> {
        match self {
            TrueMixing::Atoms { atoms, masses, dim } => {
                if *dim != grid.dim() {
                    return Err(Error::InvalidGrid("truth and grid dimensions differ".into()));
                }
                let mut raw = vec![0.0; grid.len()];
                for (a, m) in atoms.iter().zip(masses) {
                    raw[grid.nearest(a)] += m;
                }
                normalize(&raw, grid)
            }
            TrueMixing::Law(law) => law.discretize(grid),
        }
    }

    /// Marginal density implied by `kernel`; `None` for covariate-indexed
    /// kernels, whose marginal changes with the covariate.
    pub fn marginal(&self, kernel: &Kernel) -> Option<TrueMarginal> {
        if kernel.is_covariate_indexed() || self.dim() != 1 {
            return None;
        }
        let pairs = match self {
            TrueMixing::Atoms { atoms, masses, .. } => {
                atoms.iter().map(|a| a[0]).zip(masses.iter().copied()).collect()
            }
            TrueMixing::Law(law) => law.to_atoms(),
        };
        TrueMarginal::new(*kernel, pairs).ok()
    }

    /// Discrete (location, mass) listing for reports.
    pub fn listing(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            TrueMixing::Atoms { atoms, masses, .. } => (atoms.clone(), masses.clone()),
            TrueMixing::Law(law) => law
                .to_atoms()
                .into_iter()
                .map(|(x, m)| (vec![x], m))
                .unzip(),
        }
    }

    /// Support range per dimension.
    pub fn range(&self) -> Vec<(f64, f64)> {
        match self {
            TrueMixing::Atoms { atoms, dim, .. } => (0..*dim)
                .map(|d| {
                    atoms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
                        (lo.min(a[d]), hi.max(a[d]))
                    })
                })
                .collect(),
            TrueMixing::Law(law) => vec![law.range()],
        }
    }
}

/// Process descriptor attached to simulated streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessMeta {
    pub process: ProcessConfig,
    pub seed: u64,
    pub truth: TrueMixing,
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-variance AR(1) path started from its stationary law.
struct StationaryAr1 {
    r: f64,
    innovation_sd: f64,
    state: Option<f64>,
}

impl StationaryAr1 {
    fn new(r: f64) -> Self {
        StationaryAr1 {
            r,
            innovation_sd: (1.0 - r * r).sqrt(),
            state: None,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let e = std_normal(rng);
        let z = match self.state {
            None => e,
            Some(prev) => self.r * prev + self.innovation_sd * e,
        };
        self.state = Some(z);
        z
    }
}

fn finish(values: Vec<f64>, covariates: Option<Vec<f64>>, config: ProcessConfig, seed: u64) -> Result<ObservationStream> {
    let mut s = ObservationStream::new(values, covariates)?;
    s.seed = Some(seed);
    s.meta = Some(ProcessMeta {
        truth: config.true_mixing(),
        process: config,
        seed,
    });
    Ok(s)
}

/// Simulates any configured process.
pub fn simulate(config: &ProcessConfig, seed: u64) -> Result<ObservationStream> {
    config.validate()?;
    let n = config.n;
    match &config.kind {
        ProcessKind::Ar1Mixture { p, r, mu2 } => simulate_ar1_mixture(*p, *r, *mu2, n, seed),
        ProcessKind::MeanMixtureAr1 { theta_law, r } => simulate_mean_mixture_ar1(theta_law, *r, n, seed),
        ProcessKind::MaQ { q, psi, p, mu2 } => simulate_ma(*q, psi, *p, *mu2, n, seed),
        ProcessKind::GpDrift { .. } => simulate_gp_drift(config, seed),
    }
}

/// Mixture of a stationary AR(1) (probability `p`, marginal N(0,1)) and iid
/// N(mu2, 1) noise.
pub fn simulate_ar1_mixture(p: f64, r: f64, mu2: f64, n: usize, seed: u64) -> Result<ObservationStream> {
    let config = ProcessConfig {
        n,
        kind: ProcessKind::Ar1Mixture { p, r, mu2 },
    };
    config.validate()?;
    let mut rng = rng_for(seed);
    let mut ar = StationaryAr1::new(r);
    let values = (0..n)
        .map(|_| {
            let a = ar.next(&mut rng);
            let pick_ar = rng.random::<f64>() < p;
            let b = mu2 + std_normal(&mut rng);
            if pick_ar {
                a
            } else {
                b
            }
        })
        .collect();
    finish(values, None, config, seed)
}

/// `X_i = theta_i + Z_i` with iid `theta_i` and unit-variance AR(1) errors.
pub fn simulate_mean_mixture_ar1(theta_law: &ThetaLaw, r: f64, n: usize, seed: u64) -> Result<ObservationStream> {
    let config = ProcessConfig {
        n,
        kind: ProcessKind::MeanMixtureAr1 {
            theta_law: theta_law.clone(),
            r,
        },
    };
    config.validate()?;
    let mut rng = rng_for(seed);
    let mut ar = StationaryAr1::new(r);
    let mut thetas = Vec::with_capacity(n);
    let values = (0..n)
        .map(|_| {
            let z = ar.next(&mut rng);
            let theta = theta_law.sample(&mut rng);
            thetas.push(theta);
            theta + z
        })
        .collect();
    let mut s = finish(values, None, config, seed)?;
    s.latent = Some(thetas);
    Ok(s)
}

/// Innovation variance giving the MA part unit marginal variance.
pub fn ma_innovation_variance(psi: &[f64]) -> f64 {
    1.0 / (1.0 + psi.iter().map(|c| c * c).sum::<f64>())
}

/// Autocorrelation of the MA part at lag `h`.
pub fn ma_autocorrelation(psi: &[f64], h: usize) -> f64 {
    let coeffs: Vec<f64> = std::iter::once(1.0).chain(psi.iter().copied()).collect();
    if h >= coeffs.len() {
        return 0.0;
    }
    let s2 = ma_innovation_variance(psi);
    s2 * (0..coeffs.len() - h).map(|j| coeffs[j] * coeffs[j + h]).sum::<f64>()
}

/// Unit-variance MA(q-1) plus an independent two-point shift (0 with
/// probability `p`, `mu2` otherwise).
pub fn simulate_ma(q: usize, psi: &[f64], p: f64, mu2: f64, n: usize, seed: u64) -> Result<ObservationStream> {
    let config = ProcessConfig {
        n,
        kind: ProcessKind::MaQ {
            q,
            psi: psi.to_vec(),
            p,
            mu2,
        },
    };
    config.validate()?;
    let mut rng = rng_for(seed);
    let s = ma_innovation_variance(psi).sqrt();
    // innovations e_{i-q+1}, ..., e_i in a ring
    let mut ring: Vec<f64> = (0..q).map(|_| s * std_normal(&mut rng)).collect();
    let mut head = q - 1;
    let values = (0..n)
        .map(|i| {
            if i > 0 {
                head = (head + 1) % q;
                ring[head] = s * std_normal(&mut rng);
            }
            let mut ma = ring[head];
            for (j, c) in psi.iter().enumerate() {
                ma += c * ring[(head + q - 1 - j) % q];
            }
            let shift = if rng.random::<f64>() < p { 0.0 } else { mu2 };
            shift + ma
        })
        .collect();
    finish(values, None, config, seed)
}

/// Lower-triangular factor stored row by row over each row's envelope.
struct EnvelopeCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeCholesky {
    /// Factors the covariance `amplitude * exp(-(t_i - t_j)^2 / length_scale2) + jitter * I`.
    /// Entries whose exponential underflows to zero are structural zeros, so
    /// this performs the same arithmetic as a dense factorization.
    fn squared_exponential(times: &[f64], amplitude: f64, length_scale2: f64, jitter: f64) -> Result<Self> {
        let n = times.len();
        let cov = |i: usize, j: usize| {
            let d = times[i] - times[j];
            amplitude * (-(d * d) / length_scale2).exp()
        };
        let mut first = Vec::with_capacity(n);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut f = 0;
        for i in 0..n {
            while f < i && cov(i, f) == 0.0 {
                f += 1;
            }
            let mut row = vec![0.0; i - f + 1];
            for j in f..=i {
                let fj: usize = if j == i { f } else { first[j] };
                let start = f.max(fj);
                let mut acc = cov(i, j) + if i == j { jitter } else { 0.0 };
                if j == i {
                    for k in start..j {
                        let l = row[k - f];
                        acc -= l * l;
                    }
                    if !(acc > 0.0) {
                        return Err(Error::Numerical(format!(
                            "covariance not positive definite at row {i} (pivot {acc:e})"
                        )));
                    }
                    row[j - f] = acc.sqrt();
                } else {
                    let rj = &rows[j];
                    for k in start..j {
                        acc -= row[k - f] * rj[k - fj];
                    }
                    row[j - f] = acc / rj[j - fj];
                }
            }
            first.push(f);
            rows.push(row);
        }
        Ok(EnvelopeCholesky { first, rows })
    }

    fn mul(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.first)
            .map(|(row, &f)| row.iter().zip(&z[f..]).map(|(l, v)| l * v).sum())
            .collect()
    }
}

/// Gaussian-process path observed at increasing times, plus a drift switched
/// on by iid Bernoulli indicators.
pub fn simulate_gp_drift(config: &ProcessConfig, seed: u64) -> Result<ObservationStream> {
    config.validate()?;
    let ProcessKind::GpDrift {
        gp_mean,
        amplitude,
        length_scale2,
        bernoulli_p,
        mode,
        times,
    } = &config.kind
    else {
        return Err(Error::InvalidParameter("not a GP configuration".into()));
    };
    let n = config.n;
    let times: Vec<f64> = match times {
        Some(t) => t.clone(),
        None => (1..=n).map(|i| i as f64).collect(),
    };
    let mut rng = rng_for(seed);
    let z: Vec<f64> = (0..n).map(|_| std_normal(&mut rng)).collect();
    let path = if *amplitude > 0.0 {
        EnvelopeCholesky::squared_exponential(&times, *amplitude, *length_scale2, GP_JITTER)?.mul(&z)
    } else {
        vec![0.0; n]
    };
    let values = path
        .iter()
        .zip(&times)
        .map(|(g, &t)| {
            let on = rng.random::<f64>() < *bernoulli_p;
            let drift = match *mode {
                GpMode::TwoPointShift { shift } => shift,
                GpMode::LinearDrift { alpha, beta, time_scale } => alpha + beta * t / time_scale,
            };
            gp_mean + g + if on { drift } else { 0.0 }
        })
        .collect();
    finish(values, Some(times), config.clone(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn autocorr(xs: &[f64], lag: usize) -> f64 {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        let cov: f64 = (0..n - lag).map(|i| (xs[i] - mean) * (xs[i + lag] - mean)).sum();
        cov / var
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn ar1_mixture_iid_mean() {
        let (p, mu2, n) = (0.3, 2.5, 1_000_000);
        let s = simulate_ar1_mixture(p, 0.0, mu2, n, 1).unwrap();
        let (m, _) = mean_var(s.values());
        // mean (1 - p) mu2, variance 1 + p (1 - p) mu2^2
        let expected = (1.0 - p) * mu2;
        let sd = (1.0 + p * (1.0 - p) * mu2 * mu2).sqrt();
        assert!((m - expected).abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");
    }

    #[test]
    fn pure_ar1_autocorrelation_and_variance() {
        for r in [0.3, 0.7] {
            let s = simulate_ar1_mixture(1.0, r, 2.5, 1_000_000, 2).unwrap();
            assert!((autocorr(s.values(), 1) - r).abs() < 0.01);
            let (_, v) = mean_var(s.values());
            assert!((v - 1.0).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn ar_coefficient_validated() {
        assert!(simulate_ar1_mixture(0.3, 1.0, 2.5, 10, 1).is_err());
        assert!(simulate_ar1_mixture(0.3, -1.2, 2.5, 10, 1).is_err());
        assert!(simulate_ar1_mixture(1.3, 0.2, 2.5, 10, 1).is_err());
    }

    #[test]
    fn streams_are_deterministic() {
        let a = simulate_ar1_mixture(0.3, 0.7, 2.5, 1000, 9).unwrap();
        let b = simulate_ar1_mixture(0.3, 0.7, 2.5, 1000, 9).unwrap();
        let c = simulate_ar1_mixture(0.3, 0.7, 2.5, 1000, 10).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn degenerate_theta_law_gives_iid_normal() {
        let s = simulate_mean_mixture_ar1(&ThetaLaw::PointMass { at: 0.0 }, 0.0, 200_000, 3).unwrap();
        let (m, v) = mean_var(s.values());
        assert!(m.abs() < 3.0 / (200_000f64).sqrt());
        assert!((v - 1.0).abs() < 0.02);
        assert!(autocorr(s.values(), 1).abs() < 4.0 / (200_000f64).sqrt());
    }

    #[test]
    fn truncated_normal_mean_mixture_is_centered() {
        let law = ThetaLaw::TruncNormal { mu: 0.0, sigma2: 1.0, lo: -3.0, hi: 3.0 };
        let n = 100_000;
        let s = simulate_mean_mixture_ar1(&law, 0.7, n, 4).unwrap();
        let (m, v) = mean_var(s.values());
        // sum of AR(1) with r = 0.7 inflates the variance of the mean by (1+r)/(1-r)
        let var_theta = 1.0 - 2.0 * 3.0 * crate::numeric::normal_pdf(3.0, 0.0, 1.0) / (1.0 - 2.0 * std_normal_cdf(-3.0));
        let se = ((var_theta + (1.7 / 0.3)) / n as f64).sqrt();
        assert!(m.abs() < 3.0 * se, "{m} vs se {se}");
        assert!(s.latent.unwrap().iter().all(|t| (-3.0..=3.0).contains(t)));
        assert!((v - (1.0 + var_theta)).abs() < 0.05);
    }

    #[test]
    fn irregular_law_has_half_exact_zeros() {
        let law = ThetaLaw::Mixture {
            components: vec![
                (0.5, ThetaLaw::PointMass { at: 0.0 }),
                (0.5, ThetaLaw::TruncNormal { mu: 4.0, sigma2: 1.0, lo: -8.0, hi: 8.0 }),
            ],
        };
        let n = 5000;
        let s = simulate_mean_mixture_ar1(&law, 0.7, n, 5).unwrap();
        let zeros = s.latent.unwrap().iter().filter(|&&t| t == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{zeros}");
    }

    #[test]
    fn invalid_truncation_rejected() {
        for law in [
            ThetaLaw::TruncNormal { mu: 0.0, sigma2: 1.0, lo: 3.0, hi: -3.0 },
            ThetaLaw::TruncNormal { mu: 0.0, sigma2: 1.0, lo: f64::NEG_INFINITY, hi: 3.0 },
            ThetaLaw::TruncNormal { mu: 0.0, sigma2: 0.0, lo: -1.0, hi: 1.0 },
        ] {
            assert!(simulate_mean_mixture_ar1(&law, 0.5, 10, 1).is_err());
        }
    }

    #[test]
    fn discretized_law_matches_cell_probabilities() {
        let law = ThetaLaw::TruncNormal { mu: 0.0, sigma2: 1.0, lo: -3.0, hi: 3.0 };
        let g = Arc::new(SupportGrid::uniform(-3.0, 3.0, 7).unwrap());
        let d = law.discretize(&g).unwrap();
        let z = 1.0 - 2.0 * std_normal_cdf(-3.0);
        let centre = (std_normal_cdf(0.5) - std_normal_cdf(-0.5)) / z;
        assert!((d.mass(3) - centre).abs() < 1e-12);
        assert!((d.masses()[0] - d.masses()[6]).abs() < 1e-12);
    }

    #[test]
    fn ma_order_zero_is_iid() {
        let s = simulate_ma(1, &[], 1.0, 2.5, 200_000, 6).unwrap();
        assert!(autocorr(s.values(), 1).abs() < 4.0 / (200_000f64).sqrt());
        assert!(simulate_ma(3, &[0.5], 0.3, 2.5, 10, 1).is_err());
        assert!(simulate_ma(0, &[], 0.3, 2.5, 10, 1).is_err());
    }

    #[test]
    fn ma_autocorrelation_structure() {
        let psi = [0.5, 0.25];
        let n = 1_000_000;
        let s = simulate_ma(3, &psi, 1.0, 2.5, n, 7).unwrap();
        let (_, v) = mean_var(s.values());
        assert!((v - 1.0).abs() < 0.01, "{v}");
        // gamma_h = s2 * sum psi_j psi_{j+h}
        let s2 = 1.0 / (1.0 + 0.25 + 0.0625);
        let rho1 = s2 * (0.5 + 0.5 * 0.25);
        let rho2 = s2 * 0.25;
        assert!((ma_autocorrelation(&psi, 1) - rho1).abs() < 1e-15);
        assert!((autocorr(s.values(), 1) - rho1).abs() < 0.01);
        assert!((autocorr(s.values(), 2) - rho2).abs() < 0.01);
        assert!(autocorr(s.values(), 3).abs() < 0.01);
        assert!(autocorr(s.values(), 1).abs() > 0.1 && autocorr(s.values(), 2).abs() > 0.1);
    }

    fn gp_config(n: usize, amplitude: f64, mode: GpMode, gp_mean: f64, bernoulli_p: f64) -> ProcessConfig {
        ProcessConfig {
            n,
            kind: ProcessKind::GpDrift {
                gp_mean,
                amplitude,
                length_scale2: 10.0,
                bernoulli_p,
                mode,
                times: None,
            },
        }
    }

    #[test]
    fn gp_zero_amplitude_is_deterministic_drift() {
        let cfg = gp_config(50, 0.0, GpMode::LinearDrift { alpha: 5.0, beta: 2.0, time_scale: 100.0 }, 0.0, 1.0);
        let s = simulate(&cfg, 1).unwrap();
        for (i, &x) in s.values().iter().enumerate() {
            let t = (i + 1) as f64;
            assert!((x - (5.0 + 2.0 * t / 100.0)).abs() < 1e-12);
        }
        assert_eq!(s.covariates().unwrap()[0], 1.0);
    }

    #[test]
    fn gp_shift_fraction_matches_bernoulli() {
        let n = 2000;
        let cfg = gp_config(n, 0.1, GpMode::TwoPointShift { shift: 3.0 }, -1.0, 0.3);
        let s = simulate(&cfg, 8).unwrap();
        let frac = s.values().iter().filter(|&&x| x > 0.5).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 3.0 * (0.21 / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn gp_adjacent_correlation() {
        let n = 5000;
        let cfg = gp_config(n, 0.1, GpMode::TwoPointShift { shift: 0.0 }, 0.0, 0.0);
        let s = simulate(&cfg, 9).unwrap();
        let c = autocorr(s.values(), 1);
        assert!((c - (-0.1f64).exp()).abs() < 0.02, "{c}");
    }

    #[test]
    fn envelope_factor_matches_dense() {
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 2.5).collect();
        let l = EnvelopeCholesky::squared_exponential(&times, 0.1, 10.0, 1e-10).unwrap();
        // rebuild L L^T and compare with the covariance
        let n = times.len();
        let get = |i: usize, j: usize| {
            if j < l.first[i] || j > i { 0.0 } else { l.rows[i][j - l.first[i]] }
        };
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|k| get(i, k) * get(j, k)).sum();
                let d = times[i] - times[j];
                let c = 0.1 * (-(d * d) / 10.0).exp() + if i == j { 1e-10 } else { 0.0 };
                assert!((v - c).abs() < 1e-14, "{i},{j}");
            }
        }
    }

    #[test]
    fn gp_rejects_bad_times_and_lengths() {
        let mut cfg = gp_config(3, 0.1, GpMode::TwoPointShift { shift: 3.0 }, -1.0, 0.3);
        if let ProcessKind::GpDrift { times, .. } = &mut cfg.kind {
            *times = Some(vec![1.0, 1.0, 2.0]);
        }
        assert!(simulate(&cfg, 1).is_err());
        assert!(simulate(&gp_config(GP_MAX_LEN + 1, 0.1, GpMode::TwoPointShift { shift: 3.0 }, -1.0, 0.3), 1).is_err());
    }

    #[test]
    fn truth_on_grid_and_marginal() {
        let cfg = ProcessConfig {
            n: 10,
            kind: ProcessKind::Ar1Mixture { p: 0.3, r: 0.5, mu2: 2.5 },
        };
        let g = Arc::new(SupportGrid::discrete(vec![0.0, 2.5]).unwrap());
        let t = cfg.true_mixing().on_grid(&g).unwrap();
        assert_eq!(t.masses(), &[0.3, 0.7]);
        let m = cfg.true_mixing().marginal(&Kernel::gaussian(1.0).unwrap()).unwrap();
        let expected = 0.3 * crate::numeric::normal_pdf(1.0, 0.0, 1.0) + 0.7 * crate::numeric::normal_pdf(1.0, 2.5, 1.0);
        assert!((m.eval(1.0) - expected).abs() < 1e-15);
        assert!(cfg.true_mixing().marginal(&Kernel::linear_drift(0.1, 100.0).unwrap()).is_none());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = gp_config(100, 0.1, GpMode::LinearDrift { alpha: 5.0, beta: 2.0, time_scale: 100.0 }, 0.0, 0.3);
        let js = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ProcessConfig>(&js).unwrap(), cfg);
        let ex3 = ProcessConfig {
            n: 5,
            kind: ProcessKind::MeanMixtureAr1 {
                theta_law: ThetaLaw::Mixture {
                    components: vec![(0.5, ThetaLaw::PointMass { at: 0.0 }), (0.5, ThetaLaw::TruncNormal { mu: 4.0, sigma2: 1.0, lo: -8.0, hi: 8.0 })],
                },
                r: 0.7,
            },
        };
        let js = serde_json::to_string(&ex3).unwrap();
        assert_eq!(serde_json::from_str::<ProcessConfig>(&js).unwrap(), ex3);
    }
}
