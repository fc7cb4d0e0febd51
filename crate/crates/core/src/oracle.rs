//! Slow reference computations used to cross-check the recursion.
//!
//! [`kl_projection`] minimises `KL(m, m_pi)` over mixing weights `pi` on a
//! fixed grid; [`npmle_em`] maximises the likelihood of a sample over the
//! same kind of weights. Both use multiplicative EM updates, which never
//! increase the objective; every iteration checks that.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::QuadSpec;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::processes::ObservationStream;
use crate::support::{normalized_masses, MixingDensity, SupportGrid};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Floor on weights in the relative-change criterion.
const REL_FLOOR: f64 = 1e-10;

/// Allowed objective increase per iteration, relative, before the
/// monotonicity check fails.
const MONOTONE_SLACK: f64 = 1e-10;

/// Quadrature nodes per chunk; fixed so the reduction order does not depend
/// on the thread count.
const CHUNK: usize = 256;

/// Designs with fewer kernel entries than this are processed on one thread.
const PARALLEL_MIN: usize = 1 << 20;
/// Nodes whose target weight is below this fraction of the largest are dropped.
const NODE_CUTOFF: f64 = 1e-30;

/// Target density for the projection.
pub enum ProjectionTarget<'a> {
    /// A single marginal density `m(x)`.
    Marginal(&'a (dyn Fn(f64) -> f64 + Sync)),
    /// Densities `m(x | t)` averaged with equal weight over the covariates.
    Indexed {
        covariates: &'a [f64],
        density: &'a (dyn Fn(f64, f64) -> f64 + Sync),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Starting weights; uniform when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub f_tilde: MixingDensity,
    pub k_tilde: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration, starting with the initial value.
    pub objective: Vec<f64>,
}

/// JSON report of a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub k_tilde: f64,
    pub iterations: usize,
    pub converged: bool,
    pub atoms: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl ProjectionResult {
    pub fn report(&self) -> ProjectionReport {
        ProjectionReport {
            k_tilde: self.k_tilde,
            iterations: self.iterations,
            converged: self.converged,
            atoms: self.f_tilde.grid().atoms().map(|a| a.to_vec()).collect(),
            masses: self.f_tilde.masses().to_vec(),
        }
    }
}

/// Weighted evaluation points with their kernel rows.
struct Design {
    /// Target weight (quadrature weight times target density) per node.
    target: Vec<f64>,
    /// Row-major `nodes x atoms`.
    kernel: Vec<f64>,
    atoms: usize,
    /// Constant `sum_j t_j log t_j / w_j` so the objective is a KL value.
    entropy: f64,
}

impl Design {
    fn rows(&self) -> usize {
        self.target.len()
    }

    /// Mixture values at every node.
    fn mixture(&self, pi: &[f64]) -> Vec<f64> {
        if self.kernel.len() < PARALLEL_MIN {
            return self.kernel.chunks(self.atoms).map(|row| dot(row, pi)).collect();
        }
        self.kernel
            .par_chunks(self.atoms * CHUNK)
            .flat_map_iter(|block| block.chunks(self.atoms).map(|row| dot(row, pi)).collect::<Vec<_>>())
            .collect()
    }

    /// `sum_j target_j * P_jk / m_j` per atom.
    fn gradient(&self, m: &[f64]) -> Vec<f64> {
        let k = self.atoms;
        let block_sum = |((block, t), m): ((&[f64], &[f64]), &[f64])| {
            let mut acc = vec![0.0; k];
            for ((row, &tj), &mj) in block.chunks(k).zip(t).zip(m) {
                if tj == 0.0 {
                    continue;
                }
                let r = tj / mj;
                acc.iter_mut().zip(row).for_each(|(a, p)| *a += r * p);
            }
            acc
        };
        let partial: Vec<Vec<f64>> = if self.kernel.len() < PARALLEL_MIN {
            self.kernel
                .chunks(k * CHUNK)
                .zip(self.target.chunks(CHUNK))
                .zip(m.chunks(CHUNK))
                .map(block_sum)
                .collect()
        } else {
            self.kernel
                .par_chunks(k * CHUNK)
                .zip(self.target.par_chunks(CHUNK))
                .zip(m.par_chunks(CHUNK))
                .map(block_sum)
                .collect()
        };
        let mut total = vec![0.0; k];
        for p in partial {
            total.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        total
    }

    /// `-sum_j target_j log m_j`, plus the entropy constant.
    fn objective(&self, m: &[f64]) -> f64 {
        let mut s = self.entropy;
        for (&t, &mj) in self.target.iter().zip(m) {
            if t == 0.0 {
                continue;
            }
            if !(mj > 0.0) {
                return f64::INFINITY;
            }
            s -= t * mj.ln();
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn start_weights(start: &Option<Vec<f64>>, k: usize) -> Result<Vec<f64>> {
    match start {
        None => Ok(vec![1.0 / k as f64; k]),
        Some(s) if s.len() != k => Err(Error::InvalidParameter(format!(
            "start weights have length {}, grid has {k} atoms",
            s.len()
        ))),
        Some(s) => normalized_masses(s.clone()),
    }
}

/// Runs multiplicative updates `pi_k <- pi_k * grad_k / total` until the
/// largest relative weight change drops below `tol`.
fn multiplicative_em(
    design: &Design,
    grid: &Arc<SupportGrid>,
    options: &ProjectionOptions,
) -> Result<ProjectionResult> {
    if !(options.tol > 0.0) || options.max_iter == 0 {
        return Err(Error::InvalidParameter("need tol > 0 and max_iter >= 1".into()));
    }
    let mut pi = start_weights(&options.start, grid.len())?;
    let total: f64 = design.target.iter().sum();
    let mut m = design.mixture(&pi);
    let mut obj = design.objective(&m);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective("the mixture vanishes where the target has mass".into()));
    }
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let grad = design.gradient(&m);
        let mut change: f64 = 0.0;
        let next: Vec<f64> = pi
            .iter()
            .zip(&grad)
            .map(|(&p, &g)| {
                let q = p * g / total;
                change = change.max((q - p).abs() / p.max(REL_FLOOR));
                q
            })
            .collect();
        pi = normalized_masses(next)?;
        m = design.mixture(&pi);
        let new_obj = design.objective(&m);
        if !new_obj.is_finite() {
            return Err(Error::NonFiniteObjective("the mixture vanishes where the target has mass".into()));
        }
        if new_obj > obj + MONOTONE_SLACK * obj.abs().max(1.0) {
            return Err(Error::Numerical(format!(
                "objective increased from {obj} to {new_obj} at iteration {iterations}"
            )));
        }
        obj = new_obj;
        history.push(obj);
        if change < options.tol {
            converged = true;
            break;
        }
    }
    Ok(ProjectionResult {
        f_tilde: MixingDensity::new(grid.clone(), pi)?,
        k_tilde: obj,
        iterations,
        converged,
        objective: history,
    })
}

/// Information projection of `target` onto mixtures over `grid0`:
/// the weights minimising `KL(m, sum_k p(. | theta_k) pi_k)`, with the
/// x-integral done by the trapezoid rule `quad`.
pub fn kl_projection(
    target: &ProjectionTarget<'_>,
    grid0: &Arc<SupportGrid>,
    kernel: &Kernel,
    quad: &QuadSpec,
    options: &ProjectionOptions,
) -> Result<ProjectionResult> {
    quad.validate()?;
    kernel.check_grid(grid0)?;
    let (xs, ws) = quad.rule();
    let k = grid0.len();
    let slots: Vec<(Option<f64>, f64)> = match target {
        ProjectionTarget::Marginal(_) => {
            if kernel.is_covariate_indexed() {
                return Err(Error::MissingCovariate);
            }
            vec![(None, 1.0)]
        }
        ProjectionTarget::Indexed { covariates, .. } => {
            if covariates.is_empty() {
                return Err(Error::InvalidParameter("need at least one covariate".into()));
            }
            let w = 1.0 / covariates.len() as f64;
            covariates.iter().map(|&t| (Some(t), w)).collect()
        }
    };

    let mut nodes = Vec::with_capacity(slots.len() * xs.len());
    for &(t, share) in &slots {
        for (&x, &w) in xs.iter().zip(&ws) {
            let dens = match (target, t) {
                (ProjectionTarget::Marginal(m), _) => m(x),
                (ProjectionTarget::Indexed { density, .. }, Some(t)) => density(x, t),
                _ => unreachable!(),
            };
            if !(dens >= 0.0 && dens.is_finite()) {
                return Err(Error::NonFinite(format!("target density {dens} at x = {x}")));
            }
            nodes.push((x, t, share * w, share * w * dens));
        }
    }
    // nodes carrying a negligible share of the target barely move the
    // objective or its gradient, so they are left out of the design
    let peak = nodes.iter().map(|n| n.3).fold(0.0, f64::max);
    let cutoff = peak * NODE_CUTOFF;
    let mut targets = Vec::with_capacity(nodes.len());
    let mut rule_weights = Vec::with_capacity(nodes.len());
    let mut rows = Vec::with_capacity(nodes.len() * k);
    let mut column = vec![0.0; k];
    for &(x, t, w, weight) in &nodes {
        if weight > cutoff {
            targets.push(weight);
            rule_weights.push(w);
            kernel.fill_column(x, t, grid0, &mut column);
            rows.extend_from_slice(&column);
        }
    }
    let mass: f64 = targets.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::DegenerateDensity("target has no mass on the quadrature range".into()));
    }
    targets.iter_mut().for_each(|t| *t /= mass);
    let entropy: f64 = targets
        .iter()
        .zip(&rule_weights)
        .map(|(&t, &w)| t * (t / w).ln())
        .sum();
    let design = Design {
        target: targets,
        kernel: rows,
        atoms: k,
        entropy,
    };
    debug_assert_eq!(design.rows() * k, design.kernel.len());
    let mut res = multiplicative_em(&design, grid0, options)?;
    res.k_tilde = res.k_tilde.max(0.0);
    Ok(res)
}

/// Nonparametric maximum likelihood over the weights on `grid`, by EM.
/// Returns the weights and the final mean log-likelihood.
pub fn npmle_em(
    data: &ObservationStream,
    grid: &Arc<SupportGrid>,
    kernel: &Kernel,
    max_iter: usize,
    tol: f64,
) -> Result<(MixingDensity, f64)> {
    kernel.check_grid(grid)?;
    if kernel.is_covariate_indexed() && data.covariates().is_none() {
        return Err(Error::MissingCovariate);
    }
    let n = data.len();
    let k = grid.len();
    let mut rows = vec![0.0; n * k];
    for (idx, (row, &x)) in rows.chunks_mut(k).zip(data.values()).enumerate() {
        kernel.fill_column(x, data.covariates().map(|c| c[idx]), grid, row);
    }
    let design = Design {
        target: vec![1.0 / n as f64; n],
        kernel: rows,
        atoms: k,
        entropy: 0.0,
    };
    let m = design.mixture(&vec![1.0 / k as f64; k]);
    if let Some(j) = m.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::OutsideSupport { x: data.values()[j] });
    }
    let options = ProjectionOptions {
        max_iter,
        tol,
        start: None,
    };
    let res = multiplicative_em(&design, grid, &options).map_err(|e| match e {
        Error::NonFiniteObjective(_) => Error::Numerical("mixture vanished at an observation".into()),
        other => other,
    })?;
    let mean_loglik = -res.objective.last().copied().expect("history has the initial value");
    Ok((res.f_tilde, mean_loglik))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::marginal;
    use crate::numeric::normal_pdf;
    use crate::support::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad() -> QuadSpec {
        QuadSpec::new(-14.0, 16.0, 3001).unwrap()
    }

    #[test]
    fn projection_recovers_grid_mixture() {
        let grid = Arc::new(SupportGrid::uniform(-2.0, 2.0, 5).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let truth = normalize(&[0.1, 0.0, 0.5, 0.0, 0.4], &grid).unwrap();
        let m = |x: f64| marginal(&k, &truth, x, None).unwrap();
        let opts = ProjectionOptions {
            max_iter: 5000,
            ..Default::default()
        };
        let res = kl_projection(&ProjectionTarget::Marginal(&m), &grid, &k, &quad(), &opts).unwrap();
        assert!(res.k_tilde < 1e-6);
        for (a, b) in res.f_tilde.masses().iter().zip(truth.masses()) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
        assert!(res.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn boundary_projection() {
        let grid = Arc::new(SupportGrid::uniform(-3.0, 3.0, 61).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let m = |x: f64| normal_pdf(x, 5.0, 1.0);
        let opts = ProjectionOptions {
            max_iter: 5000,
            ..Default::default()
        };
        let res = kl_projection(&ProjectionTarget::Marginal(&m), &grid, &k, &quad(), &opts).unwrap();
        let near = res.f_tilde.mass_where(|t| (t[0] - 3.0).abs() <= 0.2 + 1e-9);
        assert!(near >= 0.99, "{near}");
        // KL(N(5,1), N(3,1)) = 2
        assert!((res.k_tilde - 2.0).abs() < 0.01);
    }

    #[test]
    fn restarts_agree_on_the_objective() {
        let grid = Arc::new(SupportGrid::uniform(-2.0, 4.0, 13).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let m = |x: f64| 0.3 * normal_pdf(x, 0.0, 1.5) + 0.7 * normal_pdf(x, 2.5, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut values = Vec::new();
        for _ in 0..5 {
            let start: Vec<f64> = (0..13).map(|_| rng.random_range(0.05..1.0)).collect();
            let opts = ProjectionOptions {
                start: Some(start),
                max_iter: 5_000,
                ..Default::default()
            };
            values.push(kl_projection(&ProjectionTarget::Marginal(&m), &grid, &k, &quad(), &opts).unwrap().k_tilde);
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-6, "{values:?}");
    }

    #[test]
    fn projection_rejects_hopeless_support() {
        let grid = Arc::new(SupportGrid::uniform(-3.0, 3.0, 7).unwrap());
        let k = Kernel::gaussian(0.01).unwrap();
        let m = |x: f64| normal_pdf(x, 200.0, 1.0);
        let q = QuadSpec::new(190.0, 210.0, 401).unwrap();
        assert!(matches!(
            kl_projection(&ProjectionTarget::Marginal(&m), &grid, &k, &q, &ProjectionOptions::default()),
            Err(Error::NonFiniteObjective(_))
        ));
    }

    #[test]
    fn covariate_projection_matches_pointwise_truth() {
        let grid = Arc::new(SupportGrid::parse("-1:1:5,-2:2:5").unwrap());
        let k = Kernel::linear_drift(0.5, 10.0).unwrap();
        let times: Vec<f64> = (1..=10).map(|t| t as f64).collect();
        let dens = |x: f64, t: f64| normal_pdf(x, 0.5 + 1.0 * t / 10.0, 0.5);
        let target = ProjectionTarget::Indexed {
            covariates: &times,
            density: &dens,
        };
        let q = QuadSpec::new(-8.0, 10.0, 1201).unwrap();
        let opts = ProjectionOptions {
            max_iter: 3000,
            ..Default::default()
        };
        let res = kl_projection(&target, &grid, &k, &q, &opts).unwrap();
        assert!(res.k_tilde < 1e-4, "{}", res.k_tilde);
        let best = res.f_tilde.grid().nearest(&[0.5, 1.0]);
        assert!(res.f_tilde.mass(best) > 0.9);
    }

    #[test]
    fn npmle_single_point_goes_to_likeliest_atom() {
        let grid = Arc::new(SupportGrid::discrete(vec![0.0, 2.0]).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let data = ObservationStream::from_values(vec![0.4]).unwrap();
        let (f, _) = npmle_em(&data, &grid, &k, 10_000, 1e-9).unwrap();
        assert!(f.mass(0) > 0.999);
    }

    #[test]
    fn npmle_one_atom_is_point_mass() {
        let grid = Arc::new(SupportGrid::discrete(vec![1.0]).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let data = ObservationStream::from_values(vec![-3.0, 0.2, 7.0]).unwrap();
        let (f, _) = npmle_em(&data, &grid, &k, 100, 1e-9).unwrap();
        assert!((f.mass(0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn npmle_recovers_iid_mixture() {
        use crate::diagnostics::hellinger;
        use crate::processes::simulate_ar1_mixture;
        let data = simulate_ar1_mixture(0.3, 0.0, 2.5, 100_000, 8).unwrap();
        let grid = Arc::new(SupportGrid::uniform(-1.0, 3.5, 10).unwrap());
        let k = Kernel::gaussian(1.0).unwrap();
        let (f, ll) = npmle_em(&data, &grid, &k, 500, 1e-6).unwrap();
        assert!(ll.is_finite());
        let truth = |x: f64| 0.3 * normal_pdf(x, 0.0, 1.0) + 0.7 * normal_pdf(x, 2.5, 1.0);
        let est = |x: f64| marginal(&k, &f, x, None).unwrap();
        let h = hellinger(&truth, &est, &quad()).unwrap();
        assert!(h < 0.02, "{h}");
    }

    #[test]
    fn npmle_rejects_zero_likelihood() {
        let grid = Arc::new(SupportGrid::discrete(vec![0.0]).unwrap());
        let k = Kernel::gaussian(1e-4).unwrap();
        let data = ObservationStream::from_values(vec![1e3]).unwrap();
        assert!(npmle_em(&data, &grid, &k, 10, 1e-9).is_err());
    }
}
