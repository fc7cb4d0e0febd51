//! Mixture kernels `p(x | theta)` and the marginal they induce.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::support::{MixingDensity, SupportGrid};

/// Kernel values below this are raised to it before forming ratios.
pub const KERNEL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `N(x; theta, sigma2)` with scalar `theta`.
    GaussianLocation { sigma2: f64 },
    /// `N(x; a + b * t / time_scale, sigma2)` with `theta = (a, b)` and
    /// covariate `t`.
    LinearDriftGaussian { sigma2: f64, time_scale: f64 },
}

impl Kernel {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        Kernel::GaussianLocation { sigma2 }.validated()
    }

    pub fn linear_drift(sigma2: f64, time_scale: f64) -> Result<Self> {
        Kernel::LinearDriftGaussian { sigma2, time_scale }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let sigma2 = self.sigma2();
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel variance must be > 0, got {sigma2}")));
        }
        if let Kernel::LinearDriftGaussian { time_scale, .. } = self {
            if !(time_scale != 0.0 && time_scale.is_finite()) {
                return Err(Error::InvalidParameter(format!("bad time scale {time_scale}")));
            }
        }
        Ok(self)
    }

    pub fn sigma2(&self) -> f64 {
        match *self {
            Kernel::GaussianLocation { sigma2 } | Kernel::LinearDriftGaussian { sigma2, .. } => sigma2,
        }
    }

    /// Dimension of the parameter the kernel is indexed by.
    pub fn theta_dim(&self) -> usize {
        match self {
            Kernel::GaussianLocation { .. } => 1,
            Kernel::LinearDriftGaussian { .. } => 2,
        }
    }

    pub fn is_covariate_indexed(&self) -> bool {
        matches!(self, Kernel::LinearDriftGaussian { .. })
    }

    /// Mean of the kernel at `theta` (and covariate, when indexed).
    #[inline]
    pub(crate) fn location(&self, theta: &[f64], covariate: Option<f64>) -> f64 {
        match *self {
            Kernel::GaussianLocation { .. } => theta[0],
            Kernel::LinearDriftGaussian { time_scale, .. } => {
                theta[0] + theta[1] * covariate.unwrap_or(0.0) / time_scale
            }
        }
    }

    /// Checked evaluation of `p(x | theta)`.
    pub fn eval(&self, x: f64, theta: &[f64], covariate: Option<f64>) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("observation {x}")));
        }
        if theta.len() != self.theta_dim() {
            return Err(Error::InvalidParameter(format!(
                "kernel expects a {}-dimensional parameter, got {}",
                self.theta_dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {theta:?}")));
        }
        self.check_covariate(covariate)?;
        Ok(self.eval_unchecked(x, theta, covariate))
    }

    pub(crate) fn check_covariate(&self, covariate: Option<f64>) -> Result<()> {
        match (self.is_covariate_indexed(), covariate) {
            (true, None) => Err(Error::MissingCovariate),
            (true, Some(t)) if !t.is_finite() => Err(Error::NonFinite(format!("covariate {t}"))),
            _ => Ok(()),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: f64, theta: &[f64], covariate: Option<f64>) -> f64 {
        let var = self.sigma2();
        let d = x - self.location(theta, covariate);
        (-0.5 * d * d / var).exp() / (2.0 * PI * var).sqrt()
    }

    /// Kernel values `p(x | atom_k)` for every atom of `grid`, written into
    /// `out`.
    pub(crate) fn fill_column(
        &self,
        x: f64,
        covariate: Option<f64>,
        grid: &SupportGrid,
        out: &mut [f64],
    ) {
        let var = self.sigma2();
        let norm = 1.0 / (2.0 * PI * var).sqrt();
        let half_prec = 0.5 / var;
        for (o, theta) in out.iter_mut().zip(grid.atoms()) {
            let d = x - self.location(theta, covariate);
            *o = (-half_prec * d * d).exp() * norm;
        }
    }

    /// Checks that the kernel can be used with `grid`.
    pub(crate) fn check_grid(&self, grid: &SupportGrid) -> Result<()> {
        if grid.dim() != self.theta_dim() {
            return Err(Error::InvalidParameter(format!(
                "kernel expects a {}-dimensional grid, got {}",
                self.theta_dim(),
                grid.dim()
            )));
        }
        Ok(())
    }
}

/// Marginal density `m_f(x) = sum_k p(x | atom_k) f_k`.
pub fn marginal(
    kernel: &Kernel,
    f: &MixingDensity,
    x: f64,
    covariate: Option<f64>,
) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("observation {x}")));
    }
    kernel.check_grid(f.grid())?;
    kernel.check_covariate(covariate)?;
    let value = marginal_unchecked(kernel, f, x, covariate);
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::OutsideSupport { x })
    }
}

pub(crate) fn marginal_unchecked(
    kernel: &Kernel,
    f: &MixingDensity,
    x: f64,
    covariate: Option<f64>,
) -> f64 {
    f.grid()
        .atoms()
        .zip(f.masses())
        .filter(|(_, &m)| m > 0.0)
        .map(|(theta, &m)| kernel.eval_unchecked(x, theta, covariate) * m)
        .sum()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::numeric::trapezoid_rule;
    use crate::support::{normalize, uniform_density};
    use proptest::prelude::*;

    const PHI0: f64 = 0.398_942_280_401_432_7;

    fn two_atoms() -> Arc<SupportGrid> {
        Arc::new(SupportGrid::discrete(vec![0.0, 2.5]).unwrap())
    }

    #[test]
    fn gaussian_eval_examples() {
        let k = Kernel::gaussian(1.0).unwrap();
        // 1/sqrt(2*pi)
        assert!((k.eval(0.0, &[0.0], None).unwrap() - PHI0).abs() < 1e-15);
        assert_eq!(k.eval(5.0, &[5.0], None).unwrap(), k.eval(0.0, &[0.0], None).unwrap());
    }

    #[test]
    fn drift_eval_example() {
        let k = Kernel::linear_drift(0.1, 100.0).unwrap();
        let v = k.eval(7.0, &[5.0, 2.0], Some(100.0)).unwrap();
        let expected = 1.0 / (2.0 * PI * 0.1f64).sqrt();
        assert!((v - expected).abs() < 1e-14);
        assert!(matches!(k.eval(7.0, &[5.0, 2.0], None), Err(Error::MissingCovariate)));
    }

    #[test]
    fn eval_rejects_bad_inputs() {
        let k = Kernel::gaussian(1.0).unwrap();
        assert!(k.eval(f64::NAN, &[0.0], None).is_err());
        assert!(k.eval(0.0, &[f64::INFINITY], None).is_err());
        assert!(k.eval(0.0, &[0.0, 1.0], None).is_err());
        assert!(Kernel::gaussian(0.0).is_err());
        assert!(Kernel::gaussian(-1.0).is_err());
        assert!(Kernel::linear_drift(0.1, 0.0).is_err());
    }

    #[test]
    fn marginal_examples() {
        let k = Kernel::gaussian(1.0).unwrap();
        let g = two_atoms();
        let point = MixingDensity::point_mass(Arc::clone(&g), 0).unwrap();
        assert!((marginal(&k, &point, 0.0, None).unwrap() - PHI0).abs() < 1e-15);

        let half = normalize(&[0.5, 0.5], &g).unwrap();
        // oracle: 0.5 * phi(0) + 0.5 * phi(2.5), phi(2.5) = exp(-3.125)/sqrt(2 pi)
        let phi25 = (-3.125f64).exp() / (2.0 * PI).sqrt();
        let expected = 0.5 * PHI0 + 0.5 * phi25;
        assert!((phi25 - 0.017_528_300_493_568_5).abs() < 1e-15);
        assert!((marginal(&k, &half, 0.0, None).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.208_235_3).abs() < 1e-7);
    }

    #[test]
    fn marginal_of_constant_kernel_is_constant() {
        // theta-free kernel: drift kernel at t = 0 with a fixed intercept
        let k = Kernel::linear_drift(1.0, 1.0).unwrap();
        let g = Arc::new(SupportGrid::parse("0:0:1,-2:2:9").unwrap());
        let f = uniform_density(&g).unwrap();
        let m = marginal(&k, &f, 0.3, Some(0.0)).unwrap();
        assert!((m - k.eval(0.3, &[0.0, 1.0], Some(0.0)).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn marginal_underflow_reports_observation() {
        let k = Kernel::gaussian(1.0).unwrap();
        let f = uniform_density(&two_atoms()).unwrap();
        match marginal(&k, &f, 1e6, None) {
            Err(Error::OutsideSupport { x }) => assert_eq!(x, 1e6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn marginal_integrates_to_one() {
        let k = Kernel::gaussian(1.0).unwrap();
        let g = Arc::new(SupportGrid::uniform(-3.0, 3.0, 50).unwrap());
        let raw: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64 * 0.37).sin().abs()).collect();
        let f = normalize(&raw, &g).unwrap();
        let (xs, ws) = trapezoid_rule(-3.0 - 8.0, 3.0 + 8.0, 4001);
        let total: f64 = xs
            .iter()
            .zip(&ws)
            .map(|(&x, w)| w * marginal(&k, &f, x, None).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    proptest! {
        #[test]
        fn marginal_is_linear(
            a in prop::collection::vec(0.01f64..1.0, 8),
            b in prop::collection::vec(0.01f64..1.0, 8),
            alpha in 0.0f64..=1.0,
            x in -5.0f64..5.0,
        ) {
            let k = Kernel::gaussian(0.7).unwrap();
            let g = Arc::new(SupportGrid::uniform(-2.0, 2.0, 8).unwrap());
            let f1 = normalize(&a, &g).unwrap();
            let f2 = normalize(&b, &g).unwrap();
            let mix: Vec<f64> = f1.masses().iter().zip(f2.masses())
                .map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect();
            let fm = normalize(&mix, &g).unwrap();
            let lhs = marginal(&k, &fm, x, None).unwrap();
            let rhs = alpha * marginal(&k, &f1, x, None).unwrap()
                + (1.0 - alpha) * marginal(&k, &f2, x, None).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn more_mass_near_x_never_lowers_marginal(
            raw in prop::collection::vec(0.01f64..1.0, 10),
            bump in 0.0f64..5.0,
            x in -3.0f64..3.0,
        ) {
            let k = Kernel::gaussian(1.0).unwrap();
            let g = Arc::new(SupportGrid::uniform(-3.0, 3.0, 10).unwrap());
            let f = normalize(&raw, &g).unwrap();
            let near = g.nearest(&[x]);
            let mut bumped = f.masses().to_vec();
            bumped[near] += bump;
            let fb = normalize(&bumped, &g).unwrap();
            let before = marginal(&k, &f, x, None).unwrap();
            let after = marginal(&k, &fb, x, None).unwrap();
            prop_assert!(after >= before * (1.0 - 1e-12));
        }
    }
}
