//! Linearization about a uniform reference, characteristic coordinates and the
//! backstepping observer design.
//!
//! With deviations `q~ = q - q*`, `v~ = v - v*` the linearized model is
//! diagonalized by
//!
//! ```text
//! xi1 = rho* l2 / (l1 - l2) v~ + q~,    xi2 = q* / (l1 - l2) v~
//! w   = exp(x / (tau l1)) xi1,          v_bar = xi2
//! ```
//!
//! after which `w` is transported at `l1 > 0` and `v_bar` at `l2 < 0` with
//! in-domain coupling `c(x) w`, `c(x) = -exp(-x / (tau l1)) / tau`.
//!
//! The observer injects `r(x) e(t)` and `s(x) e(t)` into the `w` and `v_bar`
//! equations, `e = w(L) - w_hat(L)`. Writing the estimation error as
//! `w_err = alpha - int_x^L P(x,xi) alpha`, `v_err = beta - int_x^L N(x,xi) alpha`
//! with `(alpha, beta)` a pure-transport target that vanishes after
//! `t_f = L/|l1| + L/|l2|`, the kernels satisfy
//!
//! ```text
//! P(x, xi) = Phi(xi - x),        l1 N_xi + l2 N_x = c(x) P(x, xi)
//! N(x, x)  = -c(x) / (l1 - l2),  P(0, xi) = (l2 / l1) N(0, xi)
//! ```
//!
//! The boundary condition turns into a convolution Volterra equation for
//! `Phi` whose solution is a single exponential, so both kernels stay in
//! closed form:
//!
//! ```text
//! Phi(xi)  = (C / tau) exp(-(a + C / tau) xi)
//! N(x, xi) = M(l1 x - l2 xi) exp(-C (xi - x) / tau)
//! C = l2 / (l1 (l1 - l2)),   a = -l2 / ((l1 - l2) tau l1)
//! M(z) = -c(z / (l1 - l2)) / (l1 - l2),   K(x) = -c(-l2 (L - x) / (l1 - l2)) / (l1 - l2)
//! ```
//!
//! `K` and `M` alone (dropping the Volterra correction and the `l2/l1`
//! reflection factor) give the simpler [`GainVariant::LeadingOrder`] gains,
//! which do not achieve finite-time convergence; [`GainVariant::Exact`] is
//! the default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::FundamentalDiagram;
use crate::scalar::Real;

/// Default tolerance on `l2` used to declare the critical regime [m/s].
pub const DEFAULT_SPEED_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceState<T> {
    pub rho_star: T,
    pub v_star: T,
    pub q_star: T,
    pub lambda1: T,
    pub lambda2: T,
}

impl<T: Real> ReferenceState<T> {
    /// Equilibrium reference `v* = V(rho*)`.
    pub fn from_density(fd: &FundamentalDiagram<T>, rho_star: T) -> Result<Self> {
        if !(rho_star > T::zero() && rho_star < fd.rho_max()) {
            return Err(Error::domain("rho_star", rho_star.as_f64(), 0.0, fd.rho_max().as_f64()));
        }
        Self::from_averages(fd, rho_star, fd.velocity(rho_star))
    }

    /// Reference from measured averages; `v*` need not lie on the diagram.
    pub fn from_averages(fd: &FundamentalDiagram<T>, rho_star: T, v_star: T) -> Result<Self> {
        if !(rho_star > T::zero() && rho_star < fd.rho_max()) {
            return Err(Error::domain("rho_star", rho_star.as_f64(), 0.0, fd.rho_max().as_f64()));
        }
        let (lambda1, lambda2) = characteristic_speeds(rho_star, v_star, fd);
        let r = Self {
            rho_star,
            v_star,
            q_star: rho_star * v_star,
            lambda1,
            lambda2,
        };
        if !(r.lambda1 > T::zero()) {
            return Err(Error::InvalidReference(format!(
                "lambda1 = v* = {} must be positive",
                r.lambda1
            )));
        }
        Ok(r)
    }

    pub fn regime(&self, eps: T) -> Result<Regime> {
        classify_regime(self.lambda1, self.lambda2, eps)
    }

    /// `l1 - l2`.
    pub fn speed_gap(&self) -> T {
        self.lambda1 - self.lambda2
    }
}

/// `(l1, l2) = (v*, v* + rho* V'(rho*))`.
pub fn characteristic_speeds<T: Real>(ref_density: T, ref_velocity: T, fd: &FundamentalDiagram<T>) -> (T, T) {
    let lambda1 = ref_velocity;
    let lambda2 = ref_velocity + ref_density * fd.velocity_derivative(ref_density);
    (lambda1, lambda2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FreeFlow,
    Congested,
    Critical,
}

pub fn classify_regime<T: Real>(lambda1: T, lambda2: T, eps: T) -> Result<Regime> {
    if !(lambda1 > T::zero()) {
        return Err(Error::InvalidReference(format!("lambda1 = {lambda1} must be positive")));
    }
    Ok(if lambda2 < -eps {
        Regime::Congested
    } else if lambda2 > eps {
        Regime::FreeFlow
    } else {
        Regime::Critical
    })
}

/// `c(x) = -exp(-x / (tau l1)) / tau`.
pub fn c_of_x<T: Real>(x: T, tau: T, lambda1: T) -> T {
    -(-x / (tau * lambda1)).exp() / tau
}

pub fn to_riemann<T: Real>(q_dev: T, v_dev: T, r: &ReferenceState<T>) -> (T, T) {
    let gap = r.speed_gap();
    (r.rho_star * r.lambda2 / gap * v_dev + q_dev, r.q_star / gap * v_dev)
}

pub fn from_riemann<T: Real>(xi1: T, xi2: T, r: &ReferenceState<T>) -> (T, T) {
    let v_dev = r.speed_gap() / r.q_star * xi2;
    let q_dev = xi1 - r.rho_star * r.lambda2 / r.q_star * xi2;
    (q_dev, v_dev)
}

/// `w = exp(x / (tau l1)) xi1`.
pub fn scale_state<T: Real>(xi1: T, x: T, tau: T, lambda1: T) -> T {
    (x / (tau * lambda1)).exp() * xi1
}

pub fn unscale_state<T: Real>(w_bar: T, x: T, tau: T, lambda1: T) -> T {
    (-x / (tau * lambda1)).exp() * w_bar
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainVariant {
    /// Gains from the full kernel solution; finite-time convergence of the
    /// linear error system.
    #[default]
    Exact,
    /// `r = l1 K(x)`, `s = -l1 M(l1 x - l2 L)` from the leading-order kernels.
    LeadingOrder,
}

/// Gains sampled on the solver grid, in the convention
/// `w_hat_t + l1 w_hat_x = r(x) (w(L) - w_hat(L))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile<T> {
    pub x_samples: Vec<T>,
    pub r_values: Vec<T>,
    pub s_values: Vec<T>,
    pub t_f: T,
    pub variant: GainVariant,
}

impl<T: Real> GainProfile<T> {
    /// All-zero gains on the same grid, used as an ablation.
    pub fn zeroed(&self) -> Self {
        Self {
            r_values: vec![T::zero(); self.r_values.len()],
            s_values: vec![T::zero(); self.s_values.len()],
            ..self.clone()
        }
    }
}

/// Congested reference plus the segment data the observer is designed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverDesign<T> {
    pub reference: ReferenceState<T>,
    pub tau: T,
    pub length: T,
}

impl<T: Real> ObserverDesign<T> {
    pub fn new(reference: ReferenceState<T>, tau: T, length: T, speed_eps: T) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::domain("tau", tau.as_f64(), 0.0, f64::INFINITY));
        }
        if !(length > T::zero()) {
            return Err(Error::domain("length", length.as_f64(), 0.0, f64::INFINITY));
        }
        match reference.regime(speed_eps)? {
            Regime::Congested => Ok(Self {
                reference,
                tau,
                length,
            }),
            other => Err(Error::UnsupportedRegime(other)),
        }
    }

    fn l1(&self) -> T {
        self.reference.lambda1
    }

    fn l2(&self) -> T {
        self.reference.lambda2
    }

    fn gap(&self) -> T {
        self.reference.speed_gap()
    }

    pub fn c(&self, x: T) -> T {
        c_of_x(x, self.tau, self.l1())
    }

    /// `t_f = L/|l1| + L/|l2|`.
    pub fn convergence_time(&self) -> T {
        self.length / self.l1().abs() + self.length / self.l2().abs()
    }

    /// Leading-order kernel `K(x)`.
    pub fn kernel_k(&self, x: T) -> T {
        -self.c(-self.l2() / self.gap() * (self.length - x)) / self.gap()
    }

    /// Leading-order kernel `M(z)`.
    pub fn kernel_m(&self, z: T) -> T {
        -self.c(z / self.gap()) / self.gap()
    }

    /// Upper bound `1 / ((l1 - l2) tau)` on `|K|`.
    pub fn kernel_bound(&self) -> T {
        T::one() / (self.gap() * self.tau)
    }

    /// Rate `C / tau` of the Volterra correction, `C = l2 / (l1 (l1 - l2))`.
    pub fn volterra_rate(&self) -> T {
        self.l2() / (self.l1() * self.gap()) / self.tau
    }

    /// `Phi(xi) = P(0, xi)`, solution of the inlet Volterra equation.
    pub fn boundary_kernel(&self, xi: T) -> T {
        let a = -self.l2() / (self.gap() * self.tau * self.l1());
        let k = self.volterra_rate();
        k * (-(a + k) * xi).exp()
    }

    /// `P(x, xi) = Phi(xi - x)`.
    pub fn kernel_p(&self, x: T, xi: T) -> T {
        self.boundary_kernel(xi - x)
    }

    pub fn kernel_n(&self, x: T, xi: T) -> T {
        self.kernel_m(self.l1() * x - self.l2() * xi) * (-self.volterra_rate() * (xi - x)).exp()
    }

    /// Bound on `|P(x, L)|` over `[0, L]`:
    /// `(|l2| / l1) exp(|C| L / tau) / ((l1 - l2) tau)`.
    pub fn exact_kernel_bound(&self) -> T {
        (self.l2() / self.l1()).abs() * (self.volterra_rate().abs() * self.length).exp() * self.kernel_bound()
    }

    pub fn gain_r(&self, x: T, variant: GainVariant) -> T {
        match variant {
            GainVariant::Exact => -self.l1() * self.kernel_p(x, self.length),
            GainVariant::LeadingOrder => self.l1() * self.kernel_k(x),
        }
    }

    pub fn gain_s(&self, x: T, variant: GainVariant) -> T {
        match variant {
            GainVariant::Exact => -self.l1() * self.kernel_n(x, self.length),
            GainVariant::LeadingOrder => -self.l1() * self.kernel_m(self.l1() * x - self.l2() * self.length),
        }
    }

    pub fn gains(&self, x_samples: &[T], variant: GainVariant) -> Result<GainProfile<T>> {
        if let Some(&bad) = x_samples.iter().find(|&&x| !(x >= T::zero() && x <= self.length)) {
            return Err(Error::domain("x", bad.as_f64(), 0.0, self.length.as_f64()));
        }
        Ok(GainProfile {
            x_samples: x_samples.to_vec(),
            r_values: x_samples.iter().map(|&x| self.gain_r(x, variant)).collect(),
            s_values: x_samples.iter().map(|&x| self.gain_s(x, variant)).collect(),
            t_f: self.convergence_time(),
            variant,
        })
    }

    /// Deviations `(q~, v~)` at `x` mapped to the scaled coordinate `w`.
    pub fn w_bar(&self, q_dev: T, v_dev: T, x: T) -> T {
        let (xi1, _) = to_riemann(q_dev, v_dev, &self.reference);
        scale_state(xi1, x, self.tau, self.l1())
    }
}

/// Gains for a congested reference sampled at `x_samples`.
pub fn injection_gains<T: Real>(
    reference: &ReferenceState<T>,
    tau: T,
    length: T,
    x_samples: &[T],
    variant: GainVariant,
) -> Result<GainProfile<T>> {
    ObserverDesign::new(*reference, tau, length, T::lit(DEFAULT_SPEED_EPS))?.gains(x_samples, variant)
}
