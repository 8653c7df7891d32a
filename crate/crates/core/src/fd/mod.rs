//! Equilibrium relations: velocity `V(rho)`, flow `Q(rho) = rho V(rho)` and
//! traffic pressure `p(rho) = V(0) - V(rho)`.
//!
//! Two families are supported. The Greenshield law
//! `V = v_f (1 - (rho/rho_m)^gamma)` and the three-parameter flow curve
//!
//! ```text
//! Q(rho) = alpha (a + (b - a) u - sqrt(1 + lambda^2 (u - p)^2)),   u = rho / rho_m
//! a = sqrt(1 + (lambda p)^2),  b = sqrt(1 + (lambda (1 - p))^2)
//! ```
//!
//! where `lambda` (here `roundness`) and `p` (`p_shape`) are shape parameters
//! unrelated to characteristic speeds or pressure. All derivatives are
//! analytic. Densities are in veh/m, velocities in m/s, flows in veh/s.

mod calibrate;

pub use calibrate::{
    calibrate_three_param, calibrate_three_param_with, read_scatter_csv, CalibrationOptions,
    CalibrationReport, ScatterPoint,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of sample points used by the hyperbolicity check.
pub const HYPERBOLICITY_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenshieldParams<T> {
    /// Free-flow speed [m/s].
    pub v_f: T,
    /// Maximum density [veh/m].
    pub rho_m: T,
    pub gamma: T,
}

impl<T: Real> GreenshieldParams<T> {
    pub fn new(v_f: T, rho_m: T, gamma: T) -> Result<Self> {
        let p = Self { v_f, rho_m, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("v_f", self.v_f)?;
        positive("rho_m", self.rho_m)?;
        positive("gamma", self.gamma)
    }

    /// Pressure coefficient `C_0` in `p(rho) = C_0 rho^gamma`.
    pub fn pressure_coefficient(&self) -> T {
        self.v_f / self.rho_m.powf(self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeParamFd<T> {
    /// Roundness of the flow curve.
    pub roundness: T,
    /// Tunes where the flow peaks, in `(0, 1)`.
    pub p_shape: T,
    /// Flow scale [veh/s].
    pub alpha: T,
    /// Maximum density [veh/m].
    pub rho_m: T,
}

impl<T: Real> ThreeParamFd<T> {
    /// Builds the diagram after checking parameter ranges. Concavity and
    /// monotonicity are checked separately by [`FundamentalDiagram::check_hyperbolicity`].
    pub fn new(roundness: T, p_shape: T, alpha: T, rho_m: T) -> Result<Self> {
        let p = Self {
            roundness,
            p_shape,
            alpha,
            rho_m,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("roundness", self.roundness)?;
        positive("alpha", self.alpha)?;
        positive("rho_m", self.rho_m)?;
        if !(self.p_shape > T::zero() && self.p_shape < T::one()) {
            return Err(Error::domain("p_shape", self.p_shape.as_f64(), 0.0, 1.0));
        }
        Ok(())
    }

    fn a(&self) -> T {
        (T::one() + (self.roundness * self.p_shape).powi(2)).sqrt()
    }

    fn b(&self) -> T {
        (T::one() + (self.roundness * (T::one() - self.p_shape)).powi(2)).sqrt()
    }

    fn root(&self, u: T) -> T {
        (T::one() + (self.roundness * (u - self.p_shape)).powi(2)).sqrt()
    }

    /// `Q/(alpha u)` written without cancellation:
    /// `lambda^2 [ (1 - 2p)/(a + b) + (2p - u)/(a + root) ]`.
    fn reduced_velocity(&self, u: T) -> T {
        let two = T::lit(2.0);
        let l2 = self.roundness * self.roundness;
        let p = self.p_shape;
        l2 * ((T::one() - two * p) / (self.a() + self.b()) + (two * p - u) / (self.a() + self.root(u)))
    }

    fn reduced_velocity_derivative(&self, u: T) -> T {
        let two = T::lit(2.0);
        let l2 = self.roundness * self.roundness;
        let root = self.root(u);
        let denom = self.a() + root;
        let droot = l2 * (u - self.p_shape) / root;
        l2 * (-T::one() / denom - (two * self.p_shape - u) * droot / (denom * denom))
    }
}

/// Family tag plus parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FundamentalDiagram<T> {
    Greenshield(GreenshieldParams<T>),
    ThreeParam(ThreeParamFd<T>),
}

impl<T: Real> FundamentalDiagram<T> {
    pub fn greenshield(v_f: T, rho_m: T, gamma: T) -> Result<Self> {
        GreenshieldParams::new(v_f, rho_m, gamma).map(Self::Greenshield)
    }

    pub fn three_param(roundness: T, p_shape: T, alpha: T, rho_m: T) -> Result<Self> {
        ThreeParamFd::new(roundness, p_shape, alpha, rho_m).map(Self::ThreeParam)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Greenshield(g) => g.validate(),
            Self::ThreeParam(t) => t.validate(),
        }
    }

    pub fn rho_max(&self) -> T {
        match self {
            Self::Greenshield(g) => g.rho_m,
            Self::ThreeParam(t) => t.rho_m,
        }
    }

    /// `V(0)`.
    pub fn free_speed(&self) -> T {
        self.velocity(T::zero())
    }

    /// `V(rho)` without range checks.
    pub fn velocity(&self, rho: T) -> T {
        match self {
            Self::Greenshield(g) => g.v_f * (T::one() - (rho / g.rho_m).powf(g.gamma)),
            Self::ThreeParam(t) => t.alpha / t.rho_m * t.reduced_velocity(rho / t.rho_m),
        }
    }

    /// `V'(rho)`.
    pub fn velocity_derivative(&self, rho: T) -> T {
        match self {
            Self::Greenshield(g) => {
                if rho == T::zero() {
                    if g.gamma == T::one() {
                        -g.v_f / g.rho_m
                    } else if g.gamma > T::one() {
                        T::zero()
                    } else {
                        T::neg_infinity()
                    }
                } else {
                    -g.v_f * g.gamma * (rho / g.rho_m).powf(g.gamma - T::one()) / g.rho_m
                }
            }
            Self::ThreeParam(t) => {
                t.alpha / (t.rho_m * t.rho_m) * t.reduced_velocity_derivative(rho / t.rho_m)
            }
        }
    }

    /// `Q(rho) = rho V(rho)`.
    pub fn flow(&self, rho: T) -> T {
        rho * self.velocity(rho)
    }

    /// `Q'(rho) = V + rho V'`.
    pub fn flow_derivative(&self, rho: T) -> T {
        match self {
            Self::Greenshield(g) => {
                g.v_f * (T::one() - (g.gamma + T::one()) * (rho / g.rho_m).powf(g.gamma))
            }
            Self::ThreeParam(t) => {
                let u = rho / t.rho_m;
                let l2 = t.roundness * t.roundness;
                let s = u - t.p_shape;
                let b_minus_a = l2 * (T::one() - T::lit(2.0) * t.p_shape) / (t.a() + t.b());
                t.alpha / t.rho_m * (b_minus_a - l2 * s / t.root(u))
            }
        }
    }

    pub fn flow_second_derivative(&self, rho: T) -> T {
        match self {
            Self::Greenshield(g) => {
                let k = g.gamma * (g.gamma + T::one());
                if rho == T::zero() && g.gamma < T::one() {
                    return T::neg_infinity();
                }
                -g.v_f * k * (rho / g.rho_m).powf(g.gamma - T::one()) / g.rho_m
            }
            Self::ThreeParam(t) => {
                let root = t.root(rho / t.rho_m);
                -t.alpha / (t.rho_m * t.rho_m) * t.roundness * t.roundness / (root * root * root)
            }
        }
    }

    /// Traffic pressure `p(rho) = V(0) - V(rho)`; for Greenshield this is
    /// evaluated directly as `v_f (rho/rho_m)^gamma`.
    pub fn pressure(&self, rho: T) -> T {
        match self {
            Self::Greenshield(g) => g.v_f * (rho / g.rho_m).powf(g.gamma),
            Self::ThreeParam(_) => self.free_speed() - self.velocity(rho),
        }
    }

    fn check_density(&self, rho: T, allow_zero: bool) -> Result<()> {
        let lo_ok = if allow_zero { rho >= T::zero() } else { rho > T::zero() };
        if lo_ok && rho <= self.rho_max() {
            Ok(())
        } else {
            Err(Error::domain("density", rho.as_f64(), 0.0, self.rho_max().as_f64()))
        }
    }

    /// Samples `Q''` and `V'` on an interior grid and rejects the diagram if
    /// either is non-negative anywhere.
    pub fn check_hyperbolicity(&self, samples: usize) -> Result<()> {
        self.validate()?;
        let rho_m = self.rho_max();
        for k in 1..=samples {
            let rho = rho_m * T::count(k) / T::count(samples + 1);
            if !(self.flow_second_derivative(rho) < T::zero()) {
                return Err(Error::CalibrationInvalid(format!(
                    "Q'' >= 0 at rho = {rho}"
                )));
            }
            if !(self.velocity_derivative(rho) < T::zero()) {
                return Err(Error::CalibrationInvalid(format!("V' >= 0 at rho = {rho}")));
            }
        }
        Ok(())
    }
}

fn positive<T: Real>(name: &'static str, x: T) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(name, x.as_f64(), 0.0, f64::INFINITY))
    }
}

/// `V(rho)`; `rho = 0` is accepted for the Greenshield family only.
pub fn equilibrium_velocity<T: Real>(fd: &FundamentalDiagram<T>, rho: T) -> Result<T> {
    let allow_zero = matches!(fd, FundamentalDiagram::Greenshield(_));
    fd.check_density(rho, allow_zero)?;
    Ok(fd.velocity(rho))
}

pub fn pressure<T: Real>(fd: &FundamentalDiagram<T>, rho: T) -> Result<T> {
    fd.check_density(rho, true)?;
    Ok(fd.pressure(rho))
}

pub fn equilibrium_flow<T: Real>(fd: &FundamentalDiagram<T>, rho: T) -> Result<T> {
    fd.check_density(rho, true)?;
    Ok(fd.flow(rho))
}

/// Density where `Q'` changes sign, located by bisection on `(0, rho_m)`.
pub fn critical_density<T: Real>(fd: &FundamentalDiagram<T>) -> Result<T> {
    fd.validate()?;
    let rho_m = fd.rho_max();
    let mut lo = T::zero();
    let mut hi = rho_m;
    let (d_lo, d_hi) = (fd.flow_derivative(lo), fd.flow_derivative(hi));
    if !(d_lo > T::zero() && d_hi < T::zero()) {
        return Err(Error::CalibrationInvalid(format!(
            "Q' has no sign change on (0, rho_m): Q'(0) = {d_lo}, Q'(rho_m) = {d_hi}"
        )));
    }
    let tol = rho_m * T::epsilon() * T::lit(4.0);
    for _ in 0..200 {
        let mid = (lo + hi) / T::lit(2.0);
        if hi - lo <= tol {
            break;
        }
        if fd.flow_derivative(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / T::lit(2.0))
}

/// Jam density from lane count and headway: `lanes / (length (1 + safety))`.
pub fn prescribe_rho_m<T: Real>(num_lanes: usize, vehicle_length: T, safety_fraction: T) -> Result<T> {
    if num_lanes == 0 {
        return Err(Error::InvalidParameter("num_lanes must be positive".into()));
    }
    positive("vehicle_length", vehicle_length)?;
    if !(safety_fraction >= T::zero()) {
        return Err(Error::domain("safety_fraction", safety_fraction.as_f64(), 0.0, f64::INFINITY));
    }
    Ok(T::count(num_lanes) / (vehicle_length * (T::one() + safety_fraction)))
}
