//! Least-squares fit of the three-parameter flow curve to density/flow scatter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{critical_density, FundamentalDiagram, ThreeParamFd, HYPERBOLICITY_SAMPLES};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Real;
use crate::units;

pub const MIN_SCATTER_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint<T> {
    /// veh/m
    pub density: T,
    /// veh/s
    pub flow: T,
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions<T> {
    pub roundness_bounds: (T, T),
    pub p_shape_bounds: (T, T),
    /// Bounds on `alpha` as multiples of the largest observed flow.
    pub alpha_bounds: (T, T),
    pub polish_rounds: usize,
    pub nelder_mead: NelderMeadOptions<T>,
}

impl<T: Real> Default for CalibrationOptions<T> {
    fn default() -> Self {
        Self {
            roundness_bounds: (T::lit(1e-3), T::lit(1e3)),
            p_shape_bounds: (T::lit(1e-4), T::lit(1.0 - 1e-4)),
            alpha_bounds: (T::lit(1e-6), T::lit(1e6)),
            polish_rounds: 6,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport<T> {
    pub params: ThreeParamFd<T>,
    /// Sum of squared flow residuals [veh^2/s^2].
    pub residual: T,
    pub rms_residual: T,
    pub critical_density: T,
    pub evaluations: usize,
    pub start_index: usize,
}

/// Fits `(roundness, p_shape, alpha)` with `rho_m` held fixed.
pub fn calibrate_three_param<T: Real>(
    scatter: &[ScatterPoint<T>],
    rho_m: T,
) -> Result<CalibrationReport<T>> {
    calibrate_three_param_with(scatter, rho_m, &CalibrationOptions::default())
}

pub fn calibrate_three_param_with<T: Real>(
    scatter: &[ScatterPoint<T>],
    rho_m: T,
    opts: &CalibrationOptions<T>,
) -> Result<CalibrationReport<T>> {
    if scatter.len() < MIN_SCATTER_POINTS {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least {MIN_SCATTER_POINTS} scatter points, got {}",
            scatter.len()
        )));
    }
    if !(rho_m > T::zero()) {
        return Err(Error::domain("rho_m", rho_m.as_f64(), 0.0, f64::INFINITY));
    }
    if scatter
        .iter()
        .any(|p| !(p.density.is_finite() && p.flow.is_finite()) || p.density < T::zero())
    {
        return Err(Error::Data("scatter contains non-finite or negative values".into()));
    }
    let q_max = scatter.iter().fold(T::zero(), |m, p| m.max(p.flow));
    if !(q_max > T::zero()) {
        return Err(Error::Data("scatter has no positive flow".into()));
    }

    let lower = [opts.roundness_bounds.0, opts.p_shape_bounds.0, opts.alpha_bounds.0 * q_max];
    let upper = [opts.roundness_bounds.1, opts.p_shape_bounds.1, opts.alpha_bounds.1 * q_max];
    let objective = |x: &[T]| -> T {
        let fd = FundamentalDiagram::ThreeParam(ThreeParamFd {
            roundness: x[0],
            p_shape: x[1],
            alpha: x[2],
            rho_m,
        });
        scatter.iter().fold(T::zero(), |acc, p| {
            let r = fd.flow(p.density) - p.flow;
            acc + r * r
        })
    };

    // eight fixed starts: 2 roundness x 2 p_shape x 2 alpha scales
    let mut starts = Vec::with_capacity(8);
    for &l in &[5.0, 40.0] {
        for &p in &[0.15, 0.45] {
            for &a in &[0.5, 2.0] {
                starts.push([T::lit(l), T::lit(p), T::lit(a) * q_max]);
            }
        }
    }

    let mut evaluations = 0;
    let mut best: Option<(usize, Vec<T>, T, bool)> = None;
    for (i, s) in starts.iter().enumerate() {
        let r = nelder_mead(objective, s, &lower, &upper, &opts.nelder_mead);
        evaluations += r.evaluations;
        if best.as_ref().is_none_or(|b| r.f < b.2) {
            best = Some((i, r.x, r.f, r.converged));
        }
    }
    let (start_index, mut x, mut f, mut converged) = best.expect("at least one start");
    for _ in 0..opts.polish_rounds {
        let r = nelder_mead(objective, &x, &lower, &upper, &opts.nelder_mead);
        evaluations += r.evaluations;
        let improved = r.f < f;
        if improved {
            x = r.x;
            f = r.f;
        }
        converged = r.converged;
        if !improved {
            break;
        }
    }
    if !converged || !f.is_finite() {
        return Err(Error::Calibration {
            message: "Nelder-Mead hit its iteration limit".into(),
            best: x.iter().map(|v| v.as_f64()).collect(),
            residual: f.as_f64(),
        });
    }

    let params = ThreeParamFd::new(x[0], x[1], x[2], rho_m)?;
    let fd = FundamentalDiagram::ThreeParam(params);
    fd.check_hyperbolicity(HYPERBOLICITY_SAMPLES)?;
    let critical_density = critical_density(&fd)?;
    Ok(CalibrationReport {
        params,
        residual: f,
        rms_residual: (f / T::count(scatter.len())).sqrt(),
        critical_density,
        evaluations,
        start_index,
    })
}

/// Reads a `density_veh_per_km, flow_veh_per_h` CSV (header row required)
/// and converts to SI.
pub fn read_scatter_csv<T: Real>(path: impl AsRef<Path>) -> Result<Vec<ScatterPoint<T>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("scatter CSV missing column `{name}`")))
    };
    let (id, iq) = (col("density_veh_per_km")?, col("flow_veh_per_h")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("scatter CSV row {}: bad number", line + 2)))
        };
        out.push(ScatterPoint {
            density: T::lit(units::density_from_per_km(parse(id)?)),
            flow: T::lit(units::flow_from_per_h(parse(iq)?)),
        });
    }
    Ok(out)
}
