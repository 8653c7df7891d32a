//! Relaxation-time selection: replay aggregated data through the plant for
//! each candidate `tau` and keep the one that tracks the data best.
//!
//! The plant runs on the aggregation's space grid, starts from the first
//! time row and is driven by the inlet flow and outlet velocity of the data.
//! The score is the time mean of `E_rho + E_v` against the non-empty cells.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd::FundamentalDiagram;
use crate::ingest::{boundary_series, dataset_averages, resample, AggregatedGrid};
use crate::metrics::l2_error_series_masked;
use crate::observer::BoundaryMeasurements;
use crate::scalar::Real;
use crate::solver::{interpolate, simulate_plant, BoundarySpec, Grid, OutletCondition, Signal, StateField, Trajectory};

/// Relaxation times scanned when none are given [s].
pub fn default_tau_grid<T: Real>() -> Vec<T> {
    (1..=10).map(|k| T::count(10 * k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauScore<T> {
    pub tau: T,
    /// `None` when the replay failed numerically.
    pub score: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauSelection<T> {
    pub best_tau: T,
    pub best_score: T,
    pub scores: Vec<TauScore<T>>,
}

/// Density and velocity of time row `i`, empty cells filled by linear
/// interpolation between non-empty neighbours.
pub fn row_field<T: Real>(agg: &AggregatedGrid<T>, i: usize) -> Result<StateField<T>> {
    let x = agg.x_centers();
    let (mut xs, mut rs, mut vs) = (vec![], vec![], vec![]);
    for j in 0..agg.n_x {
        if let (Some(r), Some(v)) = (agg.density(i, j), agg.velocity(i, j)) {
            xs.push(x[j]);
            rs.push(r);
            vs.push(v);
        }
    }
    if xs.is_empty() {
        return Err(Error::Data(format!("time row {i} of the aggregate has no data")));
    }
    Ok(StateField {
        rho: x.iter().map(|&p| interpolate(&xs, &rs, p)).collect(),
        v: x.iter().map(|&p| interpolate(&xs, &vs, p)).collect(),
    })
}

/// Boundary conditions replaying measured inflow and outlet velocity, with
/// times shifted so the run starts at zero.
pub fn replay_boundary<T: Real>(m: &BoundaryMeasurements<T>, t0: T) -> BoundarySpec<T> {
    let times: Vec<T> = m.times.iter().map(|&t| t - t0).collect();
    BoundarySpec {
        inlet_flux: Signal::Series { times: times.clone(), values: m.q_in.clone() },
        outlet: OutletCondition::Velocity(Signal::Series { times, values: m.v_out.clone() }),
    }
}

/// Plant replay of `agg` with relaxation time `tau`, sampled at the
/// aggregate's cell centres. The time step is halved up to three times if
/// the run trips the CFL check.
pub fn replay<T: Real>(
    agg: &AggregatedGrid<T>,
    fd: &FundamentalDiagram<T>,
    tau: T,
    cfl_safety: T,
    max_gap: T,
) -> Result<Trajectory<T>> {
    let d = &agg.domain;
    let (length, total) = (d.x1 - d.x0, d.t1 - d.t0);
    let ic = row_field(agg, 0)?;
    let (meas, _) = boundary_series(agg, max_gap)?;
    let bc = replay_boundary(&meas, d.t0);
    let mut grid = Grid::from_cfl(length, agg.n_x, total, &ic, fd, cfl_safety)?;
    let mut attempt = 0;
    let run = loop {
        match simulate_plant(&ic, &bc, fd, tau, &grid, 1) {
            Err(Error::Cfl { .. }) if attempt < 3 => {
                attempt += 1;
                grid = Grid::with_max_dt(length, agg.n_x, total, grid.dt / T::lit(2.0))?;
            }
            other => break other?,
        }
    };
    let times: Vec<T> = agg.t_centers().iter().map(|&t| t - d.t0).collect();
    let x: Vec<T> = agg.x_centers().iter().map(|&x| x - d.x0).collect();
    let mut out = resample(&run.trajectory, &times, &x)?;
    out.times = agg.t_centers();
    out.x = agg.x_centers();
    Ok(out)
}

/// Time mean of `E_rho + E_v` between a replay and the data, normalized by
/// the data averages.
pub fn replay_score<T: Real>(agg: &AggregatedGrid<T>, replayed: &Trajectory<T>) -> Result<T> {
    let avg = dataset_averages(agg)?;
    let (data, masks) = agg.to_trajectory();
    let e = l2_error_series_masked(&data, replayed, avg.rho, avg.v, Some(&masks))?;
    if e.is_empty() {
        return Err(Error::Data("no non-empty cells to score".into()));
    }
    let sum = (0..e.len()).fold(T::zero(), |s, k| s + e.e_rho[k] + e.e_v[k]);
    Ok(sum / T::count(e.len()))
}

/// Scores every `tau` and returns the best. Numerical failures are recorded
/// as unscored; data errors abort.
pub fn select_relaxation_time<T: Real>(
    agg: &AggregatedGrid<T>,
    fd: &FundamentalDiagram<T>,
    taus: &[T],
    cfl_safety: T,
    max_gap: T,
) -> Result<TauSelection<T>> {
    if taus.is_empty() {
        return Err(Error::InvalidParameter("empty relaxation-time grid".into()));
    }
    let mut scores = Vec::with_capacity(taus.len());
    for &tau in taus {
        let score = match replay(agg, fd, tau, cfl_safety, max_gap) {
            Ok(traj) => Some(replay_score(agg, &traj)?),
            Err(e) if e.is_numerical() => None,
            Err(e) => return Err(e),
        };
        scores.push(TauScore { tau, score });
    }
    let best = scores
        .iter()
        .filter_map(|s| s.score.map(|v| (s.tau, v)))
        .fold(None, |acc: Option<(T, T)>, (t, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((t, v)),
        })
        .ok_or_else(|| Error::Data("every relaxation time failed to replay the data".into()))?;
    Ok(TauSelection {
        best_tau: best.0,
        best_score: best.1,
        scores,
    })
}
