//! Vehicle trajectories to macroscopic fields.
//!
//! Edie's definitions on a cell of size `dx * dt`:
//!
//! ```text
//! rho = sum_k t_k / (dx dt),   q = sum_k x_k / (dx dt),   v = q / rho
//! ```
//!
//! with `t_k` the time vehicle `k` spends in the cell and `x_k` the distance
//! it covers there. Trajectories are piecewise linear between samples and
//! are clipped against the cell rectangles exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::FundamentalDiagram;
use crate::linearize::ReferenceState;
use crate::observer::BoundaryMeasurements;
use crate::scalar::Real;
use crate::solver::{interpolate, Signal, StateField, Trajectory};
use crate::units;

/// Default aggregation grid (time cells, space cells).
pub const DEFAULT_GRID: (usize, usize) = (41, 41);

/// NGSIM frame period [s].
pub const NGSIM_FRAME_S: f64 = 0.1;
/// Feet to metres.
pub const FEET: f64 = 0.3048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrace<T> {
    pub id: String,
    /// Strictly increasing sample times [s].
    pub t: Vec<T>,
    /// Positions [m].
    pub x: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset<T> {
    pub vehicles: Vec<VehicleTrace<T>>,
    /// Sampling period [s].
    pub resolution: T,
    /// Number of vehicles each trace stands for.
    pub weight: T,
}

impl<T: Real> TrajectoryDataset<T> {
    /// Groups `(vehicle_id, t, x)` records by vehicle and sorts them in time.
    /// The resolution is the smallest positive sampling interval found.
    pub fn from_records(records: impl IntoIterator<Item = (String, T, T)>) -> Result<Self> {
        let mut by_id: BTreeMap<String, Vec<(T, T)>> = BTreeMap::new();
        for (id, t, x) in records {
            if !(t.is_finite() && x.is_finite()) {
                return Err(Error::Data(format!("vehicle {id}: non-finite sample")));
            }
            by_id.entry(id).or_default().push((t, x));
        }
        if by_id.is_empty() {
            return Err(Error::Data("trajectory dataset is empty".into()));
        }
        let mut resolution = T::infinity();
        let mut vehicles = Vec::with_capacity(by_id.len());
        for (id, mut samples) in by_id {
            samples.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
            for w in samples.windows(2) {
                let gap = w[1].0 - w[0].0;
                if gap == T::zero() {
                    return Err(Error::Data(format!("vehicle {id}: two samples at t = {}", w[0].0)));
                }
                resolution = resolution.min(gap);
            }
            vehicles.push(VehicleTrace {
                id,
                t: samples.iter().map(|s| s.0).collect(),
                x: samples.iter().map(|s| s.1).collect(),
            });
        }
        if !resolution.is_finite() {
            resolution = T::lit(NGSIM_FRAME_S);
        }
        Ok(Self {
            vehicles,
            resolution,
            weight: T::one(),
        })
    }

    pub fn with_weight(mut self, weight: T) -> Self {
        self.weight = weight;
        self
    }

    /// Reads `vehicle_id, time_s, position_m`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        read_columns(input, ["vehicle_id", "time_s", "position_m"], 1.0, 1.0)
    }

    /// Reads NGSIM's native columns: `Vehicle_ID`, `Frame_ID` (0.1 s frames)
    /// and `Local_Y` (feet along the road). All lanes are pooled.
    pub fn read_ngsim_csv<R: Read>(input: R) -> Result<Self> {
        read_columns(input, ["Vehicle_ID", "Frame_ID", "Local_Y"], NGSIM_FRAME_S, FEET)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["vehicle_id", "time_s", "position_m"])?;
        for v in &self.vehicles {
            for (t, x) in v.t.iter().zip(&v.x) {
                w.write_record(&[v.id.clone(), t.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Smallest rectangle containing every sample.
    pub fn bounds(&self) -> Domain<T> {
        let (mut t0, mut t1, mut x0, mut x1) = (T::infinity(), T::neg_infinity(), T::infinity(), T::neg_infinity());
        for v in &self.vehicles {
            for (&t, &x) in v.t.iter().zip(&v.x) {
                t0 = t0.min(t);
                t1 = t1.max(t);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
        Domain { t0, t1, x0, x1 }
    }

    /// Total time all traces spend inside `domain` [s].
    pub fn time_inside(&self, domain: &Domain<T>) -> T {
        let mut total = T::zero();
        for v in &self.vehicles {
            for k in 1..v.t.len() {
                if let Some((s0, s1)) = domain.clip(v.t[k - 1], v.x[k - 1], v.t[k], v.x[k]) {
                    total = total + (s1 - s0) * (v.t[k] - v.t[k - 1]);
                }
            }
        }
        total
    }
}

fn read_columns<T: Real, R: Read>(input: R, names: [&str; 3], t_scale: f64, x_scale: f64) -> Result<TrajectoryDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 3];
    for (slot, name) in idx.iter_mut().zip(names) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("trajectory CSV lacks column `{name}`")))?;
    }
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("trajectory CSV row {}: bad number in `{}`", row + 2, names[i.min(2)])))
        };
        let id = rec.get(idx[0]).unwrap_or_default().to_string();
        records.push((id, T::lit(num(idx[1])? * t_scale), T::lit(num(idx[2])? * x_scale)));
    }
    TrajectoryDataset::from_records(records)
}

/// Space-time rectangle `[t0, t1] x [x0, x1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain<T> {
    pub t0: T,
    pub t1: T,
    pub x0: T,
    pub x1: T,
}

impl<T: Real> Domain<T> {
    pub fn new(t0: T, t1: T, x0: T, x1: T) -> Result<Self> {
        if !(t1 > t0 && x1 > x0) {
            return Err(Error::InvalidParameter(format!(
                "empty domain [{t0}, {t1}] x [{x0}, {x1}]"
            )));
        }
        Ok(Self { t0, t1, x0, x1 })
    }

    /// Parameter range `[s0, s1]` of the segment `(ta, xa) -> (tb, xb)` inside
    /// the rectangle, if it has positive duration.
    fn clip(&self, ta: T, xa: T, tb: T, xb: T) -> Option<(T, T)> {
        let dt = tb - ta;
        let dx = xb - xa;
        let (mut lo, mut hi) = (T::zero(), T::one());
        lo = lo.max((self.t0 - ta) / dt);
        hi = hi.min((self.t1 - ta) / dt);
        if dx == T::zero() {
            if xa < self.x0 || xa > self.x1 {
                return None;
            }
        } else {
            let (a, b) = ((self.x0 - xa) / dx, (self.x1 - xa) / dx);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (hi > lo).then_some((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedGrid<T> {
    pub domain: Domain<T>,
    pub n_t: usize,
    pub n_x: usize,
    /// Weight applied to every trace.
    pub weight: T,
    /// Trace-seconds per cell, row-major in `(time, space)`.
    pub time_spent: Vec<T>,
    /// Trace-metres per cell.
    pub distance: Vec<T>,
    /// Sorted indices of the traces present in each cell.
    pub traces: Vec<Vec<u32>>,
}

/// Edie aggregation of `data` on an `n_t x n_x` grid over `domain`.
pub fn edie_aggregate<T: Real>(data: &TrajectoryDataset<T>, n_t: usize, n_x: usize, domain: &Domain<T>) -> Result<AggregatedGrid<T>> {
    if data.vehicles.is_empty() {
        return Err(Error::Data("trajectory dataset is empty".into()));
    }
    if n_t == 0 || n_x == 0 {
        return Err(Error::InvalidParameter("aggregation grid needs at least one cell per axis".into()));
    }
    Domain::new(domain.t0, domain.t1, domain.x0, domain.x1)?;
    let cells = n_t * n_x;
    let mut grid = AggregatedGrid {
        domain: *domain,
        n_t,
        n_x,
        weight: data.weight,
        time_spent: vec![T::zero(); cells],
        distance: vec![T::zero(); cells],
        traces: vec![Vec::new(); cells],
    };
    let cell_t = (domain.t1 - domain.t0) / T::count(n_t);
    let cell_x = (domain.x1 - domain.x0) / T::count(n_x);
    let index = |v: T, origin: T, h: T, n: usize| -> usize {
        let k = ((v - origin) / h).floor();
        if k < T::zero() { 0 } else { k.to_usize().unwrap_or(n - 1).min(n - 1) }
    };

    let mut breaks: Vec<T> = Vec::new();
    for (vid, veh) in data.vehicles.iter().enumerate() {
        let vid = vid as u32;
        for k in 1..veh.t.len() {
            let (ta, xa, tb, xb) = (veh.t[k - 1], veh.x[k - 1], veh.t[k], veh.x[k]);
            let Some((s0, s1)) = domain.clip(ta, xa, tb, xb) else { continue };
            let (dt, dx) = (tb - ta, xb - xa);
            breaks.clear();
            breaks.push(s0);
            breaks.push(s1);
            // time edges
            let (i0, i1) = (index(ta + s0 * dt, domain.t0, cell_t, n_t), index(ta + s1 * dt, domain.t0, cell_t, n_t));
            for i in (i0 + 1)..=i1 {
                let s = (domain.t0 + T::count(i) * cell_t - ta) / dt;
                if s > s0 && s < s1 {
                    breaks.push(s);
                }
            }
            // space edges
            if dx != T::zero() {
                let (xs, xe) = (xa + s0 * dx, xa + s1 * dx);
                let (j0, j1) = (index(xs.min(xe), domain.x0, cell_x, n_x), index(xs.max(xe), domain.x0, cell_x, n_x));
                for j in (j0 + 1)..=j1 {
                    let s = (domain.x0 + T::count(j) * cell_x - xa) / dx;
                    if s > s0 && s < s1 {
                        breaks.push(s);
                    }
                }
            }
            breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            for w in breaks.windows(2) {
                let ds = w[1] - w[0];
                if !(ds > T::zero()) {
                    continue;
                }
                let sm = T::lit(0.5) * (w[0] + w[1]);
                let i = index(ta + sm * dt, domain.t0, cell_t, n_t);
                let j = index(xa + sm * dx, domain.x0, cell_x, n_x);
                let c = i * n_x + j;
                grid.time_spent[c] = grid.time_spent[c] + ds * dt;
                grid.distance[c] = grid.distance[c] + ds * dx;
                if grid.traces[c].last() != Some(&vid) {
                    grid.traces[c].push(vid);
                }
            }
        }
    }
    // a trace can revisit a cell after leaving it, so sort and dedup
    for t in &mut grid.traces {
        t.sort_unstable();
        t.dedup();
    }
    Ok(grid)
}

impl<T: Real> AggregatedGrid<T> {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_x + j
    }

    pub fn cell_dt(&self) -> T {
        (self.domain.t1 - self.domain.t0) / T::count(self.n_t)
    }

    pub fn cell_dx(&self) -> T {
        (self.domain.x1 - self.domain.x0) / T::count(self.n_x)
    }

    pub fn t_centers(&self) -> Vec<T> {
        (0..self.n_t)
            .map(|i| self.domain.t0 + (T::count(i) + T::lit(0.5)) * self.cell_dt())
            .collect()
    }

    pub fn x_centers(&self) -> Vec<T> {
        (0..self.n_x)
            .map(|j| self.domain.x0 + (T::count(j) + T::lit(0.5)) * self.cell_dx())
            .collect()
    }

    /// Number of distinct traces in cell `(i, j)`.
    pub fn count(&self, i: usize, j: usize) -> usize {
        self.traces[self.idx(i, j)].len()
    }

    pub fn is_empty_cell(&self, i: usize, j: usize) -> bool {
        self.count(i, j) == 0
    }

    /// `rho = w sum t_k / (dx dt)`; `None` for empty cells.
    pub fn density(&self, i: usize, j: usize) -> Option<T> {
        let c = self.idx(i, j);
        (!self.traces[c].is_empty()).then(|| self.weight * self.time_spent[c] / (self.cell_dx() * self.cell_dt()))
    }

    /// `q = w sum x_k / (dx dt)`; `None` for empty cells.
    pub fn flow(&self, i: usize, j: usize) -> Option<T> {
        let c = self.idx(i, j);
        (!self.traces[c].is_empty()).then(|| self.weight * self.distance[c] / (self.cell_dx() * self.cell_dt()))
    }

    /// `v = q / rho`; `None` for empty cells.
    pub fn velocity(&self, i: usize, j: usize) -> Option<T> {
        Some(self.flow(i, j)? / self.density(i, j)?)
    }

    /// Merges blocks of `ft x fx` cells; both factors must divide the grid.
    pub fn coarsen(&self, ft: usize, fx: usize) -> Result<Self> {
        if ft == 0 || fx == 0 || !self.n_t.is_multiple_of(ft) || !self.n_x.is_multiple_of(fx) {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} x {} cells by {ft} x {fx}",
                self.n_t, self.n_x
            )));
        }
        let (n_t, n_x) = (self.n_t / ft, self.n_x / fx);
        let mut out = Self {
            domain: self.domain,
            n_t,
            n_x,
            weight: self.weight,
            time_spent: vec![T::zero(); n_t * n_x],
            distance: vec![T::zero(); n_t * n_x],
            traces: vec![Vec::new(); n_t * n_x],
        };
        for i in 0..self.n_t {
            for j in 0..self.n_x {
                let (c, f) = ((i / ft) * n_x + j / fx, self.idx(i, j));
                out.time_spent[c] = out.time_spent[c] + self.time_spent[f];
                out.distance[c] = out.distance[c] + self.distance[f];
                out.traces[c].extend_from_slice(&self.traces[f]);
            }
        }
        for t in &mut out.traces {
            t.sort_unstable();
            t.dedup();
        }
        Ok(out)
    }

    /// Fields at the time-cell centres on the space-cell centres, and a mask
    /// that is false on empty cells (whose values are set to zero).
    pub fn to_trajectory(&self) -> (Trajectory<T>, Vec<Vec<bool>>) {
        let mut traj = Trajectory::new(self.x_centers());
        let mut masks = Vec::with_capacity(self.n_t);
        for (i, t) in self.t_centers().into_iter().enumerate() {
            let rho = (0..self.n_x).map(|j| self.density(i, j).unwrap_or_else(T::zero)).collect();
            let v = (0..self.n_x).map(|j| self.velocity(i, j).unwrap_or_else(T::zero)).collect();
            traj.push(t, StateField { rho, v });
            masks.push((0..self.n_x).map(|j| !self.is_empty_cell(i, j)).collect());
        }
        (traj, masks)
    }

    /// Writes `t_index, x_index, t_center_s, x_center_m, rho_veh_per_km,
    /// flow_veh_per_h, v_km_per_h, n_traces`; empty cells leave the three
    /// field columns blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t_index",
            "x_index",
            "t_center_s",
            "x_center_m",
            "rho_veh_per_km",
            "flow_veh_per_h",
            "v_km_per_h",
            "n_traces",
        ])?;
        let (tc, xc) = (self.t_centers(), self.x_centers());
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for i in 0..self.n_t {
            for j in 0..self.n_x {
                w.write_record(&[
                    i.to_string(),
                    j.to_string(),
                    tc[i].to_string(),
                    xc[j].to_string(),
                    fmt(self.density(i, j).map(|r| units::density_to_per_km(r.as_f64()))),
                    fmt(self.flow(i, j).map(|q| units::flow_to_per_h(q.as_f64()))),
                    fmt(self.velocity(i, j).map(|v| units::velocity_to_kmh(v.as_f64()))),
                    self.count(i, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetAverages<T> {
    /// Mean density over non-empty cells [veh/m].
    pub rho: T,
    /// Mean velocity over non-empty cells [m/s].
    pub v: T,
    /// `rho * v`, the flow used for the reference [veh/s].
    pub q: T,
    /// Mean of the cell flows [veh/s].
    pub q_direct: T,
    pub nonempty_cells: usize,
}

impl<T: Real> DatasetAverages<T> {
    /// Relative gap between `rho * v` and the direct flow mean.
    pub fn flow_discrepancy(&self) -> T {
        (self.q - self.q_direct).abs() / self.q_direct.abs().max(T::min_positive_value())
    }

    pub fn reference(&self, fd: &FundamentalDiagram<T>) -> Result<ReferenceState<T>> {
        ReferenceState::from_averages(fd, self.rho, self.v)
    }
}

pub fn dataset_averages<T: Real>(agg: &AggregatedGrid<T>) -> Result<DatasetAverages<T>> {
    let (mut rho, mut v, mut q, mut n) = (T::zero(), T::zero(), T::zero(), 0usize);
    for i in 0..agg.n_t {
        for j in 0..agg.n_x {
            if let (Some(r), Some(f), Some(s)) = (agg.density(i, j), agg.flow(i, j), agg.velocity(i, j)) {
                rho = rho + r;
                q = q + f;
                v = v + s;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("aggregated grid has no non-empty cell".into()));
    }
    let k = T::count(n);
    let (rho, v, q_direct) = (rho / k, v / k, q / k);
    Ok(DatasetAverages {
        rho,
        v,
        q: rho * v,
        q_direct,
        nonempty_cells: n,
    })
}

/// A run of empty boundary cells filled by interpolation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapInterval<T> {
    pub column: &'static str,
    /// Last valid sample before the gap, or the first sample time if the
    /// series starts empty.
    pub t_start: T,
    /// First valid sample after the gap, or the last sample time.
    pub t_end: T,
    pub filled: usize,
}

fn fill_gaps<T: Real>(
    column: &'static str,
    times: &[T],
    values: &[Option<T>],
    max_gap: T,
    report: &mut Vec<GapInterval<T>>,
) -> Result<Vec<T>> {
    let valid: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    if valid.is_empty() {
        return Err(Error::Data(format!("boundary column `{column}` has no data")));
    }
    let n = times.len();
    let mut out = vec![T::zero(); n];
    let vt: Vec<T> = valid.iter().map(|&i| times[i]).collect();
    let vv: Vec<T> = valid.iter().map(|&i| values[i].expect("valid")).collect();
    let mut i = 0;
    while i < n {
        if let Some(v) = values[i] {
            out[i] = v;
            i += 1;
            continue;
        }
        let start = i;
        while i < n && values[i].is_none() {
            i += 1;
        }
        let t_start = if start == 0 { times[0] } else { times[start - 1] };
        let t_end = if i == n { times[n - 1] } else { times[i] };
        if t_end - t_start > max_gap {
            return Err(Error::Data(format!(
                "boundary column `{column}` has no data in [{t_start}, {t_end}] s, longer than the {max_gap} s tolerance"
            )));
        }
        for (k, slot) in out.iter_mut().enumerate().take(i).skip(start) {
            *slot = interpolate(&vt, &vv, times[k]);
        }
        report.push(GapInterval {
            column,
            t_start,
            t_end,
            filled: i - start,
        });
    }
    Ok(out)
}

/// Boundary signals from the first and last space columns: inlet flow,
/// outlet flow and outlet velocity at the time-cell centres. Empty cells are
/// interpolated when the surrounding gap is at most `max_gap`.
pub fn boundary_series<T: Real>(agg: &AggregatedGrid<T>, max_gap: T) -> Result<(BoundaryMeasurements<T>, Vec<GapInterval<T>>)> {
    let times = agg.t_centers();
    let last = agg.n_x - 1;
    let mut report = Vec::new();
    let q_in = fill_gaps("q_in", &times, &(0..agg.n_t).map(|i| agg.flow(i, 0)).collect::<Vec<_>>(), max_gap, &mut report)?;
    let q_out = fill_gaps("q_out", &times, &(0..agg.n_t).map(|i| agg.flow(i, last)).collect::<Vec<_>>(), max_gap, &mut report)?;
    let v_out = fill_gaps("v_out", &times, &(0..agg.n_t).map(|i| agg.velocity(i, last)).collect::<Vec<_>>(), max_gap, &mut report)?;
    Ok((BoundaryMeasurements::new(times, q_in, q_out, v_out)?, report))
}

/// Synthetic vehicles riding a simulated velocity field.
///
/// Each trace stands for `1 / per_vehicle` vehicles. Traces are seeded at
/// the quantiles of the initial density and enter at `x = 0` at the
/// quantiles of the cumulative inflow, then move with `dx/dt = v(x, t)`
/// (Heun's method between snapshots, linear interpolation in `x`). A trace
/// stops when it reaches the end of the segment.
pub fn synthesize_fleet<T: Real>(
    traj: &Trajectory<T>,
    inflow: &Signal<T>,
    length: T,
    per_vehicle: T,
) -> Result<TrajectoryDataset<T>> {
    if traj.fields.is_empty() {
        return Err(Error::Data("plant trajectory has no snapshots".into()));
    }
    if !(per_vehicle > T::zero()) {
        return Err(Error::domain("per_vehicle", per_vehicle.as_f64(), 0.0, f64::INFINITY));
    }
    let half = T::lit(0.5);
    let m = traj.x.len();
    let dx = length / T::count(m);

    let mut traces: Vec<VehicleTrace<T>> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut pos: Vec<T> = Vec::new();
    let t0 = traj.times[0];

    // initial vehicles: quantiles of the piecewise-constant initial density
    let rho0 = &traj.fields[0].rho;
    let total = rho0.iter().fold(T::zero(), |s, &r| s + r * dx) * per_vehicle;
    let n0 = total.floor().to_usize().unwrap_or(0);
    let (mut cum, mut j) = (T::zero(), 0);
    for n in 0..n0 {
        let target = (T::count(n) + half) / per_vehicle;
        while j < m && cum + rho0[j] * dx < target {
            cum = cum + rho0[j] * dx;
            j += 1;
        }
        let x = if j < m { T::count(j) * dx + (target - cum) / rho0[j] } else { length };
        let x = x.min(length);
        traces.push(VehicleTrace {
            id: format!("v{}", traces.len()),
            t: vec![t0],
            x: vec![x],
        });
        active.push(traces.len() - 1);
        pos.push(x);
    }

    let velocity = |k: usize, x: T| interpolate(&traj.x, &traj.fields[k].v, x);
    let mut entered = T::zero();
    let mut next_entry = half / per_vehicle;
    for k in 0..traj.times.len() - 1 {
        let (ta, tb) = (traj.times[k], traj.times[k + 1]);
        let h = tb - ta;
        // inflow accumulated over the interval, trapezoid rule
        let (qa, qb) = (inflow.at(ta), inflow.at(tb));
        let gained = half * h * (qa + qb);
        while entered + gained >= next_entry {
            let frac = if gained > T::zero() { (next_entry - entered) / gained } else { T::zero() };
            let te = ta + frac * h;
            traces.push(VehicleTrace {
                id: format!("v{}", traces.len()),
                t: vec![te],
                x: vec![T::zero()],
            });
            active.push(traces.len() - 1);
            pos.push(T::zero());
            next_entry = next_entry + T::one() / per_vehicle;
        }
        entered = entered + gained;

        let mut keep = Vec::with_capacity(active.len());
        for (slot, &id) in active.iter().enumerate() {
            let tr = &mut traces[id];
            let start_t = *tr.t.last().expect("non-empty trace");
            let x = pos[slot];
            let hh = tb - start_t;
            let v1 = velocity(k, x);
            let pred = x + hh * v1;
            let v2 = velocity(k + 1, pred);
            let xn = x + half * hh * (v1 + v2);
            if xn >= length {
                let te = if xn > x { start_t + hh * (length - x) / (xn - x) } else { tb };
                tr.t.push(te.max(start_t + T::lit(1e-9) * (T::one() + start_t.abs())));
                tr.x.push(length);
            } else {
                tr.t.push(tb);
                tr.x.push(xn);
                keep.push((id, xn));
            }
        }
        active = keep.iter().map(|k| k.0).collect();
        pos = keep.iter().map(|k| k.1).collect();
    }
    let resolution = traj
        .times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(T::infinity(), T::min);
    Ok(TrajectoryDataset {
        vehicles: traces,
        resolution,
        weight: T::one() / per_vehicle,
    })
}

/// Linear interpolation of a trajectory in time and space onto new sample
/// times and nodes.
pub fn resample<T: Real>(traj: &Trajectory<T>, times: &[T], x: &[T]) -> Result<Trajectory<T>> {
    if traj.fields.is_empty() {
        return Err(Error::Data("trajectory has no snapshots".into()));
    }
    let mut out = Trajectory::new(x.to_vec());
    let n = traj.times.len();
    for &t in times {
        let k = traj.times.partition_point(|&s| s <= t);
        let (a, b, w) = if k == 0 {
            (0, 0, T::zero())
        } else if k == n {
            (n - 1, n - 1, T::zero())
        } else {
            let (t0, t1) = (traj.times[k - 1], traj.times[k]);
            (k - 1, k, (t - t0) / (t1 - t0))
        };
        let at = |f: &StateField<T>, xi: T| (interpolate(&traj.x, &f.rho, xi), interpolate(&traj.x, &f.v, xi));
        let (mut rho, mut v) = (Vec::with_capacity(x.len()), Vec::with_capacity(x.len()));
        for &xi in x {
            let (ra, va) = at(&traj.fields[a], xi);
            let (rb, vb) = at(&traj.fields[b], xi);
            rho.push(ra + w * (rb - ra));
            v.push(va + w * (vb - va));
        }
        out.push(t, StateField { rho, v });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(id: &str, t0: f64, x0: f64, speed: f64, n: usize, h: f64) -> VehicleTrace<f64> {
        VehicleTrace {
            id: id.into(),
            t: (0..n).map(|k| t0 + k as f64 * h).collect(),
            x: (0..n).map(|k| x0 + speed * k as f64 * h).collect(),
        }
    }

    fn dataset(vehicles: Vec<VehicleTrace<f64>>) -> TrajectoryDataset<f64> {
        TrajectoryDataset { vehicles, resolution: 0.1, weight: 1.0 }
    }

    #[test]
    fn single_vehicle_hand_computation() {
        // crosses [0, 100] m during [0, 10] s at 10 m/s, sampled at 0.3 s
        let d = dataset(vec![straight("a", -1.0, -10.0, 10.0, 50, 0.3)]);
        let g = edie_aggregate(&d, 1, 1, &Domain::new(0.0, 10.0, 0.0, 100.0).unwrap()).unwrap();
        assert_relative_eq!(g.time_spent[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(g.distance[0], 100.0, epsilon = 1e-12);
        assert_relative_eq!(g.density(0, 0).unwrap(), 0.01, epsilon = 1e-15);
        assert_relative_eq!(g.flow(0, 0).unwrap(), 0.1, epsilon = 1e-15);
        assert_relative_eq!(g.velocity(0, 0).unwrap(), 10.0, epsilon = 1e-12);
        assert_eq!(g.count(0, 0), 1);
    }

    #[test]
    fn synchronized_copies_scale_linearly() {
        let one = edie_aggregate(&dataset(vec![straight("a", 0.0, 0.0, 7.0, 20, 1.0)]), 2, 3, &Domain::new(0.0, 10.0, 0.0, 60.0).unwrap()).unwrap();
        let k = 4;
        let many: Vec<_> = (0..k).map(|i| straight(&format!("c{i}"), 0.0, 0.0, 7.0, 20, 1.0)).collect();
        let g = edie_aggregate(&dataset(many), 2, 3, &Domain::new(0.0, 10.0, 0.0, 60.0).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                match (one.density(i, j), g.density(i, j)) {
                    (Some(a), Some(b)) => {
                        assert_relative_eq!(b, k as f64 * a, max_relative = 1e-12);
                        assert_relative_eq!(g.flow(i, j).unwrap(), k as f64 * one.flow(i, j).unwrap(), max_relative = 1e-12);
                        assert_relative_eq!(g.velocity(i, j).unwrap(), one.velocity(i, j).unwrap(), max_relative = 1e-12);
                        assert_eq!(g.count(i, j), k * one.count(i, j));
                    }
                    (None, None) => {}
                    other => panic!("emptiness differs: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn empty_cells_are_flagged() {
        let d = dataset(vec![straight("a", 0.0, 0.0, 1.0, 11, 1.0)]);
        let g = edie_aggregate(&d, 1, 2, &Domain::new(0.0, 10.0, 0.0, 20.0).unwrap()).unwrap();
        assert!(g.density(0, 0).is_some());
        assert!(g.is_empty_cell(0, 1));
        assert_eq!(g.density(0, 1), None);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(2).unwrap().ends_with(",,,0"), "{text}");
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(TrajectoryDataset::<f64>::from_records(Vec::new()).is_err());
        let d = dataset(vec![]);
        assert!(edie_aggregate(&d, 2, 2, &Domain::new(0.0, 1.0, 0.0, 1.0).unwrap()).is_err());
    }

    fn wiggly_fleet(seed: u64) -> TrajectoryDataset<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vehicles = (0..30)
            .map(|k| {
                let (mut t, mut x) = (rng.gen_range(-20.0..60.0), rng.gen_range(-50.0..200.0));
                let mut tr = VehicleTrace { id: format!("{k}"), t: vec![t], x: vec![x] };
                for _ in 0..200 {
                    t += rng.gen_range(0.05..0.5);
                    x += rng.gen_range(-0.5..6.0);
                    tr.t.push(t);
                    tr.x.push(x);
                }
                tr
            })
            .collect();
        dataset(vehicles)
    }

    #[test]
    fn count_conservation() {
        let d = wiggly_fleet(3);
        let dom = Domain::new(0.0, 60.0, 0.0, 300.0).unwrap();
        let g = edie_aggregate(&d, 12, 30, &dom).unwrap();
        let total: f64 = g.time_spent.iter().sum();
        assert_relative_eq!(total, d.time_inside(&dom), max_relative = 1e-12);
    }

    #[test]
    fn coarsening_matches_reaggregation() {
        let d = wiggly_fleet(5);
        let dom = Domain::new(0.0, 60.0, 0.0, 300.0).unwrap();
        let fine = edie_aggregate(&d, 12, 30, &dom).unwrap();
        let coarse = edie_aggregate(&d, 4, 6, &dom).unwrap();
        let merged = fine.coarsen(3, 5).unwrap();
        assert_eq!(merged.traces, coarse.traces);
        for c in 0..coarse.time_spent.len() {
            assert_relative_eq!(merged.time_spent[c], coarse.time_spent[c], max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(merged.distance[c], coarse.distance[c], max_relative = 1e-12, epsilon = 1e-12);
        }
        assert!(fine.coarsen(5, 5).is_err());
    }

    #[test]
    fn edie_identity() {
        let d = wiggly_fleet(9);
        let g = edie_aggregate(&d, 10, 10, &Domain::new(0.0, 60.0, 0.0, 300.0).unwrap()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if let Some(v) = g.velocity(i, j) {
                    let q_over_rho = g.flow(i, j).unwrap() / g.density(i, j).unwrap();
                    assert!((v - q_over_rho).abs() <= 1e-12 * v.abs());
                }
            }
        }
    }

    fn grid_from(rho: &[Vec<Option<f64>>], v: f64) -> AggregatedGrid<f64> {
        let (n_t, n_x) = (rho.len(), rho[0].len());
        let dom = Domain::new(0.0, n_t as f64, 0.0, n_x as f64).unwrap();
        let mut g = AggregatedGrid {
            domain: dom,
            n_t,
            n_x,
            weight: 1.0,
            time_spent: vec![0.0; n_t * n_x],
            distance: vec![0.0; n_t * n_x],
            traces: vec![vec![]; n_t * n_x],
        };
        for i in 0..n_t {
            for j in 0..n_x {
                if let Some(r) = rho[i][j] {
                    let c = i * n_x + j;
                    g.time_spent[c] = r;
                    g.distance[c] = r * v;
                    g.traces[c] = vec![0];
                }
            }
        }
        g
    }

    #[test]
    fn averages_examples() {
        let g = grid_from(&vec![vec![Some(0.1); 4]; 3], 8.0);
        let a = dataset_averages(&g).unwrap();
        assert_relative_eq!(a.rho, 0.1, epsilon = 1e-15);
        assert_relative_eq!(a.v, 8.0, epsilon = 1e-12);
        assert_relative_eq!(a.q, 0.8, epsilon = 1e-12);
        let checker: Vec<Vec<Option<f64>>> = (0..4)
            .map(|i| (0..4).map(|j| Some(if (i + j) % 2 == 0 { 0.1 } else { 0.3 })).collect())
            .collect();
        assert_relative_eq!(dataset_averages(&grid_from(&checker, 5.0)).unwrap().rho, 0.2, epsilon = 1e-15);
        assert!(dataset_averages(&grid_from(&vec![vec![None; 2]; 2], 1.0)).is_err());
    }

    #[test]
    fn boundary_series_interpolates_short_gaps() {
        let mut cells = vec![vec![Some(0.1), Some(0.1)]; 5];
        cells[2][1] = None;
        let g = grid_from(&cells, 10.0);
        let (m, report) = boundary_series(&g, 2.5).unwrap();
        assert_eq!(m.len(), 5);
        assert_relative_eq!(m.q_out[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.v_out[2], 10.0, epsilon = 1e-12);
        assert_eq!(report.len(), 2);
        assert_eq!((report[0].column, report[0].t_start, report[0].t_end), ("q_out", 1.5, 3.5));
        let err = boundary_series(&g, 1.5).unwrap_err();
        assert!(err.is_data() && err.to_string().contains("[1.5, 3.5]"), "{err}");
    }

    #[test]
    fn single_row_series() {
        let g = grid_from(&[vec![Some(0.1), Some(0.2)]], 5.0);
        let (m, report) = boundary_series(&g, 1.0).unwrap();
        assert_eq!(m.len(), 1);
        assert!(report.is_empty());
    }

    #[test]
    fn csv_round_trip_and_ngsim_adapter() {
        let d = dataset(vec![straight("7", 0.0, 0.0, 10.0, 3, 0.1)]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = TrajectoryDataset::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.vehicles, d.vehicles);
        let ngsim = "Vehicle_ID,Frame_ID,Lane_ID,Local_Y\n5,101,2,10.0\n5,100,2,0.0\n6,100,1,3.0\n";
        let n = TrajectoryDataset::<f64>::read_ngsim_csv(ngsim.as_bytes()).unwrap();
        assert_eq!(n.vehicles.len(), 2);
        assert_relative_eq!(n.vehicles[0].t[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(n.vehicles[0].x[1], 3.048, epsilon = 1e-12);
        assert_relative_eq!(n.resolution, 0.1, epsilon = 1e-12);
        assert!(TrajectoryDataset::<f64>::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn uniform_fleet_reproduces_uniform_field() {
        // uniform field rho = 0.1, v = 10 with inflow 1 veh/s
        let x: Vec<f64> = (0..40).map(|j| (j as f64 + 0.5) * 10.0).collect();
        let mut traj = Trajectory::new(x);
        for k in 0..=600 {
            traj.push(k as f64 * 0.2, StateField::uniform(40, 0.1, 10.0));
        }
        let d = synthesize_fleet(&traj, &Signal::Constant(1.0), 400.0, 4.0).unwrap();
        let g = edie_aggregate(&d, 10, 8, &Domain::new(0.0, 120.0, 0.0, 400.0).unwrap()).unwrap();
        for i in 0..10 {
            for j in 0..8 {
                assert_relative_eq!(g.density(i, j).unwrap(), 0.1, max_relative = 0.02);
                assert_relative_eq!(g.velocity(i, j).unwrap(), 10.0, max_relative = 1e-9);
            }
        }
    }
}
