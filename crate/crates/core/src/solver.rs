//! Finite-volume solver for
//!
//! ```text
//! rho_t + (rho v)_x = 0
//! y_t + (y v)_x     = -y / tau,        y = rho (v - V(rho))
//! ```
//!
//! advanced by the two-stage Lax–Wendroff scheme with the relaxation source
//! integrated inside both stages. One ghost cell per side carries the
//! boundary data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::FundamentalDiagram;
use crate::observer::BoundaryMeasurements;
use crate::scalar::Real;
use crate::units;

/// Default CFL safety factor.
pub const DEFAULT_CFL_SAFETY: f64 = 0.9;

/// Densities up to `rho_m (1 + DENSITY_SLACK)` are tolerated before a state
/// is declared blown up.
pub const DENSITY_SLACK: f64 = 0.25;

/// Equilibrium velocity law driving the solver.
pub trait EquilibriumModel<T: Real> {
    fn velocity(&self, rho: T) -> T;
    fn velocity_derivative(&self, rho: T) -> T;
    fn rho_max(&self) -> T {
        T::infinity()
    }
}

impl<T: Real> EquilibriumModel<T> for FundamentalDiagram<T> {
    fn velocity(&self, rho: T) -> T {
        FundamentalDiagram::velocity(self, rho)
    }
    fn velocity_derivative(&self, rho: T) -> T {
        FundamentalDiagram::velocity_derivative(self, rho)
    }
    fn rho_max(&self) -> T {
        FundamentalDiagram::rho_max(self)
    }
}

/// `V(rho) = c` for every density. With `y = 0` the density equation reduces
/// to linear advection at speed `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVelocity<T>(pub T);

impl<T: Real> EquilibriumModel<T> for ConstantVelocity<T> {
    fn velocity(&self, _rho: T) -> T {
        self.0
    }
    fn velocity_derivative(&self, _rho: T) -> T {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub length: T,
    pub num_cells: usize,
    pub dx: T,
    pub dt: T,
    pub num_steps: usize,
    pub total_time: T,
}

impl<T: Real> Grid<T> {
    /// Uses the largest `dt <= max_dt` that divides `total_time` evenly.
    pub fn with_max_dt(length: T, num_cells: usize, total_time: T, max_dt: T) -> Result<Self> {
        if !(length > T::zero()) {
            return Err(Error::domain("length", length.as_f64(), 0.0, f64::INFINITY));
        }
        if num_cells < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 cells, got {num_cells}")));
        }
        if !(total_time >= T::zero() && total_time.is_finite()) {
            return Err(Error::domain("total_time", total_time.as_f64(), 0.0, f64::INFINITY));
        }
        if !(max_dt > T::zero() && max_dt.is_finite()) {
            return Err(Error::domain("dt", max_dt.as_f64(), 0.0, f64::INFINITY));
        }
        let ratio = (total_time / max_dt).as_f64();
        let num_steps = (ratio - 1e-9).ceil().max(0.0) as usize;
        let dt = if num_steps == 0 { max_dt } else { total_time / T::count(num_steps) };
        Ok(Self {
            length,
            num_cells,
            dx: length / T::count(num_cells),
            dt,
            num_steps,
            total_time,
        })
    }

    /// Time step from the CFL bound of `initial` with the given safety factor.
    pub fn from_cfl<M: EquilibriumModel<T>>(
        length: T,
        num_cells: usize,
        total_time: T,
        initial: &StateField<T>,
        model: &M,
        safety: T,
    ) -> Result<Self> {
        let dx = length / T::count(num_cells.max(1));
        let dt = cfl_dt(initial, model, dx, safety)?;
        Self::with_max_dt(length, num_cells, total_time, dt)
    }

    pub fn centers(&self) -> Vec<T> {
        (0..self.num_cells)
            .map(|j| (T::count(j) + T::lit(0.5)) * self.dx)
            .collect()
    }

    pub fn time(&self, step: usize) -> T {
        T::count(step) * self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateField<T> {
    /// veh/m
    pub rho: Vec<T>,
    /// m/s
    pub v: Vec<T>,
}

impl<T: Real> StateField<T> {
    pub fn uniform(num_cells: usize, rho: T, v: T) -> Self {
        Self {
            rho: vec![rho; num_cells],
            v: vec![v; num_cells],
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Rejects non-finite values, `rho <= 0`, `rho` above the slack bound and `v < 0`.
    pub fn check_admissible(&self, rho_max: T, step: usize, time: T) -> Result<()> {
        let cap = rho_max * (T::one() + T::lit(DENSITY_SLACK));
        for (cell, (&rho, &v)) in self.rho.iter().zip(&self.v).enumerate() {
            let ok = rho.is_finite() && v.is_finite() && rho > T::zero() && rho <= cap && v >= T::zero();
            if !ok {
                return Err(Error::BlowUp {
                    step,
                    time: time.as_f64(),
                    cell,
                    rho: rho.as_f64(),
                    v: v.as_f64(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservativeField<T> {
    pub rho: Vec<T>,
    /// veh/s
    pub y: Vec<T>,
}

pub fn to_conservative<T: Real, M: EquilibriumModel<T>>(
    state: &StateField<T>,
    model: &M,
) -> Result<ConservativeField<T>> {
    check_positive(&state.rho)?;
    Ok(ConservativeField {
        rho: state.rho.clone(),
        y: state
            .rho
            .iter()
            .zip(&state.v)
            .map(|(&r, &v)| r * (v - model.velocity(r)))
            .collect(),
    })
}

pub fn to_primitive<T: Real, M: EquilibriumModel<T>>(
    cons: &ConservativeField<T>,
    model: &M,
) -> Result<StateField<T>> {
    check_positive(&cons.rho)?;
    Ok(StateField {
        rho: cons.rho.clone(),
        v: cons
            .rho
            .iter()
            .zip(&cons.y)
            .map(|(&r, &y)| y / r + model.velocity(r))
            .collect(),
    })
}

fn check_positive<T: Real>(rho: &[T]) -> Result<()> {
    match rho.iter().position(|&r| !(r > T::zero())) {
        Some(cell) => Err(Error::DegenerateState {
            cell,
            rho: rho[cell].as_f64(),
        }),
        None => Ok(()),
    }
}

/// `(F_rho, F_y) = (y + rho V, y^2 / rho + y V)`.
pub fn numerical_flux<T: Real, M: EquilibriumModel<T>>(rho: T, y: T, model: &M) -> Result<(T, T)> {
    if !(rho > T::zero()) {
        return Err(Error::DegenerateState { cell: 0, rho: rho.as_f64() });
    }
    Ok(flux(rho, y, model))
}

#[inline]
fn flux<T: Real, M: EquilibriumModel<T>>(rho: T, y: T, model: &M) -> (T, T) {
    let v_eq = model.velocity(rho);
    (y + rho * v_eq, y * y / rho + y * v_eq)
}

/// Ghost-cell values in conservative variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhostCell<T> {
    pub rho: T,
    pub y: T,
}

impl<T: Real> GhostCell<T> {
    pub fn from_primitive<M: EquilibriumModel<T>>(rho: T, v: T, model: &M) -> Self {
        Self {
            rho,
            y: rho * (v - model.velocity(rho)),
        }
    }

    pub fn velocity<M: EquilibriumModel<T>>(&self, model: &M) -> T {
        self.y / self.rho + model.velocity(self.rho)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub field: ConservativeField<T>,
    /// Mass flux through `x = 0` used by the update [veh/s].
    pub inlet_mass_flux: T,
    /// Mass flux through `x = L` used by the update [veh/s].
    pub outlet_mass_flux: T,
}

/// One two-stage Lax–Wendroff step. `tau = inf` switches the relaxation off.
pub fn lax_wendroff_step<T: Real, M: EquilibriumModel<T>>(
    cons: &ConservativeField<T>,
    left: GhostCell<T>,
    right: GhostCell<T>,
    dt: T,
    dx: T,
    tau: T,
    model: &M,
) -> Result<StepOutput<T>> {
    let m = cons.rho.len();
    check_positive(&cons.rho)?;
    if !(left.rho > T::zero()) {
        return Err(Error::DegenerateState { cell: 0, rho: left.rho.as_f64() });
    }
    if !(right.rho > T::zero()) {
        return Err(Error::DegenerateState { cell: m, rho: right.rho.as_f64() });
    }
    let half = T::lit(0.5);
    let lam = dt / dx;
    let relax_half = dt / (T::lit(4.0) * tau);
    let relax_full = dt / (T::lit(2.0) * tau);

    let rho_ext = |j: usize| if j == 0 { left.rho } else if j == m + 1 { right.rho } else { cons.rho[j - 1] };
    let y_ext = |j: usize| if j == 0 { left.y } else if j == m + 1 { right.y } else { cons.y[j - 1] };

    // interface k sits between extended cells k and k + 1
    let mut f_rho = Vec::with_capacity(m + 1);
    let mut f_y = Vec::with_capacity(m + 1);
    let mut y_half = Vec::with_capacity(m + 1);
    let (mut fr_l, mut fy_l) = flux(rho_ext(0), y_ext(0), model);
    for k in 0..=m {
        let (r_l, y_l) = (rho_ext(k), y_ext(k));
        let (r_r, y_r) = (rho_ext(k + 1), y_ext(k + 1));
        let (fr_r, fy_r) = flux(r_r, y_r, model);
        let rh = half * (r_l + r_r) - half * lam * (fr_r - fr_l);
        let yh = half * (y_l + y_r) - half * lam * (fy_r - fy_l) - relax_half * (y_l + y_r);
        if !(rh > T::zero()) {
            return Err(Error::DegenerateState { cell: k, rho: rh.as_f64() });
        }
        let (a, b) = flux(rh, yh, model);
        f_rho.push(a);
        f_y.push(b);
        y_half.push(yh);
        fr_l = fr_r;
        fy_l = fy_r;
    }

    let rho = (0..m).map(|j| cons.rho[j] - lam * (f_rho[j + 1] - f_rho[j])).collect();
    let y = (0..m)
        .map(|j| cons.y[j] - lam * (f_y[j + 1] - f_y[j]) - relax_full * (y_half[j + 1] + y_half[j]))
        .collect();
    Ok(StepOutput {
        field: ConservativeField { rho, y },
        inlet_mass_flux: f_rho[0],
        outlet_mass_flux: f_rho[m],
    })
}

/// Largest `max(|v|, |v + rho V'(rho)|)` over the field.
pub fn max_wave_speed<T: Real, M: EquilibriumModel<T>>(state: &StateField<T>, model: &M) -> T {
    state.rho.iter().zip(&state.v).fold(T::zero(), |m, (&r, &v)| {
        let l2 = v + r * model.velocity_derivative(r);
        m.max(v.abs()).max(l2.abs())
    })
}

/// `dt = safety dx / max |lambda|`.
pub fn cfl_dt<T: Real, M: EquilibriumModel<T>>(state: &StateField<T>, model: &M, dx: T, safety: T) -> Result<T> {
    let s = max_wave_speed(state, model);
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "maximum wave speed is {s}; cannot derive a CFL time step"
        )));
    }
    Ok(safety * dx / s)
}

/// Boundary signal: constant or piecewise linear in time, held at the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Signal<T> {
    Constant(T),
    Series { times: Vec<T>, values: Vec<T> },
}

impl<T: Real> Signal<T> {
    pub fn at(&self, t: T) -> T {
        match self {
            Signal::Constant(c) => *c,
            Signal::Series { times, values } => interpolate(times, values, t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutletCondition<T> {
    Density(Signal<T>),
    Velocity(Signal<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec<T> {
    /// Prescribed inflow `rho v` at `x = 0` [veh/s].
    pub inlet_flux: Signal<T>,
    pub outlet: OutletCondition<T>,
}

impl<T: Real> BoundarySpec<T> {
    /// Constant inflow `q*` and constant outlet density `rho*`.
    pub fn setpoint(q_star: T, rho_star: T) -> Self {
        Self {
            inlet_flux: Signal::Constant(q_star),
            outlet: OutletCondition::Density(Signal::Constant(rho_star)),
        }
    }

    /// Inlet ghost: density from the prescribed flux and the first cell's
    /// velocity, velocity copied.
    pub fn inlet_ghost<M: EquilibriumModel<T>>(&self, state: &StateField<T>, t: T, model: &M) -> Result<GhostCell<T>> {
        let v0 = state.v[0];
        if !(v0 > T::zero()) {
            return Err(Error::DegenerateState { cell: 0, rho: state.rho[0].as_f64() });
        }
        Ok(GhostCell::from_primitive(self.inlet_flux.at(t) / v0, v0, model))
    }

    /// Outlet ghost. A prescribed density keeps the last cell's `v - V(rho)`;
    /// a prescribed velocity keeps the last cell's density.
    pub fn outlet_ghost<M: EquilibriumModel<T>>(&self, state: &StateField<T>, t: T, model: &M) -> GhostCell<T> {
        let j = state.len() - 1;
        let (r, v) = (state.rho[j], state.v[j]);
        match &self.outlet {
            OutletCondition::Density(s) => {
                let rho_g = s.at(t);
                GhostCell {
                    rho: rho_g,
                    y: rho_g * (v - model.velocity(r)),
                }
            }
            OutletCondition::Velocity(s) => GhostCell::from_primitive(r, s.at(t), model),
        }
    }
}

/// Linear interpolation on sorted `xs`, constant beyond the ends.
pub fn interpolate<T: Real>(xs: &[T], ys: &[T], x: T) -> T {
    let n = xs.len();
    if n == 0 {
        return T::nan();
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&p| p <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let w = (x - x0) / (x1 - x0);
    ys[k - 1] + w * (ys[k] - ys[k - 1])
}

/// `rho = rho* (1 + a sin(k pi x / L))`, `v = v* (1 - a sin(k pi x / L))`.
pub fn sinusoidal_ic<T: Real>(x: &[T], length: T, rho_star: T, v_star: T, amplitude: T, mode: T) -> StateField<T> {
    let s = |xi: T| amplitude * (mode * T::PI() * xi / length).sin();
    StateField {
        rho: x.iter().map(|&xi| rho_star * (T::one() + s(xi))).collect(),
        v: x.iter().map(|&xi| v_star * (T::one() - s(xi))).collect(),
    }
}

/// Snapshots of a field on fixed cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub x: Vec<T>,
    pub times: Vec<T>,
    pub fields: Vec<StateField<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(x: Vec<T>) -> Self {
        Self {
            x,
            times: Vec::new(),
            fields: Vec::new(),
        }
    }

    pub fn push(&mut self, t: T, field: StateField<T>) {
        self.times.push(t);
        self.fields.push(field);
    }

    pub fn last(&self) -> Option<&StateField<T>> {
        self.fields.last()
    }

    /// Writes `t, x, rho_veh_per_km, v_km_per_h`, one row per (sample, cell).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "rho_veh_per_km", "v_km_per_h"])?;
        for (t, f) in self.times.iter().zip(&self.fields) {
            for (j, &x) in self.x.iter().enumerate() {
                w.write_record(&[
                    t.to_string(),
                    x.to_string(),
                    units::density_to_per_km(f.rho[j].as_f64()).to_string(),
                    units::velocity_to_kmh(f.v[j].as_f64()).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One checked time step on primitive fields.
pub struct Stepper<'a, T, M> {
    pub model: &'a M,
    pub tau: T,
    pub dx: T,
    pub dt: T,
}

impl<'a, T: Real, M: EquilibriumModel<T>> Stepper<'a, T, M> {
    pub fn new(model: &'a M, tau: T, dx: T, dt: T) -> Self {
        Self { model, tau, dx, dt }
    }

    /// Refuses to step past the CFL limit, then advances `state` from step
    /// `step` to `step + 1` and checks admissibility of the result.
    pub fn advance(
        &self,
        state: &StateField<T>,
        left: GhostCell<T>,
        right: GhostCell<T>,
        step: usize,
    ) -> Result<(StateField<T>, StepOutput<T>)> {
        let limit = self.dx / max_wave_speed(state, self.model);
        if self.dt > limit * (T::one() + T::lit(1e-12)) {
            return Err(Error::Cfl {
                dt: self.dt.as_f64(),
                limit: limit.as_f64(),
            });
        }
        let cons = to_conservative(state, self.model)?;
        let out = lax_wendroff_step(&cons, left, right, self.dt, self.dx, self.tau, self.model)
            .map_err(|e| self.blow_up(e, state, step))?;
        let next = to_primitive(&out.field, self.model).map_err(|e| self.blow_up(e, state, step))?;
        next.check_admissible(self.model.rho_max(), step + 1, T::count(step + 1) * self.dt)?;
        Ok((next, out))
    }

    fn blow_up(&self, e: Error, state: &StateField<T>, step: usize) -> Error {
        match e {
            Error::DegenerateState { cell, rho } => Error::BlowUp {
                step: step + 1,
                time: (T::count(step + 1) * self.dt).as_f64(),
                cell,
                rho,
                v: state.v.get(cell.min(state.len() - 1)).map_or(f64::NAN, |v| v.as_f64()),
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantRun<T> {
    pub trajectory: Trajectory<T>,
    /// Boundary signals recorded at every time step `t_n`, `n = 0..=N`.
    pub measurements: BoundaryMeasurements<T>,
    /// `int F_rho(0, t) dt` over the run [veh].
    pub mass_in: T,
    /// `int F_rho(L, t) dt` over the run [veh].
    pub mass_out: T,
}

/// Outlet flux and velocity at `x = L`, averaged between the last cell and
/// its ghost.
pub fn outlet_interface<T: Real, M: EquilibriumModel<T>>(
    state: &StateField<T>,
    ghost: GhostCell<T>,
    model: &M,
) -> (T, T) {
    let j = state.len() - 1;
    let half = T::lit(0.5);
    let rho_l = half * (state.rho[j] + ghost.rho);
    let v_l = half * (state.v[j] + ghost.velocity(model));
    (rho_l * v_l, v_l)
}

/// Runs the plant for `grid.num_steps` steps, storing every
/// `sample_every`-th field (plus the final one) and the boundary signals
/// `(q_in, q_out, v_out)` at every step.
pub fn simulate_plant<T: Real, M: EquilibriumModel<T>>(
    ic: &StateField<T>,
    bc: &BoundarySpec<T>,
    model: &M,
    tau: T,
    grid: &Grid<T>,
    sample_every: usize,
) -> Result<PlantRun<T>> {
    if ic.len() != grid.num_cells || ic.v.len() != grid.num_cells {
        return Err(Error::GridMismatch(format!(
            "initial condition has {} cells, grid has {}",
            ic.len(),
            grid.num_cells
        )));
    }
    if !(tau > T::zero()) {
        return Err(Error::domain("tau", tau.as_f64(), 0.0, f64::INFINITY));
    }
    ic.check_admissible(model.rho_max(), 0, T::zero())?;
    let sample_every = sample_every.max(1);
    let stepper = Stepper::new(model, tau, grid.dx, grid.dt);
    let mut traj = Trajectory::new(grid.centers());
    let (mut times, mut q_in, mut q_out, mut v_out) = (vec![], vec![], vec![], vec![]);
    let (mut mass_in, mut mass_out) = (T::zero(), T::zero());
    let mut state = ic.clone();
    for n in 0..=grid.num_steps {
        let t = grid.time(n);
        let right = bc.outlet_ghost(&state, t, model);
        let (qo, vo) = outlet_interface(&state, right, model);
        times.push(t);
        q_in.push(bc.inlet_flux.at(t));
        q_out.push(qo);
        v_out.push(vo);
        if n % sample_every == 0 || n == grid.num_steps {
            traj.push(t, state.clone());
        }
        if n == grid.num_steps {
            break;
        }
        let left = bc.inlet_ghost(&state, t, model)?;
        let (next, out) = stepper.advance(&state, left, right, n)?;
        mass_in = mass_in + grid.dt * out.inlet_mass_flux;
        mass_out = mass_out + grid.dt * out.outlet_mass_flux;
        state = next;
    }
    Ok(PlantRun {
        trajectory: traj,
        measurements: BoundaryMeasurements::new(times, q_in, q_out, v_out)?,
        mass_in,
        mass_out,
    })
}
