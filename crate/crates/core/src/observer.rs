//! Boundary observer: a copy of the plant driven by inlet/outlet
//! measurements, corrected through the scalar outlet mismatch
//! `e(t) = w(L,t) - w_hat(L,t)`.
//!
//! The injections `E_w = r(x) e`, `E_v = s(x) e` act in characteristic
//! coordinates and are mapped back to density and velocity as
//!
//! ```text
//! rho_hat_t += (exp(-L / (tau l1)) E_w - E_v) / v*
//! v_hat_t   += (l1 - l2) / q* E_v
//! ```
//!
//! after each Lax–Wendroff step.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::FundamentalDiagram;
use crate::linearize::{scale_state, GainProfile, GainVariant, ObserverDesign, ReferenceState};
use crate::metrics::{l2_error_series, ErrorSeries};
use crate::scalar::Real;
use crate::solver::{
    simulate_plant, BoundarySpec, GhostCell, Grid, PlantRun, StateField, Stepper, Trajectory,
};
use crate::units::Units;

/// Default interpolation gap tolerance for simulated measurements [s].
pub const DEFAULT_MAX_GAP_SIM: f64 = 2.0;
/// Default interpolation gap tolerance for data-derived measurements [s].
pub const DEFAULT_MAX_GAP_DATA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMeasurements<T> {
    pub times: Vec<T>,
    /// Inlet flux [veh/s].
    pub q_in: Vec<T>,
    /// Outlet flux [veh/s].
    pub q_out: Vec<T>,
    /// Outlet velocity [m/s].
    pub v_out: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSample<T> {
    pub q_in: T,
    pub q_out: T,
    pub v_out: T,
}

impl<T: Real> BoundaryMeasurements<T> {
    pub fn new(times: Vec<T>, q_in: Vec<T>, q_out: Vec<T>, v_out: Vec<T>) -> Result<Self> {
        let n = times.len();
        if n == 0 {
            return Err(Error::Data("measurement series is empty".into()));
        }
        if q_in.len() != n || q_out.len() != n || v_out.len() != n {
            return Err(Error::Data(format!(
                "measurement columns differ in length ({n}, {}, {}, {})",
                q_in.len(),
                q_out.len(),
                v_out.len()
            )));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!(
                "measurement times not strictly increasing at sample {} (t = {})",
                k + 1,
                times[k + 1]
            )));
        }
        for (name, col) in [("q_in", &q_in), ("q_out", &q_out), ("v_out", &v_out)] {
            if let Some(k) = col.iter().position(|&x| !(x >= T::zero() && x.is_finite())) {
                return Err(Error::Data(format!(
                    "{name} = {} at t = {} is negative or non-finite",
                    col[k], times[k]
                )));
            }
        }
        Ok(Self { times, q_in, q_out, v_out })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Linear interpolation at `t`. Fails if `t` lies outside the recorded
    /// span or inside an interval longer than `max_gap`. Between samples the
    /// next sample is used, so replaying a file is not strictly causal.
    pub fn sample(&self, t: T, max_gap: T) -> Result<MeasurementSample<T>> {
        let n = self.times.len();
        let tol = T::lit(1e-9) * (t.abs() + T::one());
        let (first, last) = (self.times[0], self.times[n - 1]);
        if t < first - tol || t > last + tol {
            return Err(Error::Data(format!(
                "no measurement covers t = {t} (series spans [{first}, {last}])"
            )));
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 || k == n {
            let i = if k == 0 { 0 } else { n - 1 };
            return Ok(self.at(i));
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        if t == t0 {
            return Ok(self.at(k - 1));
        }
        if t1 - t0 > max_gap {
            return Err(Error::Data(format!(
                "measurement gap [{t0}, {t1}] exceeds the {max_gap} s tolerance"
            )));
        }
        let w = (t - t0) / (t1 - t0);
        let lerp = |c: &[T]| c[k - 1] + w * (c[k] - c[k - 1]);
        Ok(MeasurementSample {
            q_in: lerp(&self.q_in),
            q_out: lerp(&self.q_out),
            v_out: lerp(&self.v_out),
        })
    }

    /// Extends the series to `[t0, t1]` by holding the first and last
    /// samples. Cell-averaged data is centred half a cell inside its domain.
    pub fn hold_ends(mut self, t0: T, t1: T) -> Self {
        if t0 < self.times[0] {
            self.times.insert(0, t0);
            self.q_in.insert(0, self.q_in[0]);
            self.q_out.insert(0, self.q_out[0]);
            self.v_out.insert(0, self.v_out[0]);
        }
        let n = self.times.len();
        if t1 > self.times[n - 1] {
            self.times.push(t1);
            self.q_in.push(self.q_in[n - 1]);
            self.q_out.push(self.q_out[n - 1]);
            self.v_out.push(self.v_out[n - 1]);
        }
        self
    }

    fn at(&self, i: usize) -> MeasurementSample<T> {
        MeasurementSample {
            q_in: self.q_in[i],
            q_out: self.q_out[i],
            v_out: self.v_out[i],
        }
    }

    /// Writes `t_s` plus the three signals with unit-tagged headers.
    pub fn write_csv<W: Write>(&self, out: W, units: Units) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (qh, vh) = match units {
            Units::Si => (["q_in_veh_per_s", "q_out_veh_per_s"], "v_out_m_per_s"),
            Units::Traffic => (["q_in_veh_per_h", "q_out_veh_per_h"], "v_out_km_per_h"),
        };
        w.write_record(["t_s", qh[0], qh[1], vh])?;
        for k in 0..self.len() {
            w.write_record(&[
                self.times[k].to_string(),
                units.flow_from_si(self.q_in[k].as_f64()).to_string(),
                units.flow_from_si(self.q_out[k].as_f64()).to_string(),
                units.velocity_from_si(self.v_out[k].as_f64()).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv); the units of
    /// each column follow its header suffix.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers()?.clone();
        let find = |options: &[(&str, Units)]| -> Result<(usize, Units)> {
            options
                .iter()
                .find_map(|(name, u)| headers.iter().position(|h| h == *name).map(|i| (i, *u)))
                .ok_or_else(|| Error::Data(format!("measurement CSV lacks column `{}`", options[0].0)))
        };
        let it = headers
            .iter()
            .position(|h| h == "t_s")
            .ok_or_else(|| Error::Data("measurement CSV lacks column `t_s`".into()))?;
        let qi = find(&[("q_in_veh_per_s", Units::Si), ("q_in_veh_per_h", Units::Traffic)])?;
        let qo = find(&[("q_out_veh_per_s", Units::Si), ("q_out_veh_per_h", Units::Traffic)])?;
        let vo = find(&[("v_out_m_per_s", Units::Si), ("v_out_km_per_h", Units::Traffic)])?;
        let (mut times, mut q_in, mut q_out, mut v_out) = (vec![], vec![], vec![], vec![]);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Data(format!("measurement CSV row {}: bad number", row + 2)))
            };
            times.push(T::lit(num(it)?));
            q_in.push(T::lit(qi.1.flow_to_si(num(qi.0)?)));
            q_out.push(T::lit(qo.1.flow_to_si(num(qo.0)?)));
            v_out.push(T::lit(vo.1.velocity_to_si(num(vo.0)?)));
        }
        Self::new(times, q_in, q_out, v_out)
    }
}

/// `w(L) = exp(L / (tau l1)) (rho* l2 / (l1 - l2) Y_v + Y_q,out)`.
pub fn w_bar_at_outlet<T: Real>(y_v: T, y_q_out: T, reference: &ReferenceState<T>, tau: T, length: T) -> T {
    let xi1 = reference.rho_star * reference.lambda2 / reference.speed_gap() * y_v + y_q_out;
    scale_state(xi1, length, tau, reference.lambda1)
}

/// `(E_w, E_v) = (r(x), s(x)) (w(L) - w_hat(L))`.
pub fn injection_terms<T: Real>(w_bar_plant: T, w_bar_estimate: T, gains: &GainProfile<T>) -> (Vec<T>, Vec<T>) {
    let e = w_bar_plant - w_bar_estimate;
    (
        gains.r_values.iter().map(|&r| r * e).collect(),
        gains.s_values.iter().map(|&s| s * e).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode<T> {
    /// Uniform reference state.
    Setpoint,
    Provided(StateField<T>),
}

/// Exponential weight on `E_w` in the density source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionExponent {
    /// `exp(-L / (tau l1))` in every cell.
    #[default]
    Outlet,
    /// `exp(-x / (tau l1))`, matching the inverse scaling cell by cell.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverConfig<T> {
    pub init: InitMode<T>,
    pub exponent: InjectionExponent,
    pub gains: GainVariant,
    /// Lower bound on `v_hat(0)` in the inlet ghost density [m/s].
    pub velocity_floor: T,
    /// Measurement interpolation tolerance [s].
    pub max_gap: T,
}

impl<T: Real> Default for ObserverConfig<T> {
    fn default() -> Self {
        Self {
            init: InitMode::Setpoint,
            exponent: InjectionExponent::Outlet,
            gains: GainVariant::Exact,
            velocity_floor: T::lit(0.1),
            max_gap: T::lit(DEFAULT_MAX_GAP_SIM),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Observer<T> {
    fd: FundamentalDiagram<T>,
    design: ObserverDesign<T>,
    gains: GainProfile<T>,
    x: Vec<T>,
    dx: T,
    dt: T,
    exponent: InjectionExponent,
    velocity_floor: T,
    estimate: StateField<T>,
    step: usize,
}

impl<T: Real> Observer<T> {
    pub fn new(fd: FundamentalDiagram<T>, design: ObserverDesign<T>, grid: &Grid<T>, config: &ObserverConfig<T>) -> Result<Self> {
        if (grid.length - design.length).abs() > T::lit(1e-9) * design.length {
            return Err(Error::GridMismatch(format!(
                "grid length {} differs from design length {}",
                grid.length, design.length
            )));
        }
        let x = grid.centers();
        let gains = design.gains(&x, config.gains)?;
        let r = design.reference;
        let estimate = match &config.init {
            InitMode::Setpoint => StateField::uniform(grid.num_cells, r.rho_star, r.v_star),
            InitMode::Provided(f) => {
                if f.len() != grid.num_cells || f.v.len() != grid.num_cells {
                    return Err(Error::GridMismatch(format!(
                        "initial estimate has {} cells, grid has {}",
                        f.len(),
                        grid.num_cells
                    )));
                }
                f.check_admissible(fd.rho_max(), 0, T::zero())?;
                f.clone()
            }
        };
        Ok(Self {
            fd,
            design,
            gains,
            x,
            dx: grid.dx,
            dt: grid.dt,
            exponent: config.exponent,
            velocity_floor: config.velocity_floor,
            estimate,
            step: 0,
        })
    }

    /// Replaces the gain profile, e.g. with [`GainProfile::zeroed`].
    pub fn with_gains(mut self, gains: GainProfile<T>) -> Result<Self> {
        if gains.r_values.len() != self.x.len() || gains.s_values.len() != self.x.len() {
            return Err(Error::GridMismatch("gain profile does not match the grid".into()));
        }
        self.gains = gains;
        Ok(self)
    }

    pub fn estimate(&self) -> &StateField<T> {
        &self.estimate
    }

    pub fn gains(&self) -> &GainProfile<T> {
        &self.gains
    }

    pub fn design(&self) -> &ObserverDesign<T> {
        &self.design
    }

    pub fn time(&self) -> T {
        T::count(self.step) * self.dt
    }

    /// `w_hat(L)` from the estimate's outlet cell.
    pub fn outlet_w_hat(&self) -> T {
        let j = self.estimate.len() - 1;
        let r = &self.design.reference;
        let (rho, v) = (self.estimate.rho[j], self.estimate.v[j]);
        w_bar_at_outlet(v - r.v_star, rho * v - r.q_star, r, self.design.tau, self.design.length)
    }

    /// Advances the estimate by one step using the measurements at the
    /// current time.
    pub fn step(&mut self, m: &MeasurementSample<T>) -> Result<()> {
        let r = self.design.reference;
        let (tau, length) = (self.design.tau, self.design.length);
        let w_plant = w_bar_at_outlet(m.v_out - r.v_star, m.q_out - r.q_star, &r, tau, length);
        let (e_w, e_v) = injection_terms(w_plant, self.outlet_w_hat(), &self.gains);

        let est = &self.estimate;
        let j = est.len() - 1;
        let v0 = est.v[0];
        let left = GhostCell::from_primitive(m.q_in / v0.max(self.velocity_floor), v0, &self.fd);
        let right = GhostCell::from_primitive(est.rho[j], m.v_out, &self.fd);

        let time = self.time();
        let diverged = |e: Error| Error::ObserverDivergence {
            time: time.as_f64(),
            detail: e.to_string(),
        };
        let stepper = Stepper::new(&self.fd, tau, self.dx, self.dt);
        let (mut next, _) = stepper.advance(est, left, right, self.step).map_err(diverged)?;

        let outlet_weight = (-length / (tau * r.lambda1)).exp();
        let v_gain = r.speed_gap() / r.q_star;
        for (k, (&ew, &ev)) in e_w.iter().zip(&e_v).enumerate() {
            let weight = match self.exponent {
                InjectionExponent::Outlet => outlet_weight,
                InjectionExponent::Local => (-self.x[k] / (tau * r.lambda1)).exp(),
            };
            next.rho[k] = next.rho[k] + self.dt * (weight * ew - ev) / r.v_star;
            next.v[k] = next.v[k] + self.dt * v_gain * ev;
        }
        self.step += 1;
        next.check_admissible(self.fd.rho_max(), self.step, self.time())
            .map_err(diverged)?;
        self.estimate = next;
        Ok(())
    }
}

/// Runs an observer over `grid.num_steps` steps, sampling the estimate
/// every `sample_every` steps (plus the final one).
pub fn run_observer<T: Real>(
    measurements: &BoundaryMeasurements<T>,
    mut observer: Observer<T>,
    grid: &Grid<T>,
    max_gap: T,
    sample_every: usize,
) -> Result<Trajectory<T>> {
    let sample_every = sample_every.max(1);
    let mut traj = Trajectory::new(grid.centers());
    for n in 0..=grid.num_steps {
        let t = grid.time(n);
        if n % sample_every == 0 || n == grid.num_steps {
            traj.push(t, observer.estimate().clone());
        }
        if n == grid.num_steps {
            break;
        }
        let m = measurements.sample(t, max_gap)?;
        observer.step(&m)?;
    }
    Ok(traj)
}

#[derive(Debug, Clone)]
pub struct TwinRun<T> {
    pub plant: PlantRun<T>,
    pub estimate: Trajectory<T>,
    pub errors: ErrorSeries<T>,
}

/// Simulates the plant and an observer fed only with the plant's boundary
/// signals on the same time grid.
pub fn twin_experiment<T: Real>(
    ic: &StateField<T>,
    bc: &BoundarySpec<T>,
    fd: &FundamentalDiagram<T>,
    design: &ObserverDesign<T>,
    grid: &Grid<T>,
    config: &ObserverConfig<T>,
    sample_every: usize,
) -> Result<TwinRun<T>> {
    let plant = simulate_plant(ic, bc, fd, design.tau, grid, sample_every)?;
    let observer = Observer::new(*fd, *design, grid, config)?;
    let estimate = run_observer(&plant.measurements, observer, grid, config.max_gap, sample_every)?;
    let r = &design.reference;
    let errors = l2_error_series(&plant.trajectory, &estimate, r.rho_star, r.v_star)?;
    Ok(TwinRun { plant, estimate, errors })
}

#[derive(Debug, Clone)]
pub struct LinearErrorRun<T> {
    pub times: Vec<T>,
    /// `(int w^2 + v^2 dx)^(1/2)` at every step.
    pub norms: Vec<T>,
    pub w: Vec<T>,
    pub v: Vec<T>,
}

/// First-order upwind simulation of the linear estimation-error system
///
/// ```text
/// w_t + l1 w_x = -r(x) w(L),             w(0) = (l2 / l1) v(0)
/// v_t + l2 v_x = c(x) w - s(x) w(L),     v(L) = 0
/// ```
///
/// on cell centres, with `w(L)` read from the last cell.
pub fn simulate_linear_error_system<T: Real>(
    ic_w: &[T],
    ic_v: &[T],
    design: &ObserverDesign<T>,
    gains: &GainProfile<T>,
    t_end: T,
    cfl_safety: T,
) -> Result<LinearErrorRun<T>> {
    let m = ic_w.len();
    if ic_v.len() != m || gains.r_values.len() != m || gains.s_values.len() != m {
        return Err(Error::GridMismatch(format!(
            "initial conditions ({m}, {}) and gains ({}) differ in length",
            ic_v.len(),
            gains.r_values.len()
        )));
    }
    if !(cfl_safety > T::zero() && cfl_safety <= T::one()) {
        return Err(Error::Cfl {
            dt: cfl_safety.as_f64(),
            limit: 1.0,
        });
    }
    let r = &design.reference;
    let (l1, l2) = (r.lambda1, r.lambda2);
    let grid = Grid::with_max_dt(design.length, m, t_end, cfl_safety * design.length / T::count(m) / l1.abs().max(l2.abs()))?;
    let (dx, dt) = (grid.dx, grid.dt);
    let x = grid.centers();
    let c: Vec<T> = x.iter().map(|&x| design.c(x)).collect();
    let reflect = l2 / l1;
    let norm = |w: &[T], v: &[T]| {
        (w.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * a + b * b) * dx).sqrt()
    };

    let (mut w, mut v) = (ic_w.to_vec(), ic_v.to_vec());
    let mut times = vec![T::zero()];
    let mut norms = vec![norm(&w, &v)];
    let (a1, a2) = (l1 * dt / dx, l2 * dt / dx);
    for n in 0..grid.num_steps {
        let w_l = w[m - 1];
        let mut wn = Vec::with_capacity(m);
        let mut vn = Vec::with_capacity(m);
        for j in 0..m {
            let w_left = if j == 0 { reflect * v[0] } else { w[j - 1] };
            let v_right = if j + 1 == m { T::zero() } else { v[j + 1] };
            wn.push(w[j] - a1 * (w[j] - w_left) - dt * gains.r_values[j] * w_l);
            vn.push(v[j] - a2 * (v_right - v[j]) + dt * (c[j] * w[j] - gains.s_values[j] * w_l));
        }
        w = wn;
        v = vn;
        times.push(grid.time(n + 1));
        norms.push(norm(&w, &v));
    }
    Ok(LinearErrorRun { times, norms, w, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::DEFAULT_SPEED_EPS;
    use crate::solver::sinusoidal_ic;
    use approx::assert_relative_eq;

    fn baseline() -> (FundamentalDiagram<f64>, ObserverDesign<f64>) {
        let fd = FundamentalDiagram::greenshield(40.0, 0.16, 1.0).unwrap();
        let r = ReferenceState::from_density(&fd, 0.12).unwrap();
        (fd, ObserverDesign::new(r, 60.0, 400.0, DEFAULT_SPEED_EPS).unwrap())
    }

    #[test]
    fn w_bar_examples() {
        let (_, d) = baseline();
        let r = d.reference;
        assert_eq!(w_bar_at_outlet(0.0, 0.0, &r, 60.0, 400.0), 0.0);
        assert_relative_eq!(w_bar_at_outlet(0.0, 0.1, &r, 60.0, 400.0), 0.19477340410546757, epsilon = 1e-12);
        assert_relative_eq!(w_bar_at_outlet(1.0, 0.0, &r, 60.0, 400.0), -0.08 * (2.0f64 / 3.0).exp(), epsilon = 1e-12);
        assert_relative_eq!(w_bar_at_outlet(1.0, 0.0, &r, 60.0, 400.0), -0.15582, epsilon = 1e-5);
    }

    #[test]
    fn injection_examples() {
        let (_, d) = baseline();
        let x: Vec<f64> = (0..41).map(|j| (j as f64 + 0.5) * 400.0 / 41.0).collect();
        let g = d.gains(&x, GainVariant::Exact).unwrap();
        let (ew, ev) = injection_terms(0.3, 0.3, &g);
        assert!(ew.iter().chain(&ev).all(|&e| e == 0.0));
        let (ew, ev) = injection_terms(1.0, 0.0, &g);
        assert_eq!(ew, g.r_values);
        assert_eq!(ev, g.s_values);
        let (ew, _) = injection_terms(0.5, 0.0, &g);
        assert!(ew.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn measurement_validation_and_sampling() {
        assert!(BoundaryMeasurements::<f64>::new(vec![], vec![], vec![], vec![]).is_err());
        assert!(BoundaryMeasurements::new(vec![0.0, 0.0], vec![1.0; 2], vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(BoundaryMeasurements::new(vec![0.0, 1.0], vec![1.0, -1.0], vec![1.0; 2], vec![1.0; 2]).is_err());
        let m = BoundaryMeasurements::new(vec![0.0, 1.0, 5.0], vec![1.0, 2.0, 2.0], vec![1.0; 3], vec![3.0, 5.0, 5.0]).unwrap();
        let s = m.sample(0.5, 2.0).unwrap();
        assert_relative_eq!(s.q_in, 1.5);
        assert_relative_eq!(s.v_out, 4.0);
        assert_eq!(m.sample(1.0, 2.0).unwrap().v_out, 5.0);
        let err = m.sample(2.0, 2.0).unwrap_err();
        assert!(err.is_data() && err.to_string().contains("[1, 5]"), "{err}");
        assert!(m.sample(6.0, 10.0).is_err());

        let held = m.clone().hold_ends(-1.0, 6.0);
        assert_eq!(held.times, vec![-1.0, 0.0, 1.0, 5.0, 6.0]);
        assert_eq!(held.sample(-0.5, 2.0).unwrap().q_in, 1.0);
        assert_eq!(held.sample(6.0, 2.0).unwrap().v_out, 5.0);
        assert_eq!(m.clone().hold_ends(0.5, 4.0), m);
    }

    #[test]
    fn measurement_csv_round_trip() {
        let m = BoundaryMeasurements::new(vec![0.0, 0.5], vec![1.2, 1.25], vec![1.1, 1.0], vec![10.0, 9.5]).unwrap();
        for units in [Units::Si, Units::Traffic] {
            let mut buf = Vec::new();
            m.write_csv(&mut buf, units).unwrap();
            let back = BoundaryMeasurements::<f64>::read_csv(buf.as_slice()).unwrap();
            for k in 0..2 {
                assert_relative_eq!(back.q_in[k], m.q_in[k], max_relative = 1e-14);
                assert_relative_eq!(back.v_out[k], m.v_out[k], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn setpoint_plant_keeps_estimate_at_setpoint() {
        let (fd, d) = baseline();
        let ic = StateField::uniform(41, 0.12, 10.0);
        let grid = Grid::from_cfl(400.0, 41, 60.0, &ic, &fd, 0.9).unwrap();
        let run = twin_experiment(&ic, &BoundarySpec::setpoint(1.2, 0.12), &fd, &d, &grid, &ObserverConfig::default(), 10).unwrap();
        for f in &run.estimate.fields {
            assert!(f.rho.iter().all(|r| (r - 0.12).abs() < 1e-12));
            assert!(f.v.iter().all(|v| (v - 10.0).abs() < 1e-12));
        }
        assert!(run.errors.e_rho.iter().chain(&run.errors.e_v).all(|&e| e < 1e-12));
    }

    #[test]
    fn twin_experiment_converges() {
        let (fd, d) = baseline();
        let grid0 = Grid::with_max_dt(400.0, 41, 240.0, 1.0).unwrap();
        let ic = sinusoidal_ic(&grid0.centers(), 400.0, 0.12, 10.0, 0.1, 3.0);
        let grid = Grid::from_cfl(400.0, 41, 240.0, &ic, &fd, 0.9).unwrap();
        for exponent in [InjectionExponent::Outlet, InjectionExponent::Local] {
            let cfg = ObserverConfig { exponent, ..ObserverConfig::default() };
            let run = twin_experiment(&ic, &BoundarySpec::setpoint(1.2, 0.12), &fd, &d, &grid, &cfg, 1).unwrap();
            let e = &run.errors;
            let late = (0..e.times.len()).filter(|&k| e.times[k] >= 100.0);
            for k in late {
                assert!(e.e_rho[k] < 0.01 && e.e_v[k] < 0.01, "{exponent:?} t = {}: {} {}", e.times[k], e.e_rho[k], e.e_v[k]);
            }
        }
    }

    #[test]
    fn observer_gap_is_a_data_error() {
        let (fd, d) = baseline();
        let grid = Grid::with_max_dt(400.0, 41, 10.0, 0.4).unwrap();
        let m = BoundaryMeasurements::new(vec![0.0, 10.0], vec![1.2; 2], vec![1.2; 2], vec![10.0; 2]).unwrap();
        let obs = Observer::new(fd, d, &grid, &ObserverConfig::default()).unwrap();
        assert!(run_observer(&m, obs, &grid, 2.0, 1).unwrap_err().is_data());
    }

    fn smooth_ic(m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect();
        let (a, b, c, k1, k2) = (
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(1..4) as f64,
            rng.gen_range(1..4) as f64,
        );
        let w = x.iter().map(|&x| a * (2.0 * std::f64::consts::PI * k1 * x).sin() + 0.5 * b).collect();
        let v = x.iter().map(|&x| c * (std::f64::consts::PI * k2 * x).cos()).collect();
        (w, v)
    }

    #[test]
    fn linear_error_system_zero_ic_stays_zero() {
        let (_, d) = baseline();
        let x: Vec<f64> = (0..100).map(|j| (j as f64 + 0.5) * 4.0).collect();
        let g = d.gains(&x, GainVariant::Exact).unwrap();
        let run = simulate_linear_error_system(&[0.0; 100], &[0.0; 100], &d, &g, 66.0, 0.9).unwrap();
        assert!(run.norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn linear_error_system_vanishes_after_t_f() {
        let (_, d) = baseline();
        let m = 400;
        let x: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) * 400.0 / m as f64).collect();
        let g = d.gains(&x, GainVariant::Exact).unwrap();
        for seed in 0..5 {
            let (w, v) = smooth_ic(m, seed);
            let run = simulate_linear_error_system(&w, &v, &d, &g, 66.0, 0.9).unwrap();
            let ratio = run.norms.last().unwrap() / run.norms[0];
            assert!(ratio <= 1e-3, "seed {seed}: {ratio}");
        }
    }
}
