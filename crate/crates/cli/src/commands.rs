use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use arz_core::fd::{calibrate_three_param, read_scatter_csv, ScatterPoint, HYPERBOLICITY_SAMPLES};
use arz_core::ingest::{boundary_series, dataset_averages, edie_aggregate, resample, synthesize_fleet, Domain};
use arz_core::linearize::ObserverDesign;
use arz_core::metrics::{l2_error_series_masked, ErrorSeries};
use arz_core::observer::{run_observer, twin_experiment, InitMode, InjectionExponent, Observer, ObserverConfig};
use arz_core::relaxation::select_relaxation_time;
use arz_core::solver::{cfl_dt, simulate_plant, sinusoidal_ic, OutletCondition, Signal};
use arz_core::{
    AggregatedGrid, BoundaryMeasurements, BoundarySpec, FundamentalDiagram, GainVariant, Grid, ReferenceState, StateField,
    Trajectory, TrajectoryDataset, Units,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{config_error, Config, ExponentCfg, GainsCfg, InitialKind, OutletKind, Resolved, TrajectoryFormat};

/// Raised for unreadable or inconsistent input data.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "data: {}", self.0)
    }
}

impl std::error::Error for DataError {}

pub struct Out {
    dir: PathBuf,
}

impl Out {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn write<F: FnOnce(&mut BufWriter<File>) -> arz_core::Result<()>>(&self, name: &str, f: F) -> Result<()> {
        let mut w = self.file(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        let mut w = self.file(name)?;
        w.write_all(body.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    fn summary<S: Serialize>(&self, name: &str, s: &S) -> Result<String> {
        let body = toml::to_string(s)?;
        self.text(name, &body)?;
        Ok(body)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| DataError(format!("cannot open {}: {e}", path.display())).into())
}

fn echo(cfg: &Config, r: &Resolved, out: &Out) -> Result<()> {
    out.text("config.resolved.toml", &cfg.echo(r)?)
}

fn centers(m: usize, length: f64) -> Vec<f64> {
    (0..m).map(|j| (j as f64 + 0.5) * length / m as f64).collect()
}

fn initial_state(cfg: &Config, r: &Resolved) -> StateField<f64> {
    let m = cfg.grid.cells;
    match cfg.initial.kind {
        InitialKind::Setpoint => StateField::uniform(m, r.rho_star, r.v_star),
        InitialKind::Sinusoidal => {
            sinusoidal_ic(&centers(m, r.length), r.length, r.rho_star, r.v_star, cfg.initial.amplitude, cfg.initial.mode)
        }
    }
}

fn plant_grid(cfg: &Config, r: &Resolved, ic: &StateField<f64>) -> Result<Grid<f64>> {
    let m = cfg.grid.cells;
    match cfg.grid.dt {
        None => Ok(Grid::from_cfl(r.length, m, cfg.grid.total_time, ic, &r.fd, cfg.grid.cfl_safety)?),
        Some(dt) => {
            let limit = cfl_dt(ic, &r.fd, r.length / m as f64, 1.0)?;
            if dt > limit {
                return Err(config_error(format!(
                    "grid.dt = {dt} s exceeds the CFL limit {limit:.6} s of the initial state (dx = {:.4} m)",
                    r.length / m as f64
                )));
            }
            Ok(Grid::with_max_dt(r.length, m, cfg.grid.total_time, dt)?)
        }
    }
}

fn boundary(cfg: &Config, r: &Resolved) -> BoundarySpec<f64> {
    let outlet = match cfg.boundary.outlet {
        OutletKind::Density => OutletCondition::Density(Signal::Constant(r.outlet_value)),
        OutletKind::Velocity => OutletCondition::Velocity(Signal::Constant(r.outlet_value)),
    };
    BoundarySpec { inlet_flux: Signal::Constant(r.inlet_flux), outlet }
}

fn observer_config(cfg: &Config, rho: f64, v: f64, cells: usize, data: bool) -> ObserverConfig<f64> {
    let o = &cfg.observer;
    let init = if o.density_offset == 0.0 && o.velocity_offset == 0.0 {
        InitMode::Setpoint
    } else {
        InitMode::Provided(StateField::uniform(cells, rho * (1.0 + o.density_offset), v * (1.0 + o.velocity_offset)))
    };
    ObserverConfig {
        init,
        exponent: match o.exponent {
            ExponentCfg::Outlet => InjectionExponent::Outlet,
            ExponentCfg::Local => InjectionExponent::Local,
        },
        gains: gain_variant(cfg),
        velocity_floor: o.velocity_floor,
        max_gap: cfg.max_gap(data),
    }
}

fn gain_variant(cfg: &Config) -> GainVariant {
    match cfg.observer.gains {
        GainsCfg::Exact => GainVariant::Exact,
        GainsCfg::LeadingOrder => GainVariant::LeadingOrder,
    }
}

fn design(cfg: &Config, reference: ReferenceState<f64>, tau: f64, length: f64) -> Result<ObserverDesign<f64>> {
    Ok(ObserverDesign::new(reference, tau, length, cfg.reference.speed_eps)?)
}

fn config_reference(r: &Resolved) -> Result<ReferenceState<f64>> {
    Ok(ReferenceState::from_averages(&r.fd, r.rho_star, r.v_star)?)
}

// --- data sources -----------------------------------------------------------

fn synthetic_dataset(cfg: &Config, r: &Resolved) -> Result<TrajectoryDataset<f64>> {
    let ic = initial_state(cfg, r);
    let grid = plant_grid(cfg, r, &ic)?;
    let bc = boundary(cfg, r);
    let run = simulate_plant(&ic, &bc, &r.fd, r.tau, &grid, 1)?;
    let mut fleet = synthesize_fleet(&run.trajectory, &bc.inlet_flux, r.length, cfg.data.traces_per_vehicle)?;
    let noise = cfg.data.position_noise;
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in &mut fleet.vehicles {
            for x in &mut v.x {
                *x += rng.gen_range(-noise..=noise);
            }
        }
    }
    Ok(fleet)
}

fn dataset(cfg: &Config, r: &Resolved) -> Result<TrajectoryDataset<f64>> {
    if cfg.data.synthetic {
        return synthetic_dataset(cfg, r);
    }
    let path = cfg
        .data
        .trajectories
        .as_ref()
        .ok_or_else(|| config_error("data.trajectories is required (or set data.synthetic = true)"))?;
    let f = open(path)?;
    let d = match cfg.data.format {
        TrajectoryFormat::Generic => TrajectoryDataset::read_csv(f),
        TrajectoryFormat::Ngsim => TrajectoryDataset::read_ngsim_csv(f),
    };
    d.with_context(|| format!("reading {}", path.display()))
}

fn crop(cfg: &Config, data: &TrajectoryDataset<f64>) -> Result<Domain<f64>> {
    let b = data.bounds();
    let c = &cfg.data.crop;
    let t0 = b.t0 + c.t_offset.unwrap_or(0.0);
    let t1 = c.duration.map_or(b.t1, |d| t0 + d);
    Domain::new(t0, t1, c.x0.unwrap_or(b.x0), c.x1.unwrap_or(b.x1)).map_err(|e| config_error(format!("data.crop: {e}")))
}

fn aggregate_data(cfg: &Config, r: &Resolved) -> Result<AggregatedGrid<f64>> {
    let data = dataset(cfg, r)?;
    let domain = crop(cfg, &data)?;
    Ok(edie_aggregate(&data, cfg.data.cells_t, cfg.data.cells_x, &domain)?)
}

fn shift(traj: &mut Trajectory<f64>, dt: f64, dx: f64) {
    traj.times.iter_mut().for_each(|t| *t += dt);
    traj.x.iter_mut().for_each(|x| *x += dx);
}

// --- summaries --------------------------------------------------------------

#[derive(Serialize)]
struct ErrorSummary {
    t_f: f64,
    threshold: f64,
    convergence_time: Option<f64>,
    initial_e_rho: f64,
    initial_e_v: f64,
    final_e_rho: f64,
    final_e_v: f64,
    max_after_t_f: f64,
}

fn error_summary(e: &ErrorSeries<f64>, t_f: f64, t_start: f64, threshold: f64) -> Result<ErrorSummary> {
    let (fr, fv) = e.final_errors().ok_or_else(|| DataError("no error samples".into()))?;
    let max_after = (0..e.len())
        .filter(|&k| e.times[k] - t_start >= t_f)
        .fold(0.0f64, |m, k| m.max(e.e_rho[k]).max(e.e_v[k]));
    Ok(ErrorSummary {
        t_f,
        threshold,
        convergence_time: e.convergence_time(threshold).map(|t| t - t_start),
        initial_e_rho: e.e_rho[0],
        initial_e_v: e.e_v[0],
        final_e_rho: fr,
        final_e_v: fv,
        max_after_t_f: max_after,
    })
}

#[derive(Serialize)]
struct ReferenceSummary {
    rho_star: f64,
    v_star: f64,
    q_star: f64,
    lambda1: f64,
    lambda2: f64,
}

fn reference_summary(r: &ReferenceState<f64>, u: Units) -> ReferenceSummary {
    ReferenceSummary {
        rho_star: u.density_from_si(r.rho_star),
        v_star: u.velocity_from_si(r.v_star),
        q_star: u.flow_from_si(r.q_star),
        lambda1: r.lambda1,
        lambda2: r.lambda2,
    }
}

// --- commands ---------------------------------------------------------------

#[derive(Serialize)]
struct SimulateSummary {
    cells: usize,
    dt: f64,
    steps: usize,
    mass_in: f64,
    mass_out: f64,
}

pub fn simulate(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    let ic = initial_state(cfg, &r);
    let grid = plant_grid(cfg, &r, &ic)?;
    let run = simulate_plant(&ic, &boundary(cfg, &r), &r.fd, r.tau, &grid, cfg.grid.sample_every)?;
    out.write("plant.csv", |w| run.trajectory.write_csv(w))?;
    out.write("measurements.csv", |w| run.measurements.write_csv(w, cfg.units))?;
    if cfg.data.synthetic {
        let fleet = synthetic_dataset(cfg, &r)?;
        out.write("trajectories.csv", |w| fleet.write_csv(w))?;
    }
    out.summary(
        "summary.toml",
        &SimulateSummary {
            cells: grid.num_cells,
            dt: grid.dt,
            steps: grid.num_steps,
            mass_in: run.mass_in,
            mass_out: run.mass_out,
        },
    )
}

#[derive(Serialize)]
struct ObserveSummary {
    mode: &'static str,
    reference: ReferenceSummary,
    errors: Option<ErrorSummary>,
}

pub fn observe(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    if cfg.data.synthetic || cfg.data.trajectories.is_some() {
        observe_trajectories(cfg, &r, out)
    } else if let Some(path) = &cfg.data.measurements {
        observe_measurements(cfg, &r, path, out)
    } else {
        observe_twin(cfg, &r, out)
    }
}

fn observe_twin(cfg: &Config, r: &Resolved, out: &Out) -> Result<String> {
    let reference = config_reference(r)?;
    let d = design(cfg, reference, r.tau, r.length)?;
    let ic = initial_state(cfg, r);
    let grid = plant_grid(cfg, r, &ic)?;
    let oc = observer_config(cfg, r.rho_star, r.v_star, grid.num_cells, false);
    let run = twin_experiment(&ic, &boundary(cfg, r), &r.fd, &d, &grid, &oc, cfg.grid.sample_every)?;
    out.write("plant.csv", |w| run.plant.trajectory.write_csv(w))?;
    out.write("measurements.csv", |w| run.plant.measurements.write_csv(w, cfg.units))?;
    out.write("estimate.csv", |w| run.estimate.write_csv(w))?;
    out.write("errors.csv", |w| run.errors.write_csv(w))?;
    let errors = error_summary(&run.errors, d.convergence_time(), 0.0, cfg.observer.threshold)?;
    out.summary(
        "summary.toml",
        &ObserveSummary { mode: "twin", reference: reference_summary(&reference, cfg.units), errors: Some(errors) },
    )
}

fn observe_trajectories(cfg: &Config, r: &Resolved, out: &Out) -> Result<String> {
    let agg = aggregate_data(cfg, r)?;
    out.write("aggregate.csv", |w| agg.write_csv(w))?;
    let dom = agg.domain;
    let (length, total) = (dom.x1 - dom.x0, dom.t1 - dom.t0);
    let reference = dataset_averages(&agg)?.reference(&r.fd)?;
    let d = design(cfg, reference, r.tau, length)?;

    let max_gap = cfg.max_gap(true);
    let (meas, _) = boundary_series(&agg, max_gap)?;
    let meas = meas.hold_ends(dom.t0, dom.t1);
    let local = BoundaryMeasurements::new(meas.times.iter().map(|t| t - dom.t0).collect(), meas.q_in, meas.q_out, meas.v_out)?;
    out.write("measurements.csv", |w| local.write_csv(w, cfg.units))?;

    let cells = agg.n_x;
    let setpoint = StateField::uniform(cells, reference.rho_star, reference.v_star);
    let grid = Grid::from_cfl(length, cells, total, &setpoint, &r.fd, cfg.observer.cfl_safety)?;
    let oc = observer_config(cfg, reference.rho_star, reference.v_star, cells, true);
    let obs = Observer::new(r.fd, d, &grid, &oc)?;
    let mut est = run_observer(&local, obs, &grid, max_gap, cfg.grid.sample_every)?;

    let (data, masks) = agg.to_trajectory();
    let local_times: Vec<f64> = data.times.iter().map(|t| t - dom.t0).collect();
    let local_x: Vec<f64> = data.x.iter().map(|x| x - dom.x0).collect();
    let mut on_data = resample(&est, &local_times, &local_x)?;
    on_data.times = data.times.clone();
    on_data.x = data.x.clone();
    let errors = l2_error_series_masked(&data, &on_data, reference.rho_star, reference.v_star, Some(&masks))?;
    shift(&mut est, dom.t0, dom.x0);
    out.write("estimate.csv", |w| est.write_csv(w))?;
    out.write("errors.csv", |w| errors.write_csv(w))?;
    let summary = error_summary(&errors, d.convergence_time(), dom.t0, cfg.observer.threshold)?;
    out.summary(
        "summary.toml",
        &ObserveSummary { mode: "trajectories", reference: reference_summary(&reference, cfg.units), errors: Some(summary) },
    )
}

fn observe_measurements(cfg: &Config, r: &Resolved, path: &Path, out: &Out) -> Result<String> {
    let meas = BoundaryMeasurements::read_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let t0 = meas.times[0];
    let total = meas.times[meas.len() - 1] - t0;
    if !(total > 0.0) {
        return Err(DataError("measurement series spans no time".into()).into());
    }
    let local = BoundaryMeasurements::new(meas.times.iter().map(|t| t - t0).collect(), meas.q_in, meas.q_out, meas.v_out)?;
    let reference = config_reference(r)?;
    let d = design(cfg, reference, r.tau, r.length)?;
    let cells = cfg.grid.cells;
    let setpoint = StateField::uniform(cells, r.rho_star, r.v_star);
    let grid = Grid::from_cfl(r.length, cells, total, &setpoint, &r.fd, cfg.observer.cfl_safety)?;
    let oc = observer_config(cfg, r.rho_star, r.v_star, cells, true);
    let obs = Observer::new(r.fd, d, &grid, &oc)?;
    let mut est = run_observer(&local, obs, &grid, cfg.max_gap(true), cfg.grid.sample_every)?;
    shift(&mut est, t0, 0.0);
    out.write("estimate.csv", |w| est.write_csv(w))?;
    out.summary(
        "summary.toml",
        &ObserveSummary { mode: "measurements", reference: reference_summary(&reference, cfg.units), errors: None },
    )
}

#[derive(Serialize)]
struct GapSummary {
    column: &'static str,
    t_start: f64,
    t_end: f64,
    filled: usize,
}

#[derive(Serialize)]
struct AggregateSummary {
    domain: Domain<f64>,
    cells_t: usize,
    cells_x: usize,
    nonempty_cells: usize,
    rho: f64,
    v: f64,
    q: f64,
    q_direct: f64,
    flow_discrepancy: f64,
    gaps: Vec<GapSummary>,
}

pub fn aggregate(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    let agg = aggregate_data(cfg, &r)?;
    out.write("aggregate.csv", |w| agg.write_csv(w))?;
    let avg = dataset_averages(&agg)?;
    let (meas, gaps) = boundary_series(&agg, cfg.max_gap(true))?;
    out.write("boundary.csv", |w| meas.write_csv(w, cfg.units))?;
    let u = cfg.units;
    out.summary(
        "summary.toml",
        &AggregateSummary {
            domain: agg.domain,
            cells_t: agg.n_t,
            cells_x: agg.n_x,
            nonempty_cells: avg.nonempty_cells,
            rho: u.density_from_si(avg.rho),
            v: u.velocity_from_si(avg.v),
            q: u.flow_from_si(avg.q),
            q_direct: u.flow_from_si(avg.q_direct),
            flow_discrepancy: avg.flow_discrepancy(),
            gaps: gaps
                .into_iter()
                .map(|g| GapSummary { column: g.column, t_start: g.t_start, t_end: g.t_end, filled: g.filled })
                .collect(),
        },
    )
}

#[derive(Serialize)]
struct FitSummary {
    family: &'static str,
    roundness: f64,
    p_shape: f64,
    alpha: f64,
    rho_m: f64,
    critical_density: f64,
    rms_residual: f64,
    points: usize,
    best_tau: Option<f64>,
    best_tau_score: Option<f64>,
}

pub fn calibrate(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    let agg = if cfg.data.synthetic || cfg.data.trajectories.is_some() { Some(aggregate_data(cfg, &r)?) } else { None };
    let scatter: Vec<ScatterPoint<f64>> = match (&cfg.data.scatter, &agg) {
        (Some(path), _) => read_scatter_csv(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(a)) => (0..a.n_t)
            .flat_map(|i| (0..a.n_x).map(move |j| (i, j)))
            .filter_map(|(i, j)| Some(ScatterPoint { density: a.density(i, j)?, flow: a.flow(i, j)? }))
            .collect(),
        (None, None) => return Err(config_error("calibrate needs data.scatter, data.trajectories or data.synthetic")),
    };
    let fit = calibrate_three_param(&scatter, r.rho_m_fit)?;
    let fd = FundamentalDiagram::ThreeParam(fit.params);
    fd.check_hyperbolicity(HYPERBOLICITY_SAMPLES)?;

    let mut best = None;
    if let Some(agg) = &agg {
        let sel = select_relaxation_time(agg, &fd, &cfg.calibration.taus, cfg.calibration.cfl_safety, cfg.max_gap(true))?;
        let mut body = String::from("tau_s,score\n");
        for s in &sel.scores {
            body.push_str(&format!("{},{}\n", s.tau, s.score.map(|v| v.to_string()).unwrap_or_default()));
        }
        out.text("tau_scan.csv", &body)?;
        best = Some((sel.best_tau, sel.best_score));
    }
    let u = cfg.units;
    out.summary(
        "fit.toml",
        &FitSummary {
            family: "three_param",
            roundness: fit.params.roundness,
            p_shape: fit.params.p_shape,
            alpha: u.flow_from_si(fit.params.alpha),
            rho_m: u.density_from_si(fit.params.rho_m),
            critical_density: u.density_from_si(fit.critical_density),
            rms_residual: u.flow_from_si(fit.rms_residual),
            points: scatter.len(),
            best_tau: best.map(|b| b.0),
            best_tau_score: best.map(|b| b.1),
        },
    )
}

#[derive(Serialize)]
struct GainSummary {
    variant: &'static str,
    t_f: f64,
    r_at_length: f64,
    s_at_length: f64,
    kernel_bound: f64,
}

pub fn gains(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    let d = design(cfg, config_reference(&r)?, r.tau, r.length)?;
    let m = cfg.grid.cells;
    let nodes: Vec<f64> = (0..=m).map(|k| r.length * k as f64 / m as f64).collect();
    let variant = gain_variant(cfg);
    let g = d.gains(&nodes, variant)?;
    let mut body = String::from("x_m,r_per_s,s_per_s\n");
    for k in 0..nodes.len() {
        body.push_str(&format!("{},{},{}\n", g.x_samples[k], g.r_values[k], g.s_values[k]));
    }
    out.text("gains.csv", &body)?;
    out.summary(
        "summary.toml",
        &GainSummary {
            variant: match variant {
                GainVariant::Exact => "exact",
                GainVariant::LeadingOrder => "leading_order",
            },
            t_f: g.t_f,
            r_at_length: g.r_values[m],
            s_at_length: g.s_values[m],
            kernel_bound: d.kernel_bound(),
        },
    )
}

#[derive(Serialize)]
struct ValidateSummary {
    domain: Domain<f64>,
    rho_veh_per_km: f64,
    v_km_per_h: f64,
    q_veh_per_h: f64,
    within_tolerance: Option<bool>,
}

pub fn validate(cfg: &Config, out: &Out) -> Result<String> {
    let r = cfg.resolve()?;
    echo(cfg, &r, out)?;
    let agg = aggregate_data(cfg, &r)?;
    let avg = dataset_averages(&agg)?;
    let t = Units::Traffic;
    let got = [t.density_from_si(avg.rho), t.velocity_from_si(avg.v), t.flow_from_si(avg.q)];
    let verdict = cfg.data.expected.as_ref().map(|e| {
        let u = cfg.units;
        let want = [
            t.density_from_si(u.density_to_si(e.rho)),
            t.velocity_from_si(u.velocity_to_si(e.v)),
            t.flow_from_si(u.flow_to_si(e.q)),
        ];
        let worst = got.iter().zip(&want).map(|(g, w)| ((g - w) / w).abs()).fold(0.0, f64::max);
        (worst <= cfg.data.tolerance, worst, want)
    });
    let body = out.summary(
        "summary.toml",
        &ValidateSummary {
            domain: agg.domain,
            rho_veh_per_km: got[0],
            v_km_per_h: got[1],
            q_veh_per_h: got[2],
            within_tolerance: verdict.map(|v| v.0),
        },
    )?;
    match verdict {
        Some((false, worst, want)) => Err(DataError(format!(
            "averages ({:.2} veh/km, {:.2} km/h, {:.0} veh/h) differ from expected ({:.2}, {:.2}, {:.0}) by {:.1}%, tolerance {:.1}%",
            got[0],
            got[1],
            got[2],
            want[0],
            want[1],
            want[2],
            100.0 * worst,
            100.0 * cfg.data.tolerance
        ))
        .into()),
        _ => Ok(body),
    }
}
