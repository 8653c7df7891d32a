//! Normalized L² estimation errors
//!
//! ```text
//! E_rho(t) = ( 1/L int ((rho - rho_hat) / rho*)^2 dx )^(1/2)
//! ```
//!
//! (and `E_v` with `v*`), evaluated by the trapezoid rule over cell centres
//! and divided by the length actually covered.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::solver::{StateField, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSeries<T> {
    pub times: Vec<T>,
    pub e_rho: Vec<T>,
    pub e_v: Vec<T>,
}

impl<T: Real> ErrorSeries<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `max(E_rho, E_v)` per sample.
    pub fn combined(&self) -> Vec<T> {
        self.e_rho.iter().zip(&self.e_v).map(|(&a, &b)| a.max(b)).collect()
    }

    /// Convergence time of `max(E_rho, E_v)`.
    pub fn convergence_time(&self, threshold: T) -> Option<T> {
        convergence_time(&self.times, &self.combined(), threshold)
    }

    pub fn final_errors(&self) -> Option<(T, T)> {
        Some((*self.e_rho.last()?, *self.e_v.last()?))
    }

    /// Writes `t_s, e_rho, e_v`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "e_rho", "e_v"])?;
        for k in 0..self.len() {
            w.write_record(&[self.times[k].to_string(), self.e_rho[k].to_string(), self.e_v[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trapezoid mean of `f^2` over the nodes `x` where `mask` holds.
///
/// Only intervals between neighbouring valid nodes contribute, and the sum
/// is divided by their total length. If no two neighbours are valid the
/// plain mean over valid nodes is used. Returns `None` when nothing is valid.
fn mean_square<T: Real>(x: &[T], f: &[T], mask: Option<&[bool]>) -> Option<T> {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let (mut integral, mut span) = (T::zero(), T::zero());
    for j in 1..x.len() {
        if valid(j - 1) && valid(j) {
            let h = x[j] - x[j - 1];
            integral = integral + T::lit(0.5) * h * (f[j - 1] * f[j - 1] + f[j] * f[j]);
            span = span + h;
        }
    }
    if span > T::zero() {
        return Some(integral / span);
    }
    let (s, n) = (0..x.len())
        .filter(|&j| valid(j))
        .fold((T::zero(), 0usize), |(s, n), j| (s + f[j] * f[j], n + 1));
    (n > 0).then(|| s / T::count(n))
}

/// `(E_rho, E_v)` between two fields on the nodes `x`.
pub fn l2_error<T: Real>(
    x: &[T],
    truth: &StateField<T>,
    estimate: &StateField<T>,
    rho_star: T,
    v_star: T,
    mask: Option<&[bool]>,
) -> Result<(T, T)> {
    let m = x.len();
    let sizes = [truth.rho.len(), truth.v.len(), estimate.rho.len(), estimate.v.len()];
    if sizes.iter().any(|&s| s != m) || mask.is_some_and(|k| k.len() != m) {
        return Err(Error::GridMismatch(format!(
            "fields of sizes {sizes:?} on {m} nodes"
        )));
    }
    let d_rho: Vec<T> = (0..m).map(|j| (truth.rho[j] - estimate.rho[j]) / rho_star).collect();
    let d_v: Vec<T> = (0..m).map(|j| (truth.v[j] - estimate.v[j]) / v_star).collect();
    match (mean_square(x, &d_rho, mask), mean_square(x, &d_v, mask)) {
        (Some(a), Some(b)) => Ok((a.sqrt(), b.sqrt())),
        _ => Err(Error::Data("no valid cells to compare".into())),
    }
}

/// Error series between two trajectories sampled at the same times.
pub fn l2_error_series<T: Real>(truth: &Trajectory<T>, estimate: &Trajectory<T>, rho_star: T, v_star: T) -> Result<ErrorSeries<T>> {
    l2_error_series_masked(truth, estimate, rho_star, v_star, None)
}

/// As [`l2_error_series`], excluding cells where `masks[k][j]` is false.
/// Samples with no valid cell are skipped.
pub fn l2_error_series_masked<T: Real>(
    truth: &Trajectory<T>,
    estimate: &Trajectory<T>,
    rho_star: T,
    v_star: T,
    masks: Option<&[Vec<bool>]>,
) -> Result<ErrorSeries<T>> {
    check_alignment(truth, estimate)?;
    if masks.is_some_and(|m| m.len() != truth.times.len()) {
        return Err(Error::GridMismatch("mask count differs from sample count".into()));
    }
    let mut out = ErrorSeries {
        times: vec![],
        e_rho: vec![],
        e_v: vec![],
    };
    for k in 0..truth.times.len() {
        let mask = masks.map(|m| m[k].as_slice());
        if mask.is_some_and(|m| !m.iter().any(|&b| b)) {
            continue;
        }
        let (a, b) = l2_error(&truth.x, &truth.fields[k], &estimate.fields[k], rho_star, v_star, mask)?;
        out.times.push(truth.times[k]);
        out.e_rho.push(a);
        out.e_v.push(b);
    }
    Ok(out)
}

fn check_alignment<T: Real>(a: &Trajectory<T>, b: &Trajectory<T>) -> Result<()> {
    if a.x.len() != b.x.len() || a.x.iter().zip(&b.x).any(|(p, q)| (*p - *q).abs() > T::lit(1e-9) * (p.abs() + T::one())) {
        return Err(Error::GridMismatch("trajectories use different spatial grids".into()));
    }
    if a.times.len() != b.times.len()
        || a.times.iter().zip(&b.times).any(|(p, q)| (*p - *q).abs() > T::lit(1e-9) * (p.abs() + T::one()))
    {
        return Err(Error::GridMismatch(format!(
            "trajectories sampled at different times ({} vs {} samples)",
            a.times.len(),
            b.times.len()
        )));
    }
    Ok(())
}

/// Earliest sample time after which `values` stays below `threshold` for
/// the rest of the series.
pub fn convergence_time<T: Real>(times: &[T], values: &[T], threshold: T) -> Option<T> {
    let last_bad = values.iter().rposition(|&v| !(v < threshold));
    match last_bad {
        None => times.first().copied(),
        Some(k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nodes(m: usize) -> Vec<f64> {
        (0..m).map(|j| (j as f64 + 0.5) * 400.0 / m as f64).collect()
    }

    #[test]
    fn identical_fields_give_zero() {
        let x = nodes(41);
        let f = StateField::uniform(41, 0.12, 10.0);
        assert_eq!(l2_error(&x, &f, &f, 0.12, 10.0, None).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offset_is_exact() {
        let x = nodes(41);
        let truth = StateField::uniform(41, 0.12, 10.0);
        for delta in [0.05, -0.2, 1e-3] {
            let est = StateField::uniform(41, 0.12 * (1.0 + delta), 10.0 * (1.0 - delta));
            let (er, ev) = l2_error(&x, &truth, &est, 0.12, 10.0, None).unwrap();
            assert_relative_eq!(er, delta.abs(), max_relative = 1e-12);
            assert_relative_eq!(ev, delta.abs(), max_relative = 1e-12);
        }
    }

    #[test]
    fn scale_equivariance() {
        let x = nodes(41);
        let truth = StateField::uniform(41, 0.12, 10.0);
        let est = |k: f64| StateField::uniform(41, 0.12 + k * 0.003, 10.0 - k * 0.4);
        let (a, b) = l2_error(&x, &truth, &est(1.0), 0.12, 10.0, None).unwrap();
        let (a3, b3) = l2_error(&x, &truth, &est(-3.0), 0.12, 10.0, None).unwrap();
        assert_relative_eq!(a3, 3.0 * a, max_relative = 1e-12);
        assert_relative_eq!(b3, 3.0 * b, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_converges_for_smooth_fields() {
        let e = |m: usize| {
            let x = nodes(m);
            let truth = StateField::uniform(m, 0.12, 10.0);
            let est = StateField {
                rho: x.iter().map(|&x| 0.12 + 0.01 * (x / 90.0).sin()).collect(),
                v: vec![10.0; m],
            };
            l2_error(&x, &truth, &est, 0.12, 10.0, None).unwrap().0
        };
        let (a, b) = (e(200), e(400));
        assert!(((a - b) / b).abs() < 0.01);
    }

    #[test]
    fn masked_cells_are_excluded() {
        let x = nodes(10);
        let truth = StateField::uniform(10, 0.12, 10.0);
        let mut est = StateField::uniform(10, 0.12 * 1.1, 10.0);
        est.rho[9] = 100.0;
        let mut mask = vec![true; 10];
        mask[9] = false;
        let (er, _) = l2_error(&x, &truth, &est, 0.12, 10.0, Some(&mask)).unwrap();
        assert_relative_eq!(er, 0.1, max_relative = 1e-12);
        assert!(l2_error(&x, &truth, &est, 0.12, 10.0, Some(&[false; 10])).is_err());
    }

    #[test]
    fn mismatched_grids_rejected() {
        let mut a = Trajectory::new(nodes(4));
        a.push(0.0, StateField::uniform(4, 0.1, 1.0));
        let mut b = Trajectory::new(nodes(5));
        b.push(0.0, StateField::uniform(5, 0.1, 1.0));
        assert!(matches!(l2_error_series(&a, &b, 0.1, 1.0), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn convergence_time_examples() {
        let times: Vec<f64> = (0..=300).map(|k| k as f64).collect();
        let decay: Vec<f64> = times.iter().map(|&t| if t < 180.0 { 0.5 - t / 450.0 } else { 0.09 - (t - 180.0) / 1e4 }).collect();
        assert_eq!(convergence_time(&times, &decay, 0.1), Some(180.0));
        assert_eq!(convergence_time(&times, &vec![0.5; 301], 0.1), None);
        assert_eq!(convergence_time(&times, &vec![0.01; 301], 0.1), Some(0.0));
        let mut bounce = vec![0.01; 301];
        bounce[250] = 0.2;
        assert_eq!(convergence_time(&times, &bounce, 0.1), Some(251.0));
    }
}
