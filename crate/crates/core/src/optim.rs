//! Derivative-free bounded Nelder–Mead.
//!
//! Box bounds are enforced by clamping every trial vertex onto the box.

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_iterations: usize,
    /// Stop when the spread of function values across the simplex falls
    /// below `f_tol * (|f_best| + f_floor)`.
    pub f_tol: T,
    pub f_floor: T,
    /// Stop when every vertex lies within `x_tol` (relative to `|x| + 1`) of the best one.
    pub x_tol: T,
    /// Relative size of the initial simplex.
    pub initial_step: T,
}

impl<T: Real> Default for NelderMeadOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            f_tol: T::lit(1e-15),
            f_floor: T::lit(1e-300),
            x_tol: T::lit(1e-13),
            initial_step: T::lit(0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult<T> {
    pub x: Vec<T>,
    pub f: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp<T: Real>(x: &mut [T], lower: &[T], upper: &[T]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.max(lo).min(hi);
    }
}

pub fn nelder_mead<T: Real, F: FnMut(&[T]) -> T>(
    mut objective: F,
    start: &[T],
    lower: &[T],
    upper: &[T],
    opts: &NelderMeadOptions<T>,
) -> NelderMeadResult<T> {
    let n = start.len();
    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    let mut evals = 0usize;
    let mut eval = |x: &[T]| {
        evals += 1;
        let f = objective(x);
        if f.is_nan() {
            T::infinity()
        } else {
            f
        }
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    clamp(&mut x0, lower, upper);
    simplex.push(x0.clone());
    for i in 0..n {
        let mut xi = x0.clone();
        let step = if xi[i] != T::zero() {
            opts.initial_step * xi[i]
        } else {
            opts.initial_step
        };
        xi[i] = xi[i] + step;
        clamp(&mut xi, lower, upper);
        if xi[i] == x0[i] {
            // pinned against a bound: step inward instead
            xi[i] = x0[i] - step;
            clamp(&mut xi, lower, upper);
        }
        simplex.push(xi);
    }
    let mut values: Vec<T> = simplex.iter().map(|x| eval(x)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        let f_spread = worst - best;
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(&a, &b)| (a - b).abs() / (b.abs() + T::one()))
            })
            .fold(T::zero(), T::max);
        if f_spread <= opts.f_tol * (best.abs() + opts.f_floor) || x_spread <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![T::zero(); n];
        for v in &simplex[..n] {
            for (c, &x) in centroid.iter_mut().zip(v) {
                *c = *c + x / T::count(n);
            }
        }
        let along = |coef: T| -> Vec<T> {
            let mut p: Vec<T> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(&c, &w)| c + coef * (c - w))
                .collect();
            clamp(&mut p, lower, upper);
            p
        };

        let reflected = along(alpha);
        let f_r = eval(&reflected);
        if f_r < values[0] {
            let expanded = along(gamma);
            let f_e = eval(&expanded);
            if f_e < f_r {
                simplex[n] = expanded;
                values[n] = f_e;
            } else {
                simplex[n] = reflected;
                values[n] = f_r;
            }
            continue;
        }
        if f_r < values[n - 1] {
            simplex[n] = reflected;
            values[n] = f_r;
            continue;
        }
        let (contracted, f_c) = if f_r < values[n] {
            let c = along(rho * alpha);
            let f = eval(&c);
            (c, f)
        } else {
            let c = along(-rho);
            let f = eval(&c);
            (c, f)
        };
        if f_c < values[n].min(f_r) {
            simplex[n] = contracted;
            values[n] = f_c;
            continue;
        }
        // shrink toward the best vertex
        let best_x = simplex[0].clone();
        for i in 1..=n {
            let mut p: Vec<T> = simplex[i]
                .iter()
                .zip(&best_x)
                .map(|(&x, &b)| b + sigma * (x - b))
                .collect();
            clamp(&mut p, lower, upper);
            values[i] = eval(&p);
            simplex[i] = p;
        }
    }

    let (i_best, _) = values
        .iter()
        .enumerate()
        .fold((0, T::infinity()), |acc, (i, &f)| if f < acc.1 { (i, f) } else { acc });
    NelderMeadResult {
        x: simplex[i_best].clone(),
        f: values[i_best],
        iterations,
        evaluations: evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &NelderMeadOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 3.0).powi(2) + (x[1] - 0.5).powi(2);
        let r = nelder_mead(f, &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], &NelderMeadOptions::default());
        assert!(r.x[0] >= 0.0 && r.x[0] < 1e-8);
        assert!((r.x[1] - 0.5).abs() < 1e-6);
    }
}
