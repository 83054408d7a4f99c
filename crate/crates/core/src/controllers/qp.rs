//! Dense box-constrained QP with at most one extra linear inequality.
//!
//! The box part is solved by a two-metric projected Newton method, with an
//! interior point method for large or stubborn instances. A single
//! row `a . x <= b` is dualized and its multiplier found by bisection.

use nalgebra::{DMatrix, DVector};

const ARMIJO: f64 = 0.1;
const STEP_DECREASE: f64 = 0.6;
const MIN_STEP: f64 = 1e-20;
const MAX_ITERATIONS: usize = 100;
const INTERIOR_POINT_SIZE: usize = 200;
const INTERIOR_POINT_ITERATIONS: usize = 80;

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multiplier of the linear row (zero when absent or inactive).
    pub multiplier: f64,
    pub iterations: usize,
}

fn quad_value(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    g.dot(x) + 0.5 * x.dot(&(h * x))
}

fn project(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Minimizes `0.5 x'Hx + g'x` over `lo <= x <= hi`. `h` must be positive
/// definite on every free subspace.
///
/// Variables within a small distance of a bound, with the gradient pushing
/// outward, are treated as active; they move along the scaled negative
/// gradient while the rest take a Newton step. The combined step is searched
/// along its projection onto the box.
fn projected_newton(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
) -> (DVector<f64>, usize, bool) {
    let n = g.len();
    let mut x = x0.clone();
    project(&mut x, lo, hi);
    let mut value = quad_value(h, g, &x);
    let scale = 1.0 + g.amax();
    let mut active = vec![false; n];
    let mut factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> = None;
    let mut iterations = 0;

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let grad = g + h * &x;
        let stationarity = (0..n)
            .map(|i| ((x[i] - grad[i]).clamp(lo[i], hi[i]) - x[i]).abs())
            .fold(0.0, f64::max);
        if stationarity <= 1e-13 * scale {
            break;
        }
        let next_active: Vec<bool> = (0..n)
            .map(|i| {
                let eps = stationarity.min(0.01 * (hi[i] - lo[i]));
                (x[i] <= lo[i] + eps && grad[i] > 0.0) || (x[i] >= hi[i] - eps && grad[i] < 0.0)
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !next_active[i]).collect();
        if factor.is_none() || next_active != active {
            let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
            match sub.cholesky() {
                Some(ch) => factor = Some(ch),
                None => break,
            }
            active = next_active;
        }
        let chol = factor.as_ref().unwrap();

        let mut search = DVector::zeros(n);
        for i in 0..n {
            if active[i] {
                search[i] = -grad[i] / h[(i, i)].max(1e-12);
            }
        }
        if !free.is_empty() {
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
            let newton = chol.solve(&rhs);
            for (k, &i) in free.iter().enumerate() {
                search[i] = newton[k];
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step >= MIN_STEP {
            let mut candidate = &x + &search * step;
            project(&mut candidate, lo, hi);
            let moved = &candidate - &x;
            let decrease = grad.dot(&moved);
            let cand_value = quad_value(h, g, &candidate);
            if decrease < 0.0 && cand_value - value <= ARMIJO * decrease {
                accepted = Some((candidate, cand_value));
                break;
            }
            if moved.amax() == 0.0 {
                break;
            }
            step *= STEP_DECREASE;
        }
        let Some((candidate, cand_value)) = accepted else {
            break;
        };
        let improvement = value - cand_value;
        x = candidate;
        value = cand_value;
        if improvement <= 1e-15 * (1.0 + value.abs()) {
            break;
        }
    }
    let grad = g + h * &x;
    let converged = stationarity(&x, &grad, lo, hi) <= 1e-9 * scale;
    (x, iterations, converged)
}

fn stationarity(x: &DVector<f64>, grad: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (0..x.len())
        .map(|i| ((x[i] - grad[i]).clamp(lo[i], hi[i]) - x[i]).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `0.5 x'Hx + g'x` over `lo <= x <= hi`. `h` must be positive
/// definite.
///
/// Small problems use an active-set Newton method that profits from a good
/// starting point. Large ones, or small ones where that method stalls, go
/// to a primal-dual interior point method whose iteration count does not
/// depend on how many bounds end up active.
pub fn box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
) -> (DVector<f64>, usize) {
    if g.len() < INTERIOR_POINT_SIZE {
        let (x, iterations, converged) = projected_newton(h, g, lo, hi, x0);
        if converged {
            return (x, iterations);
        }
        let (y, more) = interior_point(h, g, lo, hi);
        return (y, iterations + more);
    }
    interior_point(h, g, lo, hi)
}

/// Mehrotra predictor-corrector on the box. Variables with `lo == hi` are
/// fixed up front.
fn interior_point(h: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> (DVector<f64>, usize) {
    let n = g.len();
    let mut out = DVector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]));
    let free: Vec<usize> = (0..n).filter(|&i| hi[i] - lo[i] > 1e-14).collect();
    if free.is_empty() {
        return (out, 0);
    }
    let m = free.len();
    // Reduced problem over the free variables.
    let hf = DMatrix::from_fn(m, m, |r, c| h[(free[r], free[c])]);
    let fixed = DVector::from_fn(n, |i, _| if free.contains(&i) { 0.0 } else { out[i] });
    let full_g = g + h * &fixed;
    let gf = DVector::from_fn(m, |k, _| full_g[free[k]]);
    let l = DVector::from_fn(m, |k, _| lo[free[k]]);
    let u = DVector::from_fn(m, |k, _| hi[free[k]]);

    let mut x = (&l + &u) * 0.5;
    let mut zl = DVector::from_element(m, 1.0 + gf.amax());
    let mut zu = zl.clone();
    let scale = 1.0 + gf.amax();
    let mut iterations = 0;
    for iter in 0..INTERIOR_POINT_ITERATIONS {
        iterations = iter + 1;
        let sl = &x - &l;
        let su = &u - &x;
        let rd = &hf * &x + &gf - &zl + &zu;
        let mu = (sl.dot(&zl) + su.dot(&zu)) / (2 * m) as f64;
        if rd.amax() <= 1e-11 * scale && mu <= 1e-13 * scale {
            break;
        }
        let mut kkt = hf.clone();
        for k in 0..m {
            kkt[(k, k)] += zl[k] / sl[k] + zu[k] / su[k];
        }
        let Some(chol) = kkt.cholesky() else {
            break;
        };
        // Newton direction for complementarity targets `sl zl = cl`, `su zu = cu`.
        let direction = |cl: &DVector<f64>, cu: &DVector<f64>| {
            let rhs = DVector::from_fn(m, |k, _| -rd[k] + cl[k] / sl[k] - cu[k] / su[k]);
            let dx = chol.solve(&rhs);
            let dzl = DVector::from_fn(m, |k, _| (cl[k] - zl[k] * dx[k]) / sl[k]);
            let dzu = DVector::from_fn(m, |k, _| (cu[k] + zu[k] * dx[k]) / su[k]);
            (dx, dzl, dzu)
        };
        let max_step = |dx: &DVector<f64>, dzl: &DVector<f64>, dzu: &DVector<f64>| {
            let mut a: f64 = 1.0;
            for k in 0..m {
                if dx[k] < 0.0 {
                    a = a.min(-sl[k] / dx[k]);
                }
                if dx[k] > 0.0 {
                    a = a.min(su[k] / dx[k]);
                }
                if dzl[k] < 0.0 {
                    a = a.min(-zl[k] / dzl[k]);
                }
                if dzu[k] < 0.0 {
                    a = a.min(-zu[k] / dzu[k]);
                }
            }
            a
        };
        let cl = -sl.component_mul(&zl);
        let cu = -su.component_mul(&zu);
        let (ax, azl, azu) = direction(&cl, &cu);
        let a_aff = max_step(&ax, &azl, &azu);
        let mu_aff = ((&sl + &ax * a_aff).dot(&(&zl + &azl * a_aff)) + (&su - &ax * a_aff).dot(&(&zu + &azu * a_aff)))
            / (2 * m) as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let cl = DVector::from_fn(m, |k, _| sigma * mu - sl[k] * zl[k] - ax[k] * azl[k]);
        let cu = DVector::from_fn(m, |k, _| sigma * mu - su[k] * zu[k] + ax[k] * azu[k]);
        let (dx, dzl, dzu) = direction(&cl, &cu);
        let a = (0.995 * max_step(&dx, &dzl, &dzu)).min(1.0);
        x += &dx * a;
        zl += &dzl * a;
        zu += &dzu * a;
    }
    for (k, &i) in free.iter().enumerate() {
        out[i] = x[k].clamp(lo[i], hi[i]);
    }
    (out, iterations)
}

/// Box QP plus the single row `a . x <= b`, found by bisection on the
/// row's multiplier. The returned point always satisfies the row.
pub fn box_qp_with_row(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
    row: Option<(&DVector<f64>, f64)>,
) -> QpSolution {
    let (x, iterations) = box_qp(h, g, lo, hi, x0);
    let Some((a, b)) = row else {
        return QpSolution {
            x,
            multiplier: 0.0,
            iterations,
        };
    };
    let tol = 1e-12 * (1.0 + b.abs());
    if a.dot(&x) <= b + tol {
        return QpSolution {
            x,
            multiplier: 0.0,
            iterations,
        };
    }
    let mut total = iterations;
    let solve = |lambda: f64, start: &DVector<f64>, total: &mut usize| {
        let (x, it) = box_qp(h, &(g + a * lambda), lo, hi, start);
        *total += it;
        x
    };
    let mut lam_lo = 0.0;
    let mut lam_hi = 1.0;
    let mut x_hi = solve(lam_hi, &x, &mut total);
    let mut guard = 0;
    while a.dot(&x_hi) > b + tol && guard < 80 {
        lam_lo = lam_hi;
        lam_hi *= 4.0;
        x_hi = solve(lam_hi, &x_hi, &mut total);
        guard += 1;
    }
    for _ in 0..60 {
        if lam_hi - lam_lo <= 1e-12 * (1.0 + lam_hi) {
            break;
        }
        let mid = 0.5 * (lam_lo + lam_hi);
        let x_mid = solve(mid, &x_hi, &mut total);
        if a.dot(&x_mid) > b + tol {
            lam_lo = mid;
        } else {
            lam_hi = mid;
            x_hi = x_mid;
            if (a.dot(&x_hi) - b).abs() <= tol {
                break;
            }
        }
    }
    QpSolution {
        x: x_hi,
        multiplier: lam_hi,
        iterations: total,
    }
}
