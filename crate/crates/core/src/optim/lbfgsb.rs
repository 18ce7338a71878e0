//! Projected limited-memory BFGS for box constraints.
//!
//! Each iteration fixes the variables sitting on a bound with the gradient
//! pushing outward, builds a quasi-Newton direction for the remaining free
//! variables with the two-loop recursion, and backtracks along the projected
//! path `P(x + α d)` until an Armijo condition holds. Accepted iterates
//! therefore never increase the objective and always lie inside the box.

use std::collections::VecDeque;

use super::{BoxSpec, OptimReport, Termination};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Number of correction pairs kept.
    pub history: usize,
    /// Stop when `‖P(x - g) - x‖∞ ≤ tol · max(1, |f|)`.
    pub tol: f64,
    /// Stop when `(f_k - f_k+1) ≤ ftol · max(|f_k|, |f_k+1|, 1)`.
    pub ftol: f64,
    pub max_iter: usize,
    /// Backtracking steps allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { history: 10, tol: 1e-10, ftol: 1e3 * f64::EPSILON, max_iter: 15_000, max_line_search: 30 }
    }
}

const ARMIJO_C1: f64 = 1e-4;

struct Correction {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Minimizes `objective` over `bounds` from `x0` with default options, except
/// for the projected-gradient tolerance and the iteration cap.
pub fn minimize_box<F>(objective: F, x0: &[f64], bounds: &BoxSpec, tol: f64, max_iter: usize) -> (Vec<f64>, OptimReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let opts = LbfgsOptions { tol, max_iter, ..LbfgsOptions::default() };
    minimize_box_with(objective, x0, bounds, &opts)
}

/// `objective(x, grad)` returns `f(x)` and writes `∇f(x)` into `grad`.
///
/// `x0` is projected onto the box first. If the objective turns non-finite
/// during a line search the step is shortened; if no acceptable step exists
/// the best iterate so far is returned with
/// [`Termination::LineSearchFailure`].
pub fn minimize_box_with<F>(objective: F, x0: &[f64], bounds: &BoxSpec, opts: &LbfgsOptions) -> (Vec<f64>, OptimReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    run(objective, None, x0, bounds, opts)
}

/// Initial inverse-Hessian operator for the two-loop recursion.
///
/// `update` is called once per iteration at the current point; `apply` must
/// then act as a symmetric positive definite map.
pub trait InverseHessian {
    fn update(&mut self, x: &[f64]);
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// Like [`minimize_box_with`], with `h0` replacing the scalar initial matrix
/// of the two-loop recursion. The unit step is tried first, so a good `h0`
/// gives Newton-like steps.
pub fn minimize_box_preconditioned<F, H>(
    objective: F,
    h0: &mut H,
    x0: &[f64],
    bounds: &BoxSpec,
    opts: &LbfgsOptions,
) -> (Vec<f64>, OptimReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    H: InverseHessian,
{
    run(objective, Some(h0), x0, bounds, opts)
}

fn run<F>(
    mut objective: F,
    mut h0: Option<&mut dyn InverseHessian>,
    x0: &[f64],
    bounds: &BoxSpec,
    opts: &LbfgsOptions,
) -> (Vec<f64>, OptimReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    assert_eq!(x0.len(), bounds.len(), "x0 and bounds differ in dimension");
    let n = x0.len();
    let (lower, upper) = (bounds.lower(), bounds.upper());
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    let mut evaluations = 1;

    let report = |value, iterations, evaluations, pg, termination| OptimReport {
        value,
        iterations,
        evaluations,
        projected_gradient: pg,
        termination,
    };

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return (x, report(f, 0, evaluations, f64::NAN, Termination::LineSearchFailure));
    }

    let mut memory: VecDeque<Correction> = VecDeque::with_capacity(opts.history);
    let mut free = vec![false; n];
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.history.max(1)];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut scratch = vec![0.0; if h0.is_some() { n } else { 0 }];

    let mut iter = 0;
    while iter < opts.max_iter {
        let pg = projected_gradient_norm(&x, &g, lower, upper);
        if pg <= opts.tol * f.abs().max(1.0) {
            return (x, report(f, iter, evaluations, pg, Termination::Converged));
        }

        for i in 0..n {
            free[i] = !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0));
        }
        if let Some(h) = h0.as_deref_mut() {
            h.update(&x);
        }
        let h = h0.as_deref();
        two_loop(&memory, &g, &free, h, &mut scratch, &mut dir, &mut alpha_buf);
        if !(dot_masked(&g, &dir, &free) < 0.0) {
            memory.clear();
            steepest(&g, &free, h, &mut scratch, &mut dir);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                // quasi-Newton direction failed: restart from steepest descent
                if memory.is_empty() {
                    break;
                }
                memory.clear();
                steepest(&g, &free, h, &mut scratch, &mut dir);
            }
            let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut alpha = if memory.is_empty() && h.is_none() { (1.0 / dmax).min(1.0) } else { 1.0 };
            for _ in 0..opts.max_line_search {
                let mut decrease = 0.0;
                let mut moved = false;
                for i in 0..n {
                    x_new[i] = (x[i] + alpha * dir[i]).clamp(lower[i], upper[i]);
                    let step = x_new[i] - x[i];
                    moved |= step != 0.0;
                    decrease += g[i] * step;
                }
                if !moved {
                    break;
                }
                if decrease < 0.0 {
                    let f_try = objective(&x_new, &mut g_new);
                    evaluations += 1;
                    if f_try.is_finite() && g_new.iter().all(|v| v.is_finite()) && f_try <= f + ARMIJO_C1 * decrease {
                        accepted = Some(f_try);
                        break;
                    }
                    if f_try.is_finite() && f_try > f {
                        // minimizer of the quadratic through f, slope and f_try, safeguarded
                        let quad = -decrease * alpha / (2.0 * (f_try - f - decrease));
                        alpha = quad.clamp(0.1 * alpha, 0.5 * alpha);
                        continue;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some(f_new) = accepted else {
            let pg = projected_gradient_norm(&x, &g, lower, upper);
            return (x, report(f, iter, evaluations, pg, Termination::LineSearchFailure));
        };
        iter += 1;

        let mut sy = 0.0;
        let mut yy = 0.0;
        let mut s = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let si = x_new[i] - x[i];
            let yi = g_new[i] - g[i];
            sy += si * yi;
            yy += yi * yi;
            s.push(si);
            y.push(yi);
        }
        if sy > f64::EPSILON * yy && opts.history > 0 {
            if memory.len() == opts.history {
                memory.pop_front();
            }
            memory.push_back(Correction { s, y, rho: 1.0 / sy });
        }

        let reduction = f - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        let f_old = f;
        f = f_new;
        if reduction <= opts.ftol * f_old.abs().max(f.abs()).max(1.0) {
            let pg = projected_gradient_norm(&x, &g, lower, upper);
            return (x, report(f, iter, evaluations, pg, Termination::Converged));
        }
    }
    let pg = projected_gradient_norm(&x, &g, lower, upper);
    (x, report(f, iter, evaluations, pg, Termination::MaxIter))
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut norm = 0.0f64;
    for i in 0..x.len() {
        let p = (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i];
        norm = norm.max(p.abs());
    }
    norm
}

fn dot_masked(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter().zip(b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| x * y).sum()
}

/// `dir = -h0 g` on the free variables, falling back to `-g` when there is
/// no operator or its direction is not one of descent.
fn steepest(g: &[f64], free: &[bool], h0: Option<&dyn InverseHessian>, scratch: &mut [f64], dir: &mut [f64]) {
    for i in 0..g.len() {
        dir[i] = if free[i] { -g[i] } else { 0.0 };
    }
    if let Some(h) = h0 {
        scratch.copy_from_slice(dir);
        h.apply(scratch, dir);
        mask(dir, free);
        if !(dot_masked(g, dir, free) < 0.0) {
            for i in 0..g.len() {
                dir[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }
    }
}

fn mask(v: &mut [f64], free: &[bool]) {
    v.iter_mut().zip(free).filter(|(_, &f)| !f).for_each(|(v, _)| *v = 0.0);
}

/// `dir = -H g` on the free variables, zero elsewhere.
fn two_loop(
    memory: &VecDeque<Correction>,
    g: &[f64],
    free: &[bool],
    h0: Option<&dyn InverseHessian>,
    scratch: &mut [f64],
    dir: &mut [f64],
    alpha: &mut [f64],
) {
    for i in 0..g.len() {
        dir[i] = if free[i] { g[i] } else { 0.0 };
    }
    for (k, c) in memory.iter().enumerate().rev() {
        let a = c.rho * dot_masked(&c.s, dir, free);
        alpha[k] = a;
        for i in 0..dir.len() {
            if free[i] {
                dir[i] -= a * c.y[i];
            }
        }
    }
    match (h0, memory.back()) {
        (Some(h), _) => {
            scratch.copy_from_slice(dir);
            h.apply(scratch, dir);
            mask(dir, free);
        }
        (None, Some(last)) => {
            let yy: f64 = last.y.iter().map(|v| v * v).sum();
            let gamma = 1.0 / (last.rho * yy);
            dir.iter_mut().for_each(|v| *v *= gamma);
        }
        (None, None) => {}
    }
    for (k, c) in memory.iter().enumerate() {
        let b = c.rho * dot_masked(&c.y, dir, free);
        let coef = alpha[k] - b;
        for i in 0..dir.len() {
            if free[i] {
                dir[i] += coef * c.s[i];
            }
        }
    }
    dir.iter_mut().for_each(|v| *v = -*v);
}
