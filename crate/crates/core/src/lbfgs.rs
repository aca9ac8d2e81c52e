//! Limited-memory BFGS with a projected backtracking line search.
//!
//! Box bounds are enforced by projection. A coordinate sitting on a bound
//! whose gradient points outward is frozen for that iteration, which is
//! enough for the single clamped coordinate (the ratio offset) the fitters
//! need.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged once the projected gradient's max-norm drops to this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step improves the value by less than this
    /// fraction.
    pub function_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { memory: 10, max_iterations: 1000, gradient_tolerance: 1e-8, function_tolerance: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], bounds: &[(f64, f64)], out: &mut [f64]) {
    for i in 0..x.len() {
        let (lo, hi) = bounds[i];
        out[i] = if (x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0) { 0.0 } else { g[i] };
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Minimizes `f`, which returns the value at `x` and writes the gradient
/// into its second argument. `bounds` holds one `(lo, hi)` per coordinate;
/// use infinities for free coordinates.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], cfg: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    assert_eq!(bounds.len(), dim, "one bound pair per coordinate");

    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    let mut pg = vec![0.0; dim];
    projected_gradient(&x, &g, bounds, &mut pg);

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LbfgsOutcome { x, value: fx, iterations: 0, converged: false, gradient_norm: f64::INFINITY };
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut d = vec![0.0; dim];
    let mut alpha_buf = vec![0.0; cfg.memory.max(1)];
    let mut x_trial = vec![0.0; dim];
    let mut g_trial = vec![0.0; dim];
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let gnorm = inf_norm(&pg);
        if gnorm <= cfg.gradient_tolerance {
            return LbfgsOutcome { x, value: fx, iterations, converged: true, gradient_norm: gnorm };
        }
        iterations += 1;

        // frozen coordinates: on a bound with the gradient pushing outward
        let frozen: Vec<bool> = (0..dim).map(|i| pg[i] == 0.0 && g[i] != 0.0).collect();

        two_loop(&history, &pg, &mut d, &mut alpha_buf);
        for i in 0..dim {
            if frozen[i] {
                d[i] = 0.0;
            }
        }
        let mut slope = dot(&pg, &d);
        if !(slope < 0.0) {
            history.clear();
            for i in 0..dim {
                d[i] = -pg[i];
            }
            slope = dot(&pg, &d);
        }

        let mut accepted = false;
        for attempt in 0..2 {
            let mut step = if history.is_empty() { 1.0 / dot(&pg, &pg).sqrt() } else { 1.0 };
            for _ in 0..MAX_BACKTRACKS {
                for i in 0..dim {
                    x_trial[i] = x[i] + step * d[i];
                }
                project(&mut x_trial, bounds);
                if x_trial == x {
                    break;
                }
                let f_trial = f(&x_trial, &mut g_trial);
                let decrease: f64 = g.iter().zip(x_trial.iter().zip(&x)).map(|(gi, (xt, xi))| gi * (xt - xi)).sum();
                if f_trial.is_finite() && g_trial.iter().all(|v| v.is_finite()) && f_trial <= fx + ARMIJO_C1 * decrease
                {
                    accepted = true;
                    let s: Vec<f64> = x_trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > f64::EPSILON * dot(&y, &y) {
                        if history.len() == cfg.memory {
                            history.pop_front();
                        }
                        history.push_back(Pair { s, y, rho: 1.0 / sy });
                    }
                    let improvement = fx - f_trial;
                    let scale = fx.abs().max(f_trial.abs()).max(f64::MIN_POSITIVE);
                    std::mem::swap(&mut x, &mut x_trial);
                    std::mem::swap(&mut g, &mut g_trial);
                    fx = f_trial;
                    projected_gradient(&x, &g, bounds, &mut pg);
                    if improvement <= cfg.function_tolerance * scale {
                        let gnorm = inf_norm(&pg);
                        return LbfgsOutcome {
                            x,
                            value: fx,
                            iterations,
                            converged: gnorm <= cfg.gradient_tolerance,
                            gradient_norm: gnorm,
                        };
                    }
                    break;
                }
                step = if f_trial.is_finite() {
                    // minimizer of the quadratic through phi(0), phi'(0), phi(step)
                    let q = -slope * step * step / (2.0 * (f_trial - fx - slope * step));
                    q.clamp(0.1 * step, 0.5 * step)
                } else {
                    0.1 * step
                };
            }
            if accepted || attempt == 1 || history.is_empty() {
                break;
            }
            // retry once along steepest descent with fresh curvature memory
            history.clear();
            for i in 0..dim {
                d[i] = if frozen[i] { 0.0 } else { -pg[i] };
            }
            slope = dot(&pg, &d);
        }

        if !accepted {
            break;
        }
    }

    let gnorm = inf_norm(&pg);
    LbfgsOutcome { x, value: fx, iterations, converged: gnorm <= cfg.gradient_tolerance, gradient_norm: gnorm }
}

/// `d = -H g` from the stored curvature pairs.
fn two_loop(history: &VecDeque<Pair>, g: &[f64], d: &mut [f64], alpha: &mut [f64]) {
    for (di, gi) in d.iter_mut().zip(g) {
        *di = -gi;
    }
    for (k, p) in history.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, d);
        alpha[k] = a;
        for (di, yi) in d.iter_mut().zip(&p.y) {
            *di -= a * yi;
        }
    }
    if let Some(last) = history.back() {
        let gamma = 1.0 / (last.rho * dot(&last.y, &last.y));
        for di in d.iter_mut() {
            *di *= gamma;
        }
    }
    for (k, p) in history.iter().enumerate() {
        let b = p.rho * dot(&p.y, d);
        for (di, si) in d.iter_mut().zip(&p.s) {
            *di += (alpha[k] - b) * si;
        }
    }
}
