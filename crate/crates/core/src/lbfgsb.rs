//! Limited-memory quasi-Newton minimization under box constraints.
//!
//! Variables at a bound whose gradient pushes outward are held fixed; the
//! rest move along the two-loop quasi-Newton direction. Steps that stay
//! inside the box use a strong Wolfe line search; steps that would leave it
//! backtrack along the projected path instead.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Stop when the projected gradient's largest entry is at most this.
    pub pgtol: f64,
    /// Stop when `(f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)` is at most this.
    pub ftol: f64,
    pub max_iters: usize,
    /// Budget on objective evaluations, line searches included.
    pub max_evals: usize,
    /// Evaluations allowed per line search.
    pub max_line_evals: usize,
    #[serde(skip)]
    pub time_limit: Option<Duration>,
}

impl Default for LbfgsbConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            pgtol: 1e-5,
            ftol: 1e7 * f64::EPSILON,
            max_iters: 15_000,
            max_evals: 15_000,
            max_line_evals: 20,
            time_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ProjectedGradient,
    RelativeReduction,
    IterationLimit,
    EvaluationLimit,
    TimeLimit,
    LineSearchFailure,
    NonFinite,
    /// The per-iteration observer asked to stop.
    Stopped,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::ProjectedGradient | Termination::RelativeReduction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsbResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Forward differences with absolute step `h`, stepping backward where a
/// forward step would leave the box. Costs `x.len()` extra evaluations.
pub fn forward_difference<F>(f: &mut F, x: &[f64], fx: f64, upper: &[f64], h: f64, g: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let step = if x[i] + h > upper[i] { -h } else { h };
        probe[i] = x[i] + step;
        g[i] = (f(&probe) - fx) / step;
        probe[i] = x[i];
    }
}

struct Memory {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    cap: usize,
}

impl Memory {
    fn new(cap: usize) -> Self {
        Self {
            s: VecDeque::new(),
            y: VecDeque::new(),
            cap,
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= f64::EPSILON * dot(&y, &y) || sy <= 0.0 {
            return;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
    }

    /// `-H g` over the free coordinates; fixed coordinates get zero.
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let masked = |v: &[f64], w: &[f64]| -> f64 {
            v.iter().zip(w).zip(free).filter(|(_, &f)| f).map(|((a, b), _)| a * b).sum()
        };
        let mut q: Vec<f64> = g.iter().zip(free).map(|(&gi, &f)| if f { gi } else { 0.0 }).collect();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / masked(&self.s[i], &self.y[i]);
            if !rho.is_finite() || rho <= 0.0 {
                continue;
            }
            alpha[i] = rho * masked(&self.s[i], &q);
            for (j, qj) in q.iter_mut().enumerate() {
                if free[j] {
                    *qj -= alpha[i] * self.y[i][j];
                }
            }
        }
        if let Some(last) = k.checked_sub(1) {
            let gamma = masked(&self.s[last], &self.y[last]) / masked(&self.y[last], &self.y[last]);
            if gamma.is_finite() && gamma > 0.0 {
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for i in 0..k {
            let rho = 1.0 / masked(&self.s[i], &self.y[i]);
            if !rho.is_finite() || rho <= 0.0 {
                continue;
            }
            let beta = rho * masked(&self.y[i], &q);
            for (j, qj) in q.iter_mut().enumerate() {
                if free[j] {
                    *qj += (alpha[i] - beta) * self.s[i][j];
                }
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| ((x[i] - g[i]).clamp(lower[i], upper[i]) - x[i]).abs())
        .fold(0.0, f64::max)
}

/// Largest step along `d` that stays inside the box.
fn max_step(x: &[f64], d: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut t = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            t = t.min((upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            t = t.min((lower[i] - x[i]) / d[i]);
        }
    }
    t.max(0.0)
}

struct Trial {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept
/// inside the middle 80% of the bracket.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let guard = 0.1 * (hi - lo);
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t > lo + guard && t < hi - guard {
        t
    } else {
        mid
    }
}

/// Minimizes `f` over the box `[lower, upper]` (entries may be infinite).
/// `fg(x, g)` returns `f(x)` and writes the gradient into `g`.
pub fn minimize<F>(fg: F, x0: &[f64], lower: &[f64], upper: &[f64], cfg: &LbfgsbConfig) -> LbfgsbResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    minimize_observed(fg, x0, lower, upper, cfg, |_, _| false)
}

/// [`minimize`] that reports the start point and every accepted iterate to
/// `observe(x, f)`; returning `true` stops with [`Termination::Stopped`].
pub fn minimize_observed<F, O>(
    mut fg: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &LbfgsbConfig,
    mut observe: O,
) -> LbfgsbResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    O: FnMut(&[f64], f64) -> bool,
{
    let start = Instant::now();
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut evals = 1;
    let mut mem = Memory::new(cfg.memory.max(1));
    let finish = |x: Vec<f64>, f: f64, g: Vec<f64>, iterations, evaluations, termination| LbfgsbResult {
        x,
        f,
        g,
        iterations,
        evaluations,
        termination,
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, f, g, 0, evals, Termination::NonFinite);
    }
    if observe(&x, f) {
        return finish(x, f, g, 0, evals, Termination::Stopped);
    }
    let mut iter = 0;
    loop {
        if projected_gradient_norm(&x, &g, lower, upper) <= cfg.pgtol {
            return finish(x, f, g, iter, evals, Termination::ProjectedGradient);
        }
        if iter >= cfg.max_iters {
            return finish(x, f, g, iter, evals, Termination::IterationLimit);
        }
        if evals >= cfg.max_evals {
            return finish(x, f, g, iter, evals, Termination::EvaluationLimit);
        }
        if cfg.time_limit.is_some_and(|t| start.elapsed() >= t) {
            return finish(x, f, g, iter, evals, Termination::TimeLimit);
        }
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let mut d = mem.direction(&g, &free);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = mem.direction(&g, &free);
            slope = dot(&g, &d);
        }
        let alpha0 = if mem.is_empty() {
            (1.0 / d.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
        } else {
            1.0
        };
        let budget = cfg.max_line_evals.min(cfg.max_evals - evals);
        let bound = max_step(&x, &d, lower, upper);
        let (trial, used) = if bound >= alpha0 {
            wolfe_search(&mut fg, &x, f, &d, slope, alpha0, bound, budget)
        } else {
            projected_search(&mut fg, &x, f, &g, &d, alpha0, lower, upper, budget)
        };
        evals += used;
        let Some(trial) = trial else {
            if !mem.is_empty() {
                mem.clear();
                iter += 1;
                continue;
            }
            return finish(x, f, g, iter, evals, Termination::LineSearchFailure);
        };
        iter += 1;
        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        mem.push(s, y);
        let reduction = (f - trial.f) / f.abs().max(trial.f.abs()).max(1.0);
        x = trial.x;
        f = trial.f;
        g = trial.g;
        if observe(&x, f) {
            return finish(x, f, g, iter, evals, Termination::Stopped);
        }
        if reduction <= cfg.ftol {
            return finish(x, f, g, iter, evals, Termination::RelativeReduction);
        }
    }
}

fn eval_at<F>(fg: &mut F, x: &[f64], d: &[f64], t: f64) -> Trial
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
    let mut gt = vec![0.0; x.len()];
    let ft = fg(&xt, &mut gt);
    Trial { x: xt, f: ft, g: gt }
}

fn finite(t: &Trial) -> bool {
    t.f.is_finite() && t.g.iter().all(|v| v.is_finite())
}

/// Strong Wolfe search (`c1 = 1e-3`, `c2 = 0.9`) on `[0, bound]`. On an
/// exhausted budget the best point with sufficient decrease is returned.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    fg: &mut F,
    x: &[f64],
    f0: f64,
    d: &[f64],
    slope0: f64,
    alpha0: f64,
    bound: f64,
    budget: usize,
) -> (Option<Trial>, usize)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const C1: f64 = 1e-3;
    const C2: f64 = 0.9;
    let armijo = |t: f64, f: f64| f <= f0 + C1 * t * slope0;
    let mut used = 0;
    // (step, value, slope) of the previous trial and its point
    let mut prev = (0.0, f0, slope0);
    let mut prev_trial: Option<Trial> = None;
    let mut t = alpha0;
    let (mut lo, mut hi, mut lo_trial) = loop {
        if used >= budget {
            return (prev_trial, used);
        }
        let trial = eval_at(fg, x, d, t);
        used += 1;
        if !finite(&trial) {
            t = prev.0 + 0.5 * (t - prev.0);
            continue;
        }
        let slope = dot(&trial.g, d);
        if !armijo(t, trial.f) || (prev_trial.is_some() && trial.f >= prev.1) {
            break (prev, (t, trial.f, slope), prev_trial);
        }
        if slope.abs() <= -C2 * slope0 {
            return (Some(trial), used);
        }
        if slope >= 0.0 {
            break ((t, trial.f, slope), prev, Some(trial));
        }
        prev = (t, trial.f, slope);
        prev_trial = Some(trial);
        if t >= bound {
            return (prev_trial, used);
        }
        t = (2.0 * t).min(bound);
    };
    while used < budget {
        let t = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        let trial = eval_at(fg, x, d, t);
        used += 1;
        if !finite(&trial) {
            hi = (t, f64::INFINITY, 0.0);
            continue;
        }
        let slope = dot(&trial.g, d);
        if !armijo(t, trial.f) || trial.f >= lo.1 {
            hi = (t, trial.f, slope);
        } else {
            if slope.abs() <= -C2 * slope0 {
                return (Some(trial), used);
            }
            if slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (t, trial.f, slope);
            lo_trial = Some(trial);
        }
        if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1.0) {
            break;
        }
    }
    (lo_trial, used)
}

/// Armijo backtracking along `P(x + t d)`.
#[allow(clippy::too_many_arguments)]
fn projected_search<F>(
    fg: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    lower: &[f64],
    upper: &[f64],
    budget: usize,
) -> (Option<Trial>, usize)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const C1: f64 = 1e-4;
    let mut t = alpha0;
    let mut used = 0;
    while used < budget {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        project(&mut xt, lower, upper);
        let decrease: f64 = g0.iter().zip(xt.iter().zip(x)).map(|(g, (a, b))| g * (a - b)).sum();
        if decrease >= 0.0 {
            return (None, used);
        }
        let mut gt = vec![0.0; x.len()];
        let ft = fg(&xt, &mut gt);
        used += 1;
        let trial = Trial { x: xt, f: ft, g: gt };
        if finite(&trial) && ft <= f0 + C1 * decrease {
            return (Some(trial), used);
        }
        t *= 0.5;
    }
    (None, used)
}
