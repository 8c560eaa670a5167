//! Infeasible-start primal-dual path following over products of free,
//! nonnegative and exponential cones.
//!
//! Internally the program is handled in minimization form
//! `min q^T x, A x = b, x in K` with `q = -c`, dual `max b^T y, A^T y + s = q,
//! s in K*`. Each iteration linearizes the centering condition
//! `s = -sigma mu grad F(x)` with a primal-dual scaling `W` (`W x = s`): the
//! `s / x` diagonal on nonnegative coordinates and a secant-corrected
//! barrier Hessian on exponential blocks. A predictor step sets the
//! centering weight, a combined step follows, and the step length is cut back
//! until both iterates are strictly interior and every block stays inside a
//! neighborhood of the central path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{
    chol3, chol3_solve, exp_dual_barrier, exp_grad_hess, exp_third_order, exp_pd_scaling, in_exp_dual_interior, in_exp_interior,
    max_step_in, EXP_CENTRAL_POINT,
};
use crate::cone::{barrier_degree, place, ConeBlock, PlacedBlock};
use crate::kkt::{inf_norm, KktSystem, Scaling};
use crate::program::{ConicProgram, ValidationIssue};
use crate::sparse::CscMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative tolerance on primal residual, dual residual and gap.
    pub tol: f64,
    pub max_iters: usize,
    /// Fraction of the distance to the cone boundary a step may cover.
    pub step_fraction: f64,
    /// Static diagonal regularization of the Newton system.
    pub static_reg: f64,
    pub refine_iters: usize,
    /// Neighborhood bound for exponential blocks on
    /// `F(x) + F*(s) + 3 log(x^T s / 3) + 3`, which is zero exactly when the
    /// block pair is centered and grows without bound toward the boundary.
    pub proximity: f64,
    /// Every cone block must keep its own complementarity
    /// `x_i^T s_i / nu_i >= spread * mu`.
    pub spread: f64,
    /// Ratio below which a diverging iterate is taken as an infeasibility
    /// certificate.
    pub infeasibility_tol: f64,
    /// Store `(x, s)` of every iteration in the trace (tests and debugging).
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200,
            step_fraction: 0.98,
            static_reg: 1e-8,
            refine_iters: 8,
            proximity: 1.0,
            spread: 0.01,
            infeasibility_tol: 1e-9,
            record_iterates: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("step fraction must lie in (0, 1), got {0}")]
    StepFraction(f64),
    #[error("proximity bound must be positive, got {0}")]
    Proximity(f64),
    #[error("spread must lie in [0, 1), got {0}")]
    Spread(f64),
}

impl SolverConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if !(self.tol > 0.0) {
            return Err(ConfigError::Tolerance(self.tol));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(ConfigError::StepFraction(self.step_fraction));
        }
        if !(self.proximity > 0.0) {
            return Err(ConfigError::Proximity(self.proximity));
        }
        if !(self.spread >= 0.0 && self.spread < 1.0) {
            return Err(ConfigError::Spread(self.spread));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
    NumericalFailure,
}

/// Relative residuals, all in infinity norm:
/// primal `|Ax - b| / (1 + |b|)`, dual `|A^T y - c - s| / (1 + |c|)`,
/// gap `|c^T x - b^T y| / (1 + |c^T x|)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn within(&self, tol: f64) -> bool {
        self.primal <= tol && self.dual <= tol && self.gap <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Complementarity measure `x^T s / nu` at the start of the iteration.
    pub mu: f64,
    pub residuals: Residuals,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Centering weight and step length taken from this iterate; zero on
    /// the final record.
    pub sigma: f64,
    pub step: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iterate: Option<(Vec<f64>, Vec<f64>)>,
}

/// Result of [`solve`], in the maximization convention of [`ConicProgram`]:
/// `s = A^T y - c` lies in the dual cone and `b^T y >= c^T x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residuals: Residuals,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Nonzeros in the factor of the Newton system.
    pub kkt_factor_nnz: usize,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid program: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationIssue>),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub fn solve(program: &ConicProgram, config: &SolverConfig) -> Result<ConicSolution, SolveError> {
    config.check()?;
    program.validate().map_err(SolveError::Invalid)?;
    Ok(Ipm::new(program, config).run())
}

struct Ipm<'a> {
    cfg: &'a SolverConfig,
    a: &'a CscMatrix,
    b: &'a [f64],
    q: Vec<f64>,
    n: usize,
    m: usize,
    blocks: Vec<PlacedBlock>,
    nu: f64,
    kkt: KktSystem,
    w: Scaling,
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
}

enum StepOutcome {
    Taken { sigma: f64, step: f64 },
    Stalled,
    Breakdown,
}

impl<'a> Ipm<'a> {
    fn new(program: &'a ConicProgram, cfg: &'a SolverConfig) -> Self {
        let a = program.eq_matrix();
        let blocks = place(program.cones());
        let n = program.num_vars();
        let m = program.num_rows();
        let num_exp = program.num_exp_blocks();
        let kkt = KktSystem::new(a, &blocks);
        Self {
            cfg,
            a,
            b: program.eq_rhs(),
            q: program.objective().iter().map(|c| -c).collect(),
            n,
            m,
            nu: barrier_degree(program.cones()) as f64,
            blocks,
            kkt,
            w: Scaling::new(n, num_exp),
            x: vec![0.0; n],
            y: vec![0.0; m],
            s: vec![0.0; n],
        }
    }

    /// Cone blocks start at their central points (`x = s`); free variables
    /// take the least-norm values that best fit the equalities.
    fn initialize(&mut self) -> bool {
        for blk in &self.blocks {
            match blk.kind {
                ConeBlock::Free(_) => {}
                ConeBlock::NonNeg(_) => {
                    for j in blk.range() {
                        self.x[j] = 1.0;
                        self.s[j] = 1.0;
                    }
                }
                ConeBlock::Exp => {
                    self.x[blk.range()].copy_from_slice(&EXP_CENTRAL_POINT);
                    self.s[blk.range()].copy_from_slice(&EXP_CENTRAL_POINT);
                }
            }
        }
        let has_free = self
            .blocks
            .iter()
            .any(|b| matches!(b.kind, ConeBlock::Free(d) if d > 0));
        if !has_free || self.m == 0 {
            return true;
        }
        let mut w = Scaling::new(self.n, self.w.exp_off.len());
        for blk in &self.blocks {
            let weight = if matches!(blk.kind, ConeBlock::Free(_)) { 1.0 } else { 1e8 };
            for j in blk.range() {
                w.diag[j] = weight;
            }
        }
        if self.kkt.factor(&w, self.cfg.static_reg).is_err() {
            return false;
        }
        let mut rhs = vec![0.0; self.n + self.m];
        let mut ax = vec![0.0; self.m];
        self.a.mul_vec(&self.x, &mut ax);
        for i in 0..self.m {
            rhs[self.n + i] = self.b[i] - ax[i];
        }
        self.kkt.solve(self.a, &w, &mut rhs, self.cfg.refine_iters);
        if rhs.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for blk in &self.blocks {
            if matches!(blk.kind, ConeBlock::Free(_)) {
                for j in blk.range() {
                    self.x[j] = rhs[j];
                }
            }
        }
        true
    }

    fn mu_of(&self, x: &[f64], s: &[f64]) -> f64 {
        if self.nu == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for blk in &self.blocks {
            if !matches!(blk.kind, ConeBlock::Free(_)) {
                for j in blk.range() {
                    acc += x[j] * s[j];
                }
            }
        }
        acc / self.nu
    }

    fn run(mut self) -> ConicSolution {
        let mut trace: Vec<IterationRecord> = Vec::new();
        let mut status = if self.initialize() {
            None
        } else {
            Some(SolveStatus::NumericalFailure)
        };
        let mut rp = vec![0.0; self.m];
        let mut rd = vec![0.0; self.n];
        let mut iteration = 0usize;
        let bnorm = inf_norm(self.b);
        let qnorm = inf_norm(&self.q);

        loop {
            // residuals in minimization form
            self.a.mul_vec(&self.x, &mut rp);
            for i in 0..self.m {
                rp[i] = self.b[i] - rp[i];
            }
            self.a.mul_t_vec(&self.y, &mut rd);
            for j in 0..self.n {
                rd[j] = self.q[j] - rd[j] - self.s[j];
            }
            let q_x = dot(&self.q, &self.x);
            let b_y = dot(self.b, &self.y);
            let residuals = Residuals {
                primal: inf_norm(&rp) / (1.0 + bnorm),
                dual: inf_norm(&rd) / (1.0 + qnorm),
                gap: (q_x - b_y).abs() / (1.0 + q_x.abs()),
            };
            let mu = self.mu_of(&self.x, &self.s);
            trace.push(IterationRecord {
                iteration,
                mu,
                residuals,
                primal_objective: -q_x,
                dual_objective: -b_y,
                sigma: 0.0,
                step: 0.0,
                iterate: self
                    .cfg
                    .record_iterates
                    .then(|| (self.x.clone(), self.s.clone())),
            });
            if status.is_some() {
                break;
            }
            if !(residuals.primal.is_finite() && residuals.dual.is_finite() && residuals.gap.is_finite()) {
                status = Some(SolveStatus::NumericalFailure);
                break;
            }
            if residuals.within(self.cfg.tol) {
                status = Some(SolveStatus::Optimal);
                break;
            }
            if let Some(st) = self.infeasibility(&rp, &rd, q_x, b_y) {
                status = Some(st);
                break;
            }
            if iteration >= self.cfg.max_iters {
                status = Some(SolveStatus::IterationLimit);
                break;
            }

            match self.step(&rp, &rd, mu) {
                StepOutcome::Taken { sigma, step } => {
                    let last = trace.last_mut().expect("record pushed above");
                    last.sigma = sigma;
                    last.step = step;
                    iteration += 1;
                }
                StepOutcome::Stalled | StepOutcome::Breakdown => {
                    status = Some(SolveStatus::NumericalFailure);
                    break;
                }
            }
        }

        let last = trace.last().expect("at least one record");
        ConicSolution {
            residuals: last.residuals,
            primal_objective: last.primal_objective,
            dual_objective: last.dual_objective,
            kkt_factor_nnz: self.kkt.nnz_factor(),
            x: self.x,
            y: self.y.iter().map(|v| -v).collect(),
            s: self.s,
            status: status.expect("loop exits with a status"),
            iterations: iteration,
            trace,
        }
    }

    /// Heuristic certificates for diverging iterates.
    fn infeasibility(&self, rp: &[f64], rd: &[f64], q_x: f64, b_y: f64) -> Option<SolveStatus> {
        let tol = self.cfg.infeasibility_tol;
        if b_y > 0.0 {
            // A^T y + s = q - rd
            let lhs = self
                .q
                .iter()
                .zip(rd)
                .fold(0.0f64, |acc, (q, r)| acc.max((q - r).abs()));
            if lhs <= tol * b_y {
                return Some(SolveStatus::PrimalInfeasible);
            }
        }
        if q_x < 0.0 {
            // A x = b - rp
            let lhs = self
                .b
                .iter()
                .zip(rp)
                .fold(0.0f64, |acc, (b, r)| acc.max((b - r).abs()));
            if lhs <= tol * -q_x {
                return Some(SolveStatus::DualInfeasible);
            }
        }
        None
    }

    fn update_scaling(&mut self) {
        let mut e = 0;
        for blk in &self.blocks {
            match blk.kind {
                ConeBlock::Free(_) => {
                    for j in blk.range() {
                        self.w.diag[j] = 0.0;
                    }
                }
                ConeBlock::NonNeg(_) => {
                    for j in blk.range() {
                        self.w.diag[j] = self.s[j] / self.x[j];
                    }
                }
                ConeBlock::Exp => {
                    let st = blk.start;
                    let x = [self.x[st], self.x[st + 1], self.x[st + 2]];
                    let s = [self.s[st], self.s[st + 1], self.s[st + 2]];
                    let h = exp_pd_scaling(&x, &s);
                    for t in 0..3 {
                        self.w.diag[st + t] = h[t][t];
                    }
                    self.w.exp_off[e] = [h[0][1], h[0][2], h[1][2]];
                    e += 1;
                }
            }
        }
    }

    /// Solves the Newton system for right-hand side `[rd + s - eta; rp]`
    /// and recovers `ds = -s + eta - W dx`.
    fn direction(&mut self, rp: &[f64], rd: &[f64], eta: &[f64]) -> Option<Direction> {
        let (n, m) = (self.n, self.m);
        let mut rhs = vec![0.0; n + m];
        for j in 0..n {
            rhs[j] = rd[j] + self.s[j] - eta[j];
        }
        rhs[n..].copy_from_slice(rp);
        self.kkt.solve(self.a, &self.w, &mut rhs, self.cfg.refine_iters);
        if rhs.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let dy = rhs.split_off(n);
        let dx = rhs;
        let mut ds = vec![0.0; n];
        for j in 0..n {
            ds[j] = -self.s[j] + eta[j] - self.w.diag[j] * dx[j];
        }
        let mut e = 0;
        for blk in &self.blocks {
            if blk.kind == ConeBlock::Exp {
                let st = blk.start;
                let [h01, h02, h12] = self.w.exp_off[e];
                ds[st] -= h01 * dx[st + 1] + h02 * dx[st + 2];
                ds[st + 1] -= h01 * dx[st] + h12 * dx[st + 2];
                ds[st + 2] -= h02 * dx[st] + h12 * dx[st + 1];
                e += 1;
            }
        }
        Some(Direction { dx, dy, ds })
    }

    /// Largest step in `[0, cap]` keeping both iterates strictly interior.
    fn max_step(&self, d: &Direction, cap: f64) -> f64 {
        let mut alpha = cap;
        for blk in &self.blocks {
            match blk.kind {
                ConeBlock::Free(_) => {}
                ConeBlock::NonNeg(_) => {
                    for j in blk.range() {
                        if d.dx[j] < 0.0 {
                            alpha = alpha.min(-self.x[j] / d.dx[j]);
                        }
                        if d.ds[j] < 0.0 {
                            alpha = alpha.min(-self.s[j] / d.ds[j]);
                        }
                    }
                }
                ConeBlock::Exp => {
                    let st = blk.start;
                    let x = [self.x[st], self.x[st + 1], self.x[st + 2]];
                    let dx = [d.dx[st], d.dx[st + 1], d.dx[st + 2]];
                    alpha = max_step_in(&x, &dx, alpha, in_exp_interior);
                    let s = [self.s[st], self.s[st + 1], self.s[st + 2]];
                    let ds = [d.ds[st], d.ds[st + 1], d.ds[st + 2]];
                    alpha = max_step_in(&s, &ds, alpha, in_exp_dual_interior);
                }
            }
        }
        alpha
    }

    /// Strict interiority plus the neighborhood test at `(x + a dx, s + a ds)`.
    fn acceptable(&self, d: &Direction, alpha: f64) -> bool {
        let xn: Vec<f64> = self.x.iter().zip(&d.dx).map(|(x, dx)| x + alpha * dx).collect();
        let sn: Vec<f64> = self.s.iter().zip(&d.ds).map(|(s, ds)| s + alpha * ds).collect();
        let mu = self.mu_of(&xn, &sn);
        if !(mu > 0.0) {
            return self.nu == 0.0;
        }
        for blk in &self.blocks {
            match blk.kind {
                ConeBlock::Free(_) => {}
                ConeBlock::NonNeg(_) => {
                    for j in blk.range() {
                        if !(xn[j] > 0.0 && sn[j] > 0.0 && xn[j] * sn[j] >= self.cfg.spread * mu) {
                            return false;
                        }
                    }
                }
                ConeBlock::Exp => {
                    let st = blk.start;
                    let x = [xn[st], xn[st + 1], xn[st + 2]];
                    let s = [sn[st], sn[st + 1], sn[st + 2]];
                    if !in_exp_interior(&x) || !in_exp_dual_interior(&s) {
                        return false;
                    }
                    let block_mu = (x[0] * s[0] + x[1] * s[1] + x[2] * s[2]) / 3.0;
                    if !(block_mu >= self.cfg.spread * mu) {
                        return false;
                    }
                    let primal = -(x[1] * (x[0] / x[1]).ln() - x[2]).ln() - x[0].ln() - x[1].ln();
                    let proximity = primal + exp_dual_barrier(&s) + 3.0 * block_mu.ln() + 3.0;
                    if !(proximity <= self.cfg.proximity) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Centering terms `eta`: `sigma mu (-grad F)` per block, plus the
    /// affine correction `-dx ds / x` on nonnegative coordinates and
    /// `D^3 F(x)[dx, H^{-1} ds] / 2` on exponential blocks.
    fn centering_terms(&self, sigma_mu: f64, affine: Option<&Direction>) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for blk in &self.blocks {
            match blk.kind {
                ConeBlock::Free(_) => {}
                ConeBlock::NonNeg(_) => {
                    for j in blk.range() {
                        let second = affine.map_or(0.0, |d| d.dx[j] * d.ds[j]);
                        eta[j] = (sigma_mu - second) / self.x[j];
                    }
                }
                ConeBlock::Exp => {
                    let st = blk.start;
                    let x = [self.x[st], self.x[st + 1], self.x[st + 2]];
                    let (g, h) = exp_grad_hess(&x);
                    let mut corr = [0.0; 3];
                    if let (Some(d), Some(l)) = (affine, chol3(&h)) {
                        let dx = [d.dx[st], d.dx[st + 1], d.dx[st + 2]];
                        let ds = [d.ds[st], d.ds[st + 1], d.ds[st + 2]];
                        corr = exp_third_order(&x, &dx, &chol3_solve(&l, &ds));
                    }
                    for t in 0..3 {
                        eta[st + t] = -sigma_mu * g[t] + 0.5 * corr[t];
                    }
                }
            }
        }
        eta
    }

    fn factor(&mut self) -> bool {
        let mut reg = self.cfg.static_reg;
        for _ in 0..4 {
            if self.kkt.factor(&self.w, reg).is_ok() {
                return true;
            }
            reg *= 100.0;
        }
        false
    }

    /// Fraction-to-boundary step, shortened until the neighborhood test holds.
    fn step_length(&self, dir: &Direction) -> Option<f64> {
        let frac = self.cfg.step_fraction;
        let mut alpha = (frac * self.max_step(dir, 1.0 / frac)).min(1.0);
        for _ in 0..60 {
            if self.acceptable(dir, alpha) {
                return Some(alpha);
            }
            alpha *= 0.8;
        }
        None
    }

    fn step(&mut self, rp: &[f64], rd: &[f64], mu: f64) -> StepOutcome {
        self.update_scaling();
        if !self.factor() {
            return StepOutcome::Breakdown;
        }

        let zero = vec![0.0; self.n];
        let Some(affine) = self.direction(rp, rd, &zero) else {
            return StepOutcome::Breakdown;
        };
        let alpha_aff = self.max_step(&affine, 1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        let eta = self.centering_terms(sigma * mu, Some(&affine));
        let Some(mut dir) = self.direction(rp, rd, &eta) else {
            return StepOutcome::Breakdown;
        };
        let mut alpha = self.step_length(&dir);
        // The higher-order correction occasionally points straight at the
        // boundary; the plain centered direction is then the better bet.
        if alpha.is_none_or(|a| a < 0.5 * alpha_aff) {
            let eta = self.centering_terms(sigma * mu, None);
            let Some(plain) = self.direction(rp, rd, &eta) else {
                return StepOutcome::Breakdown;
            };
            let alt = self.step_length(&plain);
            if alt.unwrap_or(0.0) > alpha.unwrap_or(0.0) {
                dir = plain;
                alpha = alt;
            }
        }
        let Some(alpha) = alpha else {
            return StepOutcome::Stalled;
        };

        for j in 0..self.n {
            self.x[j] += alpha * dir.dx[j];
            self.s[j] += alpha * dir.ds[j];
        }
        for i in 0..self.m {
            self.y[i] += alpha * dir.dy[i];
        }
        StepOutcome::Taken { sigma, step: alpha }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
