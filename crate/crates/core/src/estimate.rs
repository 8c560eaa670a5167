//! Estimators: conic fits for fixed scales, the two-stage fit of
//! coefficients and scales, and a box-constrained quasi-Newton baseline.
//!
//! The two-stage fit nests an inner maximization over `beta` at fixed scales
//! inside an outer ascent over the scales. At an inner optimum the partial
//! scale gradient equals the gradient of the value function
//! `L*(lambda) = max_beta L(beta, lambda)`, so the outer step needs no
//! derivative of the inner solution. Tree scales are optimized through
//! multipliers `lambda_k = lambda_parent(k) * m_k` with `m_k <= 1`, so the
//! ordering toward the leaves holds by construction.

use std::time::{Duration, Instant};

use expcone::{solve, Residuals, SolveStatus, SolverConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ChoiceDataset;
use crate::kernel::LikelihoodKernel;
use crate::lbfgsb::{forward_difference, minimize, minimize_observed, LbfgsbConfig, LbfgsbResult, Termination};
use crate::model::{mnl_log_likelihood, nl_log_likelihood, tnl_log_likelihood, ModelError};
use crate::reformulate::{extract_solution, mnl_to_ecp, nl_to_ecp, tnl_to_ecp, Ecp, ReformulateError};
use crate::structure::{NestPartition, StructureError, TaxonomyTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    TimeLimit,
    IterLimit,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub beta: Vec<f64>,
    /// Per nest, or per free tree node in [`TaxonomyTree::free_nodes`] order.
    pub lambda: Option<Vec<f64>>,
    /// Model log-likelihood at `(beta, lambda)`.
    pub loglik: f64,
    pub status: FitStatus,
    pub outer_iters: usize,
    pub inner_solves: usize,
    /// Interior-point iterations (conic paths) or quasi-Newton iterations.
    pub solver_iters: usize,
    pub elapsed: f64,
    /// Log-likelihood at every accepted outer iterate of a two-stage fit.
    pub trace: Vec<f64>,
    /// Conic objective of the last inner solve.
    pub conic_objective: Option<f64>,
    /// Residuals of the last conic solve.
    pub residuals: Option<Residuals>,
    /// Largest log-sum-exp slack of the last conic solve.
    pub max_slack: Option<f64>,
    pub message: Option<String>,
}

impl EstimationResult {
    fn empty(p: usize) -> Self {
        Self {
            beta: vec![0.0; p],
            lambda: None,
            loglik: f64::NEG_INFINITY,
            status: FitStatus::Failed,
            outer_iters: 0,
            inner_solves: 0,
            solver_iters: 0,
            elapsed: 0.0,
            trace: Vec::new(),
            conic_objective: None,
            residuals: None,
            max_slack: None,
            message: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Reformulate(#[from] ReformulateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Forward differences with an absolute step.
    ForwardDifference { step: f64 },
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lbfgsb: LbfgsbConfig,
    pub gradient: GradientMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lbfgsb: LbfgsbConfig::default(),
            gradient: GradientMode::ForwardDifference { step: 1e-8 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaInit {
    Midpoint,
    Upper,
    Custom(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterMethod {
    /// Quasi-Newton on the scales with the analytic partial gradient.
    EnvelopeGradient,
    /// Quasi-Newton on the scales with forward-difference gradients.
    FiniteDifference,
}

/// What one outer iteration does with the scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterStep {
    /// Maximize `L(beta, .)` over the scales at the last inner `beta`,
    /// then re-solve the inner problem.
    Alternating,
    /// One quasi-Newton iteration on the value function
    /// `L*(lambda) = max_beta L(beta, lambda)`; every trial point of the
    /// line search is an inner solve.
    ValueFunction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerMethod {
    Conic,
    /// Quasi-Newton on `beta`, warm-started from the previous iterate.
    QuasiNewton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Stop once an outer iteration raises the log-likelihood by less.
    pub mle_increment_tol: f64,
    /// Wall-clock budget of one fit, shared by every method.
    pub time_limit_secs: f64,
    /// `[lo, hi]` per scale; a single entry applies to all. For trees the
    /// bounds apply to the scales below the root and to the multipliers
    /// `[lo, 1]` deeper down.
    pub lambda_bounds: Vec<[f64; 2]>,
    pub lambda_init: LambdaInit,
    pub outer_method: OuterMethod,
    pub inner_method: InnerMethod,
    pub outer_step: OuterStep,
    pub max_outer_iters: usize,
    /// Settings of the outer scale maximization.
    pub outer: LbfgsbConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            mle_increment_tol: 1e-6,
            time_limit_secs: 3600.0,
            lambda_bounds: vec![[0.05, 1.0]],
            lambda_init: LambdaInit::Midpoint,
            outer_method: OuterMethod::EnvelopeGradient,
            inner_method: InnerMethod::Conic,
            outer_step: OuterStep::ValueFunction,
            max_outer_iters: 200,
            outer: LbfgsbConfig {
                pgtol: 1e-7,
                ftol: 1e-13,
                max_iters: 500,
                ..LbfgsbConfig::default()
            },
        }
    }
}

impl TwoStageConfig {
    pub fn check(&self) -> Result<(), EstimateError> {
        if !(self.mle_increment_tol > 0.0) {
            return Err(EstimateError::Config(format!(
                "increment tolerance must be positive, got {}",
                self.mle_increment_tol
            )));
        }
        if !(self.time_limit_secs > 0.0) {
            return Err(EstimateError::Config(format!(
                "time limit must be positive, got {}",
                self.time_limit_secs
            )));
        }
        if self.lambda_bounds.is_empty() {
            return Err(EstimateError::Config("no scale bounds given".into()));
        }
        for &[lo, hi] in &self.lambda_bounds {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(EstimateError::Config(format!("scale bounds [{lo}, {hi}] are not inside (0, 1]")));
            }
        }
        Ok(())
    }

    fn bound(&self, i: usize, count: usize) -> Result<[f64; 2], EstimateError> {
        match self.lambda_bounds.len() {
            1 => Ok(self.lambda_bounds[0]),
            k if k == count => Ok(self.lambda_bounds[i]),
            k => Err(EstimateError::Config(format!("{k} scale bounds given for {count} scales"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub solver: SolverConfig,
    pub baseline: BaselineConfig,
    pub two_stage: TwoStageConfig,
}

impl FitConfig {
    fn time_limit(&self) -> Duration {
        Duration::from_secs_f64(self.two_stage.time_limit_secs)
    }
}

/// Model family with its structure; scales are passed separately.
#[derive(Clone, Copy, Debug)]
pub enum Family<'a> {
    Multinomial,
    Nested(&'a NestPartition),
    Tree(&'a TaxonomyTree),
}

impl<'a> Family<'a> {
    fn kernel<'d>(&self, data: &'d ChoiceDataset) -> Result<LikelihoodKernel<'d>, EstimateError> {
        Ok(match self {
            Family::Multinomial => LikelihoodKernel::multinomial(data),
            Family::Nested(nests) => LikelihoodKernel::nested(data, nests)?,
            Family::Tree(tree) => LikelihoodKernel::tree(data, tree)?,
        })
    }

    fn ecp(&self, data: &ChoiceDataset, lambda: &[f64]) -> Result<Ecp, EstimateError> {
        Ok(match self {
            Family::Multinomial => mnl_to_ecp(data),
            Family::Nested(nests) => nl_to_ecp(data, nests, lambda)?,
            Family::Tree(tree) => tnl_to_ecp(data, tree, lambda)?,
        })
    }

    /// Log-likelihood with its `beta` and scale gradients.
    fn gradients(&self, data: &ChoiceDataset, beta: &[f64], lambda: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EstimateError> {
        let r = match self {
            Family::Multinomial => mnl_log_likelihood(beta, data)?,
            Family::Nested(nests) => nl_log_likelihood(beta, &nests.with_lambdas(lambda)?, data)?,
            Family::Tree(tree) => tnl_log_likelihood(beta, &tree.with_free_lambdas(lambda)?, data)?,
        };
        Ok((
            r.value,
            r.gradient_beta.unwrap_or_default(),
            r.gradient_lambda.unwrap_or_default(),
        ))
    }
}

/// Coordinates of the outer step: nest scales as they are, or tree
/// multipliers in [`TaxonomyTree::free_nodes`] order.
struct ScaleMap {
    /// position of the parent among the free nodes; `None` below the root
    parent: Vec<Option<usize>>,
    tree: bool,
}

impl ScaleMap {
    fn new(family: Family) -> Self {
        match family {
            Family::Multinomial => Self {
                parent: Vec::new(),
                tree: false,
            },
            Family::Nested(nests) => Self {
                parent: vec![None; nests.num_nests()],
                tree: false,
            },
            Family::Tree(tree) => {
                let free = tree.free_nodes();
                let parent = free
                    .iter()
                    .map(|&k| tree.parent(k).and_then(|pk| free.iter().position(|&f| f == pk)))
                    .collect();
                Self { parent, tree: true }
            }
        }
    }

    fn len(&self) -> usize {
        self.parent.len()
    }

    fn lambda(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(theta.len());
        for (i, &m) in theta.iter().enumerate() {
            let base = self.parent[i].map_or(1.0, |pp| out[pp]);
            out.push(base * m);
        }
        out
    }

    fn theta(&self, lambda: &[f64]) -> Vec<f64> {
        (0..lambda.len())
            .map(|i| lambda[i] / self.parent[i].map_or(1.0, |pp| lambda[pp]))
            .collect()
    }

    /// Gradient in multiplier coordinates from the scale gradient.
    fn pull_back(&self, theta: &[f64], lambda: &[f64], g_lambda: &[f64]) -> Vec<f64> {
        let mut acc: Vec<f64> = lambda.iter().zip(g_lambda).map(|(l, g)| l * g).collect();
        // free nodes are breadth-first, so children come after parents
        for i in (0..acc.len()).rev() {
            if let Some(pp) = self.parent[i] {
                acc[pp] += acc[i];
            }
        }
        acc.iter().zip(theta).map(|(a, m)| a / m).collect()
    }

    fn bounds(&self, cfg: &TwoStageConfig) -> Result<(Vec<f64>, Vec<f64>), EstimateError> {
        let mut lo = Vec::with_capacity(self.len());
        let mut hi = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let [l, h] = cfg.bound(i, self.len())?;
            lo.push(l);
            hi.push(if self.parent[i].is_some() { 1.0 } else { h });
        }
        Ok((lo, hi))
    }

    fn initial(&self, cfg: &TwoStageConfig, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>, EstimateError> {
        let theta: Vec<f64> = match &cfg.lambda_init {
            LambdaInit::Midpoint | LambdaInit::Upper => (0..self.len())
                .map(|i| {
                    if self.parent[i].is_some() {
                        1.0
                    } else if cfg.lambda_init == LambdaInit::Upper {
                        hi[i]
                    } else {
                        0.5 * (lo[i] + hi[i])
                    }
                })
                .collect(),
            LambdaInit::Custom(values) => {
                if values.len() != self.len() {
                    return Err(EstimateError::Config(format!(
                        "{} initial scales given for {} parameters",
                        values.len(),
                        self.len()
                    )));
                }
                self.theta(values)
            }
        };
        Ok(theta.iter().enumerate().map(|(i, t)| t.clamp(lo[i], hi[i])).collect())
    }

    fn is_tree(&self) -> bool {
        self.tree
    }
}

/// Outcome of one conic solve with its extraction.
struct ConicFit {
    beta: Vec<f64>,
    loglik: f64,
    objective: f64,
    iterations: usize,
    residuals: Residuals,
    max_slack: f64,
}

enum ConicOutcome {
    Solved(ConicFit),
    NotOptimal {
        status: SolveStatus,
        iterations: usize,
        residuals: Residuals,
    },
}

fn conic_fit(family: Family, data: &ChoiceDataset, lambda: &[f64], solver: &SolverConfig) -> Result<ConicOutcome, EstimateError> {
    let ecp = family.ecp(data, lambda)?;
    let sol = solve(&ecp.program, solver).map_err(|e| EstimateError::Config(e.to_string()))?;
    if sol.status != SolveStatus::Optimal {
        return Ok(ConicOutcome::NotOptimal {
            status: sol.status,
            iterations: sol.iterations,
            residuals: sol.residuals,
        });
    }
    let ex = extract_solution(&sol, &ecp.vmap, data)?;
    Ok(ConicOutcome::Solved(ConicFit {
        beta: ex.beta,
        loglik: ex.audit.model_loglik,
        objective: ex.audit.objective,
        iterations: sol.iterations,
        residuals: sol.residuals,
        max_slack: ex.audit.max_slack,
    }))
}

fn fit_status(status: SolveStatus) -> FitStatus {
    match status {
        SolveStatus::Optimal => FitStatus::Converged,
        SolveStatus::IterationLimit => FitStatus::IterLimit,
        _ => FitStatus::Failed,
    }
}

fn fixed_conic(family: Family, data: &ChoiceDataset, lambda: &[f64], cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    let start = Instant::now();
    let mut out = EstimationResult::empty(data.num_attributes());
    if !lambda.is_empty() {
        out.lambda = Some(lambda.to_vec());
    }
    if data.observations().iter().all(|o| o.offered.len() == 1) {
        // every choice is certain: any beta is optimal, zero by convention
        family.ecp(data, lambda)?;
        out.loglik = 0.0;
        out.status = FitStatus::Converged;
        out.trace.push(0.0);
        out.elapsed = start.elapsed().as_secs_f64();
        return Ok(out);
    }
    out.inner_solves = 1;
    match conic_fit(family, data, lambda, &cfg.solver)? {
        ConicOutcome::Solved(fit) => {
            out.beta = fit.beta;
            out.loglik = fit.loglik;
            out.status = FitStatus::Converged;
            out.solver_iters = fit.iterations;
            out.conic_objective = Some(fit.objective);
            out.residuals = Some(fit.residuals);
            out.max_slack = Some(fit.max_slack);
            out.trace.push(fit.loglik);
        }
        ConicOutcome::NotOptimal {
            status,
            iterations,
            residuals,
        } => {
            out.status = fit_status(status);
            out.solver_iters = iterations;
            out.residuals = Some(residuals);
            out.message = Some(format!("conic solver stopped with status {status:?}"));
        }
    }
    out.elapsed = start.elapsed().as_secs_f64();
    Ok(out)
}

pub fn fit_mnl(data: &ChoiceDataset, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    fixed_conic(Family::Multinomial, data, &[], cfg)
}

pub fn fit_nl_fixed_lambda(
    data: &ChoiceDataset,
    nests: &NestPartition,
    lambda: &[f64],
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    fixed_conic(Family::Nested(nests), data, lambda, cfg)
}

/// `free_lambda` follows [`TaxonomyTree::free_nodes`].
pub fn fit_tnl_fixed_lambda(
    data: &ChoiceDataset,
    tree: &TaxonomyTree,
    free_lambda: &[f64],
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    fixed_conic(Family::Tree(tree), data, free_lambda, cfg)
}

pub fn fit_nl_joint(data: &ChoiceDataset, nests: &NestPartition, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    two_stage(Family::Nested(nests), data, cfg)
}

pub fn fit_tnl_joint(data: &ChoiceDataset, tree: &TaxonomyTree, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    two_stage(Family::Tree(tree), data, cfg)
}

/// Optimal value `L*(lambda) = max_beta L(beta, lambda)` by a conic solve,
/// with its scale gradient `dL/dlambda` at the maximizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn value_function(family: Family, data: &ChoiceDataset, lambda: &[f64], solver: &SolverConfig) -> Result<ValueFunction, EstimateError> {
    match conic_fit(family, data, lambda, solver)? {
        ConicOutcome::Solved(fit) => {
            let (value, _, gradient) = family.gradients(data, &fit.beta, lambda)?;
            Ok(ValueFunction {
                value,
                gradient,
                beta: fit.beta,
            })
        }
        ConicOutcome::NotOptimal { status, .. } => Err(ReformulateError::ExtractionRefused(status).into()),
    }
}

fn remaining(start: Instant, limit: Duration) -> Duration {
    limit.saturating_sub(start.elapsed())
}

fn qn_status(t: Termination) -> FitStatus {
    match t {
        Termination::ProjectedGradient | Termination::RelativeReduction => FitStatus::Converged,
        Termination::IterationLimit | Termination::EvaluationLimit => FitStatus::IterLimit,
        Termination::TimeLimit => FitStatus::TimeLimit,
        Termination::LineSearchFailure | Termination::NonFinite | Termination::Stopped => FitStatus::Failed,
    }
}

/// Minimizes `-L` with the configured gradient mode. `value(x)` is the
/// log-likelihood; `analytic(x)` its value and gradient.
fn maximize<V, A>(
    mut value: V,
    mut analytic: A,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    gradient: &GradientMode,
    cfg: &LbfgsbConfig,
) -> LbfgsbResult
where
    V: FnMut(&[f64]) -> f64,
    A: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    match *gradient {
        GradientMode::ForwardDifference { step } => {
            let mut neg = |x: &[f64]| {
                let v = value(x);
                if v.is_finite() {
                    -v
                } else {
                    f64::INFINITY
                }
            };
            minimize(
                |x, g| {
                    let f = neg(x);
                    if f.is_finite() {
                        forward_difference(&mut neg, x, f, hi, step, g);
                    }
                    f
                },
                x0,
                lo,
                hi,
                cfg,
            )
        }
        GradientMode::Analytic => minimize(
            |x, g| {
                let (v, grad) = analytic(x);
                for (gi, di) in g.iter_mut().zip(&grad) {
                    *gi = -di;
                }
                if v.is_finite() {
                    -v
                } else {
                    f64::INFINITY
                }
            },
            x0,
            lo,
            hi,
            cfg,
        ),
    }
}

/// Quasi-Newton over `beta` at fixed scales from `beta0`.
fn qn_beta(
    family: Family,
    kernel: &LikelihoodKernel,
    data: &ChoiceDataset,
    lambda: &[f64],
    beta0: &[f64],
    cfg: &FitConfig,
    time_left: Duration,
) -> LbfgsbResult {
    let p = beta0.len();
    let lo = vec![f64::NEG_INFINITY; p];
    let hi = vec![f64::INFINITY; p];
    let qn = LbfgsbConfig {
        time_limit: Some(time_left),
        ..cfg.baseline.lbfgsb.clone()
    };
    maximize(
        |b| kernel.value(b, lambda).unwrap_or(f64::NEG_INFINITY),
        |b| match family.gradients(data, b, lambda) {
            Ok((v, gb, _)) => (v, gb),
            Err(_) => (f64::NEG_INFINITY, vec![0.0; p]),
        },
        beta0,
        &lo,
        &hi,
        &cfg.baseline.gradient,
        &qn,
    )
}

fn two_stage(family: Family, data: &ChoiceDataset, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    match cfg.two_stage.outer_step {
        OuterStep::Alternating => alternating(family, data, cfg),
        OuterStep::ValueFunction => value_function_ascent(family, data, cfg),
    }
}

fn fd_step(cfg: &FitConfig) -> f64 {
    match cfg.baseline.gradient {
        GradientMode::ForwardDifference { step } => step,
        GradientMode::Analytic => 1e-8,
    }
}

/// Inner maximization over `beta` at fixed scales: a cold conic solve, or
/// quasi-Newton from `warm`.
#[allow(clippy::too_many_arguments)]
fn inner_solve(
    family: Family,
    kernel: &LikelihoodKernel,
    data: &ChoiceDataset,
    lambda: &[f64],
    warm: &[f64],
    cfg: &FitConfig,
    time_left: Duration,
    out: &mut EstimationResult,
) -> Result<Option<Evaluation>, EstimateError> {
    out.inner_solves += 1;
    let beta = match cfg.two_stage.inner_method {
        InnerMethod::Conic => match conic_fit(family, data, lambda, &cfg.solver)? {
            ConicOutcome::Solved(fit) => {
                out.solver_iters += fit.iterations;
                return Ok(Some(Evaluation {
                    value: kernel.value(&fit.beta, lambda).unwrap_or(f64::NEG_INFINITY),
                    beta: fit.beta,
                    conic: Some((fit.objective, fit.residuals, fit.max_slack)),
                }));
            }
            ConicOutcome::NotOptimal {
                status,
                iterations,
                residuals,
            } => {
                out.solver_iters += iterations;
                out.residuals = Some(residuals);
                out.message = Some(format!("inner conic solve stopped with status {status:?}"));
                return Ok(None);
            }
        },
        InnerMethod::QuasiNewton => {
            let r = qn_beta(family, kernel, data, lambda, warm, cfg, time_left);
            out.solver_iters += r.iterations;
            if !r.x.iter().all(|v| v.is_finite()) {
                out.message = Some(format!("inner quasi-Newton stopped: {:?}", r.termination));
                return Ok(None);
            }
            r.x
        }
    };
    Ok(Some(Evaluation {
        value: kernel.value(&beta, lambda).unwrap_or(f64::NEG_INFINITY),
        beta,
        conic: None,
    }))
}

/// Inner optimum at one point of the scale space.
#[derive(Clone)]
struct Evaluation {
    beta: Vec<f64>,
    value: f64,
    /// objective, residuals and largest slack of a conic inner solve
    conic: Option<(f64, Residuals, f64)>,
}

impl EstimationResult {
    fn record_conic(&mut self, ev: &Evaluation) {
        if let Some((objective, residuals, slack)) = ev.conic {
            self.conic_objective = Some(objective);
            self.residuals = Some(residuals);
            self.max_slack = Some(slack);
        }
    }
}

/// Gradient of `L(beta, lambda(theta))` in `theta` at fixed `beta`, which
/// at an inner optimum is the gradient of the value function.
#[allow(clippy::too_many_arguments)]
fn scale_gradient(
    family: Family,
    kernel: &LikelihoodKernel,
    data: &ChoiceDataset,
    map: &ScaleMap,
    beta: &[f64],
    theta: &[f64],
    hi: &[f64],
    cfg: &FitConfig,
) -> Vec<f64> {
    let lambda = map.lambda(theta);
    match cfg.two_stage.outer_method {
        OuterMethod::EnvelopeGradient => match family.gradients(data, beta, &lambda) {
            Ok((_, _, gl)) if map.is_tree() => map.pull_back(theta, &lambda, &gl),
            Ok((_, _, gl)) => gl,
            Err(_) => vec![f64::NAN; theta.len()],
        },
        OuterMethod::FiniteDifference => {
            let mut neg = |t: &[f64]| -kernel.value(beta, &map.lambda(t)).unwrap_or(f64::NEG_INFINITY);
            let f0 = neg(theta);
            let mut g = vec![0.0; theta.len()];
            forward_difference(&mut neg, theta, f0, hi, fd_step(cfg), &mut g);
            g.iter().map(|v| -v).collect()
        }
    }
}

/// Quasi-Newton ascent on the value function with the envelope gradient.
/// Accepted iterates pass a sufficient-increase test, so the trace rises.
fn value_function_ascent(family: Family, data: &ChoiceDataset, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    use std::cell::RefCell;

    let start = Instant::now();
    let ts = &cfg.two_stage;
    ts.check()?;
    let limit = cfg.time_limit();
    let kernel = family.kernel(data)?;
    let map = ScaleMap::new(family);
    let (lo, hi) = map.bounds(ts)?;
    let theta0 = map.initial(ts, &lo, &hi)?;
    let p = data.num_attributes();

    struct State {
        out: EstimationResult,
        warm: Vec<f64>,
        error: Option<EstimateError>,
        /// evaluations since the last accepted iterate
        pending: Vec<(Vec<f64>, Evaluation)>,
        accepted: Option<(Vec<f64>, Evaluation)>,
        stop: Option<FitStatus>,
    }
    let state = RefCell::new(State {
        out: EstimationResult::empty(p),
        warm: vec![0.0; p],
        error: None,
        pending: Vec::new(),
        accepted: None,
        stop: None,
    });
    let fg = |theta: &[f64], g: &mut [f64]| {
        let mut st = state.borrow_mut();
        let st = &mut *st;
        let lambda = map.lambda(theta);
        let ev = match inner_solve(family, &kernel, data, &lambda, &st.warm, cfg, remaining(start, limit), &mut st.out) {
            Ok(Some(ev)) => ev,
            Ok(None) => return f64::INFINITY,
            Err(e) => {
                st.error = Some(e);
                return f64::INFINITY;
            }
        };
        if ts.inner_method == InnerMethod::QuasiNewton {
            st.warm.clone_from(&ev.beta);
        }
        let grad = scale_gradient(family, &kernel, data, &map, &ev.beta, theta, &hi, cfg);
        for (gi, d) in g.iter_mut().zip(&grad) {
            *gi = -d;
        }
        let f = -ev.value;
        st.pending.push((theta.to_vec(), ev));
        if f.is_finite() {
            f
        } else {
            f64::INFINITY
        }
    };
    let observe = |theta: &[f64], _f: f64| {
        let mut st = state.borrow_mut();
        let st = &mut *st;
        let hit = st.pending.iter().rposition(|(t, _)| t.as_slice() == theta);
        if let Some(i) = hit {
            st.accepted = Some(st.pending.swap_remove(i));
        }
        st.pending.clear();
        let value = st.accepted.as_ref().map_or(f64::NEG_INFINITY, |(_, ev)| ev.value);
        let trace = &mut st.out.trace;
        trace.push(value);
        let n = trace.len();
        if n >= 2 && trace[n - 1] - trace[n - 2] < ts.mle_increment_tol {
            st.stop = Some(FitStatus::Converged);
        } else if start.elapsed() >= limit {
            st.stop = Some(FitStatus::TimeLimit);
        }
        st.stop.is_some()
    };
    let outer_cfg = LbfgsbConfig {
        max_iters: ts.max_outer_iters,
        time_limit: Some(remaining(start, limit)),
        ..ts.outer.clone()
    };
    let r = minimize_observed(fg, &theta0, &lo, &hi, &outer_cfg, observe);
    let st = state.into_inner();
    if let Some(e) = st.error {
        return Err(e);
    }
    let mut out = st.out;
    out.outer_iters = r.iterations;
    out.status = match (st.stop, r.termination) {
        (Some(status), _) => status,
        (None, Termination::ProjectedGradient | Termination::RelativeReduction) => FitStatus::Converged,
        (None, Termination::LineSearchFailure) => {
            out.message = Some("no ascent along the last search direction".into());
            FitStatus::Converged
        }
        (None, Termination::IterationLimit | Termination::EvaluationLimit) => FitStatus::IterLimit,
        (None, Termination::TimeLimit) => FitStatus::TimeLimit,
        (None, Termination::NonFinite | Termination::Stopped) => FitStatus::Failed,
    };
    match st.accepted {
        Some((theta, ev)) => {
            out.record_conic(&ev);
            out.lambda = Some(map.lambda(&theta));
            out.loglik = ev.value;
            out.beta = ev.beta;
        }
        None => {
            out.status = FitStatus::Failed;
            out.lambda = Some(map.lambda(&theta0));
        }
    }
    out.elapsed = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Alternates a full maximization over the scales at fixed `beta` with an
/// inner solve at the new scales, keeping the better `beta` each round.
fn alternating(family: Family, data: &ChoiceDataset, cfg: &FitConfig) -> Result<EstimationResult, EstimateError> {
    let start = Instant::now();
    let ts = &cfg.two_stage;
    ts.check()?;
    let limit = cfg.time_limit();
    let kernel = family.kernel(data)?;
    let map = ScaleMap::new(family);
    let (lo, hi) = map.bounds(ts)?;
    let mut theta = map.initial(ts, &lo, &hi)?;
    let mut lambda = map.lambda(&theta);
    let p = data.num_attributes();
    let mut out = EstimationResult::empty(p);
    let mut beta: Option<Vec<f64>> = None;
    let outer_gradient = match ts.outer_method {
        OuterMethod::EnvelopeGradient => GradientMode::Analytic,
        OuterMethod::FiniteDifference => GradientMode::ForwardDifference { step: fd_step(cfg) },
    };
    let value = |b: &[f64], l: &[f64]| kernel.value(b, l).unwrap_or(f64::NEG_INFINITY);
    out.status = FitStatus::IterLimit;
    for outer in 0..ts.max_outer_iters {
        out.outer_iters = outer + 1;
        let warm = beta.clone().unwrap_or_else(|| vec![0.0; p]);
        let Some(ev) = inner_solve(family, &kernel, data, &lambda, &warm, cfg, remaining(start, limit), &mut out)? else {
            out.status = FitStatus::Failed;
            break;
        };
        out.record_conic(&ev);
        // keep the better of the new and the previous coefficients
        let current = match &beta {
            Some(old) if value(old, &lambda) >= ev.value => value(old, &lambda),
            _ => {
                beta = Some(ev.beta);
                ev.value
            }
        };
        out.trace.push(current);
        let n = out.trace.len();
        if n >= 2 && out.trace[n - 1] - out.trace[n - 2] < ts.mle_increment_tol {
            out.status = FitStatus::Converged;
            break;
        }
        if start.elapsed() >= limit {
            out.status = FitStatus::TimeLimit;
            break;
        }
        // outer: scales at fixed beta
        let b = beta.as_ref().expect("set above");
        let outer_cfg = LbfgsbConfig {
            time_limit: Some(remaining(start, limit)),
            ..ts.outer.clone()
        };
        let r = maximize(
            |t| value(b, &map.lambda(t)),
            |t| {
                let l = map.lambda(t);
                match family.gradients(data, b, &l) {
                    Ok((v, _, gl)) => (v, if map.is_tree() { map.pull_back(t, &l, &gl) } else { gl }),
                    Err(_) => (f64::NEG_INFINITY, vec![0.0; t.len()]),
                }
            },
            &theta,
            &lo,
            &hi,
            &outer_gradient,
            &outer_cfg,
        );
        let improved = -r.f;
        if improved > current && r.x.iter().all(|v| v.is_finite()) {
            theta = r.x;
            lambda = map.lambda(&theta);
        } else {
            // the scales are stationary for this beta; another inner solve
            // would return the same coefficients
            out.status = FitStatus::Converged;
            break;
        }
        if start.elapsed() >= limit {
            out.trace.push(improved);
            out.status = FitStatus::TimeLimit;
            break;
        }
    }
    if let Some(b) = beta {
        out.loglik = value(&b, &lambda);
        out.beta = b;
    }
    out.lambda = Some(lambda);
    out.elapsed = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Problem handed to the quasi-Newton baseline.
#[derive(Clone, Copy, Debug)]
pub enum BaselineModel<'a> {
    Multinomial,
    NestedFixed(&'a NestPartition, &'a [f64]),
    TreeFixed(&'a TaxonomyTree, &'a [f64]),
    NestedJoint(&'a NestPartition),
    TreeJoint(&'a TaxonomyTree),
}

/// Maximizes the log-likelihood directly by box-constrained quasi-Newton
/// from `beta = 0` (and the configured initial scales for joint models).
pub fn fit_baseline_quasi_newton(
    model: BaselineModel,
    data: &ChoiceDataset,
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    let start = Instant::now();
    let p = data.num_attributes();
    let mut out = EstimationResult::empty(p);
    let time_limit = Some(cfg.time_limit());
    let (family, fixed): (Family, Option<Vec<f64>>) = match model {
        BaselineModel::Multinomial => (Family::Multinomial, Some(Vec::new())),
        BaselineModel::NestedFixed(nests, l) => (Family::Nested(nests), Some(nests.with_lambdas(l)?.lambdas().to_vec())),
        BaselineModel::TreeFixed(tree, l) => (Family::Tree(tree), Some(tree.with_free_lambdas(l)?.free_lambdas())),
        BaselineModel::NestedJoint(nests) => (Family::Nested(nests), None),
        BaselineModel::TreeJoint(tree) => (Family::Tree(tree), None),
    };
    let kernel = family.kernel(data)?;
    let r = match fixed {
        Some(lambda) => {
            let r = qn_beta(family, &kernel, data, &lambda, &vec![0.0; p], cfg, cfg.time_limit());
            if !lambda.is_empty() {
                out.lambda = Some(lambda.clone());
            }
            out.beta = r.x.clone();
            out.loglik = kernel.value(&r.x, &lambda).unwrap_or(f64::NEG_INFINITY);
            r
        }
        None => {
            let ts = &cfg.two_stage;
            ts.check()?;
            let map = ScaleMap::new(family);
            let (tlo, thi) = map.bounds(ts)?;
            let theta0 = map.initial(ts, &tlo, &thi)?;
            let mut x0 = vec![0.0; p];
            x0.extend_from_slice(&theta0);
            let mut lo = vec![f64::NEG_INFINITY; p];
            lo.extend_from_slice(&tlo);
            let mut hi = vec![f64::INFINITY; p];
            hi.extend_from_slice(&thi);
            let qn = LbfgsbConfig {
                time_limit,
                ..cfg.baseline.lbfgsb.clone()
            };
            let r = maximize(
                |x| kernel.value(&x[..p], &map.lambda(&x[p..])).unwrap_or(f64::NEG_INFINITY),
                |x| {
                    let l = map.lambda(&x[p..]);
                    match family.gradients(data, &x[..p], &l) {
                        Ok((v, mut gb, gl)) => {
                            gb.extend(if map.is_tree() { map.pull_back(&x[p..], &l, &gl) } else { gl });
                            (v, gb)
                        }
                        Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
                    }
                },
                &x0,
                &lo,
                &hi,
                &cfg.baseline.gradient,
                &qn,
            );
            let lambda = map.lambda(&r.x[p..]);
            out.beta = r.x[..p].to_vec();
            out.loglik = kernel.value(&out.beta, &lambda).unwrap_or(f64::NEG_INFINITY);
            out.lambda = Some(lambda);
            r
        }
    };
    out.status = qn_status(r.termination);
    out.solver_iters = r.iterations;
    out.inner_solves = 1;
    out.outer_iters = 1;
    out.trace.push(out.loglik);
    if out.status != FitStatus::Converged {
        out.message = Some(format!("quasi-Newton stopped: {:?}", r.termination));
    }
    out.elapsed = start.elapsed().as_secs_f64();
    Ok(out)
}
