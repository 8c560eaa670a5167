//! Benchmark sweeps: run every method on every generated instance, flag
//! optimal and best runs, and summarize per `(p, size)` cell.
//!
//! Classification rules:
//! - `is_opt`: fixed-scale runs whose status is `Converged` and, for conic
//!   runs, whose residuals are within the solver tolerance. Joint runs are
//!   never flagged optimal since the joint problem is nonconvex.
//! - `is_best`: loglik within [`BEST_TOL`] of the best loglik any method
//!   reached on the same instance.
//! - `gap_pct`: `100 * (L_method - L_baseline) / |L_baseline|` for every
//!   method other than the baseline, when the baseline value is finite.
//!
//! Output files in the results directory:
//! - `rows.csv`: one [`ResultRow`] per (instance, method), in manifest order
//! - `instances.json`: spec of every `spec_id`
//! - `traces.jsonl`: per-row two-stage traces
//! - `summary.json`: the grouped [`Summary`]

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{gen_instance, DatagenError, Grid, InstanceSpec, ModelKind, Size, Structure};
use crate::estimate::{
    fit_baseline_quasi_newton, fit_mnl, fit_nl_fixed_lambda, fit_nl_joint, fit_tnl_fixed_lambda, fit_tnl_joint,
    BaselineModel, EstimationResult, FitConfig, FitStatus, InnerMethod, OuterMethod,
};

/// Loglik distance to the per-instance maximum that still counts as best.
pub const BEST_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// conic inner solves; envelope-gradient outer step for joint fits
    #[serde(rename = "ecp")]
    Ecp,
    /// quasi-Newton on the full likelihood
    #[serde(rename = "baseline")]
    Baseline,
    /// quasi-Newton inner solves with a finite-difference outer step
    #[serde(rename = "mixed-baseline")]
    MixedBaseline,
    /// conic inner solves with a finite-difference outer step
    #[serde(rename = "ecp+baseline-outer")]
    EcpBaselineOuter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ecp, Method::Baseline, Method::MixedBaseline, Method::EcpBaselineOuter];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ecp => "ecp",
            Method::Baseline => "baseline",
            Method::MixedBaseline => "mixed-baseline",
            Method::EcpBaselineOuter => "ecp+baseline-outer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the method only makes sense with estimated scales.
    pub fn needs_joint(self) -> bool {
        matches!(self, Method::MixedBaseline | Method::EcpBaselineOuter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Repetition `r` uses seed `spec.seed + r`.
    pub spec: InstanceSpec,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub methods: Vec<Method>,
    /// Estimate the scales instead of fixing them at their generating values.
    #[serde(default)]
    pub joint: bool,
    #[serde(default = "default_time_limit")]
    pub time_limit_secs: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_repetitions() -> usize {
    5
}

fn default_time_limit() -> f64 {
    3600.0
}

fn default_tol() -> f64 {
    1e-8
}

impl ManifestEntry {
    pub fn spec_id(&self) -> String {
        format!("{}-{}", self.spec.id(), if self.joint { "joint" } else { "fixed" })
    }

    fn check(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Manifest(format!("{}: {msg}", self.spec_id())));
        self.spec.check()?;
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.repetitions == 0 {
            return bad("zero repetitions".into());
        }
        if self.joint && self.spec.model == ModelKind::Mnl {
            return bad("the multinomial model has no scales to estimate".into());
        }
        if let Some(m) = self.methods.iter().find(|m| m.needs_joint() && !self.joint) {
            return bad(format!("method {} needs estimated scales", m.name()));
        }
        if !(self.time_limit_secs > 0.0 && self.tol > 0.0) {
            return bad("time limit and tolerance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn check(&self) -> Result<(), BenchError> {
        if self.entries.is_empty() {
            return Err(BenchError::Manifest("manifest is empty".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            e.check()?;
            if !ids.insert(e.spec_id()) {
                return Err(BenchError::Manifest(format!("duplicate entry {}", e.spec_id())));
            }
        }
        Ok(())
    }

    /// Fixed-scale sweep over all three models plus joint sweeps for the
    /// nested models, on `p` x sizes x rates with `reps` seeds per cell.
    #[allow(clippy::too_many_arguments)]
    pub fn grid(
        grid: Grid,
        ps: &[usize],
        sizes: &[Size],
        rates: &[f64],
        reps: usize,
        seed: u64,
        methods: &[Method],
        time_limit_secs: f64,
        tol: f64,
    ) -> Self {
        let mut entries = Vec::new();
        for joint in [false, true] {
            for model in [ModelKind::Mnl, ModelKind::Nl, ModelKind::Tnl] {
                if joint && model == ModelKind::Mnl {
                    continue;
                }
                let methods: Vec<Method> = methods.iter().copied().filter(|m| joint || !m.needs_joint()).collect();
                if methods.is_empty() {
                    continue;
                }
                for &p in ps {
                    for &size in sizes {
                        for &rate in rates {
                            let mut spec = InstanceSpec::new(model, p, size, rate, seed);
                            spec.grid = grid;
                            entries.push(ManifestEntry {
                                spec,
                                repetitions: reps,
                                methods: methods.clone(),
                                joint,
                                time_limit_secs,
                                tol,
                            });
                        }
                    }
                }
            }
        }
        Self { entries }
    }

    /// The default sweep: `p` in {5, 20}, rates {0.2, 0.8}, sizes S and M of
    /// the desk grid, or the full parameter grid with `full`.
    pub fn standard(full: bool, seed: u64, methods: &[Method], time_limit_secs: f64, tol: f64) -> Self {
        if full {
            Self::grid(
                Grid::Full,
                &[5, 10, 20, 50],
                &[Size::S, Size::M, Size::L],
                &[0.2, 0.5, 0.8],
                5,
                seed,
                methods,
                time_limit_secs,
                tol,
            )
        } else {
            Self::grid(Grid::Desk, &[5, 20], &[Size::S, Size::M], &[0.2, 0.8], 5, seed, methods, time_limit_secs, tol)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub spec_id: String,
    pub seed: u64,
    pub method: Method,
    pub status: FitStatus,
    pub loglik: f64,
    pub elapsed: f64,
    pub outer_iters: usize,
    pub inner_solves: usize,
    pub solver_iters: usize,
    pub is_opt: bool,
    pub is_best: bool,
    pub gap_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub spec_id: String,
    pub seed: u64,
    pub method: Method,
    pub trace: Vec<f64>,
    /// `max(0, max_k (trace[k] - trace[k+1]))`
    pub max_drop: f64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("no results in {0}")]
    NoResults(PathBuf),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Runs one method on one instance; a fit error becomes a `Failed` result.
pub fn run_method(
    method: Method,
    inst: &crate::datagen::Instance,
    joint: bool,
    base: &FitConfig,
) -> EstimationResult {
    let mut cfg = base.clone();
    match method {
        Method::MixedBaseline => {
            cfg.two_stage.inner_method = InnerMethod::QuasiNewton;
            cfg.two_stage.outer_method = OuterMethod::FiniteDifference;
        }
        Method::EcpBaselineOuter => {
            cfg.two_stage.inner_method = InnerMethod::Conic;
            cfg.two_stage.outer_method = OuterMethod::FiniteDifference;
        }
        Method::Ecp | Method::Baseline => {
            cfg.two_stage.inner_method = InnerMethod::Conic;
            cfg.two_stage.outer_method = OuterMethod::EnvelopeGradient;
        }
    }
    let data = &inst.data;
    let result = match (&inst.structure, joint, method) {
        (Structure::None, _, Method::Baseline) => fit_baseline_quasi_newton(BaselineModel::Multinomial, data, &cfg),
        (Structure::None, _, _) => fit_mnl(data, &cfg),
        (Structure::Nests(n), false, Method::Baseline) => {
            fit_baseline_quasi_newton(BaselineModel::NestedFixed(n, n.lambdas()), data, &cfg)
        }
        (Structure::Nests(n), false, _) => fit_nl_fixed_lambda(data, n, n.lambdas(), &cfg),
        (Structure::Nests(n), true, Method::Baseline) => fit_baseline_quasi_newton(BaselineModel::NestedJoint(n), data, &cfg),
        (Structure::Nests(n), true, _) => fit_nl_joint(data, n, &cfg),
        (Structure::Tree(t), false, Method::Baseline) => {
            let l = t.free_lambdas();
            fit_baseline_quasi_newton(BaselineModel::TreeFixed(t, &l), data, &cfg)
        }
        (Structure::Tree(t), false, _) => fit_tnl_fixed_lambda(data, t, &t.free_lambdas(), &cfg),
        (Structure::Tree(t), true, Method::Baseline) => fit_baseline_quasi_newton(BaselineModel::TreeJoint(t), data, &cfg),
        (Structure::Tree(t), true, _) => fit_tnl_joint(data, t, &cfg),
    };
    result.unwrap_or_else(|e| EstimationResult {
        message: Some(e.to_string()),
        ..failed_result(data.num_attributes())
    })
}

fn failed_result(p: usize) -> EstimationResult {
    EstimationResult {
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

/// Sets `is_opt`, `is_best` and `gap_pct` on the rows of one instance.
pub fn flag_instance(rows: &mut [ResultRow], results: &[&EstimationResult], joint: bool, tol: f64) {
    let best = rows.iter().map(|r| r.loglik).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let baseline = rows
        .iter()
        .find(|r| r.method == Method::Baseline)
        .map(|r| r.loglik)
        .filter(|v| v.is_finite());
    for (row, res) in rows.iter_mut().zip(results) {
        row.is_opt = !joint
            && row.status == FitStatus::Converged
            && res.residuals.as_ref().is_none_or(|r| r.within(tol));
        row.is_best = row.loglik.is_finite() && row.loglik >= best - BEST_TOL;
        row.gap_pct = match baseline {
            Some(b) if row.method != Method::Baseline && row.loglik.is_finite() => {
                Some(100.0 * (row.loglik - b) / b.abs().max(f64::MIN_POSITIVE))
            }
            _ => None,
        };
    }
}

fn max_drop(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub jobs: usize,
    pub fit: FitConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            fit: FitConfig::default(),
        }
    }
}

/// Everything a finished sweep wrote.
#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub rows: Vec<ResultRow>,
    pub traces: Vec<TraceRecord>,
    pub summary: Summary,
}

struct Store {
    dir: PathBuf,
    /// completed instances by `(entry, repetition)`
    done: BTreeMap<(usize, usize), (Vec<ResultRow>, Vec<TraceRecord>)>,
}

impl Store {
    fn flush(&self) -> Result<(), BenchError> {
        let rows: Vec<&ResultRow> = self.done.values().flat_map(|(r, _)| r).collect();
        let traces: Vec<&TraceRecord> = self.done.values().flat_map(|(_, t)| t).collect();
        write_rows(&self.dir.join("rows.csv"), &rows)?;
        let mut text = String::new();
        for t in traces {
            text.push_str(&serde_json::to_string(t).expect("trace records serialize"));
            text.push('\n');
        }
        let path = self.dir.join("traces.jsonl");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn write_rows(path: &Path, rows: &[&ResultRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, BenchError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}

/// Runs the manifest into `out_dir`, skipping instances whose rows are
/// already complete there.
pub fn run(manifest: &Manifest, out_dir: &Path, opts: &BenchOptions) -> Result<BenchOutput, BenchError> {
    manifest.check()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let specs: BTreeMap<String, ManifestEntry> = manifest.entries.iter().map(|e| (e.spec_id(), e.clone())).collect();
    let path = out_dir.join("instances.json");
    std::fs::write(&path, serde_json::to_string_pretty(&specs).expect("specs serialize")).map_err(|e| io_err(&path, e))?;

    // resume: keep instances whose every method already has a row
    let mut done = BTreeMap::new();
    let rows_path = out_dir.join("rows.csv");
    if rows_path.exists() {
        let old_rows = read_rows(&rows_path)?;
        let old_traces = read_traces(&out_dir.join("traces.jsonl"))?;
        for (i, e) in manifest.entries.iter().enumerate() {
            let id = e.spec_id();
            for rep in 0..e.repetitions {
                let seed = e.spec.seed.wrapping_add(rep as u64);
                let rows: Vec<ResultRow> = e
                    .methods
                    .iter()
                    .filter_map(|m| old_rows.iter().find(|r| r.spec_id == id && r.seed == seed && r.method == *m).cloned())
                    .collect();
                if rows.len() == e.methods.len() {
                    let traces = old_traces
                        .iter()
                        .filter(|t| t.spec_id == id && t.seed == seed)
                        .cloned()
                        .collect();
                    done.insert((i, rep), (rows, traces));
                }
            }
        }
    }
    let pending: Vec<(usize, usize)> = manifest
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.repetitions).map(move |rep| (i, rep)))
        .filter(|k| !done.contains_key(k))
        .collect();
    let store = Mutex::new(Store {
        dir: out_dir.to_path_buf(),
        done,
    });
    store.lock().expect("store lock").flush()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| BenchError::Manifest(e.to_string()))?;
    // one task per (instance, method); the last method of an instance to
    // finish flags and writes the instance
    let tasks: Vec<(usize, usize, usize)> = pending
        .iter()
        .flat_map(|&(i, rep)| (0..manifest.entries[i].methods.len()).map(move |k| (i, rep, k)))
        .collect();
    type Partial = HashMap<(usize, usize), Vec<Option<(ResultRow, EstimationResult)>>>;
    let partial: Mutex<Partial> = Mutex::new(HashMap::new());
    let instances: Mutex<HashMap<(usize, usize), std::sync::Arc<crate::datagen::Instance>>> = Mutex::new(HashMap::new());
    let outcome: Result<(), BenchError> = pool.install(|| {
        tasks.par_iter().try_for_each(|&(i, rep, k)| {
            let entry = &manifest.entries[i];
            let seed = entry.spec.seed.wrapping_add(rep as u64);
            let inst = {
                let cached = instances.lock().expect("instance lock").get(&(i, rep)).cloned();
                match cached {
                    Some(inst) => inst,
                    None => {
                        let spec = InstanceSpec {
                            seed,
                            ..entry.spec.clone()
                        };
                        let inst = std::sync::Arc::new(gen_instance(&spec)?);
                        instances.lock().expect("instance lock").insert((i, rep), inst.clone());
                        inst
                    }
                }
            };
            let mut cfg = opts.fit.clone();
            cfg.solver.tol = entry.tol;
            cfg.two_stage.time_limit_secs = entry.time_limit_secs;
            let method = entry.methods[k];
            let res = run_method(method, &inst, entry.joint, &cfg);
            let row = ResultRow {
                spec_id: entry.spec_id(),
                seed,
                method,
                status: res.status,
                loglik: res.loglik,
                elapsed: res.elapsed,
                outer_iters: res.outer_iters,
                inner_solves: res.inner_solves,
                solver_iters: res.solver_iters,
                is_opt: false,
                is_best: false,
                gap_pct: None,
            };
            let complete = {
                let mut partial = partial.lock().expect("partial lock");
                let slots = partial.entry((i, rep)).or_insert_with(|| vec![None; entry.methods.len()]);
                slots[k] = Some((row, res));
                if slots.iter().all(Option::is_some) {
                    partial.remove(&(i, rep))
                } else {
                    None
                }
            };
            if let Some(slots) = complete {
                instances.lock().expect("instance lock").remove(&(i, rep));
                let (mut rows, results): (Vec<ResultRow>, Vec<EstimationResult>) =
                    slots.into_iter().map(|s| s.expect("all present")).unzip();
                let refs: Vec<&EstimationResult> = results.iter().collect();
                flag_instance(&mut rows, &refs, entry.joint, entry.tol);
                let traces = rows
                    .iter()
                    .zip(&results)
                    .map(|(r, res)| TraceRecord {
                        spec_id: r.spec_id.clone(),
                        seed,
                        method: r.method,
                        max_drop: max_drop(&res.trace),
                        trace: res.trace.clone(),
                    })
                    .collect();
                let mut store = store.lock().expect("store lock");
                store.done.insert((i, rep), (rows, traces));
                store.flush()?;
            }
            Ok(())
        })
    });
    outcome?;
    let store = store.into_inner().expect("store lock");
    let (rows, traces): (Vec<Vec<ResultRow>>, Vec<Vec<TraceRecord>>) = store.done.into_values().unzip();
    let rows: Vec<ResultRow> = rows.into_iter().flatten().collect();
    let traces = traces.into_iter().flatten().collect();
    let summary = summarize(&rows, &specs);
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| io_err(&path, e))?;
    Ok(BenchOutput { rows, traces, summary })
}

/// Per-method figures of one summary cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodCell {
    pub runs: usize,
    pub opt: usize,
    pub best: usize,
    pub failed: usize,
    /// mean elapsed seconds
    pub ave_time: f64,
    /// mean `gap_pct` over instances with a finite baseline value
    pub ave_gap: Option<f64>,
    /// instances excluded from `ave_gap` because the baseline value was not finite
    pub gap_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub model: ModelKind,
    pub joint: bool,
    pub p: usize,
    pub size: Size,
    pub methods: BTreeMap<Method, MethodCell>,
}

/// Groups in `(model, joint, p, size)` order; every row with a known spec
/// lands in exactly one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total_rows: usize,
    pub groups: Vec<SummaryGroup>,
}

pub fn summarize(rows: &[ResultRow], specs: &BTreeMap<String, ManifestEntry>) -> Summary {
    type Key = (ModelKind, bool, usize, Size);
    let mut groups: BTreeMap<Key, BTreeMap<Method, Vec<&ResultRow>>> = BTreeMap::new();
    // `run` records the spec of every row it writes; foreign rows are skipped
    for r in rows {
        let Some(e) = specs.get(&r.spec_id) else { continue };
        groups
            .entry((e.spec.model, e.joint, e.spec.p, e.spec.size))
            .or_default()
            .entry(r.method)
            .or_default()
            .push(r);
    }
    let groups = groups
        .into_iter()
        .map(|((model, joint, p, size), by_method)| {
            let methods = by_method
                .into_iter()
                .map(|(m, rs)| {
                    let gaps: Vec<f64> = rs.iter().filter_map(|r| r.gap_pct).collect();
                    let cell = MethodCell {
                        runs: rs.len(),
                        opt: rs.iter().filter(|r| r.is_opt).count(),
                        best: rs.iter().filter(|r| r.is_best).count(),
                        failed: rs.iter().filter(|r| r.status == FitStatus::Failed).count(),
                        ave_time: rs.iter().map(|r| r.elapsed).sum::<f64>() / rs.len() as f64,
                        ave_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
                        gap_excluded: if m == Method::Baseline { 0 } else { rs.len() - gaps.len() },
                    };
                    (m, cell)
                })
                .collect();
            SummaryGroup {
                model,
                joint,
                p,
                size,
                methods,
            }
        })
        .collect();
    Summary {
        total_rows: rows.len(),
        groups,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

/// Renders the summary of a results directory.
pub fn report(dir: &Path, format: ReportFormat) -> Result<String, BenchError> {
    let rows_path = dir.join("rows.csv");
    if !rows_path.exists() {
        return Err(BenchError::NoResults(dir.to_path_buf()));
    }
    let rows = read_rows(&rows_path)?;
    if rows.is_empty() {
        return Err(BenchError::NoResults(dir.to_path_buf()));
    }
    let spec_path = dir.join("instances.json");
    let text = std::fs::read_to_string(&spec_path).map_err(|e| io_err(&spec_path, e))?;
    let specs: BTreeMap<String, ManifestEntry> = serde_json::from_str(&text).map_err(|e| io_err(&spec_path, e))?;
    let summary = summarize(&rows, &specs);
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(&summary).expect("summary serializes"),
        ReportFormat::Csv => render_csv(&summary),
        ReportFormat::Markdown => render_markdown(&summary),
    })
}

fn fmt_gap(g: Option<f64>) -> String {
    g.map_or(String::new(), |v| format!("{v:.4}"))
}

fn render_csv(s: &Summary) -> String {
    let mut out = String::from("model,mode,p,size,method,runs,opt,best,failed,ave_time,ave_gap,gap_excluded\n");
    for g in &s.groups {
        for (m, c) in &g.methods {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.4},{},{}",
                g.model,
                if g.joint { "joint" } else { "fixed" },
                g.p,
                g.size,
                m.name(),
                c.runs,
                c.opt,
                c.best,
                c.failed,
                c.ave_time,
                fmt_gap(c.ave_gap),
                c.gap_excluded
            );
        }
    }
    out
}

/// One table per model and mode; rows are `(#Att, Size)`, each method a
/// column block of `#Opt` (fixed) or `#Best` (joint), `AveTime(s)` and,
/// for non-baseline methods, `AveGap(%)`.
fn render_markdown(s: &Summary) -> String {
    let mut tables: BTreeMap<(ModelKind, bool), Vec<&SummaryGroup>> = BTreeMap::new();
    for g in &s.groups {
        tables.entry((g.model, g.joint)).or_default().push(g);
    }
    let mut out = String::new();
    for ((model, joint), groups) in tables {
        let methods: Vec<Method> = {
            let mut all: Vec<Method> = groups.iter().flat_map(|g| g.methods.keys().copied()).collect();
            all.sort();
            all.dedup();
            all
        };
        let count = if joint { "#Best" } else { "#Opt" };
        let _ = writeln!(out, "### {model} ({})\n", if joint { "estimated scales" } else { "fixed scales" });
        let mut header = String::from("| #Att | Size |");
        let mut rule = String::from("|---|---|");
        for m in &methods {
            let _ = write!(header, " {} {count} | {} AveTime(s) |", m.name(), m.name());
            rule.push_str("---|---|");
            if *m != Method::Baseline {
                let _ = write!(header, " {} AveGap(%) |", m.name());
                rule.push_str("---|");
            }
        }
        let _ = writeln!(out, "{header}\n{rule}");
        let mut missing = false;
        for g in groups {
            let mut line = format!("| {} | {} |", g.p, g.size);
            for m in &methods {
                match g.methods.get(m) {
                    Some(c) => {
                        let n = if joint { c.best } else { c.opt };
                        let _ = write!(line, " {n}/{} | {:.2} |", c.runs, c.ave_time);
                        if *m != Method::Baseline {
                            let _ = write!(line, " {} |", fmt_gap(c.ave_gap));
                        }
                    }
                    None => {
                        missing = true;
                        line.push_str("  |  |");
                        if *m != Method::Baseline {
                            line.push_str("  |");
                        }
                    }
                }
            }
            let _ = writeln!(out, "{line}");
        }
        if missing {
            let _ = writeln!(out, "\nBlank cells: the method was not run on that cell.");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(methods: Vec<Method>, joint: bool) -> Manifest {
        let spec = InstanceSpec::new(if joint { ModelKind::Nl } else { ModelKind::Mnl }, 2, Size::S, 0.2, 10);
        Manifest {
            entries: vec![ManifestEntry {
                spec,
                repetitions: 5,
                methods,
                joint,
                time_limit_secs: 60.0,
                tol: 1e-8,
            }],
        }
    }

    fn strip_time(rows: &[ResultRow]) -> Vec<ResultRow> {
        rows.iter()
            .map(|r| ResultRow {
                elapsed: 0.0,
                ..r.clone()
            })
            .collect()
    }

    #[test]
    fn one_spec_five_reps_two_methods_give_ten_rows_and_one_group() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(vec![Method::Ecp, Method::Baseline], false);
        let out = run(&m, dir.path(), &BenchOptions::default()).unwrap();
        assert_eq!(out.rows.len(), 10);
        assert_eq!(out.summary.groups.len(), 1);
        assert!(out.rows.iter().filter(|r| r.method == Method::Ecp).all(|r| r.is_opt));
        // accounting and flag identities
        let total: usize = out.summary.groups.iter().flat_map(|g| g.methods.values()).map(|c| c.runs).sum();
        assert_eq!(total, out.rows.len());
        let best: usize = out.summary.groups.iter().flat_map(|g| g.methods.values()).map(|c| c.best).sum();
        assert_eq!(best, out.rows.iter().filter(|r| r.is_best).count());
        let g = &out.summary.groups[0];
        assert!(g.methods[&Method::Baseline].ave_gap.is_none());
        assert!(g.methods[&Method::Ecp].ave_gap.is_some());
    }

    #[test]
    fn resume_reproduces_the_missing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(vec![Method::Ecp, Method::Baseline], false);
        let full = run(&m, dir.path(), &BenchOptions::default()).unwrap();
        // keep the first three instances, as if killed mid-sweep
        let kept: Vec<&ResultRow> = full.rows.iter().take(6).collect();
        write_rows(&dir.path().join("rows.csv"), &kept).unwrap();
        let resumed = run(&m, dir.path(), &BenchOptions { jobs: 2, ..Default::default() }).unwrap();
        assert_eq!(strip_time(&resumed.rows), strip_time(&full.rows));
        assert_eq!(&resumed.rows[..6], &full.rows[..6]);
    }

    #[test]
    fn report_is_idempotent_and_rejects_empty_dirs() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(report(empty.path(), ReportFormat::Markdown), Err(BenchError::NoResults(_))));
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(vec![Method::Ecp, Method::Baseline], false);
        run(&m, dir.path(), &BenchOptions::default()).unwrap();
        let a = report(dir.path(), ReportFormat::Markdown).unwrap();
        let b = report(dir.path(), ReportFormat::Markdown).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("| 2 | S |"));
        assert!(report(dir.path(), ReportFormat::Csv).unwrap().lines().count() == 3);
    }

    #[test]
    fn joint_only_methods_need_estimated_scales() {
        let m = tiny_manifest(vec![Method::MixedBaseline], false);
        assert!(matches!(m.check(), Err(BenchError::Manifest(_))));
        assert!(Manifest::default().check().is_err());
    }

    #[test]
    fn flags_follow_the_declared_rules() {
        let row = |method, loglik, status| ResultRow {
            spec_id: "x".into(),
            seed: 0,
            method,
            status,
            loglik,
            elapsed: 1.0,
            outer_iters: 0,
            inner_solves: 0,
            solver_iters: 0,
            is_opt: false,
            is_best: false,
            gap_pct: None,
        };
        let mut rows = vec![
            row(Method::Ecp, -100.0, FitStatus::Converged),
            row(Method::Baseline, -100.00005, FitStatus::Converged),
            row(Method::MixedBaseline, -101.0, FitStatus::TimeLimit),
        ];
        let res = failed_result(0);
        flag_instance(&mut rows, &[&res, &res, &res], true, 1e-8);
        assert_eq!(rows.iter().map(|r| r.is_best).collect::<Vec<_>>(), vec![true, true, false]);
        assert!(rows.iter().all(|r| !r.is_opt));
        assert!(rows[1].gap_pct.is_none());
        let gap = rows[2].gap_pct.unwrap();
        assert!((gap - 100.0 * (-101.0 + 100.00005) / 100.00005).abs() < 1e-12);
    }
}
