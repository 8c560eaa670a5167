//! Exponential-cone programs whose optimal value is the maximum
//! log-likelihood of a logit model with fixed scale parameters.
//!
//! Every log-sum-exp bound `t >= log sum_j exp(v_j)` becomes
//! `sum_j z_j + slack = 1` with `(z_j, 1, v_j - t)` in the exponential cone.
//! Variables are laid out as
//!
//! ```text
//! beta | auxiliaries (free) | slacks (>= 0) | exponential blocks
//! ```
//!
//! with auxiliaries, slacks and blocks each grouped by observation. Each
//! block owns its second coordinate, pinned to one by its own equality row,
//! and its third coordinate, tied to the affine expression by another row.

use std::ops::Range;

use expcone::{ConeBlock, ConicProgram, ConicSolution, CscMatrix, SolveStatus};
use thiserror::Error;

use crate::data::ChoiceDataset;
use crate::model::{log_sum_exp, mnl_log_likelihood, nl_log_likelihood, tnl_log_likelihood, ModelError};
use crate::structure::{NestPartition, StructureError, TaxonomyTree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReformulateError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("alternative {alt} is not covered by the structure ({covered} alternatives)")]
    UncoveredAlternative { alt: usize, covered: usize },
    #[error("solver finished with status {0:?}; no solution to extract")]
    ExtractionRefused(SolveStatus),
    #[error("solution has {found} primal entries, program has {expected} variables")]
    SolutionShape { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What an exponential block stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConeOrigin {
    /// Multinomial model: offered alternative `alt` of observation `n`.
    Alternative { n: usize, alt: usize },
    /// Nested model: offered alternative `alt` inside nest `nest`.
    NestMember { n: usize, alt: usize, nest: usize },
    /// Nested model: active nest `nest` in the top-level sum.
    Nest { n: usize, nest: usize },
    /// Tree model: active edge from `parent` to `child`.
    Edge { n: usize, parent: usize, child: usize },
}

/// Auxiliary variable of one group (active nest or active internal node)
/// of one observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSlot {
    pub n: usize,
    /// Nest index or tree node.
    pub group: usize,
    pub slot: usize,
}

/// The model a program was built for, with its fixed scales.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelStructure {
    Multinomial,
    Nested(NestPartition),
    Tree(TaxonomyTree),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarMap {
    pub beta: Range<usize>,
    /// Per-observation log-sum bound: `t_n` (multinomial) or `y_n`
    /// (nested). Empty for the tree model.
    pub obs_slots: Vec<usize>,
    /// Group log-sums `z`, sorted by observation.
    pub group_slots: Vec<GroupSlot>,
    /// `group_offsets[n]..group_offsets[n + 1]` indexes `group_slots`.
    pub group_offsets: Vec<usize>,
    pub slacks: Range<usize>,
    /// First variable of the first exponential block; block `i` occupies
    /// `cone_start + 3 i .. cone_start + 3 i + 3`.
    pub cone_start: usize,
    pub cone_registry: Vec<ConeOrigin>,
    pub structure: ModelStructure,
}

impl VarMap {
    pub fn block_range(&self, i: usize) -> Range<usize> {
        let s = self.cone_start + 3 * i;
        s..s + 3
    }

    pub fn groups_of(&self, n: usize) -> &[GroupSlot] {
        &self.group_slots[self.group_offsets[n]..self.group_offsets[n + 1]]
    }
}

/// Instance aggregates and the size of the program as built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizingReport {
    pub n: usize,
    pub p: usize,
    /// Total offered alternatives.
    pub z: usize,
    /// Total active nests (nested model).
    pub lambda: Option<usize>,
    /// Total active internal nodes (tree model).
    pub gamma: Option<usize>,
    /// Total active edges (tree model).
    pub edges: Option<usize>,
    pub vars: usize,
    pub eq_rows: usize,
    pub exp_blocks: usize,
    pub nonneg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ecp {
    pub program: ConicProgram,
    pub vmap: VarMap,
    pub sizing: SizingReport,
}

/// Per-observation tightness of the relaxed log-sum-exp bounds and the
/// agreement between the conic objective and the model likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionAudit {
    /// Largest `|bound - log-sum-exp|` over the bounds of each observation.
    pub per_observation: Vec<f64>,
    pub max_slack: f64,
    /// `c^T x` of the conic solution.
    pub objective: f64,
    /// Model log-likelihood recomputed at the extracted coefficients.
    pub model_loglik: f64,
    /// `|model_loglik - objective| / max(1, |model_loglik|)`.
    pub relative_gap: f64,
}

impl ExtractionAudit {
    pub fn tight(&self, tol: f64) -> bool {
        self.max_slack <= tol && self.relative_gap <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub beta: Vec<f64>,
    pub audit: ExtractionAudit,
}

/// Triplet accumulator for the equality system.
struct Rows {
    trip: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Self {
            trip: Vec::new(),
            rhs: Vec::new(),
        }
    }

    fn push(&mut self, entries: impl IntoIterator<Item = (usize, f64)>, rhs: f64) -> usize {
        let r = self.rhs.len();
        self.trip.extend(entries.into_iter().map(|(col, v)| (r, col, v)));
        self.rhs.push(rhs);
        r
    }

    /// `w - scale * beta^T a + sum(extra) = 0` for the third coordinate `w`.
    fn exp_block(&mut self, block: usize, a: &[f64], scale: f64, extra: &[(usize, f64)]) {
        self.push([(block + 1, 1.0)], 1.0);
        let entries = std::iter::once((block + 2, 1.0))
            .chain(a.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(d, v)| (d, -scale * v)))
            .chain(extra.iter().copied());
        self.push(entries, 0.0);
    }
}

fn check_cover(data: &ChoiceDataset, covered: usize) -> Result<(), ReformulateError> {
    for obs in data.observations() {
        if let Some(&alt) = obs.offered.iter().find(|&&a| a >= covered) {
            return Err(ReformulateError::UncoveredAlternative { alt, covered });
        }
    }
    Ok(())
}

fn assemble(
    nvars: usize,
    c: Vec<f64>,
    rows: Rows,
    free: usize,
    nonneg: usize,
    exp_blocks: usize,
) -> ConicProgram {
    let a = CscMatrix::from_triplets(rows.rhs.len(), nvars, &rows.trip).expect("entries lie inside the program");
    let mut cones = vec![ConeBlock::Free(free)];
    if nonneg > 0 {
        cones.push(ConeBlock::NonNeg(nonneg));
    }
    cones.extend(std::iter::repeat_n(ConeBlock::Exp, exp_blocks));
    ConicProgram::new(nvars, c, a, rows.rhs, cones)
}

/// `max sum_n (beta^T a_{n j_n} - t_n)` with `t_n >= log sum_j exp(beta^T a_nj)`.
pub fn mnl_to_ecp(data: &ChoiceDataset) -> Ecp {
    let p = data.num_attributes();
    let big_n = data.num_observations();
    let z = data.total_offered();
    let t0 = p;
    let slack0 = p + big_n;
    let cone0 = p + 2 * big_n;
    let nvars = cone0 + 3 * z;
    let mut c = vec![0.0; nvars];
    let mut rows = Rows::new();
    let mut registry = Vec::with_capacity(z);
    for n in 0..big_n {
        let obs = data.observation(n);
        let first = registry.len();
        let sum = (0..obs.offered.len()).map(|i| (cone0 + 3 * (first + i), 1.0));
        rows.push(sum.chain([(slack0 + n, 1.0)]), 1.0);
        for (slot, &alt) in obs.offered.iter().enumerate() {
            let block = cone0 + 3 * registry.len();
            rows.exp_block(block, data.attribute_row(n, slot), 1.0, &[(t0 + n, 1.0)]);
            registry.push(ConeOrigin::Alternative { n, alt });
        }
        for (d, v) in data.attribute_row(n, data.chosen_slot(n)).iter().enumerate() {
            c[d] += v;
        }
        c[t0 + n] = -1.0;
    }
    let eq_rows = rows.rhs.len();
    let program = assemble(nvars, c, rows, p + big_n, big_n, z);
    Ecp {
        program,
        vmap: VarMap {
            beta: 0..p,
            obs_slots: (t0..t0 + big_n).collect(),
            group_slots: Vec::new(),
            group_offsets: vec![0; big_n + 1],
            slacks: slack0..slack0 + big_n,
            cone_start: cone0,
            cone_registry: registry,
            structure: ModelStructure::Multinomial,
        },
        sizing: SizingReport {
            n: big_n,
            p,
            z,
            lambda: None,
            gamma: None,
            edges: None,
            vars: nvars,
            eq_rows,
            exp_blocks: z,
            nonneg: big_n,
        },
    }
}

/// Offered slots of observation `n` grouped by nest, ascending nest order.
fn active_nests(nests: &NestPartition, data: &ChoiceDataset, n: usize) -> Vec<(usize, Vec<usize>)> {
    let mut by_nest: Vec<Vec<usize>> = vec![Vec::new(); nests.num_nests()];
    for (slot, &alt) in data.observation(n).offered.iter().enumerate() {
        by_nest[nests.nest_of(alt)].push(slot);
    }
    by_nest.into_iter().enumerate().filter(|(_, s)| !s.is_empty()).collect()
}

/// Nested logit with scales `lambda` (one per nest, in `(0, 1]`):
///
/// ```text
/// max  sum_n (lambda_c - 1) z_nc + beta^T a_{n j_n} / lambda_c - y_n
///      z_nl >= log sum_{j in nest l} exp(beta^T a_nj / lambda_l)
///      y_n  >= log sum_l exp(lambda_l z_nl)
/// ```
///
/// where `c` is the nest of the chosen alternative. Only nests with an
/// offered member get variables, rows and blocks.
pub fn nl_to_ecp(data: &ChoiceDataset, nests: &NestPartition, lambda: &[f64]) -> Result<Ecp, ReformulateError> {
    let nests = nests.with_lambdas(lambda)?;
    check_cover(data, nests.num_alternatives())?;
    let p = data.num_attributes();
    let big_n = data.num_observations();
    let z = data.total_offered();
    let groups: Vec<Vec<(usize, Vec<usize>)>> = (0..big_n).map(|n| active_nests(&nests, data, n)).collect();
    let big_lambda: usize = groups.iter().map(Vec::len).sum();

    let y0 = p;
    let z0 = y0 + big_n;
    let slack0 = z0 + big_lambda;
    let nslack = big_lambda + big_n;
    let cone0 = slack0 + nslack;
    let nblocks = z + big_lambda;
    let nvars = cone0 + 3 * nblocks;
    let mut c = vec![0.0; nvars];
    let mut rows = Rows::new();
    let mut registry = Vec::with_capacity(nblocks);
    let mut group_slots = Vec::with_capacity(big_lambda);
    let mut group_offsets = Vec::with_capacity(big_n + 1);
    let mut slack = slack0;
    let block_at = |i: usize| cone0 + 3 * i;
    for (n, active) in groups.iter().enumerate() {
        group_offsets.push(group_slots.len());
        let chosen = data.chosen_slot(n);
        let first_nest = group_slots.len();
        for (g, (nest, slots)) in active.iter().enumerate() {
            let zl = z0 + first_nest + g;
            group_slots.push(GroupSlot {
                n,
                group: *nest,
                slot: zl,
            });
            let lam = nests.lambdas()[*nest];
            let first = registry.len();
            let sum = (0..slots.len()).map(|i| (block_at(first + i), 1.0));
            rows.push(sum.chain([(slack, 1.0)]), 1.0);
            slack += 1;
            for &s in slots {
                let alt = data.observation(n).offered[s];
                rows.exp_block(block_at(registry.len()), data.attribute_row(n, s), 1.0 / lam, &[(zl, 1.0)]);
                registry.push(ConeOrigin::NestMember { n, alt, nest: *nest });
            }
            if slots.contains(&chosen) {
                c[zl] = lam - 1.0;
                for (d, v) in data.attribute_row(n, chosen).iter().enumerate() {
                    c[d] += v / lam;
                }
            }
        }
        // top level: (h_nl, 1, lambda_l z_nl - y_n)
        let first = registry.len();
        let sum = (0..active.len()).map(|i| (block_at(first + i), 1.0));
        rows.push(sum.chain([(slack, 1.0)]), 1.0);
        slack += 1;
        for (g, (nest, _)) in active.iter().enumerate() {
            let lam = nests.lambdas()[*nest];
            let b = block_at(registry.len());
            rows.exp_block(b, &[], 0.0, &[(z0 + first_nest + g, -lam), (y0 + n, 1.0)]);
            registry.push(ConeOrigin::Nest { n, nest: *nest });
        }
        c[y0 + n] = -1.0;
    }
    group_offsets.push(group_slots.len());
    debug_assert_eq!(slack, cone0);
    debug_assert_eq!(registry.len(), nblocks);
    let eq_rows = rows.rhs.len();
    let program = assemble(nvars, c, rows, p + big_n + big_lambda, nslack, nblocks);
    Ok(Ecp {
        program,
        vmap: VarMap {
            beta: 0..p,
            obs_slots: (y0..y0 + big_n).collect(),
            group_slots,
            group_offsets,
            slacks: slack0..cone0,
            cone_start: cone0,
            cone_registry: registry,
            structure: ModelStructure::Nested(nests),
        },
        sizing: SizingReport {
            n: big_n,
            p,
            z,
            lambda: Some(big_lambda),
            gamma: None,
            edges: None,
            vars: nvars,
            eq_rows,
            exp_blocks: nblocks,
            nonneg: nslack,
        },
    })
}

/// Active internal nodes of observation `n` in breadth-first order, each
/// with its active children, plus the offered slot of every active leaf.
struct ActiveNodes {
    internal: Vec<(usize, Vec<usize>)>,
    leaf_slot: Vec<(usize, usize)>,
}

fn active_nodes(tree: &TaxonomyTree, data: &ChoiceDataset, n: usize, mark: &mut [bool]) -> ActiveNodes {
    let mut touched = Vec::new();
    let mut leaf_slot = Vec::new();
    for (slot, &alt) in data.observation(n).offered.iter().enumerate() {
        let mut node = tree.leaf_of(alt);
        leaf_slot.push((node, slot));
        mark[node] = true;
        touched.push(node);
        while let Some(parent) = tree.parent(node) {
            if mark[parent] {
                break;
            }
            mark[parent] = true;
            touched.push(parent);
            node = parent;
        }
    }
    let mut internal = Vec::new();
    let mut queue = vec![tree.root()];
    let mut head = 0;
    while head < queue.len() {
        let k = queue[head];
        head += 1;
        if tree.is_leaf(k) {
            continue;
        }
        let kids: Vec<usize> = tree.children(k).iter().copied().filter(|&s| mark[s]).collect();
        queue.extend(kids.iter().copied());
        internal.push((k, kids));
    }
    for k in touched {
        mark[k] = false;
    }
    ActiveNodes { internal, leaf_slot }
}

/// Tree-nested logit with the free scales of [`TaxonomyTree::free_nodes`]
/// set to `free_lambda`:
///
/// ```text
/// max  sum_n -z_root + sum_{path nodes k below the root} (lambda_k / lambda_parent - 1) z_k
///            + beta^T a_{n j_n} / lambda_{parent of the chosen leaf}
///      z_k >= log sum_{active children s} exp((lambda_s / lambda_k) z_s)
/// ```
///
/// over the active subtree spanning the offered set. Leaf values are
/// `z_s = beta^T a_ns` directly, so only internal nodes carry a variable.
pub fn tnl_to_ecp(data: &ChoiceDataset, tree: &TaxonomyTree, free_lambda: &[f64]) -> Result<Ecp, ReformulateError> {
    let tree = tree.with_free_lambdas(free_lambda)?;
    check_cover(data, tree.num_alternatives())?;
    let p = data.num_attributes();
    let big_n = data.num_observations();
    let z = data.total_offered();
    let mut mark = vec![false; tree.num_nodes()];
    let active: Vec<ActiveNodes> = (0..big_n).map(|n| active_nodes(&tree, data, n, &mut mark)).collect();
    let gamma: usize = active.iter().map(|a| a.internal.len()).sum();
    let edges = gamma + z - big_n;

    let z0 = p;
    let slack0 = z0 + gamma;
    let cone0 = slack0 + gamma;
    let nvars = cone0 + 3 * edges;
    let mut c = vec![0.0; nvars];
    let mut rows = Rows::new();
    let mut registry = Vec::with_capacity(edges);
    let mut group_slots = Vec::with_capacity(gamma);
    let mut group_offsets = Vec::with_capacity(big_n + 1);
    let mut node_slot = vec![usize::MAX; tree.num_nodes()];
    let mut leaf_slot = vec![usize::MAX; tree.num_nodes()];
    for (n, act) in active.iter().enumerate() {
        group_offsets.push(group_slots.len());
        for (k, _) in &act.internal {
            node_slot[*k] = z0 + group_slots.len();
            group_slots.push(GroupSlot {
                n,
                group: *k,
                slot: node_slot[*k],
            });
        }
        for &(leaf, slot) in &act.leaf_slot {
            leaf_slot[leaf] = slot;
        }
        for (k, kids) in &act.internal {
            let zk = node_slot[*k];
            let slack = slack0 + (zk - z0);
            let first = registry.len();
            let sum = (0..kids.len()).map(|i| (cone0 + 3 * (first + i), 1.0));
            rows.push(sum.chain([(slack, 1.0)]), 1.0);
            let lk = tree.lambda(*k);
            for &s in kids {
                let b = cone0 + 3 * registry.len();
                let ratio = tree.lambda(s) / lk;
                if tree.is_leaf(s) {
                    rows.exp_block(b, data.attribute_row(n, leaf_slot[s]), ratio, &[(zk, 1.0)]);
                } else {
                    rows.exp_block(b, &[], 0.0, &[(node_slot[s], -ratio), (zk, 1.0)]);
                }
                registry.push(ConeOrigin::Edge { n, parent: *k, child: s });
            }
        }
        // objective along the chosen path
        let leaf = tree.leaf_of(data.observation(n).chosen);
        let mut s = leaf;
        while let Some(k) = tree.parent(s) {
            let ratio = tree.lambda(s) / tree.lambda(k);
            if tree.is_leaf(s) {
                for (d, v) in data.attribute_row(n, data.chosen_slot(n)).iter().enumerate() {
                    c[d] += ratio * v;
                }
            } else {
                c[node_slot[s]] += ratio - 1.0;
            }
            s = k;
        }
        c[node_slot[tree.root()]] -= 1.0;
    }
    group_offsets.push(group_slots.len());
    debug_assert_eq!(registry.len(), edges);
    let eq_rows = rows.rhs.len();
    let program = assemble(nvars, c, rows, p + gamma, gamma, edges);
    Ok(Ecp {
        program,
        vmap: VarMap {
            beta: 0..p,
            obs_slots: Vec::new(),
            group_slots,
            group_offsets,
            slacks: slack0..cone0,
            cone_start: cone0,
            cone_registry: registry,
            structure: ModelStructure::Tree(tree),
        },
        sizing: SizingReport {
            n: big_n,
            p,
            z,
            lambda: None,
            gamma: Some(gamma),
            edges: Some(edges),
            vars: nvars,
            eq_rows,
            exp_blocks: edges,
            nonneg: gamma,
        },
    })
}

/// Reads the coefficients from an optimal solution and audits it: every
/// relaxed log-sum-exp bound is compared with its exact value, and the
/// model likelihood at the extracted coefficients with the conic objective.
pub fn extract_solution(
    solution: &ConicSolution,
    vmap: &VarMap,
    data: &ChoiceDataset,
) -> Result<Extraction, ReformulateError> {
    if solution.status != SolveStatus::Optimal {
        return Err(ReformulateError::ExtractionRefused(solution.status));
    }
    let x = &solution.x;
    let expected = vmap.cone_start + 3 * vmap.cone_registry.len();
    if x.len() != expected {
        return Err(ReformulateError::SolutionShape {
            expected,
            found: x.len(),
        });
    }
    let beta = x[vmap.beta.clone()].to_vec();
    let big_n = data.num_observations();
    let mut per_observation = Vec::with_capacity(big_n);
    let model_loglik = match &vmap.structure {
        ModelStructure::Multinomial => {
            for n in 0..big_n {
                let lse = log_sum_exp(&data.utilities(&beta, n));
                per_observation.push((x[vmap.obs_slots[n]] - lse).abs());
            }
            mnl_log_likelihood(&beta, data)?.value
        }
        ModelStructure::Nested(nests) => {
            for n in 0..big_n {
                let v = data.utilities(&beta, n);
                let offered = &data.observation(n).offered;
                let mut worst = 0.0f64;
                let mut top = Vec::new();
                for g in vmap.groups_of(n) {
                    let lam = nests.lambdas()[g.group];
                    let inner: Vec<f64> = offered
                        .iter()
                        .zip(&v)
                        .filter(|(&alt, _)| nests.nest_of(alt) == g.group)
                        .map(|(_, u)| u / lam)
                        .collect();
                    worst = worst.max((x[g.slot] - log_sum_exp(&inner)).abs());
                    top.push(lam * x[g.slot]);
                }
                worst = worst.max((x[vmap.obs_slots[n]] - log_sum_exp(&top)).abs());
                per_observation.push(worst);
            }
            nl_log_likelihood(&beta, nests, data)?.value
        }
        ModelStructure::Tree(tree) => {
            let mut value = vec![f64::NAN; tree.num_nodes()];
            for n in 0..big_n {
                let v = data.utilities(&beta, n);
                for (&alt, &u) in data.observation(n).offered.iter().zip(&v) {
                    value[tree.leaf_of(alt)] = u;
                }
                let groups = vmap.groups_of(n);
                for g in groups {
                    value[g.group] = x[g.slot];
                }
                let mut worst = 0.0f64;
                for g in groups {
                    let lk = tree.lambda(g.group);
                    let terms: Vec<f64> = tree
                        .children(g.group)
                        .iter()
                        .filter(|&&s| !value[s].is_nan())
                        .map(|&s| tree.lambda(s) / lk * value[s])
                        .collect();
                    worst = worst.max((x[g.slot] - log_sum_exp(&terms)).abs());
                }
                per_observation.push(worst);
                for g in groups {
                    value[g.group] = f64::NAN;
                }
                for &alt in &data.observation(n).offered {
                    value[tree.leaf_of(alt)] = f64::NAN;
                }
            }
            tnl_log_likelihood(&beta, tree, data)?.value
        }
    };
    let objective = solution.primal_objective;
    let max_slack = per_observation.iter().copied().fold(0.0, f64::max);
    let relative_gap = (model_loglik - objective).abs() / model_loglik.abs().max(1.0);
    Ok(Extraction {
        beta,
        audit: ExtractionAudit {
            per_observation,
            max_slack,
            objective,
            model_loglik,
            relative_gap,
        },
    })
}
