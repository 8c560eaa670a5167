//! Choice probabilities, log-likelihoods and analytic gradients of the
//! multinomial, nested and tree-nested logit models.
//!
//! Every log-sum-exp is evaluated with max-subtraction, and scale
//! parameters are floored at [`LAMBDA_FLOOR`] before use.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::ChoiceDataset;
use crate::structure::{NestPartition, TaxonomyTree};

/// Smallest scale parameter used inside evaluation.
pub const LAMBDA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coefficient vector has {found} entries, expected {expected}")]
    BetaLength { expected: usize, found: usize },
    #[error("coefficient {0} is not finite")]
    NonFiniteBeta(usize),
    #[error("observation {n} is out of range for {num_observations} observations")]
    ObservationIndex { n: usize, num_observations: usize },
    #[error("alternative {alt} is not covered by the structure ({covered} alternatives)")]
    UncoveredAlternative { alt: usize, covered: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihoodReport {
    pub value: f64,
    pub per_observation: Vec<f64>,
    pub gradient_beta: Option<Vec<f64>>,
    /// Per nest for the nested model; per free node (see
    /// [`TaxonomyTree::free_nodes`]) for the tree model.
    pub gradient_lambda: Option<Vec<f64>>,
}

fn check_beta(beta: &[f64], data: &ChoiceDataset) -> Result<(), ModelError> {
    if beta.len() != data.num_attributes() {
        return Err(ModelError::BetaLength {
            expected: data.num_attributes(),
            found: beta.len(),
        });
    }
    if let Some(i) = beta.iter().position(|b| !b.is_finite()) {
        return Err(ModelError::NonFiniteBeta(i));
    }
    Ok(())
}

fn check_obs(data: &ChoiceDataset, n: usize) -> Result<(), ModelError> {
    if n >= data.num_observations() {
        return Err(ModelError::ObservationIndex {
            n,
            num_observations: data.num_observations(),
        });
    }
    Ok(())
}

fn check_cover(data: &ChoiceDataset, covered: usize) -> Result<(), ModelError> {
    for obs in data.observations() {
        if let Some(&alt) = obs.offered.iter().find(|&&a| a >= covered) {
            return Err(ModelError::UncoveredAlternative { alt, covered });
        }
    }
    Ok(())
}

fn floor(lambda: f64) -> f64 {
    lambda.max(LAMBDA_FLOOR)
}

/// `log sum exp(v)` with max-subtraction; `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax weights and the log-sum-exp of `v`.
fn softmax(v: &[f64]) -> (Vec<f64>, f64) {
    let lse = log_sum_exp(v);
    (v.iter().map(|x| (x - lse).exp()).collect(), lse)
}

fn sum_to_one(mut p: Vec<f64>) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ----------------------------------------------------------------- MNL

pub fn mnl_choice_probs(beta: &[f64], data: &ChoiceDataset, n: usize) -> Result<Vec<f64>, ModelError> {
    check_beta(beta, data)?;
    check_obs(data, n)?;
    Ok(sum_to_one(softmax(&data.utilities(beta, n)).0))
}

pub fn mnl_log_likelihood(beta: &[f64], data: &ChoiceDataset) -> Result<LogLikelihoodReport, ModelError> {
    check_beta(beta, data)?;
    let p = data.num_attributes();
    let mut grad = vec![0.0; p];
    let mut per_obs = Vec::with_capacity(data.num_observations());
    for n in 0..data.num_observations() {
        let v = data.utilities(beta, n);
        let c = data.chosen_slot(n);
        let (w, lse) = softmax(&v);
        per_obs.push(v[c] - lse);
        axpy(1.0, data.attribute_row(n, c), &mut grad);
        for (slot, &wj) in w.iter().enumerate() {
            axpy(-wj, data.attribute_row(n, slot), &mut grad);
        }
    }
    Ok(LogLikelihoodReport {
        value: per_obs.iter().sum(),
        per_observation: per_obs,
        gradient_beta: Some(grad),
        gradient_lambda: None,
    })
}

// ------------------------------------------------------------------ NL

/// Offered slots of observation `n` grouped by nest, nests in ascending order.
fn nest_groups(nests: &NestPartition, data: &ChoiceDataset, n: usize) -> Vec<(usize, Vec<usize>)> {
    let mut pairs: Vec<(usize, usize)> = data
        .observation(n)
        .offered
        .iter()
        .enumerate()
        .map(|(slot, &alt)| (nests.nest_of(alt), slot))
        .collect();
    pairs.sort_unstable();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (l, slot) in pairs {
        match groups.last_mut() {
            Some((last, slots)) if *last == l => slots.push(slot),
            _ => groups.push((l, vec![slot])),
        }
    }
    groups
}

/// Per-nest quantities of one observation.
struct NestTerms {
    nest: usize,
    slots: Vec<usize>,
    lambda: f64,
    log_w: f64,
    /// within-nest softmax of `v / lambda`
    q: Vec<f64>,
}

fn nest_terms(beta: &[f64], nests: &NestPartition, data: &ChoiceDataset, n: usize) -> (Vec<f64>, Vec<NestTerms>) {
    let v = data.utilities(beta, n);
    let terms = nest_groups(nests, data, n)
        .into_iter()
        .map(|(l, slots)| {
            let lambda = floor(nests.lambdas()[l]);
            let scaled: Vec<f64> = slots.iter().map(|&s| v[s] / lambda).collect();
            let (q, log_w) = softmax(&scaled);
            NestTerms {
                nest: l,
                slots,
                lambda,
                log_w,
                q,
            }
        })
        .collect();
    (v, terms)
}

/// `log W_nl` for every nest with at least one offered member, as
/// `(nest, log W)` pairs in ascending nest order.
pub fn nl_inclusive_values(
    beta: &[f64],
    nests: &NestPartition,
    data: &ChoiceDataset,
    n: usize,
) -> Result<Vec<(usize, f64)>, ModelError> {
    check_beta(beta, data)?;
    check_obs(data, n)?;
    check_cover(data, nests.num_alternatives())?;
    let (_, terms) = nest_terms(beta, nests, data, n);
    Ok(terms.iter().map(|t| (t.nest, t.log_w)).collect())
}

pub fn nl_choice_probs(
    beta: &[f64],
    nests: &NestPartition,
    data: &ChoiceDataset,
    n: usize,
) -> Result<Vec<f64>, ModelError> {
    check_beta(beta, data)?;
    check_obs(data, n)?;
    check_cover(data, nests.num_alternatives())?;
    let (_, terms) = nest_terms(beta, nests, data, n);
    let top: Vec<f64> = terms.iter().map(|t| t.lambda * t.log_w).collect();
    let (upper, _) = softmax(&top);
    let mut probs = vec![0.0; data.observation(n).offered.len()];
    for (t, pl) in terms.iter().zip(upper) {
        for (&slot, &q) in t.slots.iter().zip(&t.q) {
            probs[slot] = pl * q;
        }
    }
    Ok(sum_to_one(probs))
}

pub fn nl_log_likelihood(
    beta: &[f64],
    nests: &NestPartition,
    data: &ChoiceDataset,
) -> Result<LogLikelihoodReport, ModelError> {
    check_beta(beta, data)?;
    check_cover(data, nests.num_alternatives())?;
    let p = data.num_attributes();
    let mut gb = vec![0.0; p];
    let mut gl = vec![0.0; nests.num_nests()];
    let mut per_obs = Vec::with_capacity(data.num_observations());
    let mut weighted = vec![0.0; p];
    for n in 0..data.num_observations() {
        let (v, terms) = nest_terms(beta, nests, data, n);
        let chosen = data.chosen_slot(n);
        let top: Vec<f64> = terms.iter().map(|t| t.lambda * t.log_w).collect();
        let (upper, denom) = softmax(&top);
        let c = terms
            .iter()
            .position(|t| t.slots.contains(&chosen))
            .expect("the chosen alternative belongs to a nest");
        let tc = &terms[c];
        per_obs.push((tc.lambda - 1.0) * tc.log_w + v[chosen] / tc.lambda - denom);

        // beta: (lc - 1)/lc * E_c[a] + a_chosen / lc - sum_l P_l E_l[a]
        let ac = data.attribute_row(n, chosen);
        axpy(1.0 / tc.lambda, ac, &mut gb);
        for (t, &pl) in terms.iter().zip(&upper) {
            weighted.iter_mut().for_each(|w| *w = 0.0);
            for (&slot, &q) in t.slots.iter().zip(&t.q) {
                axpy(q, data.attribute_row(n, slot), &mut weighted);
            }
            let mut coef = -pl;
            if std::ptr::eq(t, tc) {
                coef += (tc.lambda - 1.0) / tc.lambda;
            }
            axpy(coef, &weighted, &mut gb);
        }

        // lambda: d log W_l / d lambda_l = -vbar_l / lambda_l^2
        for (t, &pl) in terms.iter().zip(&upper) {
            let vbar: f64 = t.slots.iter().zip(&t.q).map(|(&s, &q)| q * v[s]).sum();
            let dlogw = -vbar / (t.lambda * t.lambda);
            let mut g = -pl * (t.log_w + t.lambda * dlogw);
            if std::ptr::eq(t, tc) {
                g += t.log_w + (t.lambda - 1.0) * dlogw - v[chosen] / (t.lambda * t.lambda);
            }
            if nests.lambdas()[t.nest] >= LAMBDA_FLOOR {
                gl[t.nest] += g;
            }
        }
    }
    Ok(LogLikelihoodReport {
        value: per_obs.iter().sum(),
        per_observation: per_obs,
        gradient_beta: Some(gb),
        gradient_lambda: Some(gl),
    })
}

// ----------------------------------------------------------------- TNL

/// Active subtree of one observation: nodes on a path from an offered leaf
/// to the root, with `log V` and active children.
struct ActiveTree {
    /// active nodes in breadth-first order (root first)
    order: Vec<usize>,
    log_v: Vec<f64>,
    active_children: Vec<Vec<usize>>,
    /// position in `offered` of each active leaf
    leaf_slot: Vec<usize>,
}

fn active_tree(beta: &[f64], tree: &TaxonomyTree, data: &ChoiceDataset, n: usize) -> ActiveTree {
    let k = tree.num_nodes();
    let mut log_v = vec![f64::NAN; k];
    let mut active = vec![false; k];
    let mut active_children = vec![Vec::new(); k];
    let mut leaf_slot = vec![usize::MAX; k];
    let v = data.utilities(beta, n);
    for (slot, &alt) in data.observation(n).offered.iter().enumerate() {
        let mut node = tree.leaf_of(alt);
        log_v[node] = v[slot];
        leaf_slot[node] = slot;
        active[node] = true;
        while let Some(parent) = tree.parent(node) {
            active_children[parent].push(node);
            if active[parent] {
                break;
            }
            active[parent] = true;
            node = parent;
        }
    }
    let mut order = vec![tree.root()];
    let mut head = 0;
    while head < order.len() {
        let node = order[head];
        head += 1;
        order.extend(active_children[node].iter().copied());
    }
    for &node in order.iter().rev() {
        if active_children[node].is_empty() {
            continue;
        }
        let lk = floor(tree.lambda(node));
        let terms: Vec<f64> = active_children[node]
            .iter()
            .map(|&s| floor(tree.lambda(s)) / lk * log_v[s])
            .collect();
        log_v[node] = log_sum_exp(&terms);
    }
    ActiveTree {
        order,
        log_v,
        active_children,
        leaf_slot,
    }
}

/// `log V_k` for every node of the active subtree of observation `n`.
pub fn tnl_value_functions(
    beta: &[f64],
    tree: &TaxonomyTree,
    data: &ChoiceDataset,
    n: usize,
) -> Result<BTreeMap<usize, f64>, ModelError> {
    check_beta(beta, data)?;
    check_obs(data, n)?;
    check_cover(data, tree.num_alternatives())?;
    let at = active_tree(beta, tree, data, n);
    Ok(at.order.iter().map(|&k| (k, at.log_v[k])).collect())
}

pub fn tnl_choice_probs(
    beta: &[f64],
    tree: &TaxonomyTree,
    data: &ChoiceDataset,
    n: usize,
) -> Result<Vec<f64>, ModelError> {
    check_beta(beta, data)?;
    check_obs(data, n)?;
    check_cover(data, tree.num_alternatives())?;
    let at = active_tree(beta, tree, data, n);
    let probs = data
        .observation(n)
        .offered
        .iter()
        .map(|&alt| path_log_prob(tree, &at, tree.leaf_of(alt)).exp())
        .collect();
    Ok(sum_to_one(probs))
}

/// `sum over path edges (k, s) of (lambda_s / lambda_k) log V_s - log V_k`.
fn path_log_prob(tree: &TaxonomyTree, at: &ActiveTree, leaf: usize) -> f64 {
    let mut acc = 0.0;
    let mut s = leaf;
    while let Some(k) = tree.parent(s) {
        acc += floor(tree.lambda(s)) / floor(tree.lambda(k)) * at.log_v[s] - at.log_v[k];
        s = k;
    }
    acc
}

pub fn tnl_log_likelihood(
    beta: &[f64],
    tree: &TaxonomyTree,
    data: &ChoiceDataset,
) -> Result<LogLikelihoodReport, ModelError> {
    check_beta(beta, data)?;
    check_cover(data, tree.num_alternatives())?;
    let p = data.num_attributes();
    let k = tree.num_nodes();
    let lam: Vec<f64> = tree.lambdas().iter().map(|&l| floor(l)).collect();
    let mut gb = vec![0.0; p];
    let mut gl_node = vec![0.0; k];
    let mut per_obs = Vec::with_capacity(data.num_observations());
    let mut adj = vec![0.0; k];
    for n in 0..data.num_observations() {
        let at = active_tree(beta, tree, data, n);
        let chosen_alt = data.observation(n).chosen;
        let leaf = tree.leaf_of(chosen_alt);
        per_obs.push(path_log_prob(tree, &at, leaf));

        // direct terms of the path sum
        for &node in &at.order {
            adj[node] = 0.0;
        }
        let mut s = leaf;
        while let Some(kp) = tree.parent(s) {
            let ratio = lam[s] / lam[kp];
            adj[s] += ratio;
            adj[kp] -= 1.0;
            gl_node[s] += at.log_v[s] / lam[kp];
            gl_node[kp] -= ratio * at.log_v[s] / lam[kp];
            s = kp;
        }
        // push adjoints of log V down the active subtree
        for &node in &at.order {
            let a = adj[node];
            let kids = &at.active_children[node];
            if kids.is_empty() {
                axpy(a, data.attribute_row(n, at.leaf_slot[node]), &mut gb);
                continue;
            }
            if a == 0.0 {
                continue;
            }
            let lk = lam[node];
            for &c in kids {
                let rho = lam[c] / lk;
                let pi = (rho * at.log_v[c] - at.log_v[node]).exp();
                adj[c] += a * pi * rho;
                gl_node[c] += a * pi * at.log_v[c] / lk;
                gl_node[node] -= a * pi * rho * at.log_v[c] / lk;
            }
        }
    }
    let gl = tree
        .free_nodes()
        .iter()
        .map(|&node| if tree.lambda(node) >= LAMBDA_FLOOR { gl_node[node] } else { 0.0 })
        .collect();
    Ok(LogLikelihoodReport {
        value: per_obs.iter().sum(),
        per_observation: per_obs,
        gradient_beta: Some(gb),
        gradient_lambda: Some(gl),
    })
}

// ------------------------------------------------------------ oracle

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    fn obs(chosen: usize, offered: &[usize]) -> Observation {
        Observation {
            chosen,
            offered: offered.to_vec(),
        }
    }

    /// Two observations over alternatives {0, 1} with scalar attributes 0 and 1;
    /// the first chooses 0, the second chooses 1.
    fn two_obs() -> ChoiceDataset {
        ChoiceDataset::new(
            2,
            1,
            vec![obs(0, &[0, 1]), obs(1, &[0, 1])],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn uniform_probabilities_at_zero_utility() {
        let d = ChoiceDataset::new(4, 2, vec![obs(1, &[0, 1, 2, 3])], vec![vec![0.3; 8]]).unwrap();
        for p in mnl_choice_probs(&[0.0, 0.0], &d, 0).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_alternative_has_probability_one() {
        let d = ChoiceDataset::new(3, 1, vec![obs(2, &[2])], vec![vec![5.0]]).unwrap();
        assert_eq!(mnl_choice_probs(&[1.3], &d, 0).unwrap(), vec![1.0]);
        assert_eq!(mnl_log_likelihood(&[1.3], &d).unwrap().value, 0.0);
    }

    #[test]
    fn softmax_by_hand() {
        let probs = mnl_choice_probs(&[1.0], &two_obs(), 0).unwrap();
        assert!((probs[0] - 0.268941).abs() < 1e-6);
        assert!((probs[1] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn uniform_loglik_is_minus_n_log_k() {
        let d = ChoiceDataset::new(
            3,
            1,
            vec![obs(0, &[0, 1, 2]), obs(2, &[0, 1, 2])],
            vec![vec![1.0, 2.0, 3.0]; 2],
        )
        .unwrap();
        let ll = mnl_log_likelihood(&[0.0], &d).unwrap().value;
        assert!((ll + 2.0 * 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_observation_loglik_by_hand() {
        let sigma = 1.0 / (1.0 + 0.5f64.exp());
        let expected = sigma.ln() + (1.0 - sigma).ln();
        let r = mnl_log_likelihood(&[0.5], &two_obs()).unwrap();
        assert!((r.value - expected).abs() < 1e-12);
        assert!((r.value + 1.448154).abs() < 1e-6);
        let total: f64 = r.per_observation.iter().sum();
        assert!((total - r.value).abs() <= 1e-12 * r.value.abs());
    }

    #[test]
    fn non_finite_beta_is_invalid() {
        assert_eq!(
            mnl_log_likelihood(&[f64::NAN], &two_obs()).unwrap_err(),
            ModelError::NonFiniteBeta(0)
        );
        assert!(mnl_log_likelihood(&[0.0, 1.0], &two_obs()).is_err());
    }

    #[test]
    fn overflow_safe_at_huge_utilities() {
        let r = mnl_log_likelihood(&[1e4], &two_obs()).unwrap();
        assert!(r.value.is_finite());
        assert!((r.per_observation[1]).abs() < 1e-12);
    }

    #[test]
    fn inclusive_values_by_hand() {
        // alternatives 0, 1 in nest 0; 2 alone in nest 1
        let d = ChoiceDataset::new(3, 1, vec![obs(0, &[0, 1, 2])], vec![vec![0.0, 1.0, 1.3]]).unwrap();
        let nests = NestPartition::new(vec![0, 0, 1], vec![0.5, 0.7]).unwrap();
        let iv = nl_inclusive_values(&[1.0], &nests, &d, 0).unwrap();
        assert_eq!(iv[0].0, 0);
        assert!((iv[0].1 - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((iv[0].1 - 2.126928).abs() < 1e-6);
        assert!((iv[1].1 - 1.3 / 0.7).abs() < 1e-12);
        let unit = NestPartition::new(vec![0, 0, 1], vec![1.0, 1.0]).unwrap();
        let d0 = ChoiceDataset::new(3, 1, vec![obs(0, &[0, 1])], vec![vec![0.0, 0.0]]).unwrap();
        let iv = nl_inclusive_values(&[1.0], &unit, &d0, 0).unwrap();
        assert_eq!(iv.len(), 1, "nests without offered members are omitted");
        assert!((iv[0].1 - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_two_nest_case() {
        let d = ChoiceDataset::new(2, 1, vec![obs(0, &[0, 1])], vec![vec![0.0, 0.0]]).unwrap();
        let nests = NestPartition::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        let probs = nl_choice_probs(&[0.3], &nests, &d, 0).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-15 && (probs[1] - 0.5).abs() < 1e-15);
        let ll = nl_log_likelihood(&[0.3], &nests, &d).unwrap().value;
        assert!((ll - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn nested_with_unit_scales_is_multinomial() {
        let nests = NestPartition::new(vec![0, 1], vec![1.0, 1.0]).unwrap();
        let d = two_obs();
        let nl = nl_log_likelihood(&[0.7], &nests, &d).unwrap().value;
        let mnl = mnl_log_likelihood(&[0.7], &d).unwrap().value;
        assert!((nl - mnl).abs() < 1e-12);
    }

    #[test]
    fn singleton_observations_in_own_nests_give_zero() {
        let d = ChoiceDataset::new(2, 1, vec![obs(0, &[0]), obs(1, &[1])], vec![vec![2.0], vec![-1.0]]).unwrap();
        let nests = NestPartition::new(vec![0, 1], vec![0.3, 0.6]).unwrap();
        assert!(nl_log_likelihood(&[0.4], &nests, &d).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn value_function_recursion_by_hand() {
        // root 0 -> node 1 (lambda 0.5) -> leaves 2, 3
        let tree = TaxonomyTree::new(
            vec![None, Some(0), Some(1), Some(1)],
            vec![None, None, Some(0), Some(1)],
            vec![1.0, 0.5, 1.0, 1.0],
        )
        .unwrap();
        let d = ChoiceDataset::new(2, 1, vec![obs(0, &[0, 1])], vec![vec![0.0, 0.0]]).unwrap();
        let lv = tnl_value_functions(&[1.0], &tree, &d, 0).unwrap();
        assert!((lv[&1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(lv[&2], 0.0);
        let d1 = ChoiceDataset::new(2, 1, vec![obs(0, &[0])], vec![vec![1.3]]).unwrap();
        let lv = tnl_value_functions(&[1.0], &tree, &d1, 0).unwrap();
        assert_eq!(lv[&2], 1.3);
        assert!(!lv.contains_key(&3));
        assert!(tnl_log_likelihood(&[1.0], &tree, &d1).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn finite_difference_oracle_basics() {
        let g = finite_difference_gradient(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
        assert_eq!(finite_difference_gradient(|_| 3.0, &[1.0, 2.0], 1e-5), vec![0.0, 0.0]);
        let d = two_obs();
        let fd = finite_difference_gradient(|b| mnl_log_likelihood(b, &d).unwrap().value, &[0.5], 1e-5);
        let an = mnl_log_likelihood(&[0.5], &d).unwrap().gradient_beta.unwrap();
        assert!((fd[0] - an[0]).abs() <= 1e-6 * an[0].abs().max(1e-3));
    }
}
