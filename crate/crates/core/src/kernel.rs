//! Value-only log-likelihood with the structural bookkeeping (nest groups,
//! active subtrees, chosen paths) done once per dataset, for optimizers
//! that evaluate the likelihood many times.

use crate::data::{dot, ChoiceDataset};
use crate::model::{ModelError, LAMBDA_FLOOR};
use crate::structure::{NestPartition, StructureError, TaxonomyTree};

enum Shape {
    Multinomial,
    Nested {
        num_nests: usize,
        /// per observation: `(nest, offered slots)` of its active nests
        groups: Vec<Vec<(usize, Vec<usize>)>>,
        /// index into `groups[n]` of the chosen alternative's nest
        chosen_group: Vec<usize>,
    },
    Tree {
        tree: TaxonomyTree,
        obs: Vec<ActiveLayout>,
    },
}

/// Active subtree of one observation.
struct ActiveLayout {
    /// internal nodes children-first, each with its active children
    internal: Vec<(usize, Vec<usize>)>,
    /// `(leaf node, offered slot)`
    leaves: Vec<(usize, usize)>,
    /// chosen leaf up to (excluding) the root, as `(node, parent)` edges
    path: Vec<(usize, usize)>,
}

pub struct LikelihoodKernel<'a> {
    data: &'a ChoiceDataset,
    shape: Shape,
}

fn check_cover(data: &ChoiceDataset, covered: usize) -> Result<(), ModelError> {
    for obs in data.observations() {
        if let Some(&alt) = obs.offered.iter().find(|&&a| a >= covered) {
            return Err(ModelError::UncoveredAlternative { alt, covered });
        }
    }
    Ok(())
}

impl<'a> LikelihoodKernel<'a> {
    pub fn multinomial(data: &'a ChoiceDataset) -> Self {
        Self {
            data,
            shape: Shape::Multinomial,
        }
    }

    pub fn nested(data: &'a ChoiceDataset, nests: &NestPartition) -> Result<Self, ModelError> {
        check_cover(data, nests.num_alternatives())?;
        let mut groups = Vec::with_capacity(data.num_observations());
        let mut chosen_group = Vec::with_capacity(data.num_observations());
        for n in 0..data.num_observations() {
            let mut by_nest: Vec<Vec<usize>> = vec![Vec::new(); nests.num_nests()];
            for (slot, &alt) in data.observation(n).offered.iter().enumerate() {
                by_nest[nests.nest_of(alt)].push(slot);
            }
            let g: Vec<(usize, Vec<usize>)> = by_nest.into_iter().enumerate().filter(|(_, s)| !s.is_empty()).collect();
            let c = data.chosen_slot(n);
            chosen_group.push(g.iter().position(|(_, s)| s.contains(&c)).expect("chosen is offered"));
            groups.push(g);
        }
        Ok(Self {
            data,
            shape: Shape::Nested {
                num_nests: nests.num_nests(),
                groups,
                chosen_group,
            },
        })
    }

    pub fn tree(data: &'a ChoiceDataset, tree: &TaxonomyTree) -> Result<Self, ModelError> {
        check_cover(data, tree.num_alternatives())?;
        let mut mark = vec![false; tree.num_nodes()];
        let mut obs = Vec::with_capacity(data.num_observations());
        for n in 0..data.num_observations() {
            let mut touched = Vec::new();
            let mut leaves = Vec::new();
            for (slot, &alt) in data.observation(n).offered.iter().enumerate() {
                let mut node = tree.leaf_of(alt);
                leaves.push((node, slot));
                mark[node] = true;
                touched.push(node);
                while let Some(p) = tree.parent(node) {
                    if mark[p] {
                        break;
                    }
                    mark[p] = true;
                    touched.push(p);
                    node = p;
                }
            }
            let mut internal: Vec<(usize, Vec<usize>)> = tree
                .internal_nodes()
                .iter()
                .filter(|&&k| mark[k])
                .map(|&k| (k, tree.children(k).iter().copied().filter(|&s| mark[s]).collect()))
                .collect();
            internal.reverse();
            for k in touched {
                mark[k] = false;
            }
            let mut path = Vec::new();
            let mut s = tree.leaf_of(data.observation(n).chosen);
            while let Some(k) = tree.parent(s) {
                path.push((s, k));
                s = k;
            }
            obs.push(ActiveLayout { internal, leaves, path });
        }
        Ok(Self {
            data,
            shape: Shape::Tree { tree: tree.clone(), obs },
        })
    }

    /// Number of scale parameters `value` expects: nests, free tree nodes,
    /// or zero for the multinomial model.
    pub fn num_scales(&self) -> usize {
        match &self.shape {
            Shape::Multinomial => 0,
            Shape::Nested { num_nests, .. } => *num_nests,
            Shape::Tree { tree, .. } => tree.free_nodes().len(),
        }
    }

    /// Log-likelihood at `(beta, scales)`. Scales are floored at
    /// [`LAMBDA_FLOOR`] like the full model functions; they are not checked
    /// against the tree ordering.
    pub fn value(&self, beta: &[f64], scales: &[f64]) -> Result<f64, StructureError> {
        if scales.len() != self.num_scales() {
            return Err(StructureError::LambdaCount {
                expected: self.num_scales(),
                found: scales.len(),
            });
        }
        let data = self.data;
        let p = data.num_attributes();
        let mut v = Vec::new();
        let mut total = 0.0;
        let utilities = |n: usize, v: &mut Vec<f64>| {
            v.clear();
            if p == 0 {
                v.resize(data.observation(n).offered.len(), 0.0);
            } else {
                v.extend(data.attributes(n).chunks(p).map(|row| dot(row, beta)));
            }
        };
        match &self.shape {
            Shape::Multinomial => {
                for n in 0..data.num_observations() {
                    utilities(n, &mut v);
                    total += v[data.chosen_slot(n)] - lse(&v);
                }
            }
            Shape::Nested {
                groups, chosen_group, ..
            } => {
                let lam: Vec<f64> = scales.iter().map(|&l| l.max(LAMBDA_FLOOR)).collect();
                let mut inner = Vec::new();
                let mut top = Vec::new();
                for n in 0..data.num_observations() {
                    utilities(n, &mut v);
                    top.clear();
                    let mut chosen_term = 0.0;
                    for (g, (nest, slots)) in groups[n].iter().enumerate() {
                        let l = lam[*nest];
                        inner.clear();
                        inner.extend(slots.iter().map(|&s| v[s] / l));
                        let log_w = lse(&inner);
                        top.push(l * log_w);
                        if g == chosen_group[n] {
                            chosen_term = (l - 1.0) * log_w + v[data.chosen_slot(n)] / l;
                        }
                    }
                    total += chosen_term - lse(&top);
                }
            }
            Shape::Tree { tree, obs } => {
                let mut lam: Vec<f64> = tree.lambdas().to_vec();
                for (&k, &l) in tree.free_nodes().iter().zip(scales) {
                    lam[k] = l;
                }
                lam.iter_mut().for_each(|l| *l = l.max(LAMBDA_FLOOR));
                let mut log_v = vec![0.0; tree.num_nodes()];
                let mut terms = Vec::new();
                for (n, layout) in obs.iter().enumerate() {
                    utilities(n, &mut v);
                    for &(leaf, slot) in &layout.leaves {
                        log_v[leaf] = v[slot];
                    }
                    for (k, kids) in &layout.internal {
                        terms.clear();
                        terms.extend(kids.iter().map(|&s| lam[s] / lam[*k] * log_v[s]));
                        log_v[*k] = lse(&terms);
                    }
                    total += layout
                        .path
                        .iter()
                        .map(|&(s, k)| lam[s] / lam[k] * log_v[s] - log_v[k])
                        .sum::<f64>();
                }
            }
        }
        Ok(total)
    }
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
