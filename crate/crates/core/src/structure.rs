//! Nest partitions and taxonomy trees with their scale parameters.
//!
//! Scale parameters live in `(0, 1]`. In a tree, leaves and the root carry
//! `lambda = 1`, and along every edge between internal nodes the child's
//! scale may not exceed its parent's.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("structure has no nests")]
    NoNests,
    #[error("alternative {alt} assigned to nest {nest}, but there are only {num_nests}")]
    UnknownNest { alt: usize, nest: usize, num_nests: usize },
    #[error("nest {0} has no members")]
    EmptyNest(usize),
    #[error("expected {expected} scale parameters, found {found}")]
    LambdaCount { expected: usize, found: usize },
    #[error("scale parameter {value} of {what} {index} lies outside (0, 1]")]
    LambdaRange { what: &'static str, index: usize, value: f64 },
    #[error("expected {expected} node labels, found {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("tree has {0} roots, expected exactly one")]
    RootCount(usize),
    #[error("node {node} has parent {parent}, beyond the {num_nodes} nodes")]
    UnknownParent { node: usize, parent: usize, num_nodes: usize },
    #[error("node {0} lies on a cycle")]
    Cycle(usize),
    #[error("the root must be an internal node")]
    RootIsLeaf,
    #[error("leaf {node} sits at depth {depth}, other leaves at depth {expected}")]
    UnevenLeaves { node: usize, depth: usize, expected: usize },
    #[error("leaf {0} has no alternative attached")]
    UnlabeledLeaf(usize),
    #[error("internal node {0} has an alternative attached")]
    LabeledInternal(usize),
    #[error("alternative labels of the leaves are not a permutation of 0..{0}")]
    LeafLabels(usize),
    #[error("{what} {node} must have scale 1, found {value}")]
    FixedScale { what: &'static str, node: usize, value: f64 },
    #[error("scale {child_lambda} of node {child} exceeds the scale {parent_lambda} of its parent {parent}")]
    Ordering {
        parent: usize,
        child: usize,
        parent_lambda: f64,
        child_lambda: f64,
    },
}

fn check_lambda(what: &'static str, index: usize, value: f64) -> Result<(), StructureError> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(StructureError::LambdaRange { what, index, value })
    }
}

/// Disjoint nests covering the universe of alternatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NestPartition {
    membership: Vec<usize>,
    lambdas: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl NestPartition {
    /// `membership[j]` is the nest of alternative `j`; one scale per nest.
    pub fn new(membership: Vec<usize>, lambdas: Vec<f64>) -> Result<Self, StructureError> {
        let num_nests = lambdas.len();
        if num_nests == 0 {
            return Err(StructureError::NoNests);
        }
        let mut members = vec![Vec::new(); num_nests];
        for (alt, &nest) in membership.iter().enumerate() {
            if nest >= num_nests {
                return Err(StructureError::UnknownNest { alt, nest, num_nests });
            }
            members[nest].push(alt);
        }
        if let Some(l) = members.iter().position(Vec::is_empty) {
            return Err(StructureError::EmptyNest(l));
        }
        for (l, &v) in lambdas.iter().enumerate() {
            check_lambda("nest", l, v)?;
        }
        Ok(Self {
            membership,
            lambdas,
            members,
        })
    }

    pub fn num_nests(&self) -> usize {
        self.lambdas.len()
    }

    pub fn num_alternatives(&self) -> usize {
        self.membership.len()
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn nest_of(&self, alt: usize) -> usize {
        self.membership[alt]
    }

    pub fn members(&self, nest: usize) -> &[usize] {
        &self.members[nest]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn with_lambdas(&self, lambdas: &[f64]) -> Result<Self, StructureError> {
        if lambdas.len() != self.num_nests() {
            return Err(StructureError::LambdaCount {
                expected: self.num_nests(),
                found: lambdas.len(),
            });
        }
        for (l, &v) in lambdas.iter().enumerate() {
            check_lambda("nest", l, v)?;
        }
        let mut out = self.clone();
        out.lambdas = lambdas.to_vec();
        Ok(out)
    }
}

/// Rooted tree whose leaves are the alternatives, all at the same depth.
#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyTree {
    parent: Vec<Option<usize>>,
    root: usize,
    children: Vec<Vec<usize>>,
    leaf_alt: Vec<Option<usize>>,
    alt_leaf: Vec<usize>,
    lambdas: Vec<f64>,
    depth: Vec<usize>,
    /// Internal nodes in breadth-first order, root first.
    internal: Vec<usize>,
    height: usize,
}

impl TaxonomyTree {
    /// `parent[k]` is `None` only for the root; `leaf_alt[k]` labels leaves
    /// with alternative indices; `lambdas[k]` is the scale of node `k`.
    pub fn new(
        parent: Vec<Option<usize>>,
        leaf_alt: Vec<Option<usize>>,
        lambdas: Vec<f64>,
    ) -> Result<Self, StructureError> {
        let k = parent.len();
        if leaf_alt.len() != k {
            return Err(StructureError::LabelCount {
                expected: k,
                found: leaf_alt.len(),
            });
        }
        if lambdas.len() != k {
            return Err(StructureError::LambdaCount {
                expected: k,
                found: lambdas.len(),
            });
        }
        let roots: Vec<usize> = (0..k).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(StructureError::RootCount(roots.len()));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); k];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k {
                    return Err(StructureError::UnknownParent {
                        node: v,
                        parent: p,
                        num_nodes: k,
                    });
                }
                children[p].push(v);
            }
        }
        // breadth-first from the root; unreached nodes lie on cycles
        let mut depth = vec![usize::MAX; k];
        let mut order = vec![root];
        depth[root] = 0;
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &c in &children[v] {
                depth[c] = depth[v] + 1;
                order.push(c);
            }
        }
        if let Some(v) = (0..k).find(|&v| depth[v] == usize::MAX) {
            return Err(StructureError::Cycle(v));
        }
        if children[root].is_empty() {
            return Err(StructureError::RootIsLeaf);
        }
        let internal: Vec<usize> = order.iter().copied().filter(|&v| !children[v].is_empty()).collect();
        let leaves: Vec<usize> = order.iter().copied().filter(|&v| children[v].is_empty()).collect();
        let height = depth[leaves[0]];
        for &v in &leaves {
            if depth[v] != height {
                return Err(StructureError::UnevenLeaves {
                    node: v,
                    depth: depth[v],
                    expected: height,
                });
            }
            if leaf_alt[v].is_none() {
                return Err(StructureError::UnlabeledLeaf(v));
            }
        }
        if let Some(&v) = internal.iter().find(|&&v| leaf_alt[v].is_some()) {
            return Err(StructureError::LabeledInternal(v));
        }
        let m = leaves.len();
        let mut alt_leaf = vec![usize::MAX; m];
        for &v in &leaves {
            let a = leaf_alt[v].expect("checked above");
            if a >= m || alt_leaf[a] != usize::MAX {
                return Err(StructureError::LeafLabels(m));
            }
            alt_leaf[a] = v;
        }
        let tree = Self {
            parent,
            root,
            children,
            leaf_alt,
            alt_leaf,
            lambdas,
            depth,
            internal,
            height,
        };
        tree.check_lambdas()?;
        Ok(tree)
    }

    /// Depth-two tree (root, one node per nest, leaves) equivalent to `nests`.
    pub fn from_nests(nests: &NestPartition) -> Self {
        let l = nests.num_nests();
        let m = nests.num_alternatives();
        let mut parent = vec![None];
        let mut leaf_alt = vec![None];
        let mut lambdas = vec![1.0];
        for nest in 0..l {
            parent.push(Some(0));
            leaf_alt.push(None);
            lambdas.push(nests.lambdas()[nest]);
        }
        for alt in 0..m {
            parent.push(Some(1 + nests.nest_of(alt)));
            leaf_alt.push(Some(alt));
            lambdas.push(1.0);
        }
        Self::new(parent, leaf_alt, lambdas).expect("a valid partition gives a valid tree")
    }

    fn check_lambdas(&self) -> Result<(), StructureError> {
        for v in 0..self.num_nodes() {
            let value = self.lambdas[v];
            check_lambda("node", v, value)?;
            if (v == self.root || self.is_leaf(v)) && value != 1.0 {
                let what = if v == self.root { "root" } else { "leaf" };
                return Err(StructureError::FixedScale { what, node: v, value });
            }
        }
        for &k in &self.internal {
            for &s in &self.children[k] {
                if !self.is_leaf(s) && self.lambdas[s] > self.lambdas[k] {
                    return Err(StructureError::Ordering {
                        parent: k,
                        child: s,
                        parent_lambda: self.lambdas[k],
                        child_lambda: self.lambdas[s],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn num_alternatives(&self) -> usize {
        self.alt_leaf.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    /// Common depth of all leaves.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn leaf_of(&self, alt: usize) -> usize {
        self.alt_leaf[alt]
    }

    pub fn alternative_of(&self, node: usize) -> Option<usize> {
        self.leaf_alt[node]
    }

    /// Internal nodes in breadth-first order, root first.
    pub fn internal_nodes(&self) -> &[usize] {
        &self.internal
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda(&self, node: usize) -> f64 {
        self.lambdas[node]
    }

    /// Internal nodes other than the root: the free scale parameters, in
    /// breadth-first order.
    pub fn free_nodes(&self) -> &[usize] {
        &self.internal[1..]
    }

    pub fn free_lambdas(&self) -> Vec<f64> {
        self.free_nodes().iter().map(|&k| self.lambdas[k]).collect()
    }

    /// Replaces the free scale parameters (ordered as [`Self::free_nodes`]).
    pub fn with_free_lambdas(&self, values: &[f64]) -> Result<Self, StructureError> {
        let free = self.free_nodes();
        if values.len() != free.len() {
            return Err(StructureError::LambdaCount {
                expected: free.len(),
                found: values.len(),
            });
        }
        let mut out = self.clone();
        for (&k, &v) in free.iter().zip(values) {
            out.lambdas[k] = v;
        }
        out.check_lambdas()?;
        Ok(out)
    }
}
