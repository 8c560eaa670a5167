//! Seeded synthetic instances and their JSON form.
//!
//! Every random field draws from its own ChaCha8 stream keyed by the
//! instance seed, so one field's draws never shift another's:
//!
//! | stream | field |
//! |---|---|
//! | 1 | attributes |
//! | 2 | offered sets |
//! | 3 | chosen alternatives |
//! | 4 | nest / leaf assignment permutation |
//! | 5 | scale parameters |

use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ChoiceDataset, DataError, Observation};
use crate::structure::{NestPartition, StructureError, TaxonomyTree};

pub const SCHEMA_VERSION: u32 = 1;

const STREAM_ATTRIBUTES: u64 = 1;
const STREAM_OFFERED: u64 = 2;
const STREAM_CHOSEN: u64 = 3;
const STREAM_ASSIGNMENT: u64 = 4;
const STREAM_LAMBDA: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Mnl,
    Nl,
    Tnl,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mnl => "MNL",
            ModelKind::Nl => "NL",
            ModelKind::Tnl => "TNL",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    S,
    M,
    L,
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Full grid or the reduced desk-scale grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grid {
    #[default]
    Desk,
    Full,
}

impl Size {
    /// `(N, m)` for this size on `grid`; the desk grid has no `L`.
    pub fn dims(self, grid: Grid) -> Option<(usize, usize)> {
        match (grid, self) {
            (Grid::Full, Size::S) => Some((500, 50)),
            (Grid::Full, Size::M) => Some((1000, 100)),
            (Grid::Full, Size::L) => Some((2000, 200)),
            (Grid::Desk, Size::S) => Some((100, 20)),
            (Grid::Desk, Size::M) => Some((500, 50)),
            (Grid::Desk, Size::L) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub model: ModelKind,
    pub p: usize,
    pub size: Size,
    #[serde(default)]
    pub grid: Grid,
    /// `|S_n| = max(1, floor(offer_rate * m))`
    pub offer_rate: f64,
    /// number of nests (NL)
    #[serde(default = "default_nests")]
    pub nests: usize,
    /// children of the root and of each of its children (TNL)
    #[serde(default = "default_tree")]
    pub tree: [usize; 2],
    pub seed: u64,
}

fn default_nests() -> usize {
    2
}

fn default_tree() -> [usize; 2] {
    [2, 2]
}

impl InstanceSpec {
    pub fn new(model: ModelKind, p: usize, size: Size, offer_rate: f64, seed: u64) -> Self {
        Self {
            model,
            p,
            size,
            grid: Grid::Desk,
            offer_rate,
            nests: default_nests(),
            tree: default_tree(),
            seed,
        }
    }

    pub fn dims(&self) -> Result<(usize, usize), DatagenError> {
        self.size
            .dims(self.grid)
            .ok_or_else(|| DatagenError::InvalidSpec(format!("size {} is not on the {:?} grid", self.size, self.grid)))
    }

    pub fn offer_size(&self, m: usize) -> usize {
        ((self.offer_rate * m as f64).floor() as usize).clamp(1, m)
    }

    /// Short stable identifier, e.g. `NL-p5-S-r0.2-L2`.
    pub fn id(&self) -> String {
        let mut s = format!("{}-p{}-{}-r{}", self.model, self.p, self.size, self.offer_rate);
        if self.grid == Grid::Full {
            s.push_str("-full");
        }
        match self.model {
            ModelKind::Mnl => {}
            ModelKind::Nl => s.push_str(&format!("-L{}", self.nests)),
            ModelKind::Tnl => s.push_str(&format!("-T{}x{}", self.tree[0], self.tree[1])),
        }
        s
    }

    pub fn check(&self) -> Result<(), DatagenError> {
        let (_, m) = self.dims()?;
        let bad = |msg: String| Err(DatagenError::InvalidSpec(msg));
        if !(self.offer_rate > 0.0 && self.offer_rate <= 1.0) {
            return bad(format!("offer rate {} outside (0, 1]", self.offer_rate));
        }
        match self.model {
            ModelKind::Mnl => Ok(()),
            ModelKind::Nl if self.nests == 0 || self.nests > m => bad(format!("{} nests for {m} alternatives", self.nests)),
            ModelKind::Nl => Ok(()),
            ModelKind::Tnl => {
                let [b1, b2] = self.tree;
                if b1 == 0 || b2 == 0 {
                    return bad("tree branching must be positive".into());
                }
                if b1 * b2 > m {
                    return bad(format!("{} bottom nests need at least that many alternatives, got {m}", b1 * b2));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Structure {
    None,
    Nests(NestPartition),
    Tree(TaxonomyTree),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub spec: Option<InstanceSpec>,
    pub data: ChoiceDataset,
    pub structure: Structure,
    /// Generating scales: per nest, or per free tree node.
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid instance spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed instance at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("instance schema version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

/// Where generated scales go.
#[derive(Clone, Copy, Debug)]
pub enum LambdaTarget<'a> {
    Count(usize),
    /// one value per free node, non-increasing from the root's children
    /// toward the leaves
    Tree(&'a TaxonomyTree),
}

/// Draws `u ~ U[0.8, 0.9]` and `l ~ U[0.1, 0.2]` once, then every scale
/// from `U[l, u]`. Tree draws are permuted so each node carries the largest
/// value of its subtree.
pub fn gen_lambda(target: LambdaTarget, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, STREAM_LAMBDA);
    let upper = rng.random_range(0.8..0.9);
    let lower = rng.random_range(0.1..0.2);
    let count = match target {
        LambdaTarget::Count(c) => c,
        LambdaTarget::Tree(tree) => tree.free_nodes().len(),
    };
    let mut values: Vec<f64> = (0..count).map(|_| rng.random_range(lower..upper)).collect();
    if let LambdaTarget::Tree(tree) = target {
        let free = tree.free_nodes();
        let pos = |node: usize| free.iter().position(|&f| f == node);
        // breadth-first: each node takes the maximum of its subtree, which
        // keeps every ancestor at or above it
        for i in 0..free.len() {
            let mut best = i;
            let mut stack = tree.children(free[i]).to_vec();
            while let Some(k) = stack.pop() {
                if let Some(j) = pos(k) {
                    if values[j] > values[best] {
                        best = j;
                    }
                    stack.extend_from_slice(tree.children(k));
                }
            }
            values.swap(i, best);
        }
    }
    values
}

pub fn gen_instance(spec: &InstanceSpec) -> Result<Instance, DatagenError> {
    spec.check()?;
    let (n, m) = spec.dims()?;
    let p = spec.p;
    let k = spec.offer_size(m);

    let mut offered_rng = stream(spec.seed, STREAM_OFFERED);
    let mut chosen_rng = stream(spec.seed, STREAM_CHOSEN);
    let mut attr_rng = stream(spec.seed, STREAM_ATTRIBUTES);
    let mut observations = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut offered = index::sample(&mut offered_rng, m, k).into_vec();
        offered.sort_unstable();
        let chosen = offered[chosen_rng.random_range(0..k)];
        attributes.push((0..k * p).map(|_| attr_rng.random_range(0.0..3.0)).collect());
        observations.push(Observation { chosen, offered });
    }
    let data = ChoiceDataset::new(m, p, observations, attributes)?;

    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut stream(spec.seed, STREAM_ASSIGNMENT));
    let (structure, lambda) = match spec.model {
        ModelKind::Mnl => (Structure::None, None),
        ModelKind::Nl => {
            let mut membership = vec![0; m];
            for (i, &alt) in perm.iter().enumerate() {
                membership[alt] = i % spec.nests;
            }
            let lambda = gen_lambda(LambdaTarget::Count(spec.nests), spec.seed);
            (Structure::Nests(NestPartition::new(membership, lambda.clone())?), Some(lambda))
        }
        ModelKind::Tnl => {
            let tree = balanced_tree(spec.tree, &perm)?;
            let lambda = gen_lambda(LambdaTarget::Tree(&tree), spec.seed);
            (Structure::Tree(tree.with_free_lambdas(&lambda)?), Some(lambda))
        }
    };
    Ok(Instance {
        spec: Some(spec.clone()),
        data,
        structure,
        lambda,
    })
}

/// Root, `b1` children, `b2` grandchildren each, then the alternatives
/// dealt round-robin in `perm` order under the grandchildren. Scales are 1.
fn balanced_tree([b1, b2]: [usize; 2], perm: &[usize]) -> Result<TaxonomyTree, StructureError> {
    let mut parent = vec![None];
    for _ in 0..b1 {
        parent.push(Some(0));
    }
    for i in 0..b1 {
        for _ in 0..b2 {
            parent.push(Some(1 + i));
        }
    }
    let bottom = 1 + b1;
    let mut leaf_alt = vec![None; parent.len()];
    for (i, &alt) in perm.iter().enumerate() {
        parent.push(Some(bottom + i % (b1 * b2)));
        leaf_alt.push(Some(alt));
    }
    let lambdas = vec![1.0; parent.len()];
    TaxonomyTree::new(parent, leaf_alt, lambdas)
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum StructureDoc {
    Nests { membership: Vec<usize> },
    Tree { parent: Vec<Option<usize>>, leaf_alt: Vec<Option<usize>> },
}

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    version: u32,
    model: ModelKind,
    p: usize,
    #[serde(rename = "N")]
    n: usize,
    m: usize,
    observations: Vec<Observation>,
    /// row-major over (observation, offered slot, attribute)
    attributes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    structure: Option<StructureDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<InstanceSpec>,
}

pub fn instance_to_json(inst: &Instance) -> String {
    let data = &inst.data;
    let (model, structure) = match &inst.structure {
        Structure::None => (ModelKind::Mnl, None),
        Structure::Nests(nests) => (
            ModelKind::Nl,
            Some(StructureDoc::Nests {
                membership: nests.membership().to_vec(),
            }),
        ),
        Structure::Tree(tree) => {
            let k = tree.num_nodes();
            (
                ModelKind::Tnl,
                Some(StructureDoc::Tree {
                    parent: (0..k).map(|v| tree.parent(v)).collect(),
                    leaf_alt: (0..k).map(|v| tree.alternative_of(v)).collect(),
                }),
            )
        }
    };
    let doc = InstanceDoc {
        version: SCHEMA_VERSION,
        model,
        p: data.num_attributes(),
        n: data.num_observations(),
        m: data.num_alternatives(),
        observations: data.observations().to_vec(),
        attributes: (0..data.num_observations()).flat_map(|n| data.attributes(n).iter().copied()).collect(),
        structure,
        lambda: inst.lambda.clone(),
        spec: inst.spec.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("instance documents always serialize")
}

pub fn instance_from_json(text: &str) -> Result<Instance, DatagenError> {
    let doc: InstanceDoc = serde_json::from_str(text).map_err(|e| DatagenError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(DatagenError::Version {
            found: doc.version,
            expected: SCHEMA_VERSION,
        });
    }
    if doc.observations.len() != doc.n {
        return Err(DatagenError::InvalidSpec(format!(
            "N = {} but {} observations listed",
            doc.n,
            doc.observations.len()
        )));
    }
    let z: usize = doc.observations.iter().map(|o| o.offered.len()).sum();
    if doc.attributes.len() != z * doc.p {
        return Err(DatagenError::InvalidSpec(format!(
            "{} attribute values for {z} appearances of {} attributes",
            doc.attributes.len(),
            doc.p
        )));
    }
    let mut rest = doc.attributes.as_slice();
    let attributes = doc
        .observations
        .iter()
        .map(|o| {
            let (head, tail) = rest.split_at(o.offered.len() * doc.p);
            rest = tail;
            head.to_vec()
        })
        .collect();
    let data = ChoiceDataset::new(doc.m, doc.p, doc.observations, attributes)?;
    let structure = match (doc.model, doc.structure) {
        (ModelKind::Mnl, None) => Structure::None,
        (ModelKind::Nl, Some(StructureDoc::Nests { membership })) => {
            let count = membership.iter().max().map_or(0, |&l| l + 1);
            let lambda = doc.lambda.clone().unwrap_or_else(|| vec![1.0; count]);
            Structure::Nests(NestPartition::new(membership, lambda)?)
        }
        (ModelKind::Tnl, Some(StructureDoc::Tree { parent, leaf_alt })) => {
            let ones = vec![1.0; parent.len()];
            let tree = TaxonomyTree::new(parent, leaf_alt, ones)?;
            match &doc.lambda {
                Some(l) => Structure::Tree(tree.with_free_lambdas(l)?),
                None => Structure::Tree(tree),
            }
        }
        (model, _) => {
            return Err(DatagenError::InvalidSpec(format!("structure does not match model {model}")));
        }
    };
    Ok(Instance {
        spec: doc.spec,
        data,
        structure,
        lambda: doc.lambda,
    })
}

pub fn save_instance(inst: &Instance, path: &Path) -> Result<(), DatagenError> {
    std::fs::write(path, instance_to_json(inst)).map_err(|source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_instance(path: &Path) -> Result<Instance, DatagenError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    instance_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_grid_sizes_and_offer_counts() {
        let mut spec = InstanceSpec::new(ModelKind::Mnl, 5, Size::S, 0.2, 7);
        spec.grid = Grid::Full;
        let inst = gen_instance(&spec).unwrap();
        assert_eq!(inst.data.num_observations(), 500);
        for (n, o) in inst.data.observations().iter().enumerate() {
            assert_eq!(o.offered.len(), 10);
            assert!(o.offered.contains(&o.chosen));
            assert!(inst.data.attributes(n).iter().all(|&a| (0.0..=3.0).contains(&a)));
        }
    }

    #[test]
    fn desk_grid_has_no_large_size() {
        let spec = InstanceSpec::new(ModelKind::Mnl, 5, Size::L, 0.2, 7);
        assert!(matches!(gen_instance(&spec), Err(DatagenError::InvalidSpec(_))));
    }

    #[test]
    fn tiny_rate_still_offers_one() {
        let spec = InstanceSpec::new(ModelKind::Mnl, 1, Size::S, 0.01, 1);
        assert_eq!(spec.offer_size(20), 1);
    }

    #[test]
    fn generated_scales_stay_in_range_and_order() {
        for seed in 0..50 {
            let l = gen_lambda(LambdaTarget::Count(5), seed);
            assert!(l.iter().all(|&v| v > 0.1 && v < 0.9));
            let spec = InstanceSpec {
                tree: [3, 3],
                ..InstanceSpec::new(ModelKind::Tnl, 2, Size::S, 0.5, seed)
            };
            let inst = gen_instance(&spec).unwrap();
            let Structure::Tree(tree) = &inst.structure else { panic!() };
            for &k in tree.free_nodes() {
                let pk = tree.parent(k).unwrap();
                if pk != tree.root() {
                    assert!(tree.lambda(k) <= tree.lambda(pk));
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_json() {
        let spec = InstanceSpec::new(ModelKind::Nl, 3, Size::S, 0.5, 42);
        let a = instance_to_json(&gen_instance(&spec).unwrap());
        let b = instance_to_json(&gen_instance(&spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn minimal_document_loads() {
        let text = r#"{"version": 1, "model": "Mnl", "p": 1, "N": 1, "m": 1,
            "observations": [{"chosen": 0, "offered": [0]}], "attributes": [0.5]}"#;
        let inst = instance_from_json(text).unwrap();
        assert_eq!(inst.data.num_observations(), 1);
        assert_eq!(inst.data.observation(0).offered, vec![0]);
    }

    #[test]
    fn malformed_document_reports_location() {
        let err = instance_from_json("{\n  \"version\": 1,\n  \"model\": }").unwrap_err();
        let DatagenError::Parse { line, .. } = err else { panic!("{err}") };
        assert_eq!(line, 3);
        let err = instance_from_json(r#"{"version": 2, "model": "Mnl", "p": 0, "N": 0, "m": 1, "observations": [], "attributes": []}"#).unwrap_err();
        assert!(matches!(err, DatagenError::Version { found: 2, .. }));
    }
}
