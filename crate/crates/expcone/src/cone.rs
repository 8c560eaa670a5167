use serde::{Deserialize, Serialize};

/// One block of the product cone. Blocks are laid out in order over the
/// variable vector; an `Exp` block always spans three consecutive slots
/// ordered `(x1, x2, x3)` with `x1 >= x2 * exp(x3 / x2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dim", rename_all = "snake_case")]
pub enum ConeBlock {
    Free(usize),
    NonNeg(usize),
    Exp,
}

impl ConeBlock {
    pub fn dim(&self) -> usize {
        match *self {
            ConeBlock::Free(d) | ConeBlock::NonNeg(d) => d,
            ConeBlock::Exp => 3,
        }
    }

    /// Barrier parameter contributed by the block.
    pub fn degree(&self) -> usize {
        match *self {
            ConeBlock::Free(_) => 0,
            ConeBlock::NonNeg(d) => d,
            ConeBlock::Exp => 3,
        }
    }
}

/// A cone block resolved to its offset in the variable vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PlacedBlock {
    pub kind: ConeBlock,
    pub start: usize,
}

impl PlacedBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.kind.dim()
    }
}

pub(crate) fn place(cones: &[ConeBlock]) -> Vec<PlacedBlock> {
    let mut start = 0;
    cones
        .iter()
        .map(|&kind| {
            let b = PlacedBlock { kind, start };
            start += kind.dim();
            b
        })
        .collect()
}

/// Total barrier parameter of a product cone.
pub fn barrier_degree(cones: &[ConeBlock]) -> usize {
    cones.iter().map(ConeBlock::degree).sum()
}
