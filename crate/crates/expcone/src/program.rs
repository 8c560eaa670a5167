use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cone::{place, ConeBlock};
use crate::sparse::{CscMatrix, SparseError};

/// `maximize c^T x  subject to  A x = b,  x in K`, where `K` is the product
/// of the cone blocks laid out in order over `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConicProgram {
    num_vars: usize,
    objective: Vec<f64>,
    eq_matrix: CscMatrix,
    eq_rhs: Vec<f64>,
    cones: Vec<ConeBlock>,
}

/// A single structural problem found by [`ConicProgram::validate`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationIssue {
    #[error("objective has {found} entries, expected {expected}")]
    ObjectiveLength { expected: usize, found: usize },
    #[error("equality matrix has {found} columns, expected {expected}")]
    ColumnCount { expected: usize, found: usize },
    #[error("row {row} references column {col}, beyond the {num_vars} variables")]
    EntryOutOfRange { row: usize, col: usize, num_vars: usize },
    #[error("right-hand side has {found} entries for {expected} equality rows")]
    RhsLength { expected: usize, found: usize },
    #[error("cone block {block} ({kind:?}) starting at {start} runs past the {num_vars} variables")]
    ConeLayout {
        block: usize,
        kind: ConeBlock,
        start: usize,
        num_vars: usize,
    },
    #[error("cone block {block} has zero dimension")]
    EmptyCone { block: usize },
    #[error("cone blocks cover {found} variables, expected {expected}")]
    ConeCoverage { expected: usize, found: usize },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
}

impl ConicProgram {
    /// Assembles a program without checking it; see [`ConicProgram::validate`].
    pub fn new(
        num_vars: usize,
        objective: Vec<f64>,
        eq_matrix: CscMatrix,
        eq_rhs: Vec<f64>,
        cones: Vec<ConeBlock>,
    ) -> Self {
        Self {
            num_vars,
            objective,
            eq_matrix,
            eq_rhs,
            cones,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_rows(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn eq_matrix(&self) -> &CscMatrix {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &[f64] {
        &self.eq_rhs
    }

    pub fn cones(&self) -> &[ConeBlock] {
        &self.cones
    }

    pub fn num_exp_blocks(&self) -> usize {
        self.cones.iter().filter(|c| matches!(c, ConeBlock::Exp)).count()
    }

    /// Returns a copy with `c` and `b` multiplied by the given factors.
    pub fn scaled(&self, objective_factor: f64, rhs_factor: f64) -> Self {
        let mut out = self.clone();
        out.objective.iter_mut().for_each(|v| *v *= objective_factor);
        out.eq_rhs.iter_mut().for_each(|v| *v *= rhs_factor);
        out
    }

    /// Checks dimensions, finiteness and cone layout. Every violation is
    /// reported, not only the first.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let mut issues = Vec::new();
        let n = self.num_vars;
        if self.objective.len() != n {
            issues.push(ValidationIssue::ObjectiveLength {
                expected: n,
                found: self.objective.len(),
            });
        }
        if self.eq_matrix.ncols() != n {
            issues.push(ValidationIssue::ColumnCount {
                expected: n,
                found: self.eq_matrix.ncols(),
            });
            let mut offending: Vec<(usize, usize)> = self
                .eq_matrix
                .triplets()
                .into_iter()
                .filter(|&(_, col, _)| col >= n)
                .map(|(row, col, _)| (row, col))
                .collect();
            offending.sort_unstable();
            offending.dedup_by_key(|e| e.0);
            for (row, col) in offending {
                issues.push(ValidationIssue::EntryOutOfRange { row, col, num_vars: n });
            }
        }
        if self.eq_rhs.len() != self.eq_matrix.nrows() {
            issues.push(ValidationIssue::RhsLength {
                expected: self.eq_matrix.nrows(),
                found: self.eq_rhs.len(),
            });
        }
        for (k, block) in place(&self.cones).iter().enumerate() {
            if block.kind.dim() == 0 {
                issues.push(ValidationIssue::EmptyCone { block: k });
            }
            if block.start + block.kind.dim() > n {
                issues.push(ValidationIssue::ConeLayout {
                    block: k,
                    kind: block.kind,
                    start: block.start,
                    num_vars: n,
                });
            }
        }
        let covered: usize = self.cones.iter().map(ConeBlock::dim).sum();
        if covered != n {
            issues.push(ValidationIssue::ConeCoverage {
                expected: n,
                found: covered,
            });
        }
        let finite = |what: &'static str, v: &[f64], issues: &mut Vec<ValidationIssue>| {
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                issues.push(ValidationIssue::NonFinite { what, index });
            }
        };
        finite("objective", &self.objective, &mut issues);
        finite("rhs", &self.eq_rhs, &mut issues);
        finite("matrix value", self.eq_matrix.nzval(), &mut issues);

        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("malformed program document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported program document version {0}")]
    Version(u32),
    #[error(transparent)]
    Matrix(#[from] SparseError),
}

pub const DUMP_VERSION: u32 = 1;

/// Debug document: `{version, num_vars, c, A: {nrows, ncols, triplets}, b, cones}`.
/// Triplets are `[row, col, value]` in column-major order.
#[derive(Serialize, Deserialize)]
struct ProgramDoc {
    version: u32,
    num_vars: usize,
    c: Vec<f64>,
    #[serde(rename = "A")]
    a: MatrixDoc,
    b: Vec<f64>,
    cones: Vec<ConeBlock>,
}

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    nrows: usize,
    ncols: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl ConicProgram {
    pub fn to_json(&self) -> String {
        let doc = ProgramDoc {
            version: DUMP_VERSION,
            num_vars: self.num_vars,
            c: self.objective.clone(),
            a: MatrixDoc {
                nrows: self.eq_matrix.nrows(),
                ncols: self.eq_matrix.ncols(),
                triplets: self.eq_matrix.triplets(),
            },
            b: self.eq_rhs.clone(),
            cones: self.cones.clone(),
        };
        serde_json::to_string(&doc).expect("program document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DumpError> {
        let doc: ProgramDoc = serde_json::from_str(text)?;
        if doc.version != DUMP_VERSION {
            return Err(DumpError::Version(doc.version));
        }
        let a = CscMatrix::from_triplets(doc.a.nrows, doc.a.ncols, &doc.a.triplets)?;
        Ok(Self::new(doc.num_vars, doc.c, a, doc.b, doc.cones))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConicProgram {
        // maximize -t  s.t. (z, u, w) in Kexp, u = 1, w + t = 0, z + slack = 1
        // vars: t | slack | z u w
        let a = CscMatrix::from_triplets(
            3,
            5,
            &[(0, 2, 1.0), (0, 1, 1.0), (1, 3, 1.0), (2, 4, 1.0), (2, 0, 1.0)],
        )
        .unwrap();
        ConicProgram::new(
            5,
            vec![-1.0, 0.0, 0.0, 0.0, 0.0],
            a,
            vec![1.0, 1.0, 0.0],
            vec![ConeBlock::Free(1), ConeBlock::NonNeg(1), ConeBlock::Exp],
        )
    }

    #[test]
    fn well_formed_program_validates() {
        assert_eq!(tiny().validate(), Ok(()));
    }

    #[test]
    fn wrong_column_count_names_the_row() {
        let p = tiny();
        let mut t = p.eq_matrix().triplets();
        t.push((2, 5, 1.0));
        let a = CscMatrix::from_triplets(3, 6, &t).unwrap();
        let bad = ConicProgram::new(5, p.objective().to_vec(), a, p.eq_rhs().to_vec(), p.cones().to_vec());
        let issues = bad.validate().unwrap_err();
        assert!(issues.contains(&ValidationIssue::ColumnCount { expected: 5, found: 6 }));
        assert!(issues.contains(&ValidationIssue::EntryOutOfRange { row: 2, col: 5, num_vars: 5 }));
    }

    #[test]
    fn exp_block_straddling_the_end_is_a_layout_error() {
        let a = CscMatrix::zeros(0, 5);
        let p = ConicProgram::new(5, vec![0.0; 5], a, vec![], vec![ConeBlock::Free(3), ConeBlock::Exp]);
        let issues = p.validate().unwrap_err();
        assert!(issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::ConeLayout { block: 1, start: 3, .. })));
        assert!(issues.contains(&ValidationIssue::ConeCoverage { expected: 5, found: 6 }));
    }

    #[test]
    fn all_violations_reported() {
        let a = CscMatrix::zeros(2, 4);
        let p = ConicProgram::new(
            4,
            vec![f64::NAN; 3],
            a,
            vec![1.0],
            vec![ConeBlock::NonNeg(0), ConeBlock::Free(4)],
        );
        let issues = p.validate().unwrap_err();
        assert!(issues.len() >= 4, "{issues:?}");
    }

    #[test]
    fn json_dump_round_trips() {
        let p = tiny();
        let text = p.to_json();
        let back = ConicProgram::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn json_dump_rejects_unknown_version() {
        let text = tiny().to_json().replace("\"version\":1", "\"version\":7");
        assert!(matches!(ConicProgram::from_json(&text), Err(DumpError::Version(7))));
    }
}
