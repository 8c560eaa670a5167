//! Maximum-likelihood estimation of multinomial, nested and tree-nested
//! logit models through exponential-cone programs.

pub mod bench;
pub mod data;
pub mod datagen;
pub mod estimate;
pub mod kernel;
pub mod lbfgsb;
pub mod model;
pub mod reformulate;
pub mod structure;

pub use data::{ChoiceDataset, DataError, Observation};
pub use reformulate::{extract_solution, mnl_to_ecp, nl_to_ecp, tnl_to_ecp, Ecp, SizingReport, VarMap};
pub use structure::{NestPartition, StructureError, TaxonomyTree};
