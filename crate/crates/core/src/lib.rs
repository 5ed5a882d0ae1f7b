//! Sum-product graphical models: exact inference, compilation to
//! sum-product networks, independence queries and structure learning.

pub mod dataset;
pub mod error;
pub mod evidence;
pub mod fixtures;
pub mod format;
pub mod independence;
pub mod inference;
pub mod learn;
pub mod mixture;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod spn;
pub mod workflow;

pub use dataset::{load_dataset, Dataset, DatasetTriple, WeightedDataset};
pub use error::{Error, Result};
pub use evidence::{indicator, Evidence};
pub use inference::{evaluate, log_likelihood, map_value, Domain, Evaluator, MessageTable};
pub use mixture::SpgmMixture;
pub use model::{
    scope, validate, vparents, Cpt, Node, NodeId, NodeKind, Receiver, Spgm, SpgmBuilder,
    ValidationReport, VarId, VarKind, Variable, Violation,
};
