//! Causal mediation analysis with a Gaussian covariance mediator.

pub mod causal;
pub mod components;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod linalg;
pub mod optimizer;
pub mod simulate;

pub use nalgebra;

pub use causal::{bootstrap, bootstrap_p_value, percentile_ci, BootstrapConfig, BootstrapResult};
pub use components::{deflate, dfd, select_components, ComponentSet};
pub use data::{
    load_dataset, write_dataset, CausalEstimates, ConstraintKind, ConstraintMatrix, Dataset,
    LoadOptions, ModelParameters, ProjectionVector, SampleCovariance, UnitRecord,
};
pub use error::{GmedError, Result};
pub use likelihood::{neg_hier_loglik, FitData, ProjectedData};
pub use optimizer::{fit_component, ComponentFit, FitTrace, OptimizerConfig};
pub use simulate::{generate_dataset, replication_study, similarity, SimulationDesign};
