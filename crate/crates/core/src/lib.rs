//! Structure-preserving network reduction for transmission grids.
//!
//! Selected subgrids collapse onto one of their own buses, so every bus and
//! branch of a reduced model is an element of the original. Accuracy is
//! measured by comparing DC-OPF dispatch and branch flows before and after.

pub mod case_io;
pub mod dcopf;
pub mod features;
pub mod grid_model;
pub mod pipeline;
pub mod reduction;
pub mod selection;

pub use case_io::{parse_case, write_case, CaseError, LoadProfile};
pub use dcopf::{solve_grid, OpfSolution, OpfStatus};
pub use features::{FeatureSet, Reason};
pub use grid_model::{Branch, BranchId, BranchKind, Bus, BusId, GenId, Generator, Grid, Load, LoadId};
pub use pipeline::{run_pipeline, PipelineConfig, ReductionReport};
pub use reduction::{BusMapping, Strategy, Subgrid};
