//! Plan construction, refinement, validation, costing and optimization.

pub mod cost;
pub mod optimize;
pub mod plan;
pub mod refine;
pub mod validate;

pub use cost::{estimate_cost, explain_costs, CostContext, CostEstimate, CostModel, CostRow, Estimator, Objective};
pub use optimize::{optimize, output_columns, OptimizeOptions};
pub use plan::{DataPlan, Edge, Fallback, NodeStatus, PlanNode};
pub use refine::{instantiate, refine, Refiner, DEFAULT_MAX_DEPTH};
pub use validate::{validate, PlanViolation, PlanViolationKind, ValidationReport};
