//! Entropic optimal transport: cosine costs, differentiable Sinkhorn, the
//! mini-batch energy distance and an exact oracle for small instances.

pub mod cost;
pub mod energy;
pub mod exact;
pub mod sinkhorn;

pub use cost::{cosine_cost, cosine_cost_var, CostKind, CostMatrix};
pub use energy::{energy_distance, energy_distance_var, EnergyTerms};
pub use exact::exact_ot;
pub use sinkhorn::{sinkhorn, sinkhorn_var, SinkhornParams, TransportPlan};
