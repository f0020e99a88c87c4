//! Semi-Lagrangian dynamic programming on reduced grids.

mod feedback;
mod interp;
mod solver;

pub use feedback::HjbFeedback;
pub use interp::{Stencil, ValueField};
pub use solver::{
    bellman_update, default_penalty, policy_evaluation, policy_iteration, resolve_penalty,
    value_iteration, vi_sweep, DirectModel, EvaluationReport, SlConfig, SlModel, SolveReport,
    TabulatedModel,
};
