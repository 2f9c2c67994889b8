//! Gradient-suppression analysis: closed-form encoder gradients under
//! concatenation fusion, the exact gradients from the tape, and a central
//! finite-difference oracle to check both.

mod chain;
mod closed_form;
mod finite_diff;
mod trajectory;

pub use chain::{full_chain_gradient, GradPath};
pub use closed_form::{
    analyze_samples, check_suppression_inequality, closed_form_g_multi, closed_form_g_uni,
    inequality_verdict, suppression_factors, ConcatHead, GradientComparison, InequalityVerdict,
    SuppressionRecord,
};
pub use finite_diff::{close, finite_difference_oracle, DEFAULT_STEP};
pub use trajectory::{epoch_means, gradient_norm_trajectory, TrajectoryRow};
