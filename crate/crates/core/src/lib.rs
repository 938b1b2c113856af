// Negated float comparisons are used to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fhn;
pub mod stochastic;
pub mod dataset;
pub mod nn;
pub mod metrics;
pub mod experiments;
