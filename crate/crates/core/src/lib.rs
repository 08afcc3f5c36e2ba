//! Causal variable identification by type-safe program synthesis and
//! differentiable causal masking.

pub mod baselines;
pub mod cox;
pub mod data;
pub mod dsl;
pub mod experiment;
pub mod learner;
pub mod runtime;
pub mod scm;
pub mod stats;
pub mod synthesis;
