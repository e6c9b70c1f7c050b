//! Search over machine-unlearning objectives.
//!
//! Candidate losses are small s-expressions over per-example sequence
//! log-probabilities ([`dsl`]), differentiated exactly ([`evalgrad`]),
//! applied to a toy language model ([`toylm`]), scored with the standard
//! forget/utility/privacy battery ([`metrics`]), and improved by a
//! generational search ([`evolve`]) driven by a [`proposer`].

pub mod dsl;
pub mod evalgrad;
pub mod toylm;
pub mod metrics;
pub mod proposer;
pub mod evolve;
