//! Experiment harness: synthetic scenarios, training orchestration,
//! ablations, and reporting.
