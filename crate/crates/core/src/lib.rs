//! Core machinery for teaching a video agent to ruminate over text-rich
//! footage: evidence matching, trajectory synthesis, an executable clip/crop
//! environment, shaped rewards, GRPO over toy policies, QA metrics and a
//! human review store.

pub mod config;
pub mod corpus;
pub mod env;
pub mod evidence;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod qc;
pub mod reward;
pub mod synthetic;
pub mod trajectory;
