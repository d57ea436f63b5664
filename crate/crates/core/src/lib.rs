//! Off-policy RL post-training at desk scale: a sequence-level
//! trajectory-balance objective and a family of comparison update rules,
//! trained against exactly enumerable tabular policies with a prioritized
//! replay buffer and an asynchronous searcher/trainer runtime, all checkable
//! against a brute-force oracle.

pub mod buffer;
pub mod cli;
pub mod envs;
pub mod grad;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod runtime;
pub mod verify;
