//! Smart-home agent core: turns natural-language instructions into validated
//! device commands through a decompose → derive → refine pipeline, backed by
//! a hierarchical task memory, a preference engine, a deterministic virtual
//! home and an evaluation harness.

pub mod agent;
pub mod capability;
pub mod domain;
pub mod eval;
pub mod home;
pub mod llm;
pub mod memory;
pub mod pipeline;
pub mod preference;
pub mod prompts;
