//! Agent distillation without weight updates.
//!
//! Teacher trajectories are mined for self-contained tool scripts, the scripts
//! are validated, abstracted, clustered and consolidated into a box of MCP tool
//! servers, and the box is mounted wholesale into a student agent. Every model
//! call goes through [`gateway`], which can record and replay responses so the
//! whole pipeline runs offline.

pub mod agents;
pub mod boxer;
pub mod config;
pub mod eval;
pub mod extraction;
pub mod gateway;
pub mod host;
pub mod model;
mod parallel;
pub mod prompts;
pub mod sandbox;

pub use model::{
    content_digest, parse_trajectory_log, write_trajectory_log, McpBox, McpCandidate, TaskExample,
    TaskKind, ToolSchema, Trajectory, TrajectoryStep,
};
