//! Reward engineering and group-relative policy optimization for referring-expression
//! grounding, with a synthetic scene environment and a tiny autoregressive box policy.

pub mod cli;
pub mod evalmetrics;
pub mod geometry;
pub mod grpo;
pub mod position_reward;
pub mod response_format;
pub mod policy;
pub mod scenes;

pub use geometry::BBox;
