//! Feedback-driven reranking for retrieval-augmented generation.
//!
//! Document-, list- and response-level feedback train three teachers (a
//! pointwise scorer, a listwise scorer and a list reward model). The
//! listwise scorer parameterizes a Plackett–Luce policy that is aligned to
//! the reward model with PPO, and both teachers are distilled into a
//! gradient-boosted tree ensemble that serves rankings. A session simulator
//! and a nearline orchestrator exercise the whole loop.

pub mod cli;
pub mod config;
pub mod distill;
pub mod featurize;
pub mod feedback;
pub mod math;
pub mod orchestrator;
pub mod policy;
pub mod ppo;
pub mod report;
pub mod scorers;
pub mod seed;
pub mod simulator;
pub mod trainers;
