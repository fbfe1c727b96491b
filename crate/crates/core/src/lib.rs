//! cotforge: building blocks for synthesizing and scoring long-form reasoning
//! traces with interchangeable model backends.
//!
//! The crate is organized around a small set of pipelines:
//!
//! * [`treesearch`] grows a step-level search tree over partial solutions and
//!   harvests complete rollouts, scoring internal nodes by the empirical
//!   correctness of direct completions.
//! * [`verisynth`] turns rollouts into verification training data in two
//!   stages: verdict collection plus rule-based cleaning, then rejection
//!   sampling with a trained verifier in the loop.
//! * [`bridge`] rewrites figure-grounded questions into text-only prompts via
//!   stored figure descriptions so a text-only reasoner can produce traces
//!   that are paired back with the original images.
//! * [`select`] picks one answer from a set of sampled candidates by majority
//!   vote or by verifier/judge filtering, and runs benchmark evaluations.
//!
//! Everything model-facing goes through the [`backend::Backend`] trait, which
//! has an HTTP implementation for chat-completions servers and two offline
//! mock implementations (scripted and stochastic) used throughout the test
//! suite. All randomness is seeded; a pipeline run with a fixed seed and a
//! mock backend is reproducible byte for byte.

pub mod answers;
pub mod backend;
pub mod bridge;
pub mod corpus;
pub mod select;
pub mod templates;
pub mod treesearch;
pub mod util;
pub mod verisynth;
