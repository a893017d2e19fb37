//! Harness for eliciting self-verbalized confidence from reasoning LLMs and
//! measuring how well calibrated it is.
//!
//! The crate is organized around the run lifecycle:
//!
//! - [`datasets`] loads question sets in a canonical line-delimited form.
//! - [`promptkit`] renders the elicitation prompts (four strategies) and the
//!   two-stage introspection prompts as ordered message sequences.
//! - [`provider`] abstracts chat-completion backends: real HTTP APIs, a
//!   deterministic scripted mock, and a synthetic calibrated agent.
//! - [`extract`] parses `{X, Y}` answer/confidence pairs out of raw model
//!   output and grades answers against ground truth.
//! - [`pipeline`] orchestrates elicitation and introspection over
//!   models x datasets x strategies x efforts with append-only persistence
//!   and resume.
//! - [`metrics`] computes ECE/MCE, reliability diagrams, accuracy, completion
//!   rate, and Pearson correlation.
//! - [`report`] turns run records into summary tables, reliability CSV/SVG
//!   files, and correlation reports.

pub mod datasets;
pub mod demo;
pub mod extract;
pub mod metrics;
pub mod pipeline;
pub mod promptkit;
pub mod provider;
pub mod report;
