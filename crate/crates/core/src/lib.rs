//! Iterative, question-guided analysis of whole-slide images.
//!
//! A session retrieves question-relevant tiles ([`navigator`]), turns them
//! into text ([`perceptor`]), reasons over the text and picks the next
//! action ([`executor`]), and records everything as a replayable trajectory
//! ([`orchestrator`]). [`metrics`] scores answers against references.

pub mod backends;
pub mod slide_store;
pub mod testkit;
pub mod navigator;
pub mod perceptor;
pub mod executor;
mod par;
pub mod orchestrator;
pub mod metrics;
pub mod config;
pub mod runtime;
