//! Confidence-gated insertion of object-level visual thoughts into stepwise
//! multimodal chain-of-thought reasoning.

mod floatrepr;

pub mod backend;
pub mod confidence;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod mocks;
pub mod objectpool;
pub mod orchestrator;
pub mod relevance;
pub mod tracestore;
pub mod transport;
