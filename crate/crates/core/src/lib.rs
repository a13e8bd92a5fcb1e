//! Discriminative knowledge-graph reasoning workbench.
//!
//! The pipeline runs from triple files to metrics:
//!
//! 1. [`graph`]: load a knowledge graph, filtered corruption, inductive splits.
//! 2. [`kge`]: embedding models used to stratify negatives and retrieve candidates.
//! 3. [`instance`]: K-way candidate-selection instances with tiered negatives.
//! 4. [`policy`]: a small autoregressive selection policy with inspectable layers.
//! 5. [`rl`]: composite rewards and group-relative policy optimization.
//! 6. [`probe`]: hidden-state extraction and the PReLU plausibility probe.
//! 7. [`smi`]: KSG mutual information over probe-derived projections.
//! 8. [`eval`]: filtered ranking, retrieve-then-rerank, classification and sweeps.
//!
//! Heavy loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and runs sequentially otherwise.

pub mod error;
pub mod eval;
pub mod graph;
pub mod instance;
pub mod kge;
pub mod math;
pub mod optim;
pub mod par;
pub mod policy;
pub mod probe;
pub mod rl;
pub mod seed;
pub mod smi;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{EntityId, KnowledgeGraph, RelationId, Triple};
