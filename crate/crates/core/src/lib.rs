//! Zero-shot prompt tuning for node classification on text-attributed
//! graphs.
//!
//! The pipeline has three stages:
//!
//! 1. [`pretrain`] aligns a GCN graph encoder and a Transformer text encoder
//!    with contrastive losses on an unlabeled graph.
//! 2. [`ubcg`] trains a conditional VAE, shared across both directions, to
//!    model node embeddings given text embeddings and vice versa.
//! 3. [`promptkit`] conditions that generator on class-name embeddings,
//!    generates synthetic node/text pairs per class, tunes continuous prompt
//!    context vectors on them, and classifies real nodes with a mixture of
//!    node-side and text-side probabilities.
//!
//! [`evalharness`] samples N-way tasks, computes metrics and runs the
//! baselines and ablations; [`tagcore`] holds the graph data model and the
//! planted-partition generator.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod optim;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod promptkit;
pub mod rng;
pub mod tagcore;
pub mod tensor;
pub mod ubcg;

pub use error::{Result, ZptError};
