//! Backbone, MetaCNN, MergeNet, TconNet and the novel-weight generators.

mod config;
mod graph;
mod model;

pub use config::{BackboneConfig, MetricMode, ModelConfig, Stages, Variant};
pub use graph::Graph;
pub use model::{Networks, MERGENET_DEPTH, TCONNET_DEPTH};
