//! Darknet traffic analysis: port-sequence embeddings, per-window
//! clustering, cluster tracking and recurring-concept recovery.

pub mod alerts;
pub mod cluster;
pub mod concepts;
pub mod ingest;
pub mod pipeline;
pub mod port2vec;
pub mod simgen;
pub mod tracker;
pub mod window;
