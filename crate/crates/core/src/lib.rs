//! Behaviour analytics for agentic applications.
//!
//! The pipeline mines multi-run execution trajectories into a workflow view,
//! clusters answer-node outputs into outcome groups, elicits semantic feature
//! classes that separate those groups, ranks them with a Gini decision tree
//! and turns the most important ones into corrective statements appended to
//! the agent's node prompts. A seeded access-control simulator closes the
//! loop by measuring accuracy before and after correction.

pub mod cluster;
pub mod correct;
pub mod error;
pub mod features;
pub mod gateway;
pub mod ingest;
pub mod pipeline;
pub mod prompts;
pub mod scalar;
pub mod sim;
pub mod tree;
pub mod workflow;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Embedding = gateway::EmbeddingVector<f64>;
pub type Clustering = cluster::ClusteringResult<f64>;
pub type Elbow = cluster::ElbowSelection<f64>;
pub type DecisionTree = tree::TreeNode<f64>;
pub type Importance = tree::ImportanceReport<f64>;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
