//! Concept communities in language-model input embeddings.
//!
//! The pipeline runs over an [`EmbeddingSpace`]: a k-nearest-neighbor graph
//! under cosine distance ([`knn`]) is turned into a symmetric fuzzy
//! membership graph ([`fuzzy`]), clustered with Louvain ([`louvain`]), and
//! refined over a descending schedule of `k` values into a named
//! [`ConceptHierarchy`] ([`hierarchy`]). The [`metrics`] module scores the
//! result against external labels, numeric ordering and other models, and
//! [`edit`] rewrites the embedding rows of selected communities.

pub mod edit;
pub mod error;
pub mod fuzzy;
pub mod hierarchy;
pub mod knn;
pub mod louvain;
pub mod metrics;
pub mod store;

pub use error::{Error, Result};
pub use fuzzy::FuzzyGraph;
pub use hierarchy::ConceptHierarchy;
pub use knn::NeighborGraph;
pub use louvain::{Partition, WeightedGraph};
pub use store::{EmbeddingSpace, TokenNormalization};
