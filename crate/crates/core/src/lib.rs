//! Federated learning simulator with virtual-concept personalisation.
//!
//! The crate is layered bottom-up: [`tensor`] (dense arrays and a reverse-mode
//! tape), [`model`] (MLP classifier with an embedding head), [`concepts`]
//! (virtual concepts, relevance and GMM statistics), [`losses`], [`data`]
//! (datasets and non-IID partitions), [`federation`] (round protocol and
//! strategies) and [`metrics`].

pub mod concepts;
pub mod data;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
