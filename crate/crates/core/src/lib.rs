//! Pretraining corpus curation for code models.
//!
//! The pipeline runs file-level quality filtering ([`filter`]), MinHash
//! near-deduplication ([`dedup`]), classifier-driven web recall
//! ([`recall`]), byte-level BPE ([`bpe`]), fixed-ratio corpus mixing and
//! fill-in-the-middle pre-packing ([`fim`]). [`pipeline`] wires the stages
//! together with manifests and audit logs.

pub mod bpe;
pub mod corpus;
pub mod dedup;
pub mod filter;
pub mod recall;
pub mod fim;
pub mod pipeline;
