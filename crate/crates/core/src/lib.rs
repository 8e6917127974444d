//! loramix: a desk-scale multi-LoRA serving engine.
//!
//! The crate implements the full retrieve-then-compose pipeline over a
//! dynamically updatable pool of low-rank adapters:
//!
//! * [`tensor`] — dense f64 tensors with reverse-mode differentiation
//! * [`lora`] — adapters, the frozen toy base model, and the vanilla
//!   composition strategies (selection / mixture / fusion)
//! * [`retriever`] — instructed embeddings, per-adapter embeddings, cosine
//!   top-k retrieval, and contrastive training of the projection head
//! * [`router`] — cross-attention routing over retrieved adapters plus the
//!   dense / Gumbel / parameter-merge baseline gates
//! * [`batch`] — heterogeneous batched inference with a deduplicated
//!   adapter pool and per-sample mapping matrix
//! * [`registry`] — the uploadable pool: persistence format, dynamic
//!   register/remove, and end-to-end serving
//! * [`eval`] — synthetic task universe, mixed-task evaluation,
//!   retrieval-accuracy tables, and the throughput benchmark

pub mod batch;
pub mod encode;
pub mod error;
pub mod eval;
pub mod http;
pub mod lora;
pub mod registry;
pub mod retriever;
pub mod router;
pub mod tensor;

pub use error::{Error, Result};
