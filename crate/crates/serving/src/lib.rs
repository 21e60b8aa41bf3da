//! Online serving for mixed-prompt ranking.
//!
//! Item embeddings are computed nearline and kept in an [`cache::EmbeddingCache`]
//! keyed by item id and model version. A request carries one query with all
//! of its candidate items, referenced by cache id, inline payload or inline
//! text, in a single frame. The [`service::Service`] routes it to one worker,
//! which scores every item in one engine batch.

pub mod cache;
pub mod error;
pub mod net;
pub mod payload;
pub mod protocol;
pub mod service;

pub use cache::{refresh, EmbeddingCache, RefreshReport};
pub use error::{Result, ServeError};
pub use net::{Client, Server};
pub use payload::{decode_payload, encode_payload};
pub use protocol::{Flags, ItemRef, ItemResult, ScoreRequest, ScoreResponse};
pub use service::{route, Service, ServiceConfig};
