//! Remote inference: a length-prefixed binary protocol, a threaded server
//! that runs the restoration pipeline and stores every result, and a client.

pub mod client;
pub mod error;
pub mod protocol;
pub mod server;
pub mod storage;

pub use client::{client_optimize, Client, Optimized, DEFAULT_TIMEOUT};
pub use error::{Result, ServiceError};
pub use protocol::{decode_frame, encode_frame, Message, OptimizeRequest, OptimizeResponse};
pub use server::{serve, ServerConfig, ServerHandle};
pub use storage::{store_result, store_result_on, StoredPaths};
