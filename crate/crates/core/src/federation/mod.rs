//! Federated execution: wire protocol, TCP coordinator and site agent, and
//! the in-process transport that shares the per-site code path.

pub mod agent;
pub mod codec;
pub mod message;
pub mod server;
pub mod transport;

pub use agent::{run_site, AgentOptions, SessionLog};
pub use codec::{
    decode_message, encode_message, frame_message, max_frame_bytes, read_message, write_message,
    FrameReader, DEFAULT_MAX_FRAME_BYTES, MAX_FRAME_BYTES_ENV,
};
pub use message::{Message, ResultPayload, SessionConfig, PROTOCOL_VERSION};
pub use server::{run_coordinator, CoordinatorOptions, ROUND_TIMEOUT_ENV};
pub use transport::InProcessProvider;
