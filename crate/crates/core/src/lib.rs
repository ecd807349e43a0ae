//! FastBFT: Byzantine fault-tolerant state machine replication that uses a
//! trusted execution environment (TEE) for monotonic counters and secret
//! generation, and aggregates commit/reply votes by XOR secret sharing along a
//! balanced tree rooted at the primary.
//!
//! The crate is organised bottom-up:
//!
//! - [`primitives`]: hashing, signatures, authenticated and public-key
//!   encryption behind a pluggable provider, XOR and Shamir secret sharing.
//! - [`tee`]: the emulated enclave. Only this module touches signing keys and
//!   view keys.
//! - [`topology`]: the primary-rooted aggregation tree.
//! - [`protocol`]: the replica state machine (normal case, failure detection,
//!   view change, fallback, checkpointing, rejoin) and the wire format.
//! - [`client`]: request issuance and REPLY verification.
//! - [`simnet`]: a deterministic discrete-event network with fault injection,
//!   safety/liveness monitors and metrics.
//!
//! Handlers are pure transitions over owned state; nothing here touches real
//! sockets or wall-clock time.

pub mod client;
pub mod codec;
pub mod ids;
pub mod primitives;
pub mod protocol;
pub mod simnet;
pub mod tee;
pub mod topology;

pub use ids::{ClientId, CounterValue, NodeId, ReplicaId, RequestId};
