//! Pure event-driven replica state machines for two chain-based BFT
//! protocols, sharing the strong-vote endorsement machinery from
//! `sft-core`.
//!
//! Both engines are deterministic state machines: `(state, event, now)`
//! produces outbound messages, commit events, strength updates, and timer
//! requests. The caller owns all timing and delivery; nothing here touches
//! a clock or a socket.

pub mod diembft;
pub mod output;
pub mod streamlet;

pub use diembft::{DiemBftConfig, DiemBftEvent, DiemBftReplica, ExtraWaitSchedule};
pub use output::{CommitEvent, Destination, EngineOutput, Message, TimerRequest};
pub use streamlet::{StreamletConfig, StreamletEvent, StreamletReplica};
