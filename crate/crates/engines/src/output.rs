//! Shared wire message and engine output types.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sft_core::{Block, BlockId, Height, ReplicaId, Round, SimTime, StrongQC, StrongVote, TimeoutMsg};

/// Everything that travels between replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Proposal(Block),
    Vote(StrongVote),
    Timeout(TimeoutMsg),
    /// A late vote forwarded individually by the collecting leader
    /// (direct-vote baseline only).
    ExtraVote(StrongVote),
    /// A bare certificate. Engines never emit these; adversary scripts do.
    Qc(StrongQC),
}

impl Message {
    /// Stable identity for echo deduplication and trace digests.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self {
            Message::Proposal(b) => {
                h.update([0u8]);
                h.update(b.id.0);
            }
            Message::Vote(v) => {
                h.update([1u8]);
                h.update(v.signature.0);
                h.update(v.block.0);
            }
            Message::Timeout(t) => {
                h.update([2u8]);
                h.update(t.signature.0);
                h.update(t.round.to_le_bytes());
            }
            Message::ExtraVote(v) => {
                h.update([3u8]);
                h.update(v.signature.0);
                h.update(v.block.0);
            }
            Message::Qc(qc) => {
                h.update([4u8]);
                h.update(qc.digest());
            }
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    To(ReplicaId),
    Broadcast,
}

/// A regular (3-chain rule) commit observed by a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitEvent {
    pub block: BlockId,
    pub round: Round,
    pub height: Height,
}

/// Request to deliver a timer event `after` milliseconds from now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerRequest {
    pub round: Round,
    pub after: SimTime,
}

/// Outputs of one engine step. A pure function of (state, event, now).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineOutput {
    pub messages: Vec<(Destination, Message)>,
    pub commits: Vec<CommitEvent>,
    pub strength_updates: Vec<(BlockId, u32)>,
    pub timer: Option<TimerRequest>,
    pub qc_wait: Option<TimerRequest>,
}

impl EngineOutput {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
            && self.commits.is_empty()
            && self.strength_updates.is_empty()
            && self.timer.is_none()
            && self.qc_wait.is_none()
    }

    /// Digest of the serialized output, used for replay divergence checks.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("engine output serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().into()
    }
}
