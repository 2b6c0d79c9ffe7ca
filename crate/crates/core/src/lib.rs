//! Core types and commit accounting for chain-based BFT state machine
//! replication with strengthened fault tolerance.
//!
//! This crate is the foundation layer: chained blocks and strong-votes, the
//! per-replica block tree, the endorsement ledger that turns indirect votes
//! into strong-commit strengths in `[f, 2f]`, and single-header strong-commit
//! proofs for light clients. It has no protocol or simulation logic; the
//! replica state machines live in `sft-engines` and the deterministic
//! simulator in `sft-sim`.

pub mod accounting;
pub mod lightclient;
pub mod tree;
pub mod types;

pub use accounting::{
    compute_height_marker, compute_intervals, compute_marker, endorses, k_endorses,
    strong_commit_level, AccountingError, CommitRule, EndorsementLedger, EndorsementMode,
};
pub use lightclient::{
    build_commit_log, make_proof, verify_proof, ProofError, ProofHeader, StrongCommitProof,
};
pub use tree::{BlockTree, TreeError, VoteHistory};
pub use types::{
    derive_payload, genesis_block, genesis_id, hash_block_header, payload_digest, Block, BlockId,
    Endorsement, Height, IntervalSet, LogEntry, MockSigner, ProtocolParams, QcError, ReplicaId,
    Round, Signature, Signer, SimTime, StrongQC, StrongVote, TimeoutCertificate, TimeoutMsg,
    TypeError,
};
