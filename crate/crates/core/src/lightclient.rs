//! Strong-commit proofs for stateless clients.
//!
//! Every proposal carries a log of strength updates caused by the
//! certificate it embeds. Once the proposal is certified, at least one
//! honest replica stands behind those updates (assuming at most 2f faults),
//! so a single certified header plus its quorum certificate proves a
//! strength claim. Log entries record absolute strengths, so verification
//! is idempotent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::BlockTree;
use crate::types::{
    hash_block_header, payload_digest, BlockId, Height, LogEntry, ProtocolParams, ReplicaId,
    Round, Signer, StrongQC, TimeoutCertificate,
};

/// Header fields of a certified proposal, sufficient to recompute its id.
/// The payload travels as its digest only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofHeader {
    pub id: BlockId,
    pub parent: BlockId,
    pub qc: StrongQC,
    pub round: Round,
    pub height: Height,
    pub payload_digest: [u8; 32],
    pub proposer: ReplicaId,
    pub tc: Option<TimeoutCertificate>,
    pub commit_log: Vec<LogEntry>,
}

/// A strength claim plus the earliest certified proposal whose log records it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongCommitProof {
    pub header: ProofHeader,
    /// Certificate for the proposal carrying the log.
    pub qc: StrongQC,
    pub claimed_block: BlockId,
    pub claimed_strength: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProofError {
    #[error("no certified proposal records the requested strength yet")]
    Unprovable,
    #[error("header id does not match its contents")]
    HeaderIdMismatch,
    #[error("certificate does not certify the proposal header")]
    QcBlockMismatch,
    #[error("certificate invalid: {0}")]
    QcInvalid(#[from] crate::types::QcError),
    #[error("log does not record the claimed block at the claimed strength")]
    ClaimNotInLog,
}

/// Turns the strength deltas produced by certificate registration into log
/// entries, ordered by block height. Absolute strengths, one entry per block.
pub fn build_commit_log(updates: &[(BlockId, u32)], tree: &BlockTree) -> Vec<LogEntry> {
    let mut entries: Vec<(Height, LogEntry)> = updates
        .iter()
        .map(|&(block, strength)| {
            let h = tree.height_of(&block).unwrap_or(0);
            (h, LogEntry { block, strength })
        })
        .collect();
    entries.sort_by_key(|&(h, e)| (h, e.block));
    entries.into_iter().map(|(_, e)| e).collect()
}

fn header_of(block: &crate::types::Block) -> ProofHeader {
    ProofHeader {
        id: block.id,
        parent: block.parent,
        qc: block.qc.clone(),
        round: block.round,
        height: block.height,
        payload_digest: payload_digest(&block.payload),
        proposer: block.proposer,
        tc: block.tc.clone(),
        commit_log: block.commit_log.clone(),
    }
}

/// Builds a proof that `target` reached strength `x`: the earliest certified
/// proposal whose log records `target` at strength >= `x`, plus that
/// proposal's certificate.
pub fn make_proof(
    tree: &BlockTree,
    target: &BlockId,
    x: u32,
) -> Result<StrongCommitProof, ProofError> {
    let mut candidates: Vec<&crate::types::Block> = tree
        .blocks()
        .filter(|b| {
            tree.is_certified(&b.id)
                && b.commit_log
                    .iter()
                    .any(|e| e.block == *target && e.strength >= x)
        })
        .collect();
    candidates.sort_by_key(|b| (b.round, b.id));
    let block = candidates.first().ok_or(ProofError::Unprovable)?;
    let qc = tree
        .certificate(&block.id)
        .ok_or(ProofError::Unprovable)?
        .clone();
    Ok(StrongCommitProof {
        header: header_of(block),
        qc,
        claimed_block: *target,
        claimed_strength: x,
    })
}

/// Verifies a proof against the known validator set: the header hashes to
/// its id, the certificate carries 2f+1 valid distinct signatures over that
/// id, and the log records the claim. The certified log is trusted under the
/// <= 2f fault assumption; no chain state is needed.
pub fn verify_proof(
    proof: &StrongCommitProof,
    params: &ProtocolParams,
    signer: &dyn Signer,
) -> Result<(), ProofError> {
    let h = &proof.header;
    let recomputed = hash_block_header(
        &h.parent,
        &h.qc,
        h.round,
        h.height,
        &h.payload_digest,
        h.proposer,
        h.tc.as_ref(),
        &h.commit_log,
    );
    if recomputed != h.id {
        return Err(ProofError::HeaderIdMismatch);
    }
    if proof.qc.block != h.id || proof.qc.round != h.round {
        return Err(ProofError::QcBlockMismatch);
    }
    proof.qc.validate(params, Some(signer))?;
    if !h
        .commit_log
        .iter()
        .any(|e| e.block == proof.claimed_block && e.strength >= proof.claimed_strength)
    {
        return Err(ProofError::ClaimNotInLog);
    }
    Ok(())
}
