//! Domain types shared by every layer: blocks, strong-votes, quorum and
//! timeout certificates, replica identities, and the signing abstraction.
//!
//! All types are plain immutable values with a canonical byte encoding used
//! for hashing and signing. Simulation traces serialize them as JSON.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Round numbers. Genesis sits at round 0; every real block has round >= 1.
pub type Round = u64;
/// Chain position. Genesis sits at height 0.
pub type Height = u64;
/// Simulated time in milliseconds.
pub type SimTime = u64;

/// Index of a replica in the validator set, in `[0, n)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Static validator-set parameters, with `n = 3f + 1` enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub n: u32,
    pub f: u32,
}

impl ProtocolParams {
    pub fn new(n: u32, f: u32) -> Result<Self, TypeError> {
        if f < 1 || n != 3 * f + 1 {
            return Err(TypeError::BadParams { n, f });
        }
        Ok(Self { n, f })
    }

    /// Convenience constructor from `n` alone; requires `n = 3f + 1`.
    pub fn from_n(n: u32) -> Result<Self, TypeError> {
        if n < 4 || (n - 1) % 3 != 0 {
            return Err(TypeError::BadParams { n, f: (n - 1) / 3 });
        }
        Self::new(n, (n - 1) / 3)
    }

    /// Quorum size `2f + 1`.
    pub fn quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    /// Highest reachable strong-commit strength, `2f`.
    pub fn max_strength(&self) -> u32 {
        2 * self.f
    }

    /// Round-robin leader schedule: `leader(r) = r mod n`.
    pub fn leader(&self, round: Round) -> ReplicaId {
        ReplicaId((round % self.n as u64) as u32)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n).map(ReplicaId)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("invalid validator parameters: n={n}, f={f} (need n = 3f+1, f >= 1)")]
    BadParams { n: u32, f: u32 },
    #[error("unknown signer id {0}")]
    UnknownSigner(ReplicaId),
}

/// Collision-resistant digest of a block header.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub [u8; 32]);

impl BlockId {
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockId({})", self.short())
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("block id must be 32 bytes"))?;
        Ok(BlockId(arr))
    }
}

/// Deterministic mock signature (keyed MAC over the message).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 32]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({})", hex::encode(&self.0[..4]))
    }
}

impl Serialize for Signature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 32 bytes"))?;
        Ok(Signature(arr))
    }
}

/// Pluggable signing interface. The default is a deterministic keyed-MAC
/// mock; the simulation does not need asymmetric crypto, and a real scheme
/// can slot in behind the same trait.
pub trait Signer {
    fn sign(&self, signer: ReplicaId, message: &[u8]) -> Result<Signature, TypeError>;
    fn verify(&self, signer: ReplicaId, message: &[u8], sig: &Signature) -> bool;
}

/// Keyed-MAC mock signer: `sig = H(H(tag || id) || message)`.
#[derive(Debug, Clone)]
pub struct MockSigner {
    n: u32,
}

impl MockSigner {
    pub fn new(n: u32) -> Self {
        Self { n }
    }

    fn key(&self, id: ReplicaId) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"sft-mock-key");
        h.update(id.0.to_le_bytes());
        h.finalize().into()
    }
}

impl Signer for MockSigner {
    fn sign(&self, signer: ReplicaId, message: &[u8]) -> Result<Signature, TypeError> {
        if signer.0 >= self.n {
            return Err(TypeError::UnknownSigner(signer));
        }
        let mut h = Sha256::new();
        h.update(self.key(signer));
        h.update(message);
        Ok(Signature(h.finalize().into()))
    }

    fn verify(&self, signer: ReplicaId, message: &[u8], sig: &Signature) -> bool {
        if signer.0 >= self.n {
            return false;
        }
        match self.sign(signer, message) {
            Ok(expect) => expect == *sig,
            Err(_) => false,
        }
    }
}

/// Sorted, pairwise-disjoint, non-adjacent closed integer intervals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct IntervalSet {
    intervals: Vec<(u64, u64)>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self { intervals: vec![] }
    }

    /// Builds a canonical set from arbitrary closed intervals: empty ranges
    /// dropped, overlapping and adjacent ranges merged, result sorted.
    pub fn from_intervals(mut raw: Vec<(u64, u64)>) -> Self {
        raw.retain(|(lo, hi)| lo <= hi);
        raw.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::with_capacity(raw.len());
        for (lo, hi) in raw {
            match out.last_mut() {
                // Merge overlap and adjacency ([1,3] + [4,5] -> [1,5]).
                Some((_, phi)) if lo <= phi.saturating_add(1) => *phi = (*phi).max(hi),
                _ => out.push((lo, hi)),
            }
        }
        Self { intervals: out }
    }

    /// `[lo, hi]` minus the union of `exclusions`.
    pub fn from_range_minus(lo: u64, hi: u64, exclusions: &[(u64, u64)]) -> Self {
        if lo > hi {
            return Self::empty();
        }
        let excl = IntervalSet::from_intervals(exclusions.to_vec());
        let mut out = Vec::new();
        let mut cursor = lo;
        for &(a, b) in &excl.intervals {
            if b < cursor {
                continue;
            }
            if a > hi {
                break;
            }
            if a > cursor {
                out.push((cursor, a - 1));
            }
            cursor = b.saturating_add(1);
            if cursor > hi {
                break;
            }
        }
        if cursor <= hi {
            out.push((cursor, hi));
        }
        Self { intervals: out }
    }

    pub fn contains(&self, v: u64) -> bool {
        self.intervals
            .binary_search_by(|&(lo, hi)| {
                if v < lo {
                    std::cmp::Ordering::Greater
                } else if v > hi {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }

    pub fn intervals(&self) -> &[(u64, u64)] {
        &self.intervals
    }

    pub fn max(&self) -> Option<u64> {
        self.intervals.last().map(|&(_, hi)| hi)
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.intervals.len() as u64).to_le_bytes());
        for &(lo, hi) in &self.intervals {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
    }
}

/// What a strong-vote declares about the rounds (DiemBFT) or heights
/// (Streamlet) it endorses besides the voted block itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endorsement {
    /// Highest round (or height, for Streamlet) of any conflicting block the
    /// voter previously voted for; default 0.
    Marker(u64),
    /// Explicit set of endorsed rounds.
    Intervals(IntervalSet),
}

impl Endorsement {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Endorsement::Marker(m) => {
                out.push(0);
                out.extend_from_slice(&m.to_le_bytes());
            }
            Endorsement::Intervals(set) => {
                out.push(1);
                set.encode_into(out);
            }
        }
    }
}

/// A vote for one block at one round, carrying the voter's endorsement
/// summary of its own voting history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongVote {
    pub voter: ReplicaId,
    pub block: BlockId,
    pub round: Round,
    pub endorsement: Endorsement,
    pub signature: Signature,
}

impl StrongVote {
    pub fn signing_bytes(block: &BlockId, round: Round, endorsement: &Endorsement) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(b"vote");
        out.extend_from_slice(&block.0);
        out.extend_from_slice(&round.to_le_bytes());
        endorsement.encode_into(&mut out);
        out
    }

    pub fn new(
        signer: &dyn Signer,
        voter: ReplicaId,
        block: BlockId,
        round: Round,
        endorsement: Endorsement,
    ) -> Result<Self, TypeError> {
        let sig = signer.sign(voter, &Self::signing_bytes(&block, round, &endorsement))?;
        Ok(Self {
            voter,
            block,
            round,
            endorsement,
            signature: sig,
        })
    }

    pub fn verify(&self, signer: &dyn Signer) -> bool {
        signer.verify(
            self.voter,
            &Self::signing_bytes(&self.block, self.round, &self.endorsement),
            &self.signature,
        )
    }
}

/// Quorum certificate: >= 2f+1 distinct strong-votes for one (block, round).
/// May contain more than 2f+1 votes when the collecting leader waited extra
/// time for stragglers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongQC {
    pub block: BlockId,
    pub round: Round,
    pub votes: Vec<StrongVote>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QcError {
    #[error("quorum certificate has {got} votes, needs {need}")]
    SubQuorum { got: usize, need: usize },
    #[error("duplicate voter {0} in quorum certificate")]
    DuplicateVoter(ReplicaId),
    #[error("vote for wrong block or round in quorum certificate")]
    MixedVotes,
    #[error("invalid vote signature from {0}")]
    BadSignature(ReplicaId),
    #[error("timeout certificate has {got} messages, needs {need}")]
    SubQuorumTimeouts { got: usize, need: usize },
    #[error("duplicate timeout sender {0}")]
    DuplicateSender(ReplicaId),
    #[error("timeout message for wrong round")]
    MixedRounds,
    #[error("embedded qc_high round {qc} not below timeout round {round}")]
    TimeoutQcRound { qc: Round, round: Round },
}

impl StrongQC {
    /// The distinguished empty certificate for the genesis block ("bottom of
    /// round 0"). Valid by convention.
    pub fn genesis(genesis_id: BlockId) -> Self {
        Self {
            block: genesis_id,
            round: 0,
            votes: vec![],
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.round == 0 && self.votes.is_empty()
    }

    pub fn voters(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.votes.iter().map(|v| v.voter)
    }

    /// Structural and cryptographic validation. The genesis certificate is
    /// accepted as-is; everything else needs 2f+1 distinct valid votes for
    /// the same (block, round).
    pub fn validate(
        &self,
        params: &ProtocolParams,
        signer: Option<&dyn Signer>,
    ) -> Result<(), QcError> {
        if self.is_genesis() {
            return Ok(());
        }
        if self.votes.len() < params.quorum() {
            return Err(QcError::SubQuorum {
                got: self.votes.len(),
                need: params.quorum(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.votes {
            if v.block != self.block || v.round != self.round {
                return Err(QcError::MixedVotes);
            }
            if !seen.insert(v.voter) {
                return Err(QcError::DuplicateVoter(v.voter));
            }
            if let Some(s) = signer {
                if !v.verify(s) {
                    return Err(QcError::BadSignature(v.voter));
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"qc");
        h.update(self.block.0);
        h.update(self.round.to_le_bytes());
        h.update((self.votes.len() as u64).to_le_bytes());
        for v in &self.votes {
            h.update(v.voter.0.to_le_bytes());
            h.update(v.signature.0);
        }
        h.finalize().into()
    }

    /// QCs rank by round; equal-round ties break toward more votes, then
    /// lexicographically smaller block id, for deterministic replay.
    pub fn ranks_higher_than(&self, other: &StrongQC) -> bool {
        (self.round, self.votes.len(), std::cmp::Reverse(self.block))
            > (other.round, other.votes.len(), std::cmp::Reverse(other.block))
    }
}

/// Pacemaker timeout message for one round, carrying the sender's highest QC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutMsg {
    pub round: Round,
    pub qc_high: StrongQC,
    pub sender: ReplicaId,
    pub signature: Signature,
}

impl TimeoutMsg {
    pub fn signing_bytes(round: Round, qc_high: &StrongQC) -> Vec<u8> {
        let mut out = Vec::with_capacity(48);
        out.extend_from_slice(b"timeout");
        out.extend_from_slice(&round.to_le_bytes());
        out.extend_from_slice(&qc_high.digest());
        out
    }

    pub fn new(
        signer: &dyn Signer,
        sender: ReplicaId,
        round: Round,
        qc_high: StrongQC,
    ) -> Result<Self, TypeError> {
        let sig = signer.sign(sender, &Self::signing_bytes(round, &qc_high))?;
        Ok(Self {
            round,
            qc_high,
            sender,
            signature: sig,
        })
    }

    pub fn validate(&self, params: &ProtocolParams, signer: Option<&dyn Signer>) -> Result<(), QcError> {
        if self.qc_high.round >= self.round {
            return Err(QcError::TimeoutQcRound {
                qc: self.qc_high.round,
                round: self.round,
            });
        }
        self.qc_high.validate(params, signer)?;
        if let Some(s) = signer {
            if !s.verify(
                self.sender,
                &Self::signing_bytes(self.round, &self.qc_high),
                &self.signature,
            ) {
                return Err(QcError::BadSignature(self.sender));
            }
        }
        Ok(())
    }
}

/// 2f+1 distinct timeout messages for the same round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutCertificate {
    pub round: Round,
    pub msgs: Vec<TimeoutMsg>,
}

impl TimeoutCertificate {
    pub fn validate(
        &self,
        params: &ProtocolParams,
        signer: Option<&dyn Signer>,
    ) -> Result<(), QcError> {
        if self.msgs.len() < params.quorum() {
            return Err(QcError::SubQuorumTimeouts {
                got: self.msgs.len(),
                need: params.quorum(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.msgs {
            if m.round != self.round {
                return Err(QcError::MixedRounds);
            }
            if !seen.insert(m.sender) {
                return Err(QcError::DuplicateSender(m.sender));
            }
            m.validate(params, signer)?;
        }
        Ok(())
    }

    /// Highest qc_high carried by the certificate's messages.
    pub fn high_qc(&self) -> Option<&StrongQC> {
        self.msgs
            .iter()
            .map(|m| &m.qc_high)
            .max_by(|a, b| {
                if a.ranks_higher_than(b) {
                    std::cmp::Ordering::Greater
                } else if b.ranks_higher_than(a) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tc");
        h.update(self.round.to_le_bytes());
        for m in &self.msgs {
            h.update(m.sender.0.to_le_bytes());
            h.update(m.signature.0);
        }
        h.finalize().into()
    }
}

/// One strong-commit strength update, recorded in block proposals so light
/// clients can verify strengths from a single certified header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub block: BlockId,
    pub strength: u32,
}

/// A chained block. `qc` certifies `parent`; the id is the hash of every
/// header field (payload and commit log by digest), so votes cover them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub parent: BlockId,
    pub qc: StrongQC,
    pub round: Round,
    pub height: Height,
    pub payload: Vec<u8>,
    pub proposer: ReplicaId,
    pub tc: Option<TimeoutCertificate>,
    pub commit_log: Vec<LogEntry>,
    pub signature: Signature,
}

pub fn payload_digest(payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"payload");
    h.update(payload);
    h.finalize().into()
}

/// Hash of the canonical header encoding. Stable across runs; any field
/// change produces a different id.
pub fn hash_block_header(
    parent: &BlockId,
    qc: &StrongQC,
    round: Round,
    height: Height,
    payload_dig: &[u8; 32],
    proposer: ReplicaId,
    tc: Option<&TimeoutCertificate>,
    commit_log: &[LogEntry],
) -> BlockId {
    let mut h = Sha256::new();
    h.update(b"block");
    h.update(parent.0);
    h.update(qc.digest());
    h.update(round.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(payload_dig);
    h.update(proposer.0.to_le_bytes());
    match tc {
        Some(tc) => {
            h.update([1u8]);
            h.update(tc.digest());
        }
        None => h.update([0u8]),
    }
    h.update((commit_log.len() as u64).to_le_bytes());
    for e in commit_log {
        h.update(e.block.0);
        h.update(e.strength.to_le_bytes());
    }
    BlockId(h.finalize().into())
}

/// Fixed id of the genesis block (round 0, height 0, self-certified).
pub fn genesis_id() -> BlockId {
    let mut h = Sha256::new();
    h.update(b"sft-genesis");
    BlockId(h.finalize().into())
}

/// The genesis block. Its parent is itself and its certificate is the empty
/// round-0 QC; the tree treats it as implicitly certified.
pub fn genesis_block() -> Block {
    let id = genesis_id();
    Block {
        id,
        parent: id,
        qc: StrongQC::genesis(id),
        round: 0,
        height: 0,
        payload: vec![],
        proposer: ReplicaId(0),
        tc: None,
        commit_log: vec![],
        signature: Signature([0; 32]),
    }
}

impl Block {
    pub fn is_genesis(&self) -> bool {
        self.id == genesis_id()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        signer: &dyn Signer,
        proposer: ReplicaId,
        parent: BlockId,
        qc: StrongQC,
        round: Round,
        height: Height,
        payload: Vec<u8>,
        tc: Option<TimeoutCertificate>,
        commit_log: Vec<LogEntry>,
    ) -> Result<Self, TypeError> {
        let pd = payload_digest(&payload);
        let id = hash_block_header(
            &parent,
            &qc,
            round,
            height,
            &pd,
            proposer,
            tc.as_ref(),
            &commit_log,
        );
        let signature = signer.sign(proposer, &id.0)?;
        Ok(Self {
            id,
            parent,
            qc,
            round,
            height,
            payload,
            proposer,
            tc,
            commit_log,
            signature,
        })
    }

    /// Recomputes the id from the header fields and checks it matches.
    pub fn id_consistent(&self) -> bool {
        let pd = payload_digest(&self.payload);
        self.id
            == hash_block_header(
                &self.parent,
                &self.qc,
                self.round,
                self.height,
                &pd,
                self.proposer,
                self.tc.as_ref(),
                &self.commit_log,
            )
    }

    pub fn verify_signature(&self, signer: &dyn Signer) -> bool {
        signer.verify(self.proposer, &self.id.0, &self.signature)
    }
}

/// Deterministic payload filler for simulated proposals.
pub fn derive_payload(seed: u64, round: Round, proposer: ReplicaId, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size);
    let mut counter = 0u64;
    while out.len() < size {
        let mut h = Sha256::new();
        h.update(b"payload-fill");
        h.update(seed.to_le_bytes());
        h.update(round.to_le_bytes());
        h.update(proposer.0.to_le_bytes());
        h.update(counter.to_le_bytes());
        let chunk: [u8; 32] = h.finalize().into();
        let take = (size - out.len()).min(32);
        out.extend_from_slice(&chunk[..take]);
        counter += 1;
    }
    out
}
