//! Deterministic network latency models.
//!
//! After the global stabilization time every honest-to-honest message
//! arrives within the model's delay bound; before it, deliveries pick up a
//! seeded extra delay capped by the scenario's pre-GST bound. Per-replica
//! lag overlays model outcasts and stragglers whose links are slow in both
//! directions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sft_core::{ReplicaId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyModel {
    /// Same one-way delay between every distinct pair.
    Uniform { delay: SimTime },
    /// Replicas partitioned round-robin into `groups` regions: `intra`
    /// within a region, `inter` across regions.
    Regions {
        groups: u32,
        intra: SimTime,
        inter: SimTime,
    },
    /// A base model plus seeded jitter in `[0, max_jitter]` per delivery.
    Jitter {
        base: Box<LatencyModel>,
        max_jitter: SimTime,
    },
}

impl LatencyModel {
    pub fn region_of(&self, id: ReplicaId) -> u32 {
        match self {
            LatencyModel::Regions { groups, .. } => id.0 % groups.max(1),
            LatencyModel::Jitter { base, .. } => base.region_of(id),
            LatencyModel::Uniform { .. } => 0,
        }
    }

    fn base_delay(&self, src: ReplicaId, dst: ReplicaId, rng: &mut ChaCha8Rng) -> SimTime {
        match self {
            LatencyModel::Uniform { delay } => *delay,
            LatencyModel::Regions { intra, inter, .. } => {
                if self.region_of(src) == self.region_of(dst) {
                    *intra
                } else {
                    *inter
                }
            }
            LatencyModel::Jitter { base, max_jitter } => {
                let b = base.base_delay(src, dst, rng);
                b + rng.random_range(0..=*max_jitter)
            }
        }
    }

    /// Worst-case one-way delay of the model itself (no lag overlays).
    pub fn bound(&self) -> SimTime {
        match self {
            LatencyModel::Uniform { delay } => *delay,
            LatencyModel::Regions { intra, inter, .. } => (*intra).max(*inter),
            LatencyModel::Jitter { base, max_jitter } => base.bound() + max_jitter,
        }
    }
}

/// The full delivery-time oracle for a run.
#[derive(Debug, Clone)]
pub struct Network {
    model: LatencyModel,
    /// Link lag applied when either endpoint is listed (outcasts,
    /// stragglers). Overrides the base delay when larger.
    lagged: BTreeMap<ReplicaId, SimTime>,
    gst: SimTime,
    pre_gst_cap: SimTime,
    rng: ChaCha8Rng,
}

impl Network {
    pub fn new(
        model: LatencyModel,
        lagged: BTreeMap<ReplicaId, SimTime>,
        gst: SimTime,
        pre_gst_cap: SimTime,
        seed: u64,
    ) -> Self {
        Self {
            model,
            lagged,
            gst,
            pre_gst_cap,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b),
        }
    }

    /// One-way delay for a message sent at `now`. Self-delivery is free.
    pub fn delay(&mut self, src: ReplicaId, dst: ReplicaId, now: SimTime) -> SimTime {
        if src == dst {
            return 0;
        }
        let mut d = self.model.base_delay(src, dst, &mut self.rng);
        let lag = self
            .lagged
            .get(&src)
            .copied()
            .max(self.lagged.get(&dst).copied());
        if let Some(lag) = lag {
            d = d.max(lag);
        }
        if now < self.gst && self.pre_gst_cap > 0 {
            d += self.rng.random_range(0..=self.pre_gst_cap);
        }
        d
    }

    /// Synchrony bound Δ including lag overlays; post-GST honest deliveries
    /// must stay within it.
    pub fn delta_bound(&self) -> SimTime {
        let lag_max = self.lagged.values().copied().max().unwrap_or(0);
        self.model.bound().max(lag_max)
    }

    /// Model bound without lag overlays; the round-timer default derives
    /// from this so outcast links can actually time out.
    pub fn base_bound(&self) -> SimTime {
        self.model.bound()
    }

    pub fn gst(&self) -> SimTime {
        self.gst
    }
}
