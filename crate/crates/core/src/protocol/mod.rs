//! Per-sensor deterministic TDMA slot assignment protocol.
//!
//! Time alternates between normal frames of `period` slots, where each
//! sensor writes a heartbeat in the slots it claims, and recovery frames with
//! one mini-slot per id. Recovery frames cannot collide, so reset arbitration,
//! reset execution and joins run over them.

mod message;
mod reassign;
mod sensor;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

pub use message::{Message, Packet, Report, ResetKey};
pub use reassign::{reassign_slots, smallest_free, AssignError};
pub use sensor::{
    ArbitrationView, ChangeCause, Diagnostics, JoinProgress, NeighborEntry, Note, ResetMode, ResetState, SensorState,
};

/// Slot position within a normal frame, in `[0, period)`.
pub type Slot = u16;

/// Recovery rounds of uncontested arbitration before an initiator clears its
/// neighborhood. Information from three hops away arrives two rounds late,
/// so two initiators within distance 3 cannot both collect this many wins.
pub const ARBITRATION_WINS: u32 = 6;

/// Recovery rounds between the initiator entering its reset and the first
/// slot choice. Gives every participant time to learn who else was cleared.
pub const ASSIGN_DELAY: u64 = 6;

/// Recovery rounds after which a reset participant gives up waiting.
pub const RESET_TIMEOUT: u64 = 80;

/// Minimum spacing, in frames, between bandwidth-extension decisions.
pub const BANDWIDTH_MIN_PERIOD: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Normal frame length `P`.
    pub period: Slot,
    /// Consecutive-frame threshold.
    pub tau: u32,
    /// Every `recovery_stride`-th frame is a recovery frame.
    pub recovery_stride: u32,
    /// Recovery frame length; every live id must be below it.
    pub id_capacity: u32,
    pub bandwidth: bool,
}

impl ProtocolConfig {
    pub fn frame_kind(&self, frame: u64) -> FrameKind {
        if (frame + 1).is_multiple_of(self.recovery_stride as u64) {
            FrameKind::Recovery
        } else {
            FrameKind::Normal
        }
    }

    pub fn frame_len(&self, kind: FrameKind) -> u32 {
        match kind {
            FrameKind::Normal => self.period as u32,
            FrameKind::Recovery => self.id_capacity,
        }
    }

    pub fn ctx(&self, frame: u64) -> FrameCtx {
        FrameCtx {
            frame,
            kind: self.frame_kind(frame),
            round: frame / self.recovery_stride as u64,
        }
    }

    /// Frames between synchronized bandwidth-extension decisions.
    pub fn bandwidth_period(&self) -> u64 {
        (self.tau as u64).max(BANDWIDTH_MIN_PERIOD)
    }

    pub fn recovery_slot(&self, me: NodeId) -> u32 {
        me.0 % self.id_capacity
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.period == 0 {
            return Err(ConfigError::PeriodTooSmall { period: 0, required: 1 });
        }
        if self.tau == 0 {
            return Err(ConfigError::Invalid("tau must be at least 1".into()));
        }
        if self.recovery_stride < 2 {
            return Err(ConfigError::Invalid(
                "recovery_stride must be at least 2 so normal frames exist".into(),
            ));
        }
        if self.id_capacity == 0 {
            return Err(ConfigError::Invalid("id_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("period too small: {period} < {required}")]
    PeriodTooSmall { period: usize, required: usize },
    #[error("id {id} does not fit id_capacity {capacity}")]
    IdCapacity { id: NodeId, capacity: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Normal,
    Recovery,
}

/// Global clock reading handed to every sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameCtx {
    pub frame: u64,
    pub kind: FrameKind,
    /// Index of the recovery frame at or after `frame`.
    pub round: u64,
}

/// Slots a sensor transmits in. `primary` comes from reassignment or a join
/// grant; `extra` from the bandwidth extension and is surrendered on conflict.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotClaim {
    pub primary: Option<Slot>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub extra: BTreeSet<Slot>,
}

impl SlotClaim {
    pub fn single(s: Slot) -> Self {
        SlotClaim {
            primary: Some(s),
            extra: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_none() && self.extra.is_empty()
    }

    pub fn contains(&self, s: Slot) -> bool {
        self.primary == Some(s) || self.extra.contains(&s)
    }

    pub fn slots(&self) -> BTreeSet<Slot> {
        self.primary.iter().chain(self.extra.iter()).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.primary.iter().count() + self.extra.len()
    }

    pub fn intersects(&self, other: &SlotClaim) -> bool {
        self.slots().iter().any(|&s| other.contains(s))
    }

    /// `other`'s slots form a subset of ours, with the same primary.
    pub fn covers(&self, other: &SlotClaim) -> bool {
        self.primary == other.primary && other.extra.iter().all(|s| self.contains(*s))
    }

    pub fn in_range(&self, period: Slot) -> bool {
        self.slots().iter().all(|&s| s < period)
    }

    pub fn clear(&mut self) {
        self.primary = None;
        self.extra.clear();
    }
}

/// Coarse state other sensors need to know about a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    /// Joined, claims intact (idle or arbitrating).
    Active,
    Joining,
    /// Claims cleared, slot not yet chosen.
    Resetting {
        initiator: NodeId,
    },
    /// Slot chosen, waiting for release.
    Reassigning {
        initiator: NodeId,
    },
}

impl Phase {
    pub fn reset_initiator(&self) -> Option<NodeId> {
        match self {
            Phase::Resetting { initiator } | Phase::Reassigning { initiator } => Some(*initiator),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("period too small: node {node} found no free slot")]
    PeriodTooSmall { node: NodeId },
}
