use serde::{Deserialize, Serialize};

use super::{Phase, Slot, SlotClaim};
use crate::topology::NodeId;

/// What a node says about itself, and what neighbors relay about it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub claim: SlotClaim,
    pub phase: Phase,
    /// Bumped on every claim or phase change; the highest epoch wins when the
    /// same node is reported along several paths.
    pub epoch: u32,
    /// Slots this node sees unclaimed in its distance-2 view.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub free: Vec<Slot>,
}

impl Report {
    pub fn joining() -> Self {
        Report {
            claim: SlotClaim::default(),
            phase: Phase::Joining,
            epoch: 0,
            free: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.phase == Phase::Active
    }
}

/// Arbitration order: executing resets first, then lower tier, then lower id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResetKey {
    /// 0 while the initiator is executing its reset, 1 while still pending.
    pub rank: u8,
    /// 0 for overlap evidence, 1 for timeout-only evidence.
    pub tier: u8,
    pub initiator: NodeId,
}

impl ResetKey {
    pub fn pending(tier: u8, initiator: NodeId) -> Self {
        ResetKey {
            rank: 1,
            tier,
            initiator,
        }
    }

    pub fn executing(initiator: NodeId) -> Self {
        ResetKey {
            rank: 0,
            tier: 0,
            initiator,
        }
    }

    pub fn is_executing(&self) -> bool {
        self.rank == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum Message {
    Heartbeat {
        report: Report,
        /// The sender's neighbors as it currently knows them.
        digest: Vec<(NodeId, Report)>,
    },
    /// The sender's own pending or executing reset.
    ResetRequest {
        key: ResetKey,
    },
    /// Best request the sender knows of within `hop` hops (1 or 2).
    ResetGrantRelay {
        key: ResetKey,
        hop: u8,
    },
    ClearSlots {
        initiator: NodeId,
        hop: u8,
    },
    Assign {
        initiator: NodeId,
        position: u32,
        slots: Vec<Slot>,
    },
    JoinRequest {
        joiner: NodeId,
        used_primary: Vec<Slot>,
        used_extra: Vec<Slot>,
        neighbors: Vec<NodeId>,
    },
    JoinGrant {
        joiner: NodeId,
        slot: Slot,
    },
    Release {
        initiator: NodeId,
        hop: u8,
    },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Heartbeat { .. } => "heartbeat",
            Message::ResetRequest { .. } => "reset_request",
            Message::ResetGrantRelay { .. } => "reset_grant_relay",
            Message::ClearSlots { .. } => "clear_slots",
            Message::Assign { .. } => "assign",
            Message::JoinRequest { .. } => "join_request",
            Message::JoinGrant { .. } => "join_grant",
            Message::Release { .. } => "release",
        }
    }
}

/// Body of one write: everything a node says in its slot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Packet(pub Vec<Message>);

impl Packet {
    pub fn messages(&self) -> &[Message] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executing_beats_pending() {
        let a = ResetKey::executing(NodeId(9));
        let b = ResetKey::pending(0, NodeId(1));
        assert!(a < b);
        assert!(ResetKey::pending(0, NodeId(9)) < ResetKey::pending(1, NodeId(1)));
        assert!(ResetKey::pending(0, NodeId(5)) < ResetKey::pending(0, NodeId(9)));
    }

    #[test]
    fn tagged_json() {
        let m = Message::Release {
            initiator: NodeId(4),
            hop: 1,
        };
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"msg":"release","initiator":4,"hop":1}"#
        );
        let back: Message = serde_json::from_str(r#"{"msg":"release","initiator":4,"hop":1}"#).unwrap();
        assert_eq!(back, m);
    }
}
