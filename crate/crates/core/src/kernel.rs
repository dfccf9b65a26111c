//! Slotted write-all-with-collision channel.
//!
//! A transmission writes to every neighbor of the sender at once. A receiver
//! with two or more transmitting neighbors keeps its state (collision), and a
//! node that transmits does not listen in the same slot.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeId, Topology};

/// Position in logical time. Frames may differ in length (normal frames have
/// `P` slots, recovery frames one mini-slot per id), so ordering is
/// lexicographic on `(frame, slot)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotIndex {
    pub frame: u64,
    pub slot: u32,
}

impl SlotIndex {
    pub fn new(frame: u64, slot: u32) -> Self {
        SlotIndex { frame, slot }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WritePayload<B> {
    pub sender: NodeId,
    pub body: B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<B> {
    Delivered(WritePayload<B>),
    Collision,
    Silence,
}

impl<B> Outcome<B> {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Delivered(_) => "delivered",
            Outcome::Collision => "collision",
            Outcome::Silence => "silence",
        }
    }

    /// What a protocol is allowed to see: a write arrived, or nothing did.
    pub fn delivered(&self) -> Option<&WritePayload<B>> {
        match self {
            Outcome::Delivered(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelEvent<B> {
    pub receiver: NodeId,
    pub slot: SlotIndex,
    pub outcome: Outcome<B>,
}

impl<B> KernelEvent<B> {
    pub fn record(&self) -> EventRecord {
        EventRecord {
            frame: self.slot.frame,
            slot: self.slot.slot,
            rx: self.receiver,
            outcome: self.outcome.name().to_string(),
            tx: self.outcome.delivered().map(|p| p.sender),
        }
    }
}

/// One JSON-lines trace line per receiver per slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub frame: u64,
    pub slot: u32,
    pub rx: NodeId,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("ghost transmitter: {0}")]
    GhostTransmitter(NodeId),
    #[error("time skew: slot {next:?} is not after {last:?}")]
    TimeSkew { last: SlotIndex, next: SlotIndex },
}

/// Applies the collision rule for one slot. Pure; events sorted by receiver.
pub fn resolve<B: Clone>(
    t: &Topology,
    transmitters: &BTreeMap<NodeId, B>,
    slot: SlotIndex,
) -> Result<Vec<KernelEvent<B>>, KernelError> {
    if let Some(&ghost) = transmitters.keys().find(|u| !t.contains(**u)) {
        return Err(KernelError::GhostTransmitter(ghost));
    }
    let mut events = Vec::with_capacity(t.len());
    for rx in t.nodes() {
        let outcome = if transmitters.contains_key(&rx) {
            Outcome::Silence
        } else {
            let mut writers = t
                .neighbors(rx)
                .expect("iterating live nodes")
                .iter()
                .filter_map(|v| transmitters.get(v).map(|b| (*v, b)));
            match (writers.next(), writers.next()) {
                (None, _) => Outcome::Silence,
                (Some((sender, body)), None) => Outcome::Delivered(WritePayload {
                    sender,
                    body: body.clone(),
                }),
                (Some(_), Some(_)) => Outcome::Collision,
            }
        };
        events.push(KernelEvent {
            receiver: rx,
            slot,
            outcome,
        });
    }
    Ok(events)
}

/// Stateful wrapper that enforces monotone time.
#[derive(Clone, Debug, Default)]
pub struct Kernel {
    last: Option<SlotIndex>,
}

impl Kernel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_slot(&self) -> Option<SlotIndex> {
        self.last
    }

    pub fn step<B: Clone>(
        &mut self,
        t: &Topology,
        transmitters: &BTreeMap<NodeId, B>,
        slot: SlotIndex,
    ) -> Result<Vec<KernelEvent<B>>, KernelError> {
        if let Some(last) = self.last {
            if slot <= last {
                return Err(KernelError::TimeSkew { last, next: slot });
            }
        }
        let events = resolve(t, transmitters, slot)?;
        self.last = Some(slot);
        Ok(events)
    }

    /// Runs slots `0..len` of `frame`, asking `schedule` for each slot's
    /// transmitters.
    pub fn run_frame<B: Clone>(
        &mut self,
        t: &Topology,
        frame: u64,
        len: u32,
        mut schedule: impl FnMut(u32) -> BTreeMap<NodeId, B>,
    ) -> Result<Vec<KernelEvent<B>>, KernelError> {
        let mut out = Vec::with_capacity(len as usize * t.len());
        for s in 0..len {
            let tx = schedule(s);
            out.extend(self.step(t, &tx, SlotIndex::new(frame, s))?);
        }
        Ok(out)
    }
}
