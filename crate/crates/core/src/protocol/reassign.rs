use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{Slot, SlotClaim};
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssignError {
    #[error("period too small: no free slot for node {0}")]
    PeriodTooSmall(NodeId),
    #[error("participant {0} is not in the topology")]
    UnknownParticipant(NodeId),
}

/// Smallest slot in `[0, period)` outside `hard ∪ soft`; failing that, the
/// smallest outside `hard` alone. Soft slots are bandwidth extras, which
/// their holders give up when someone takes them as a primary.
pub fn smallest_free(period: Slot, hard: &BTreeSet<Slot>, soft: &BTreeSet<Slot>) -> Option<Slot> {
    (0..period)
        .find(|s| !hard.contains(s) && !soft.contains(s))
        .or_else(|| (0..period).find(|s| !hard.contains(s)))
}

/// Greedy distance-2 assignment in ascending id order.
///
/// Each participant takes the smallest slot not held by any node within
/// distance 2: participants assigned earlier in the pass, plus the `frozen`
/// claims of non-participants.
pub fn reassign_slots(
    t: &Topology,
    participants: &BTreeSet<NodeId>,
    frozen: &BTreeMap<NodeId, SlotClaim>,
    period: Slot,
) -> Result<BTreeMap<NodeId, Slot>, AssignError> {
    let mut out: BTreeMap<NodeId, Slot> = BTreeMap::new();
    for &p in participants {
        let near = t
            .distance_neighborhood(p, 2)
            .map_err(|_| AssignError::UnknownParticipant(p))?;
        let mut hard = BTreeSet::new();
        let mut soft = BTreeSet::new();
        for v in near {
            if let Some(&s) = out.get(&v) {
                hard.insert(s);
            } else if !participants.contains(&v) {
                if let Some(c) = frozen.get(&v) {
                    hard.extend(c.primary);
                    soft.extend(c.extra.iter().copied());
                }
            }
        }
        let s = smallest_free(period, &hard, &soft).ok_or(AssignError::PeriodTooSmall(p))?;
        out.insert(p, s);
    }
    Ok(out)
}
