//! Seeded perturbations applied at frame boundaries.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{
    ArbitrationView, Diagnostics, JoinProgress, NeighborEntry, Phase, ProtocolConfig, Report, ResetKey, ResetMode,
    ResetState, SensorState, Slot, SlotClaim,
};
use crate::topology::{NodeId, Topology};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationEvent {
    pub at_frame: u64,
    #[serde(flatten)]
    pub kind: PerturbationKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Replace one node's state with a seeded arbitrary state.
    CorruptState {
        node: NodeId,
        seed: u64,
    },
    /// Replace every node's state.
    CorruptAll {
        seed: u64,
    },
    Kill {
        node: NodeId,
    },
    Join {
        node: NodeId,
        attach_to: Vec<NodeId>,
    },
    /// Overwrite a node's primary slot and drop its extras. A targeted
    /// corruption for building adversarial overlaps.
    ForceSlot {
        node: NodeId,
        slot: Slot,
    },
}

impl PerturbationEvent {
    pub fn new(at_frame: u64, kind: PerturbationKind) -> Self {
        PerturbationEvent { at_frame, kind }
    }
}

/// Which reset modes random states may start in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSet {
    /// Idle, Scheduling and fresh Arbitrating.
    #[default]
    Quiescent,
    /// Also mid-arbitration and mid-reset modes with arbitrary progress.
    All,
}

/// A domain-valid but otherwise arbitrary state for `me`: slots in range,
/// counters in `[0, 2τ]`, tables over a random subset of neighbors plus the
/// occasional phantom.
pub fn random_state(
    me: NodeId,
    config: ProtocolConfig,
    t: &Topology,
    round: u64,
    modes: ModeSet,
    rng: &mut ChaCha8Rng,
) -> SensorState {
    let p = config.period;
    let tau = config.tau;
    let nbrs: Vec<NodeId> = t.neighbors(me).map(|n| n.iter().copied().collect()).unwrap_or_default();
    let near: Vec<NodeId> = t
        .distance_neighborhood(me, 2)
        .map(|n| n.into_iter().collect())
        .unwrap_or_default();
    let mut state = SensorState::joining(me, config);
    state.joined = rng.gen_bool(0.9);
    if state.joined {
        state.claim = random_claim(p, rng);
    }
    state.epoch = rng.gen_range(0..=2 * tau);

    let mut pool = nbrs.clone();
    if rng.gen_bool(0.2) {
        pool.push(NodeId(rng.gen_range(0..config.id_capacity)));
    }
    for j in pool {
        if j == me || rng.gen_bool(0.15) {
            continue;
        }
        let mut entry = NeighborEntry::new(random_report(p, tau, &near, rng));
        let digest_pool = t
            .neighbors(j)
            .map(|n| n.iter().copied().collect())
            .unwrap_or_else(|_| vec![me]);
        for k in digest_pool {
            if rng.gen_bool(0.85) {
                entry.digest.insert(k, random_report(p, tau, &near, rng));
            }
        }
        entry.freshness = rng.gen_range(0..=2 * tau);
        entry.missed_in_claimed = rng.gen_range(0..=2 * tau);
        state.table.insert(j, entry);
    }

    state.reset = random_reset(me, &nbrs, &near, round, modes, rng);
    if !state.joined {
        state.reset = ResetState::default();
    }
    state.arbitration = random_arbitration(&nbrs, &near, rng);
    state.join = JoinProgress {
        listened: rng.gen_range(0..=2 * tau),
        recovery_heard: rng.gen_range(0..=2),
    };
    state.stable_frames = rng.gen_range(0..=2 * tau);
    state.diagnostics = Diagnostics::default();
    state
}

fn random_claim(p: Slot, rng: &mut ChaCha8Rng) -> SlotClaim {
    let mut c = SlotClaim::single(rng.gen_range(0..p));
    for _ in 0..rng.gen_range(0..=2) {
        c.extra.insert(rng.gen_range(0..p));
    }
    if let Some(primary) = c.primary {
        c.extra.remove(&primary);
    }
    c
}

fn random_report(p: Slot, tau: u32, near: &[NodeId], rng: &mut ChaCha8Rng) -> Report {
    let phase = match rng.gen_range(0..10) {
        0 => Phase::Joining,
        1 => Phase::Resetting {
            initiator: pick(near, rng),
        },
        2 => Phase::Reassigning {
            initiator: pick(near, rng),
        },
        _ => Phase::Active,
    };
    let claim = if phase == Phase::Joining {
        SlotClaim::default()
    } else {
        random_claim(p, rng)
    };
    let free = (0..p).filter(|_| rng.gen_bool(0.3)).collect();
    Report {
        claim,
        phase,
        epoch: rng.gen_range(0..=2 * tau),
        free,
    }
}

fn pick(ids: &[NodeId], rng: &mut ChaCha8Rng) -> NodeId {
    ids.choose(rng).copied().unwrap_or(NodeId(0))
}

fn random_reset(
    me: NodeId,
    nbrs: &[NodeId],
    near: &[NodeId],
    round: u64,
    modes: ModeSet,
    rng: &mut ChaCha8Rng,
) -> ResetState {
    let tier = rng.gen_range(0..=1);
    let choices = match modes {
        ModeSet::Quiescent => 3,
        ModeSet::All => 6,
    };
    let mut r = ResetState::default();
    let mode = match rng.gen_range(0..choices) {
        0 => ResetMode::Idle,
        1 => ResetMode::Scheduling { tier },
        2 => ResetMode::Arbitrating {
            initiator: me,
            hop: 0,
            tier,
            wins: 0,
        },
        3 => ResetMode::Arbitrating {
            initiator: me,
            hop: 0,
            tier,
            wins: rng.gen_range(0..crate::protocol::ARBITRATION_WINS),
        },
        _ => {
            let (initiator, hop) = if rng.gen_bool(0.3) {
                (me, 0)
            } else if rng.gen_bool(0.5) || near.is_empty() {
                (pick(nbrs, rng), 1)
            } else {
                (pick(near, rng), 2)
            };
            let started = round.saturating_sub(rng.gen_range(0..10));
            if rng.gen_bool(0.5) {
                ResetMode::Resetting {
                    initiator,
                    hop,
                    started,
                }
            } else {
                ResetMode::Reassigning {
                    initiator,
                    hop,
                    started,
                }
            }
        }
    };
    r.mode = mode;
    r.grant_holder = match &r.mode {
        ResetMode::Idle | ResetMode::Scheduling { .. } => None,
        ResetMode::Arbitrating { initiator, .. }
        | ResetMode::Resetting { initiator, .. }
        | ResetMode::Reassigning { initiator, .. } => Some(*initiator),
    };
    r
}

fn random_arbitration(nbrs: &[NodeId], near: &[NodeId], rng: &mut ChaCha8Rng) -> ArbitrationView {
    let mut a = ArbitrationView::default();
    for &j in nbrs {
        if rng.gen_bool(0.2) {
            let mut v = [None; 3];
            for slot in v.iter_mut() {
                if rng.gen_bool(0.5) {
                    *slot = Some(ResetKey::pending(rng.gen_range(0..=1), pick(near, rng)));
                }
            }
            a.prev.insert(j, v);
        }
    }
    a
}

/// What happened to one scheduled event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub applied: bool,
    pub note: String,
}

impl Applied {
    fn ok() -> Self {
        Applied {
            applied: true,
            note: String::new(),
        }
    }

    fn skipped(note: String) -> Self {
        Applied { applied: false, note }
    }
}

/// Mixes the run seed into an event seed so that sweeping the run seed also
/// varies corruption.
pub fn event_rng(run_seed: u64, event_seed: u64, node: NodeId) -> ChaCha8Rng {
    let mixed = run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
        ^ event_seed.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (node.0 as u64).wrapping_mul(0xA24B_AED4_963E_E411);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Applies `e` to a simulation's topology and node states. References to
/// nodes that are gone, or ids that cannot be used, skip the event.
pub fn apply(
    e: &PerturbationEvent,
    t: &mut Topology,
    nodes: &mut BTreeMap<NodeId, SensorState>,
    config: ProtocolConfig,
    run_seed: u64,
    modes: ModeSet,
) -> Applied {
    let round = config.ctx(e.at_frame).round;
    match &e.kind {
        PerturbationKind::CorruptState { node, seed } => {
            if !t.contains(*node) {
                return Applied::skipped(format!("node {node} is not live"));
            }
            let mut rng = event_rng(run_seed, *seed, *node);
            let s = random_state(*node, config, t, round, modes, &mut rng);
            nodes.get_mut(node).expect("live node has state").perturb(s);
            Applied::ok()
        }
        PerturbationKind::CorruptAll { seed } => {
            let ids: Vec<NodeId> = t.nodes().collect();
            for u in ids {
                let mut rng = event_rng(run_seed, *seed, u);
                let s = random_state(u, config, t, round, modes, &mut rng);
                nodes.get_mut(&u).expect("live node has state").perturb(s);
            }
            Applied::ok()
        }
        PerturbationKind::Kill { node } => match t.remove_node(*node) {
            Ok(()) => {
                nodes.remove(node);
                Applied::ok()
            }
            Err(err) => Applied::skipped(err.to_string()),
        },
        PerturbationKind::Join { node, attach_to } => {
            if node.0 >= config.id_capacity {
                return Applied::skipped(format!("id {node} does not fit id_capacity {}", config.id_capacity));
            }
            if let Some(gone) = attach_to.iter().find(|a| !t.contains(**a)) {
                return Applied::skipped(format!("attach target {gone} is not live"));
            }
            let attach: BTreeSet<NodeId> = attach_to.iter().copied().collect();
            match t.add_node(*node, &attach) {
                Ok(()) => {
                    nodes.insert(*node, SensorState::joining(*node, config));
                    Applied::ok()
                }
                Err(err) => Applied::skipped(err.to_string()),
            }
        }
        PerturbationKind::ForceSlot { node, slot } => {
            if *slot >= config.period {
                return Applied::skipped(format!("slot {slot} outside period {}", config.period));
            }
            match nodes.get_mut(node) {
                Some(s) if t.contains(*node) => {
                    s.joined = true;
                    s.claim = SlotClaim::single(*slot);
                    s.epoch = s.epoch.wrapping_add(1);
                    Applied::ok()
                }
                _ => Applied::skipped(format!("node {node} is not live")),
            }
        }
    }
}
