//! Omniscient checks over global state: legitimacy, convergence, reset
//! exclusion and an exact distance-2 coloring oracle.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ResetMode, SensorState, Slot, SlotClaim};
use crate::topology::{NodeId, Topology};

/// Largest graph the coloring oracle will search exhaustively.
pub const ORACLE_BUDGET: usize = 12;

/// Read access to the parts of a node's state the legitimacy predicate needs.
pub trait NodeStateView {
    fn joined(&self) -> bool;
    fn claim(&self) -> &SlotClaim;
    fn mode(&self) -> &ResetMode;
    fn table_ids(&self) -> Vec<NodeId>;
    fn table_claim(&self, j: NodeId) -> Option<&SlotClaim>;
    fn digest_ids(&self, j: NodeId) -> Vec<NodeId>;
    fn digest_claim(&self, j: NodeId, k: NodeId) -> Option<&SlotClaim>;
}

impl NodeStateView for SensorState {
    fn joined(&self) -> bool {
        self.joined
    }
    fn claim(&self) -> &SlotClaim {
        &self.claim
    }
    fn mode(&self) -> &ResetMode {
        &self.reset.mode
    }
    fn table_ids(&self) -> Vec<NodeId> {
        self.table.keys().copied().collect()
    }
    fn table_claim(&self, j: NodeId) -> Option<&SlotClaim> {
        self.table.get(&j).map(|e| &e.report.claim)
    }
    fn digest_ids(&self, j: NodeId) -> Vec<NodeId> {
        self.table
            .get(&j)
            .map(|e| e.digest.keys().copied().collect())
            .unwrap_or_default()
    }
    fn digest_claim(&self, j: NodeId, k: NodeId) -> Option<&SlotClaim> {
        self.table.get(&j)?.digest.get(&k).map(|r| &r.claim)
    }
}

/// The checkable projection of one node's state, as written to traces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub joined: bool,
    pub claim: SlotClaim,
    pub mode: ResetMode,
    pub table: BTreeMap<NodeId, SlotClaim>,
    pub digest: BTreeMap<NodeId, BTreeMap<NodeId, SlotClaim>>,
}

impl From<&SensorState> for NodeSnapshot {
    fn from(s: &SensorState) -> Self {
        NodeSnapshot {
            joined: s.joined,
            claim: s.claim.clone(),
            mode: s.reset.mode.clone(),
            table: s.table.iter().map(|(j, e)| (*j, e.report.claim.clone())).collect(),
            digest: s
                .table
                .iter()
                .map(|(j, e)| {
                    let d = e.digest.iter().map(|(k, r)| (*k, r.claim.clone())).collect();
                    (*j, d)
                })
                .collect(),
        }
    }
}

impl NodeStateView for NodeSnapshot {
    fn joined(&self) -> bool {
        self.joined
    }
    fn claim(&self) -> &SlotClaim {
        &self.claim
    }
    fn mode(&self) -> &ResetMode {
        &self.mode
    }
    fn table_ids(&self) -> Vec<NodeId> {
        self.table.keys().copied().collect()
    }
    fn table_claim(&self, j: NodeId) -> Option<&SlotClaim> {
        self.table.get(&j)
    }
    fn digest_ids(&self, j: NodeId) -> Vec<NodeId> {
        self.digest
            .get(&j)
            .map(|d| d.keys().copied().collect())
            .unwrap_or_default()
    }
    fn digest_claim(&self, j: NodeId, k: NodeId) -> Option<&SlotClaim> {
        self.digest.get(&j)?.get(&k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Overlap { u: NodeId, v: NodeId, slot: Slot },
    Unjoined { u: NodeId },
    ActiveReset { u: NodeId, initiator: NodeId },
    StaleTable { u: NodeId, j: NodeId },
    MissingState { u: NodeId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegitimacyReport {
    pub frame: u64,
    pub legitimate: bool,
    pub violations: Vec<Violation>,
}

/// Distance-2 neighborhoods of every node, reusable while the topology is
/// unchanged.
#[derive(Clone, Debug, Default)]
pub struct Neighborhoods {
    version: Option<u64>,
    d2: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Neighborhoods {
    pub fn of(t: &Topology) -> Self {
        let mut n = Neighborhoods::default();
        n.refresh(t);
        n
    }

    pub fn refresh(&mut self, t: &Topology) {
        if self.version == Some(t.version()) && self.d2.len() == t.len() {
            return;
        }
        self.d2 = t
            .nodes()
            .map(|u| (u, t.distance_neighborhood(u, 2).expect("live node")))
            .collect();
        self.version = Some(t.version());
    }

    pub fn within2(&self, u: NodeId) -> &BTreeSet<NodeId> {
        &self.d2[&u]
    }
}

/// Legitimacy at a frame boundary: (a) claims disjoint within distance 2,
/// (b) every node joined with a primary slot, (c) no reset activity, (d)
/// every table and digest lists exactly the current neighbors and records
/// claims that the actual claims cover.
pub fn check_legitimacy<S: NodeStateView>(frame: u64, t: &Topology, states: &BTreeMap<NodeId, S>) -> LegitimacyReport {
    check_with(frame, t, &Neighborhoods::of(t), states)
}

pub fn check_with<S: NodeStateView>(
    frame: u64,
    t: &Topology,
    hoods: &Neighborhoods,
    states: &BTreeMap<NodeId, S>,
) -> LegitimacyReport {
    let mut violations = Vec::new();
    for u in t.nodes() {
        let Some(su) = states.get(&u) else {
            violations.push(Violation::MissingState { u });
            continue;
        };
        for &v in hoods.within2(u).range(u..) {
            if v == u {
                continue;
            }
            if let Some(sv) = states.get(&v) {
                let shared = su.claim().slots().into_iter().find(|s| sv.claim().contains(*s));
                if let Some(slot) = shared {
                    violations.push(Violation::Overlap { u, v, slot });
                }
            }
        }
        if !su.joined() || su.claim().primary.is_none() {
            violations.push(Violation::Unjoined { u });
        }
        match su.mode() {
            ResetMode::Idle => {}
            ResetMode::Scheduling { .. } => violations.push(Violation::ActiveReset { u, initiator: u }),
            ResetMode::Arbitrating { initiator, .. }
            | ResetMode::Resetting { initiator, .. }
            | ResetMode::Reassigning { initiator, .. } => violations.push(Violation::ActiveReset {
                u,
                initiator: *initiator,
            }),
        }
        let nbrs = t.neighbors(u).expect("live node");
        let mut stale: BTreeSet<NodeId> = su.table_ids().into_iter().filter(|j| !nbrs.contains(j)).collect();
        for &j in nbrs {
            let fresh = match (su.table_claim(j), states.get(&j)) {
                (Some(c), Some(sj)) => sj.claim().covers(c) && digest_fresh(t, su, j, states),
                _ => false,
            };
            if !fresh {
                stale.insert(j);
            }
        }
        violations.extend(stale.into_iter().map(|j| Violation::StaleTable { u, j }));
    }
    LegitimacyReport {
        frame,
        legitimate: violations.is_empty(),
        violations,
    }
}

fn digest_fresh<S: NodeStateView>(t: &Topology, su: &S, j: NodeId, states: &BTreeMap<NodeId, S>) -> bool {
    let Ok(nj) = t.neighbors(j) else {
        return false;
    };
    let ids = su.digest_ids(j);
    ids.len() == nj.len()
        && ids.iter().all(|k| {
            nj.contains(k)
                && match (su.digest_claim(j, *k), states.get(k)) {
                    (Some(c), Some(sk)) => sk.claim().covers(c),
                    _ => false,
                }
        })
}

/// Smallest boundary `F` such that every boundary from `F` on is legitimate
/// and no collision happens in frames `F` and later. `legit[f]` is the
/// verdict at the boundary before frame `f`.
pub fn convergence_frame(legit: &[bool], collision_frames: &BTreeSet<u64>) -> Option<u64> {
    let mut f = legit.len();
    while f > 0 && legit[f - 1] {
        f -= 1;
    }
    if f == legit.len() {
        return None;
    }
    let mut f = f as u64;
    if let Some(&last) = collision_frames.iter().next_back() {
        if last >= f {
            f = last + 1;
        }
    }
    (f < legit.len() as u64).then_some(f)
}

/// Pairs of distinct active reset initiators within distance 3 of each other.
/// `active` maps each node in a reset to its initiator.
pub fn exclusion_violations(t: &Topology, active: &BTreeMap<NodeId, NodeId>) -> Vec<(NodeId, NodeId, usize)> {
    let initiators: BTreeSet<NodeId> = active.values().copied().collect();
    let mut out = Vec::new();
    for &a in &initiators {
        for &b in initiators.range(a..).skip(1) {
            if let Some(d) = t.distance(a, b) {
                if d <= 3 {
                    out.push((a, b, d));
                }
            }
        }
    }
    out
}

/// Nodes currently in a reset, mapped to the initiator they follow.
pub fn active_resets<'a, S: NodeStateView + 'a>(
    states: impl IntoIterator<Item = (&'a NodeId, &'a S)>,
) -> BTreeMap<NodeId, NodeId> {
    states
        .into_iter()
        .filter_map(|(u, s)| match s.mode() {
            ResetMode::Resetting { initiator, .. } | ResetMode::Reassigning { initiator, .. } => Some((*u, *initiator)),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionViolation {
    pub frame: u64,
    pub slot: Option<u32>,
    pub a: NodeId,
    pub b: NodeId,
    pub distance: usize,
}

/// Reset-exclusion monitor over a sequence of samples. Each sample carries the
/// topology in force and the active reset map at that instant.
pub fn monitor_reset_exclusion<'a>(
    samples: impl IntoIterator<Item = (u64, Option<u32>, &'a Topology, &'a BTreeMap<NodeId, NodeId>)>,
) -> Vec<ExclusionViolation> {
    let mut out = Vec::new();
    for (frame, slot, t, active) in samples {
        for (a, b, distance) in exclusion_violations(t, active) {
            out.push(ExclusionViolation {
                frame,
                slot,
                a,
                b,
                distance,
            });
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("oracle budget exceeded: {0} nodes > {ORACLE_BUDGET}")]
    BudgetExceeded(usize),
}

/// Exact distance-2 chromatic number and one witness coloring, by
/// backtracking over increasing color counts.
pub fn oracle_distance2_coloring(t: &Topology) -> Result<(usize, BTreeMap<NodeId, usize>), OracleError> {
    if t.len() > ORACLE_BUDGET {
        return Err(OracleError::BudgetExceeded(t.len()));
    }
    if t.is_empty() {
        return Ok((0, BTreeMap::new()));
    }
    let ids: Vec<NodeId> = t.nodes().collect();
    let idx: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let conflicts: Vec<Vec<usize>> = ids
        .iter()
        .map(|u| {
            t.distance_neighborhood(*u, 2)
                .expect("live node")
                .iter()
                .map(|v| idx[v])
                .collect()
        })
        .collect();
    // Most-constrained nodes first keeps the search small.
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(conflicts[i].len()));
    for k in 1..=ids.len() {
        let mut colors = vec![usize::MAX; ids.len()];
        if color(&order, 0, k, &conflicts, &mut colors) {
            let witness = ids.iter().zip(colors).map(|(u, c)| (*u, c)).collect();
            return Ok((k, witness));
        }
    }
    unreachable!("n colors always suffice")
}

fn color(order: &[usize], pos: usize, k: usize, conflicts: &[Vec<usize>], colors: &mut [usize]) -> bool {
    let Some(&u) = order.get(pos) else {
        return true;
    };
    // Symmetry breaking: never open more than one new color at a time.
    let used = order[..pos].iter().map(|&v| colors[v] + 1).max().unwrap_or(0);
    for c in 0..k.min(used + 1) {
        if conflicts[u].iter().all(|&v| colors[v] != c) {
            colors[u] = c;
            if color(order, pos + 1, k, conflicts, colors) {
                return true;
            }
        }
    }
    colors[u] = usize::MAX;
    false
}

/// True iff no two nodes within distance 2 share a slot.
pub fn is_distance2_coloring(t: &Topology, claims: &BTreeMap<NodeId, SlotClaim>) -> bool {
    t.nodes().all(|u| {
        let Some(cu) = claims.get(&u) else {
            return false;
        };
        t.distance_neighborhood(u, 2)
            .expect("live node")
            .iter()
            .all(|v| claims.get(v).is_none_or(|cv| !cu.intersects(cv)))
    })
}

/// Run summary, as written by `run` and recomputed by offline verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub converged_at: Option<u64>,
    pub violations: Vec<SummaryViolation>,
    pub chi2: Option<usize>,
    pub frames: u64,
    pub collisions: u64,
    pub resets: u64,
    pub slots_per_node: f64,
    /// Frames from the last perturbation to convergence.
    pub recovery: Option<u64>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryViolation {
    Exclusion(ExclusionViolation),
    Scope {
        frame: u64,
        node: NodeId,
        initiator: NodeId,
    },
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Recomputes a summary from a JSON-lines trace alone. Claim-change scope is
/// not recoverable from snapshots and is only checked online.
pub fn verify_trace(reader: impl std::io::BufRead) -> Result<Summary, VerifyError> {
    use crate::trace::{parse_line, Line, Record};

    let mut config = None;
    let mut topology = Topology::new();
    let mut hoods = Neighborhoods::of(&topology);
    let mut legit = Vec::new();
    let mut collisions = 0;
    let mut collision_frames = BTreeSet::new();
    let mut violations = Vec::new();
    let mut initiators = BTreeSet::new();
    let mut resets = 0;
    let mut last: Option<BTreeMap<NodeId, NodeSnapshot>> = None;
    let mut last_perturbation = None;
    let mut aborted = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&line).map_err(|e| VerifyError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        match parsed {
            Line::Event(ev) => {
                let normal = config.is_none_or(|c: crate::protocol::ProtocolConfig| {
                    c.frame_kind(ev.frame) == crate::protocol::FrameKind::Normal
                });
                if ev.outcome == "collision" && normal {
                    collisions += 1;
                    collision_frames.insert(ev.frame);
                }
            }
            Line::Record(rec) => match *rec {
                Record::Header { protocol, .. } => config = Some(protocol),
                Record::Topology { nodes, edges, .. } => {
                    topology = Topology::from_edges(nodes, edges).map_err(|e| VerifyError::Parse {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                    hoods = Neighborhoods::of(&topology);
                }
                Record::Snapshot { frame, nodes } => {
                    legit.push(check_with(frame, &topology, &hoods, &nodes).legitimate);
                    last = Some(nodes);
                }
                Record::Resets { frame, slot, active } => {
                    for (a, b, distance) in exclusion_violations(&topology, &active) {
                        violations.push(SummaryViolation::Exclusion(ExclusionViolation {
                            frame,
                            slot,
                            a,
                            b,
                            distance,
                        }));
                    }
                    let now: BTreeSet<NodeId> = active.values().copied().collect();
                    resets += now.difference(&initiators).count() as u64;
                    initiators = now;
                }
                Record::Perturbation { frame, .. } => last_perturbation = Some(frame),
                Record::Abort { reason, .. } => aborted = Some(reason),
                Record::Tx { .. } => {}
            },
        }
    }
    let converged_at = convergence_frame(&legit, &collision_frames);
    let slots_per_node = match &last {
        Some(nodes) if !nodes.is_empty() => {
            nodes.values().map(|s| s.claim.len()).sum::<usize>() as f64 / nodes.len() as f64
        }
        _ => 0.0,
    };
    Ok(Summary {
        converged_at,
        violations,
        chi2: oracle_distance2_coloring(&topology).ok().map(|c| c.0),
        frames: legit.len().saturating_sub(1) as u64,
        collisions,
        resets,
        slots_per_node,
        recovery: match (converged_at, last_perturbation) {
            (Some(c), Some(p)) => Some(c.saturating_sub(p)),
            _ => None,
        },
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{grid, path, star};

    fn snap(claim: SlotClaim) -> NodeSnapshot {
        NodeSnapshot {
            joined: true,
            claim,
            mode: ResetMode::Idle,
            table: BTreeMap::new(),
            digest: BTreeMap::new(),
        }
    }

    /// Snapshots with perfectly informed tables.
    fn informed(t: &Topology, slots: &[Slot]) -> BTreeMap<NodeId, NodeSnapshot> {
        let claims: BTreeMap<NodeId, SlotClaim> =
            t.nodes().zip(slots).map(|(u, s)| (u, SlotClaim::single(*s))).collect();
        t.nodes()
            .map(|u| {
                let mut s = snap(claims[&u].clone());
                for &j in t.neighbors(u).unwrap() {
                    s.table.insert(j, claims[&j].clone());
                    let d = t
                        .neighbors(j)
                        .unwrap()
                        .iter()
                        .map(|k| (*k, claims[k].clone()))
                        .collect();
                    s.digest.insert(j, d);
                }
                (u, s)
            })
            .collect()
    }

    #[test]
    fn disjoint_idle_is_legitimate() {
        let t = path(3);
        let r = check_legitimacy(0, &t, &informed(&t, &[0, 1, 2]));
        assert!(r.legitimate, "{:?}", r.violations);
    }

    #[test]
    fn distance_two_overlap_reported() {
        let t = path(3);
        let r = check_legitimacy(0, &t, &informed(&t, &[5, 1, 5]));
        assert!(r.violations.contains(&Violation::Overlap {
            u: NodeId(0),
            v: NodeId(2),
            slot: 5
        }));
    }

    #[test]
    fn resetting_node_is_not_legitimate() {
        let t = path(3);
        let mut s = informed(&t, &[0, 1, 2]);
        s.get_mut(&NodeId(1)).unwrap().mode = ResetMode::Resetting {
            initiator: NodeId(0),
            hop: 1,
            started: 0,
        };
        let r = check_legitimacy(0, &t, &s);
        assert_eq!(
            r.violations,
            [Violation::ActiveReset {
                u: NodeId(1),
                initiator: NodeId(0)
            }]
        );
    }

    #[test]
    fn stale_table_detected() {
        let t = path(3);
        let mut s = informed(&t, &[0, 1, 2]);
        s.get_mut(&NodeId(0))
            .unwrap()
            .table
            .insert(NodeId(1), SlotClaim::single(3));
        s.get_mut(&NodeId(2))
            .unwrap()
            .table
            .insert(NodeId(7), SlotClaim::single(3));
        let r = check_legitimacy(0, &t, &s);
        assert_eq!(
            r.violations,
            [
                Violation::StaleTable {
                    u: NodeId(0),
                    j: NodeId(1)
                },
                Violation::StaleTable {
                    u: NodeId(2),
                    j: NodeId(7)
                },
            ]
        );
    }

    #[test]
    fn convergence_from_suffix() {
        let none = BTreeSet::new();
        assert_eq!(convergence_frame(&[true, true, true], &none), Some(0));
        assert_eq!(convergence_frame(&[true, false, true, true], &none), Some(2));
        assert_eq!(convergence_frame(&[true, true, false], &none), None);
        assert_eq!(
            convergence_frame(&[false, true, true, true], &BTreeSet::from([1])),
            Some(2)
        );
    }

    #[test]
    fn oracle_known_values() {
        assert_eq!(oracle_distance2_coloring(&star(4)).unwrap().0, 5);
        assert_eq!(oracle_distance2_coloring(&path(3)).unwrap().0, 3);
        assert_eq!(oracle_distance2_coloring(&path(1)).unwrap().0, 1);
        let (k, w) = oracle_distance2_coloring(&grid(3, 3)).unwrap();
        let claims = w.iter().map(|(u, c)| (*u, SlotClaim::single(*c as Slot))).collect();
        assert!(is_distance2_coloring(&grid(3, 3), &claims));
        // The plus shape around the center is a 5-clique in the square graph.
        assert!(k >= 5);
        assert_eq!(
            oracle_distance2_coloring(&grid(4, 4)),
            Err(OracleError::BudgetExceeded(16))
        );
    }

    #[test]
    fn exclusion_pairs() {
        let t = path(6);
        let active = BTreeMap::from([(NodeId(0), NodeId(0)), (NodeId(1), NodeId(0)), (NodeId(4), NodeId(4))]);
        assert!(exclusion_violations(&t, &active).is_empty());
        let active = BTreeMap::from([(NodeId(0), NodeId(0)), (NodeId(3), NodeId(3))]);
        assert_eq!(exclusion_violations(&t, &active), [(NodeId(0), NodeId(3), 3)]);
    }
}
