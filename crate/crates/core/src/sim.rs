//! Single-threaded simulation loop: sensors over the kernel, with
//! perturbations at frame boundaries and online monitors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::injector::{self, ModeSet, PerturbationEvent, PerturbationKind};
use crate::kernel::{Kernel, Outcome, SlotIndex};
use crate::protocol::{
    reassign_slots, ChangeCause, ConfigError, FrameKind, NeighborEntry, Note, Packet, Phase, ProtocolConfig, Report,
    SensorState, SlotClaim,
};
use crate::topology::{NodeId, Topology};
use crate::trace::{NullSink, Record, TraceSink};
use crate::verifier::{
    active_resets, check_with, convergence_frame, exclusion_violations, oracle_distance2_coloring, ExclusionViolation,
    Neighborhoods, NodeSnapshot, Summary, SummaryViolation,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trace i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Start {
    /// Greedy coloring with fully informed tables.
    #[default]
    Legitimate,
    /// Every node starts unjoined.
    Joining,
}

#[derive(Clone, Debug)]
pub struct SimSetup {
    pub topology: Topology,
    pub config: ProtocolConfig,
    pub seed: u64,
    pub frames: u64,
    pub perturbations: Vec<PerturbationEvent>,
    pub modes: ModeSet,
    pub start: Start,
    /// Write per-frame snapshot records when tracing.
    pub snapshots: bool,
}

impl SimSetup {
    pub fn new(topology: Topology, config: ProtocolConfig, seed: u64, frames: u64) -> Self {
        SimSetup {
            topology,
            config,
            seed,
            frames,
            perturbations: Vec::new(),
            modes: ModeSet::default(),
            start: Start::default(),
            snapshots: true,
        }
    }

    pub fn with(mut self, e: PerturbationEvent) -> Self {
        self.perturbations.push(e);
        self
    }
}

/// Checks the configuration against the topology it will run on.
pub fn validate(t: &Topology, config: &ProtocolConfig, perturbations: &[PerturbationEvent]) -> Result<(), ConfigError> {
    config.validate()?;
    let required = t.greedy_period_bound();
    if (config.period as usize) < required {
        return Err(ConfigError::PeriodTooSmall {
            period: config.period as usize,
            required,
        });
    }
    let joined = perturbations.iter().filter_map(|e| match &e.kind {
        PerturbationKind::Join { node, .. } => Some(*node),
        _ => None,
    });
    if let Some(id) = t.nodes().chain(joined).max() {
        if id.0 >= config.id_capacity {
            return Err(ConfigError::IdCapacity {
                id,
                capacity: config.id_capacity,
            });
        }
    }
    Ok(())
}

/// Greedy distance-2 coloring in id order, with every table and digest
/// matching the actual claims.
pub fn legitimate_start(t: &Topology, config: ProtocolConfig) -> Result<BTreeMap<NodeId, SensorState>, ConfigError> {
    let all: BTreeSet<NodeId> = t.nodes().collect();
    let slots = reassign_slots(t, &all, &BTreeMap::new(), config.period).map_err(|_| ConfigError::PeriodTooSmall {
        period: config.period as usize,
        required: t.greedy_period_bound(),
    })?;
    let report = |u: &NodeId| Report {
        claim: SlotClaim::single(slots[u]),
        phase: Phase::Active,
        epoch: 0,
        free: Vec::new(),
    };
    Ok(t.nodes()
        .map(|u| {
            let mut s = SensorState::joined_with(u, config, SlotClaim::single(slots[&u]));
            for j in t.neighbors(u).expect("live node") {
                let mut e = NeighborEntry::new(report(j));
                e.digest = t
                    .neighbors(*j)
                    .expect("live node")
                    .iter()
                    .map(|k| (*k, report(k)))
                    .collect();
                s.table.insert(*j, e);
            }
            (u, s)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClaimChange {
    /// Frame from which the new claim is in force.
    pub frame: u64,
    pub node: NodeId,
    pub cause: ChangeCause,
    pub claim: SlotClaim,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResetSpan {
    pub initiator: NodeId,
    pub started: u64,
    pub released: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScopeViolation {
    pub frame: u64,
    pub node: NodeId,
    pub initiator: NodeId,
}

/// Everything the monitors saw during a run.
#[derive(Clone, Debug, Default)]
pub struct Observations {
    /// Legitimacy at the boundary before each frame, plus the final state.
    pub legit: Vec<bool>,
    pub collision_frames: BTreeSet<u64>,
    pub collisions: u64,
    pub exclusion: Vec<ExclusionViolation>,
    pub scope: Vec<ScopeViolation>,
    pub claim_changes: Vec<ClaimChange>,
    pub resets: Vec<ResetSpan>,
    /// Times an initiator appeared in the active reset map.
    pub reset_activations: u64,
    pub scheduled: u64,
    pub abandoned: u64,
    /// `(frame, observer, purged)`.
    pub purges: Vec<(u64, NodeId, NodeId)>,
    /// Distinct initiators active at the same instant, with their distance.
    pub concurrent: BTreeSet<(NodeId, NodeId, Option<usize>)>,
    pub perturbations: Vec<(u64, bool, String)>,
    pub aborted: Option<String>,
}

pub struct Simulation {
    pub topology: Topology,
    pub config: ProtocolConfig,
    pub nodes: BTreeMap<NodeId, SensorState>,
    pub obs: Observations,
    kernel: Kernel,
    frame: u64,
    frames: u64,
    seed: u64,
    modes: ModeSet,
    snapshots: bool,
    pending: VecDeque<PerturbationEvent>,
    hoods: Neighborhoods,
    active: BTreeMap<NodeId, NodeId>,
    sink: Box<dyn TraceSink>,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Result<Self, SimError> {
        Self::with_sink(setup, Box::new(NullSink))
    }

    pub fn with_sink(setup: SimSetup, sink: Box<dyn TraceSink>) -> Result<Self, SimError> {
        validate(&setup.topology, &setup.config, &setup.perturbations)?;
        let nodes = match setup.start {
            Start::Legitimate => legitimate_start(&setup.topology, setup.config)?,
            Start::Joining => setup
                .topology
                .nodes()
                .map(|u| (u, SensorState::joining(u, setup.config)))
                .collect(),
        };
        let mut pending = setup.perturbations;
        pending.sort_by_key(|e| e.at_frame);
        let mut sim = Simulation {
            hoods: Neighborhoods::of(&setup.topology),
            topology: setup.topology,
            config: setup.config,
            nodes,
            obs: Observations::default(),
            kernel: Kernel::new(),
            frame: 0,
            frames: setup.frames,
            seed: setup.seed,
            modes: setup.modes,
            snapshots: setup.snapshots,
            pending: pending.into(),
            active: BTreeMap::new(),
            sink,
        };
        let header = Record::Header {
            protocol: sim.config,
            seed: setup.seed,
            frames: setup.frames,
        };
        sim.emit(|| header)?;
        let t = Record::topology(0, &sim.topology);
        sim.emit(|| t)?;
        Ok(sim)
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    fn emit(&mut self, rec: impl FnOnce() -> Record) -> io::Result<()> {
        if self.sink.enabled() {
            let line = serde_json::to_string(&rec()).expect("records serialize");
            self.sink.write_line(&line)?;
        }
        Ok(())
    }

    /// Runs all remaining frames, records the final boundary and closes the
    /// trace.
    pub fn run(&mut self) -> Result<(), SimError> {
        while self.frame < self.frames && self.obs.aborted.is_none() {
            self.step_frame()?;
        }
        self.finish()
    }

    /// Runs `n` more frames without closing the trace.
    pub fn advance(&mut self, n: u64) -> Result<(), SimError> {
        for _ in 0..n {
            if self.obs.aborted.is_some() {
                break;
            }
            self.step_frame()?;
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<(), SimError> {
        if self.obs.aborted.is_none() {
            self.boundary()?;
        }
        self.sink.finish()?;
        Ok(())
    }

    /// Appends a perturbation to the schedule.
    pub fn schedule(&mut self, e: PerturbationEvent) {
        let at = self.pending.partition_point(|p| p.at_frame <= e.at_frame);
        self.pending.insert(at, e);
    }

    fn boundary(&mut self) -> io::Result<()> {
        let f = self.frame;
        let report = check_with(f, &self.topology, &self.hoods, &self.nodes);
        self.obs.legit.push(report.legitimate);
        if self.snapshots && self.sink.enabled() {
            let nodes = self.nodes.iter().map(|(u, s)| (*u, NodeSnapshot::from(s))).collect();
            self.emit(|| Record::Snapshot { frame: f, nodes })?;
        }
        Ok(())
    }

    pub fn step_frame(&mut self) -> Result<(), SimError> {
        let f = self.frame;
        self.apply_perturbations()?;
        self.boundary()?;

        let ctx = self.config.ctx(f);
        let len = self.config.frame_len(ctx.kind);
        for slot in 0..len {
            let mut tx: BTreeMap<NodeId, Arc<Packet>> = BTreeMap::new();
            for (u, s) in self.nodes.iter_mut() {
                if let Some(p) = s.decide(ctx, slot) {
                    tx.insert(*u, Arc::new(p));
                }
            }
            if self.sink.enabled() {
                for (u, p) in &tx {
                    let rec = Record::Tx {
                        frame: f,
                        slot,
                        tx: *u,
                        msgs: p.0.clone(),
                    };
                    self.emit(|| rec)?;
                }
            }
            let events = match self.kernel.step(&self.topology, &tx, SlotIndex::new(f, slot)) {
                Ok(ev) => ev,
                Err(e) => return self.abort(e.to_string()),
            };
            for ev in &events {
                if self.sink.enabled() {
                    let line = serde_json::to_string(&ev.record()).expect("records serialize");
                    self.sink.write_line(&line)?;
                }
                match &ev.outcome {
                    Outcome::Delivered(p) => {
                        if let Some(s) = self.nodes.get_mut(&ev.receiver) {
                            s.observe(ctx, slot, Some((p.sender, &p.body)));
                        }
                    }
                    Outcome::Collision => {
                        if ctx.kind == FrameKind::Normal {
                            self.obs.collisions += 1;
                            self.obs.collision_frames.insert(f);
                        }
                    }
                    Outcome::Silence => {}
                }
            }
            if ctx.kind == FrameKind::Recovery {
                self.after_change(f, Some(slot))?;
            }
        }

        let mut failure = None;
        for s in self.nodes.values_mut() {
            if let Err(e) = s.end_frame(ctx) {
                failure.get_or_insert(e);
            }
        }
        self.frame += 1;
        if let Some(e) = failure {
            return self.abort(e.to_string());
        }
        self.after_change(f + 1, None)?;
        Ok(())
    }

    fn abort(&mut self, reason: String) -> Result<(), SimError> {
        let frame = self.frame;
        let r = reason.clone();
        self.emit(|| Record::Abort { frame, reason: r })?;
        self.obs.aborted = Some(reason);
        Ok(())
    }

    fn apply_perturbations(&mut self) -> io::Result<()> {
        let f = self.frame;
        let mut mutated = false;
        while self.pending.front().is_some_and(|e| e.at_frame <= f) {
            let e = self.pending.pop_front().expect("checked");
            let before = self.topology.version();
            let r = injector::apply(
                &e,
                &mut self.topology,
                &mut self.nodes,
                self.config,
                self.seed,
                self.modes,
            );
            mutated |= self.topology.version() != before;
            self.obs.perturbations.push((f, r.applied, r.note.clone()));
            self.emit(|| Record::Perturbation {
                frame: f,
                event: e,
                applied: r.applied,
                note: r.note,
            })?;
        }
        if mutated {
            self.hoods.refresh(&self.topology);
            let t = Record::topology(f, &self.topology);
            self.emit(|| t)?;
        }
        // Drop notes produced by replaced states and re-sample resets.
        for s in self.nodes.values_mut() {
            s.drain_notes();
        }
        self.sample_resets(f, None)
    }

    /// Collects notes and re-samples the active reset map.
    fn after_change(&mut self, frame: u64, slot: Option<u32>) -> io::Result<()> {
        for (u, s) in self.nodes.iter_mut() {
            for note in s.drain_notes() {
                match note {
                    Note::ClaimChanged(cause) => {
                        if let ChangeCause::Reset(i) = cause {
                            let near = *u == i || self.topology.within(i, *u, 2);
                            if !near {
                                self.obs.scope.push(ScopeViolation {
                                    frame,
                                    node: *u,
                                    initiator: i,
                                });
                            }
                        }
                        self.obs.claim_changes.push(ClaimChange {
                            frame,
                            node: *u,
                            cause,
                            claim: s.claim.clone(),
                        });
                    }
                    Note::ResetStarted => self.obs.resets.push(ResetSpan {
                        initiator: *u,
                        started: frame,
                        released: None,
                    }),
                    Note::ResetReleased => {
                        if let Some(span) = self
                            .obs
                            .resets
                            .iter_mut()
                            .rev()
                            .find(|r| r.initiator == *u && r.released.is_none())
                        {
                            span.released = Some(frame);
                        }
                    }
                    Note::ResetScheduled { .. } => self.obs.scheduled += 1,
                    Note::ResetAbandoned => self.obs.abandoned += 1,
                    Note::Purged(j) => self.obs.purges.push((frame, *u, j)),
                    Note::Joined => {}
                }
            }
        }
        self.sample_resets(frame, slot)
    }

    fn sample_resets(&mut self, frame: u64, slot: Option<u32>) -> io::Result<()> {
        let active = active_resets(&self.nodes);
        if active == self.active {
            return Ok(());
        }
        let before: BTreeSet<NodeId> = self.active.values().copied().collect();
        let now: BTreeSet<NodeId> = active.values().copied().collect();
        self.obs.reset_activations += now.difference(&before).count() as u64;
        for (a, b, distance) in exclusion_violations(&self.topology, &active) {
            self.obs.exclusion.push(ExclusionViolation {
                frame,
                slot,
                a,
                b,
                distance,
            });
        }
        for &a in &now {
            for &b in now.range(a..).skip(1) {
                self.obs.concurrent.insert((a, b, self.topology.distance(a, b)));
            }
        }
        self.active = active.clone();
        self.emit(|| Record::Resets { frame, slot, active })
    }

    pub fn convergence(&self) -> Option<u64> {
        convergence_frame(&self.obs.legit, &self.obs.collision_frames)
    }

    /// Mean number of slots held per live node.
    pub fn slots_per_node(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        self.nodes.values().map(|s| s.claim.len()).sum::<usize>() as f64 / self.nodes.len() as f64
    }

    pub fn claims(&self) -> BTreeMap<NodeId, SlotClaim> {
        self.nodes.iter().map(|(u, s)| (*u, s.claim.clone())).collect()
    }

    pub fn summary(&self) -> Summary {
        let mut violations: Vec<SummaryViolation> = self
            .obs
            .exclusion
            .iter()
            .cloned()
            .map(SummaryViolation::Exclusion)
            .collect();
        violations.extend(self.obs.scope.iter().map(|v| SummaryViolation::Scope {
            frame: v.frame,
            node: v.node,
            initiator: v.initiator,
        }));
        let converged_at = self.convergence();
        let last_perturbation = self.obs.perturbations.iter().map(|p| p.0).max();
        Summary {
            converged_at,
            violations,
            chi2: oracle_distance2_coloring(&self.topology).ok().map(|c| c.0),
            frames: self.frame,
            collisions: self.obs.collisions,
            resets: self.obs.reset_activations,
            slots_per_node: self.slots_per_node(),
            recovery: match (converged_at, last_perturbation) {
                (Some(c), Some(p)) => Some(c.saturating_sub(p)),
                _ => None,
            },
            aborted: self.obs.aborted.clone(),
        }
    }
}
