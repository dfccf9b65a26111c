use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::message::{Message, Packet, Report, ResetKey};
use super::reassign::smallest_free;
use super::{
    FrameCtx, FrameKind, Phase, ProtocolConfig, ProtocolError, Slot, SlotClaim, ARBITRATION_WINS, ASSIGN_DELAY,
    RESET_TIMEOUT,
};
use crate::topology::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ResetMode {
    Idle,
    /// Evidence seen; the request goes out in the next recovery frame.
    Scheduling {
        tier: u8,
    },
    /// `initiator == me` while our own request is being arbitrated.
    Arbitrating {
        initiator: NodeId,
        hop: u8,
        tier: u8,
        wins: u32,
    },
    /// Claim cleared for `initiator`'s reset. `hop` is our distance to it and
    /// `started` the recovery round in which it entered its reset.
    Resetting {
        initiator: NodeId,
        hop: u8,
        started: u64,
    },
    Reassigning {
        initiator: NodeId,
        hop: u8,
        started: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetState {
    #[serde(flatten)]
    pub mode: ResetMode,
    pub grant_holder: Option<NodeId>,
}

impl Default for ResetState {
    fn default() -> Self {
        ResetState {
            mode: ResetMode::Idle,
            grant_holder: None,
        }
    }
}

impl ResetState {
    fn set(&mut self, mode: ResetMode) {
        self.grant_holder = match &mode {
            ResetMode::Idle | ResetMode::Scheduling { .. } => None,
            ResetMode::Arbitrating { initiator, .. }
            | ResetMode::Resetting { initiator, .. }
            | ResetMode::Reassigning { initiator, .. } => Some(*initiator),
        };
        self.mode = mode;
    }

    /// Initiator of the reset we are executing or participating in.
    pub fn active_initiator(&self) -> Option<NodeId> {
        match self.mode {
            ResetMode::Resetting { initiator, .. } | ResetMode::Reassigning { initiator, .. } => Some(initiator),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub report: Report,
    /// The neighbor's own neighbor reports, as last delivered.
    pub digest: BTreeMap<NodeId, Report>,
    /// Frames since the last delivery of any kind.
    pub freshness: u32,
    /// Consecutive normal frames without a delivery in the neighbor's slots.
    pub missed_in_claimed: u32,
    #[serde(default)]
    pub heard: bool,
    #[serde(default)]
    pub delivered_in_claimed: bool,
    #[serde(default)]
    pub beacon_seen: bool,
}

impl NeighborEntry {
    pub fn new(report: Report) -> Self {
        NeighborEntry {
            report,
            digest: BTreeMap::new(),
            freshness: 0,
            missed_in_claimed: 0,
            heard: false,
            delivered_in_claimed: false,
            beacon_seen: false,
        }
    }
}

/// Per-neighbor reset relay vectors: index `h` is the best request the
/// neighbor knows within `h` hops of itself.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbitrationView {
    pub prev: BTreeMap<NodeId, [Option<ResetKey>; 3]>,
    pub received: BTreeMap<NodeId, [Option<ResetKey>; 3]>,
    pub sent_own: Option<ResetKey>,
    /// Best request within three hops after the last recovery frame.
    pub last_best: Option<ResetKey>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinProgress {
    pub listened: u32,
    pub recovery_heard: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub malformed: u64,
    pub foreign_clear: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChangeCause {
    Reset(NodeId),
    Bandwidth,
    Yield,
    Join,
    Rejoin,
}

/// Side-channel facts for monitors. Never read by the protocol itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Note {
    ClaimChanged(ChangeCause),
    ResetScheduled { tier: u8 },
    ResetAbandoned,
    ResetStarted,
    ResetReleased,
    Purged(NodeId),
    Joined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorState {
    pub me: NodeId,
    pub config: ProtocolConfig,
    pub claim: SlotClaim,
    pub joined: bool,
    pub epoch: u32,
    pub table: BTreeMap<NodeId, NeighborEntry>,
    pub reset: ResetState,
    pub arbitration: ArbitrationView,
    pub join: JoinProgress,
    pub stable_frames: u32,
    pub outbox: Vec<Message>,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    notes: Vec<Note>,
}

/// One node's best-known report, merged over direct and relayed sources.
struct ViewEntry<'a> {
    report: &'a Report,
}

impl SensorState {
    /// A node that has not joined yet; it listens before asking for a slot.
    pub fn joining(me: NodeId, config: ProtocolConfig) -> Self {
        SensorState {
            me,
            config,
            claim: SlotClaim::default(),
            joined: false,
            epoch: 0,
            table: BTreeMap::new(),
            reset: ResetState::default(),
            arbitration: ArbitrationView::default(),
            join: JoinProgress::default(),
            stable_frames: 0,
            outbox: Vec::new(),
            diagnostics: Diagnostics::default(),
            notes: Vec::new(),
        }
    }

    pub fn joined_with(me: NodeId, config: ProtocolConfig, claim: SlotClaim) -> Self {
        SensorState {
            claim,
            joined: true,
            ..Self::joining(me, config)
        }
    }

    pub fn phase(&self) -> Phase {
        if !self.joined {
            return Phase::Joining;
        }
        match self.reset.mode {
            ResetMode::Resetting { initiator, .. } => Phase::Resetting { initiator },
            ResetMode::Reassigning { initiator, .. } => Phase::Reassigning { initiator },
            _ => Phase::Active,
        }
    }

    pub fn drain_notes(&mut self) -> Vec<Note> {
        std::mem::take(&mut self.notes)
    }

    pub fn report(&self) -> Report {
        let phase = self.phase();
        let free = if phase == Phase::Active {
            self.free_slots(&self.view())
        } else {
            Vec::new()
        };
        Report {
            claim: self.claim.clone(),
            phase,
            epoch: self.epoch,
            free,
        }
    }

    fn heartbeat(&self) -> Message {
        Message::Heartbeat {
            report: self.report(),
            digest: self.table.iter().map(|(j, e)| (*j, e.report.clone())).collect(),
        }
    }

    /// Everything known within two hops, one report per node (highest epoch,
    /// direct knowledge on ties). Excludes `me`.
    fn view(&self) -> BTreeMap<NodeId, ViewEntry<'_>> {
        let mut v: BTreeMap<NodeId, ViewEntry<'_>> = self
            .table
            .iter()
            .map(|(j, e)| (*j, ViewEntry { report: &e.report }))
            .collect();
        for e in self.table.values() {
            for (k, r) in &e.digest {
                if *k == self.me {
                    continue;
                }
                match v.get(k) {
                    Some(cur) if cur.report.epoch >= r.epoch => {}
                    _ => {
                        v.insert(*k, ViewEntry { report: r });
                    }
                }
            }
        }
        v
    }

    fn free_slots(&self, view: &BTreeMap<NodeId, ViewEntry<'_>>) -> Vec<Slot> {
        let mut taken = self.claim.slots();
        for e in view.values() {
            taken.extend(e.report.claim.slots());
        }
        (0..self.config.period).filter(|s| !taken.contains(s)).collect()
    }

    fn bump(&mut self, cause: ChangeCause) {
        self.epoch = self.epoch.wrapping_add(1);
        self.notes.push(Note::ClaimChanged(cause));
    }

    fn own_key(&self) -> Option<ResetKey> {
        match self.reset.mode {
            ResetMode::Scheduling { tier } => Some(ResetKey::pending(tier, self.me)),
            ResetMode::Arbitrating { initiator, tier, .. } if initiator == self.me => {
                Some(ResetKey::pending(tier, self.me))
            }
            ResetMode::Resetting { initiator, .. } | ResetMode::Reassigning { initiator, .. }
                if initiator == self.me =>
            {
                Some(ResetKey::executing(self.me))
            }
            _ => None,
        }
    }

    /// Transmit decision for `slot` of the current frame.
    pub fn decide(&mut self, ctx: FrameCtx, slot: u32) -> Option<Packet> {
        match ctx.kind {
            FrameKind::Normal => {
                let ok = self.joined
                    && self.phase() == Phase::Active
                    && slot < self.config.period as u32
                    && self.claim.contains(slot as Slot);
                if !ok {
                    None
                } else if self.claim.primary == Some(slot as Slot) {
                    Some(Packet(vec![self.heartbeat()]))
                } else {
                    // Extra slots carry application data, which we do not
                    // model; the write still occupies the channel.
                    Some(Packet::default())
                }
            }
            FrameKind::Recovery => {
                if slot != self.config.recovery_slot(self.me) {
                    return None;
                }
                let mut msgs = vec![self.heartbeat()];
                let own = self.own_key();
                self.arbitration.sent_own = own;
                if let Some(key) = own {
                    msgs.push(Message::ResetRequest { key });
                }
                for hop in 1..=2u8 {
                    let relayed = self
                        .arbitration
                        .prev
                        .values()
                        .filter_map(|v| v[hop as usize - 1])
                        .chain(own)
                        .min();
                    if let Some(key) = relayed {
                        msgs.push(Message::ResetGrantRelay { key, hop });
                    }
                }
                msgs.append(&mut self.outbox);
                if let ResetMode::Scheduling { tier } = self.reset.mode {
                    self.reset.set(ResetMode::Arbitrating {
                        initiator: self.me,
                        hop: 0,
                        tier,
                        wins: 0,
                    });
                }
                Some(Packet(msgs))
            }
        }
    }

    /// Processes this node's observation of `slot`. Only a delivered write
    /// is visible; collision and silence look the same.
    pub fn observe(&mut self, ctx: FrameCtx, slot: u32, heard: Option<(NodeId, &Packet)>) {
        let Some((from, packet)) = heard else {
            return;
        };
        if from == self.me {
            self.diagnostics.malformed += 1;
            return;
        }
        for msg in packet.messages() {
            self.handle(ctx, slot, from, msg);
        }
    }

    fn handle(&mut self, ctx: FrameCtx, slot: u32, from: NodeId, msg: &Message) {
        let p = self.config.period;
        match msg {
            Message::Heartbeat { report, digest } => {
                let valid = report.claim.in_range(p) && digest.iter().all(|(_, r)| r.claim.in_range(p));
                if !valid {
                    self.diagnostics.malformed += 1;
                    return;
                }
                let e = self
                    .table
                    .entry(from)
                    .or_insert_with(|| NeighborEntry::new(report.clone()));
                e.report = report.clone();
                e.digest = digest.iter().cloned().collect();
                e.heard = true;
                match ctx.kind {
                    FrameKind::Normal => {
                        if slot < p as u32 && e.report.claim.contains(slot as Slot) {
                            e.delivered_in_claimed = true;
                        }
                    }
                    FrameKind::Recovery => e.beacon_seen = true,
                }
            }
            Message::ResetRequest { key } => self.record_relay(ctx, from, 0, *key),
            Message::ResetGrantRelay { key, hop } => {
                if (1..=2).contains(hop) {
                    self.record_relay(ctx, from, *hop, *key);
                } else {
                    self.diagnostics.malformed += 1;
                }
            }
            Message::ClearSlots { initiator, hop } => {
                if *hop > 1 {
                    self.diagnostics.malformed += 1;
                } else {
                    self.on_clear(ctx, *initiator, *hop);
                }
            }
            Message::Assign { .. } => {}
            Message::JoinRequest {
                joiner,
                used_primary,
                used_extra,
                neighbors,
            } => self.on_join_request(*joiner, used_primary, used_extra, neighbors),
            Message::JoinGrant { joiner, slot } => {
                if *joiner == self.me && !self.joined && *slot < p {
                    self.claim = SlotClaim::single(*slot);
                    self.joined = true;
                    self.join = JoinProgress::default();
                    self.reset.set(ResetMode::Idle);
                    self.bump(ChangeCause::Join);
                    self.notes.push(Note::Joined);
                }
            }
            Message::Release { initiator, hop } => self.on_release(*initiator, *hop),
        }
    }

    fn record_relay(&mut self, ctx: FrameCtx, from: NodeId, hop: u8, key: ResetKey) {
        if ctx.kind != FrameKind::Recovery {
            self.diagnostics.malformed += 1;
            return;
        }
        self.arbitration.received.entry(from).or_default()[hop as usize] = Some(key);
    }

    fn on_clear(&mut self, ctx: FrameCtx, initiator: NodeId, hop: u8) {
        if initiator == self.me || !self.joined {
            return;
        }
        let my_hop = hop + 1;
        match self.reset.mode {
            ResetMode::Resetting { initiator: cur, .. } | ResetMode::Reassigning { initiator: cur, .. } => {
                if cur != initiator {
                    self.diagnostics.foreign_clear += 1;
                }
            }
            _ => {
                let started = ctx.round.saturating_sub(my_hop as u64);
                self.reset.set(ResetMode::Resetting {
                    initiator,
                    hop: my_hop,
                    started,
                });
                self.claim.clear();
                self.bump(ChangeCause::Reset(initiator));
                if my_hop == 1 {
                    self.outbox.push(Message::ClearSlots { initiator, hop: 1 });
                }
            }
        }
    }

    fn on_release(&mut self, initiator: NodeId, hop: u8) {
        if self.reset.active_initiator() != Some(initiator) || initiator == self.me {
            return;
        }
        if matches!(self.reset.mode, ResetMode::Resetting { .. }) {
            // Released before choosing: take a slot now. Exhaustion here is
            // reported at frame end by the same check.
            let _ = self.choose(initiator);
        }
        self.reset.set(ResetMode::Idle);
        if hop == 0 {
            self.outbox.push(Message::Release { initiator, hop: 1 });
        }
    }

    fn on_join_request(&mut self, joiner: NodeId, used_primary: &[Slot], used_extra: &[Slot], neighbors: &[NodeId]) {
        if !self.joined || self.phase() != Phase::Active || neighbors.iter().min() != Some(&self.me) {
            return;
        }
        let hard: BTreeSet<Slot> = used_primary.iter().copied().collect();
        let soft: BTreeSet<Slot> = used_extra.iter().copied().collect();
        if let Some(slot) = smallest_free(self.config.period, &hard, &soft) {
            self.outbox
                .retain(|m| !matches!(m, Message::JoinGrant { joiner: j, .. } if *j == joiner));
            self.outbox.push(Message::JoinGrant { joiner, slot });
        }
    }

    /// Takes the smallest slot free in the distance-2 view.
    fn choose(&mut self, initiator: NodeId) -> Result<Slot, ProtocolError> {
        let view = self.view();
        let mut hard = BTreeSet::new();
        let mut soft = BTreeSet::new();
        let mut position = 0;
        for (id, e) in &view {
            hard.extend(e.report.claim.primary);
            soft.extend(e.report.claim.extra.iter().copied());
            if *id < self.me && e.report.phase.reset_initiator().is_some() {
                position += 1;
            }
        }
        drop(view);
        let s =
            smallest_free(self.config.period, &hard, &soft).ok_or(ProtocolError::PeriodTooSmall { node: self.me })?;
        self.claim = SlotClaim::single(s);
        self.bump(ChangeCause::Reset(initiator));
        self.outbox.push(Message::Assign {
            initiator,
            position,
            slots: vec![s],
        });
        Ok(s)
    }

    /// Frame-boundary bookkeeping. Returns `Ok(true)` when a reset was
    /// scheduled at this boundary.
    pub fn end_frame(&mut self, ctx: FrameCtx) -> Result<bool, ProtocolError> {
        let out = self.observe_frame_end(ctx);
        if ctx.kind == FrameKind::Recovery {
            // Relays received this round are forwarded next round, whatever
            // path the boundary took.
            self.arbitration.prev = std::mem::take(&mut self.arbitration.received);
            self.arbitration.sent_own = None;
        }
        out
    }

    fn observe_frame_end(&mut self, ctx: FrameCtx) -> Result<bool, ProtocolError> {
        let recovery = ctx.kind == FrameKind::Recovery;
        self.update_counters(recovery);
        self.purge_departed(recovery);

        if !self.joined {
            self.join_step(ctx);
            return Ok(false);
        }
        if self.phase() == Phase::Active && (self.claim.primary.is_none() || self.displaced_by_bridge()) {
            self.rejoin();
            return Ok(false);
        }

        self.yield_extras();
        let scheduled = self.schedule_step();
        if recovery {
            self.arbitrate_round(ctx);
            self.reset_progress(ctx)?;
        }
        self.claim_extra_bandwidth(ctx.frame);
        Ok(scheduled)
    }

    fn update_counters(&mut self, recovery: bool) {
        for e in self.table.values_mut() {
            e.freshness = if e.heard { 0 } else { e.freshness.saturating_add(1) };
            if !recovery {
                let expects = e.report.is_active() && e.report.claim.primary.is_some();
                e.missed_in_claimed = if !expects || e.delivered_in_claimed {
                    0
                } else {
                    e.missed_in_claimed.saturating_add(1)
                };
            }
            e.heard = false;
            e.delivered_in_claimed = false;
        }
    }

    fn purge_departed(&mut self, recovery: bool) {
        let tau = self.config.tau;
        let gone: Vec<NodeId> = self
            .table
            .iter()
            .filter(|(j, e)| {
                if recovery {
                    // Every live neighbor writes once per recovery frame and
                    // those writes cannot collide.
                    !e.beacon_seen
                } else {
                    e.freshness >= tau && e.report.is_active() && !self.overlap_involves(**j)
                }
            })
            .map(|(j, _)| *j)
            .collect();
        for j in gone {
            self.on_departure_detect(j);
        }
        if recovery {
            for e in self.table.values_mut() {
                e.beacon_seen = false;
            }
        }
    }

    /// Forgets neighbor `j`. Its slots become free in our view.
    pub fn on_departure_detect(&mut self, j: NodeId) {
        if self.table.remove(&j).is_some() {
            self.notes.push(Note::Purged(j));
        }
    }

    fn overlap_involves(&self, j: NodeId) -> bool {
        let Some(p) = self.table.get(&j).and_then(|e| e.report.claim.primary) else {
            return false;
        };
        self.claim.primary == Some(p)
            || self
                .table
                .iter()
                .any(|(k, e)| *k != j && e.report.is_active() && e.report.claim.primary == Some(p))
    }

    fn join_step(&mut self, ctx: FrameCtx) {
        if self.reset.mode != ResetMode::Idle {
            self.reset.set(ResetMode::Idle);
        }
        if !self.claim.is_empty() {
            self.claim.clear();
        }
        self.join.listened = self.join.listened.saturating_add(1);
        if ctx.kind != FrameKind::Recovery {
            return;
        }
        self.join.recovery_heard = self.join.recovery_heard.saturating_add(1);
        if self.join.listened < self.config.tau + 1 || self.join.recovery_heard < 2 {
            return;
        }
        let view = self.view();
        let waiting = view.iter().any(|(id, e)| {
            (*id < self.me && e.report.phase == Phase::Joining) || e.report.phase.reset_initiator().is_some()
        });
        if waiting {
            return;
        }
        let mut hard = BTreeSet::new();
        let mut soft = BTreeSet::new();
        for e in view.values() {
            hard.extend(e.report.claim.primary);
            soft.extend(e.report.claim.extra.iter().copied());
        }
        let granters: Vec<NodeId> = self
            .table
            .iter()
            .filter(|(_, e)| e.report.is_active())
            .map(|(j, _)| *j)
            .collect();
        drop(view);
        if granters.is_empty() {
            // Nobody can grant: take the smallest slot free in our own view.
            if let Some(s) = smallest_free(self.config.period, &hard, &soft) {
                self.claim = SlotClaim::single(s);
                self.joined = true;
                self.join = JoinProgress::default();
                self.bump(ChangeCause::Join);
                self.notes.push(Note::Joined);
            }
            return;
        }
        self.outbox.retain(|m| !matches!(m, Message::JoinRequest { .. }));
        self.outbox.push(Message::JoinRequest {
            joiner: self.me,
            used_primary: hard.into_iter().collect(),
            used_extra: soft.into_iter().collect(),
            neighbors: granters,
        });
    }

    fn rejoin(&mut self) {
        self.joined = false;
        self.claim.clear();
        self.join = JoinProgress::default();
        self.reset.set(ResetMode::Idle);
        self.bump(ChangeCause::Rejoin);
    }

    /// Drops bandwidth extras that someone within distance 2 also holds:
    /// always against a primary, and against another extra when the other
    /// holder has the smaller id.
    fn yield_extras(&mut self) {
        if self.claim.extra.is_empty() {
            return;
        }
        let view = self.view();
        let me = self.me;
        let primary = self.claim.primary;
        let lost: Vec<Slot> = self
            .claim
            .extra
            .iter()
            .copied()
            .filter(|s| {
                primary == Some(*s)
                    || view.iter().any(|(id, e)| {
                        e.report.claim.primary == Some(*s) || (*id < me && e.report.claim.extra.contains(s))
                    })
            })
            .collect();
        drop(view);
        if !lost.is_empty() {
            for s in lost {
                self.claim.extra.remove(&s);
            }
            self.bump(ChangeCause::Yield);
        }
    }

    /// Reset evidence: `Some(0)` for overlapping primaries within distance
    /// 2, `Some(1)` for a live neighbor silent in its slots for `tau` frames.
    pub fn evidence(&self) -> Option<u8> {
        if let Some(p) = self.claim.primary {
            let clash = self
                .view()
                .iter()
                .any(|(k, e)| e.report.is_active() && e.report.claim.primary == Some(p) && !self.only_via_joiners(*k));
            if clash {
                return Some(0);
            }
        }
        let mut seen = BTreeSet::new();
        for e in self.table.values().filter(|e| e.report.is_active()) {
            if let Some(p) = e.report.claim.primary {
                if !seen.insert(p) {
                    return Some(0);
                }
            }
        }
        let tau = self.config.tau;
        self.table
            .values()
            .any(|e| e.report.is_active() && e.missed_in_claimed >= tau && e.freshness < tau)
            .then_some(1)
    }

    /// True when `k` is known only through neighbors that are still
    /// joining. A clash with `k` was then created by their arrival.
    fn only_via_joiners(&self, k: NodeId) -> bool {
        if self.table.contains_key(&k) {
            return false;
        }
        let mut via = self.table.values().filter(|e| e.digest.contains_key(&k)).peekable();
        via.peek().is_some() && via.all(|e| e.report.phase == Phase::Joining)
    }

    /// A joiner bridged us to a smaller id holding our primary. Giving the
    /// slot up and joining again keeps the repair next to the joiner.
    fn displaced_by_bridge(&self) -> bool {
        let Some(p) = self.claim.primary else {
            return false;
        };
        self.reset.mode == ResetMode::Idle
            && self.view().iter().any(|(k, e)| {
                *k < self.me && e.report.is_active() && e.report.claim.primary == Some(p) && self.only_via_joiners(*k)
            })
    }

    fn holdoff(&self) -> bool {
        let me = self.me;
        self.arbitration
            .last_best
            .is_some_and(|k| k.is_executing() && k.initiator != me)
            || self.view().values().any(|e| e.report.phase.reset_initiator().is_some())
    }

    fn schedule_step(&mut self) -> bool {
        let evidence = self.evidence();
        match self.reset.mode {
            ResetMode::Idle => {
                if let Some(tier) = evidence {
                    if !self.holdoff() {
                        self.reset.set(ResetMode::Scheduling { tier });
                        self.notes.push(Note::ResetScheduled { tier });
                        return true;
                    }
                }
            }
            ResetMode::Scheduling { .. } => {
                if evidence.is_none() {
                    self.reset.set(ResetMode::Idle);
                    self.notes.push(Note::ResetAbandoned);
                }
            }
            ResetMode::Arbitrating { initiator, .. } if initiator == self.me && evidence.is_none() => {
                self.reset.set(ResetMode::Idle);
                self.notes.push(Note::ResetAbandoned);
            }
            _ => {}
        }
        false
    }

    /// Resolves this round's competition among reset requests within three
    /// hops: the smallest key wins, losers abandon, and a request that wins
    /// `ARBITRATION_WINS` rounds in a row starts its reset.
    fn arbitrate_round(&mut self, ctx: FrameCtx) {
        let sent = self.arbitration.sent_own;
        let best = self
            .arbitration
            .received
            .values()
            .flat_map(|v| v.iter().flatten().copied())
            .chain(sent)
            .min();
        self.arbitration.last_best = best;
        match self.reset.mode {
            ResetMode::Arbitrating {
                initiator, tier, wins, ..
            } if initiator == self.me && sent.is_some() => {
                if best == sent {
                    if wins + 1 >= ARBITRATION_WINS {
                        self.start_reset(ctx.round);
                    } else {
                        self.reset.set(ResetMode::Arbitrating {
                            initiator,
                            hop: 0,
                            tier,
                            wins: wins + 1,
                        });
                    }
                } else {
                    self.reset.set(ResetMode::Idle);
                    self.notes.push(Note::ResetAbandoned);
                }
            }
            ResetMode::Arbitrating { initiator, .. } if initiator != self.me => {
                self.reset.set(ResetMode::Idle);
            }
            _ => {}
        }
    }

    fn start_reset(&mut self, round: u64) {
        self.reset.set(ResetMode::Resetting {
            initiator: self.me,
            hop: 0,
            started: round,
        });
        self.claim.clear();
        self.notes.push(Note::ResetStarted);
        self.bump(ChangeCause::Reset(self.me));
        self.outbox.push(Message::ClearSlots {
            initiator: self.me,
            hop: 0,
        });
    }

    fn must_wait(&self) -> bool {
        self.view()
            .iter()
            .any(|(id, e)| *id < self.me && matches!(e.report.phase, Phase::Resetting { .. }))
    }

    fn reset_progress(&mut self, ctx: FrameCtx) -> Result<(), ProtocolError> {
        match self.reset.mode.clone() {
            ResetMode::Resetting {
                initiator,
                hop,
                started,
            } => {
                let age = ctx.round.saturating_sub(started);
                if age > RESET_TIMEOUT {
                    self.choose(initiator)?;
                    self.finish(initiator);
                } else if age >= ASSIGN_DELAY && !self.must_wait() {
                    self.choose(initiator)?;
                    self.reset.set(ResetMode::Reassigning {
                        initiator,
                        hop,
                        started,
                    });
                }
            }
            ResetMode::Reassigning { initiator, started, .. } => {
                let age = ctx.round.saturating_sub(started);
                let me = self.me;
                let done = initiator == me
                    && age >= ASSIGN_DELAY
                    && !self
                        .view()
                        .values()
                        .any(|e| e.report.phase == Phase::Resetting { initiator: me });
                if done || age > RESET_TIMEOUT {
                    self.finish(initiator);
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn finish(&mut self, initiator: NodeId) {
        self.reset.set(ResetMode::Idle);
        if initiator == self.me {
            self.outbox.push(Message::Release { initiator, hop: 0 });
            self.notes.push(Note::ResetReleased);
        }
    }

    /// Bandwidth extension, evaluated at every frame boundary.
    ///
    /// Decisions happen only on frames divisible by the bandwidth period, so
    /// all nodes decide together from views that have settled since the last
    /// round. A node takes the smallest slot it sees free provided no
    /// smaller-id node within distance 2 reports that slot free as well.
    pub fn claim_extra_bandwidth(&mut self, frame: u64) -> Option<Slot> {
        let calm = self
            .table
            .values()
            .all(|e| e.freshness == 0 && e.missed_in_claimed == 0);
        self.stable_frames = if calm { self.stable_frames.saturating_add(1) } else { 0 };
        if !self.config.bandwidth
            || self.phase() != Phase::Active
            || self.reset.mode != ResetMode::Idle
            || self.stable_frames < self.config.tau
            || !frame.is_multiple_of(self.config.bandwidth_period())
        {
            return None;
        }
        let view = self.view();
        if view.values().any(|e| !e.report.is_active()) {
            return None;
        }
        let me = self.me;
        let pick = self
            .free_slots(&view)
            .into_iter()
            .find(|s| view.iter().all(|(id, e)| *id > me || !e.report.free.contains(s)));
        drop(view);
        let s = pick?;
        self.claim.extra.insert(s);
        self.bump(ChangeCause::Bandwidth);
        Some(s)
    }

    /// Replaces the whole state. Used for fault injection.
    pub fn perturb(&mut self, arbitrary: SensorState) {
        *self = arbitrary;
    }
}
