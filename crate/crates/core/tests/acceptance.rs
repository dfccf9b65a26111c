//! End-to-end acceptance checks. One PASS/FAIL line per criterion; exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdma_core::generate::{grid, path, random_geometric, star};
use tdma_core::injector::{PerturbationEvent, PerturbationKind};
use tdma_core::kernel::{resolve, SlotIndex};
use tdma_core::protocol::{ChangeCause, ProtocolConfig, SlotClaim};
use tdma_core::scenario::{self, ScenarioConfig};
use tdma_core::sim::{legitimate_start, SimSetup, Simulation, Start};
use tdma_core::trace::{HashSink, TraceSink};
use tdma_core::verifier::{is_distance2_coloring, oracle_distance2_coloring};
use tdma_core::{NodeId, Topology};

type Check = Result<String, String>;

/// Safety tallies carried from run-heavy criteria into the monitor checks.
#[derive(Default)]
struct Tally {
    runs: usize,
    exclusion: usize,
    scope: usize,
}

impl Tally {
    fn add(&mut self, sim: &Simulation) {
        self.runs += 1;
        self.exclusion += sim.obs.exclusion.len();
        self.scope += sim.obs.scope.len();
    }
}

fn family(i: u64) -> Topology {
    match i % 3 {
        0 => grid(2 + (i as u32 / 3) % 5, 2 + (i as u32 / 7) % 5),
        1 => path(2 + (i as u32 * 7) % 19),
        _ => random_geometric(8 + (i as u32 * 5) % 18, 0.35, i),
    }
}

fn config_for(ts: &[&Topology], tau: u32, bandwidth: bool) -> ProtocolConfig {
    let d = ts.iter().map(|t| t.max_degree()).max().unwrap_or(0);
    let bound = ts.iter().map(|t| t.greedy_period_bound()).max().unwrap_or(1);
    let cap = ts.iter().filter_map(|t| t.max_node_id()).max().map_or(1, |u| u.0 + 1);
    ProtocolConfig {
        period: (d * d + 1).max(bound) as u16,
        tau,
        recovery_stride: 4,
        id_capacity: cap,
        bandwidth,
    }
}

fn run(setup: SimSetup) -> Simulation {
    let mut sim = Simulation::new(setup).expect("valid setup");
    sim.run().expect("in-memory run");
    sim
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_wac_semantics() -> Check {
    let start = Instant::now();
    let t = path(4);
    let outcomes = |writers: &[u32]| -> Vec<(u32, &'static str, Option<u32>)> {
        let tx: BTreeMap<NodeId, ()> = writers.iter().map(|&w| (NodeId(w), ())).collect();
        resolve(&t, &tx, SlotIndex::new(0, 0))
            .unwrap()
            .iter()
            .map(|e| {
                (
                    e.receiver.0,
                    e.outcome.name(),
                    e.outcome.delivered().map(|p| p.sender.0),
                )
            })
            .collect()
    };
    let single = outcomes(&[1]);
    ensure(
        single
            == [
                (0, "delivered", Some(1)),
                (1, "silence", None),
                (2, "delivered", Some(1)),
                (3, "silence", None),
            ],
        || format!("single writer: {single:?}"),
    )?;
    let dual = outcomes(&[0, 2]);
    ensure(dual[1] == (1, "collision", None), || {
        format!("shared neighbor: {dual:?}")
    })?;
    ensure(dual[3] == (3, "delivered", Some(2)), || {
        format!("other neighbor: {dual:?}")
    })?;
    ensure(dual[0].1 == "silence" && dual[2].1 == "silence", || {
        format!("writers listen: {dual:?}")
    })?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok("3 examples exact".into())
}

fn c2_closure(tally: &mut Tally) -> Check {
    let start = Instant::now();
    let mut bad = Vec::new();
    for i in 0..50 {
        let t = family(i);
        let cfg = config_for(&[&t], 3, true);
        let sim = run(SimSetup::new(t, cfg, i, 1000));
        tally.add(&sim);
        if sim.obs.collisions > 0 || !sim.obs.legit.iter().all(|&l| l) {
            bad.push(i);
        }
    }
    let took = start.elapsed();
    ensure(bad.is_empty(), || format!("runs {bad:?} lost legitimacy or collided"))?;
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("50 runs x 1000 frames in {:.1}s", took.as_secs_f64()))
}

fn c3_stabilization(tally: &mut Tally) -> Check {
    const FRAMES: u64 = 1500;
    let mut worst = 0;
    let mut bad = Vec::new();
    for i in 0..100 {
        let t = family(i);
        let cfg = config_for(&[&t], 3, true);
        let setup = SimSetup::new(t, cfg, i, FRAMES).with(PerturbationEvent::new(
            5,
            PerturbationKind::CorruptAll { seed: i * 31 + 7 },
        ));
        let sim = run(setup);
        tally.add(&sim);
        let s = sim.summary();
        match s.converged_at {
            Some(c) if c + 500 <= FRAMES => worst = worst.max(s.recovery.unwrap_or(0)),
            _ => bad.push((i, s.converged_at)),
        }
    }
    ensure(bad.is_empty(), || {
        format!("not stabilized with 500 legitimate frames after: {bad:?}")
    })?;
    Ok(format!("100/100 converged, max recovery {worst} frames"))
}

/// Legitimate start on `t`, then at frame 6 `a` takes `b`'s slot and `c`
/// takes `d`'s.
fn dual_overlap(t: &Topology, seed: u64, (a, b): (u32, u32), (c, d): (u32, u32), frames: u64) -> Simulation {
    let cfg = config_for(&[t], 3, false);
    let start = legitimate_start(t, cfg).unwrap();
    let slot = |u: u32| start[&NodeId(u)].claim.primary.unwrap();
    let setup = SimSetup::new(t.clone(), cfg, seed, frames)
        .with(PerturbationEvent::new(
            6,
            PerturbationKind::ForceSlot {
                node: NodeId(a),
                slot: slot(b),
            },
        ))
        .with(PerturbationEvent::new(
            6,
            PerturbationKind::ForceSlot {
                node: NodeId(c),
                slot: slot(d),
            },
        ));
    run(setup)
}

fn c4_exclusion(tally: &mut Tally) -> Check {
    let mut dual = 0;
    let mut bad = Vec::new();
    for j in 0..20u64 {
        let t = if j % 2 == 0 {
            path(8 + j as u32 % 5)
        } else {
            grid(3 + j as u32 % 3, 3)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(j);
        let nodes: Vec<NodeId> = t.nodes().collect();
        let at2 =
            |u: NodeId| -> Vec<NodeId> { nodes.iter().copied().filter(|&v| t.distance(u, v) == Some(2)).collect() };
        let a = *nodes.choose(&mut rng).unwrap();
        let b = *at2(a).choose(&mut rng).unwrap();
        let near: Vec<NodeId> = nodes
            .iter()
            .copied()
            .filter(|&v| v != a && v != b && t.within(a, v, 3) && !at2(v).is_empty())
            .collect();
        let c = *near.choose(&mut rng).unwrap();
        let targets: Vec<NodeId> = at2(c).into_iter().filter(|&v| v != a).collect();
        let d = *targets.choose(&mut rng).unwrap();
        let sim = dual_overlap(&t, j, (a.0, b.0), (c.0, d.0), 600);
        tally.add(&sim);
        let initiators: BTreeSet<NodeId> = sim.obs.resets.iter().map(|r| r.initiator).collect();
        if sim.obs.scheduled >= 2 || initiators.len() >= 2 {
            dual += 1;
        }
        if sim.convergence().is_none() {
            bad.push(j);
        }
    }
    ensure(tally.exclusion == 0, || {
        format!("{} exclusion violations", tally.exclusion)
    })?;
    ensure(bad.is_empty(), || {
        format!("adversarial scenarios {bad:?} did not converge")
    })?;
    Ok(format!(
        "0 violations over {} runs; {dual}/20 adversarial scenarios had competing initiators",
        tally.runs
    ))
}

fn c5_scope(tally: &mut Tally) -> Check {
    let mut witness = None;
    for seed in 0..5 {
        let t = path(14);
        let sim = dual_overlap(&t, seed, (0, 2), (13, 11), 400);
        tally.add(&sim);
        if let Some(&(a, b, d)) = sim.obs.concurrent.iter().find(|(_, _, d)| d.is_none_or(|d| d >= 4)) {
            witness.get_or_insert((seed, a, b, d));
        }
    }
    ensure(tally.scope == 0, || format!("{} scope violations", tally.scope))?;
    let (seed, a, b, d) = witness.ok_or("no concurrent resets at distance >= 4")?;
    Ok(format!(
        "0 violations over {} runs; concurrent initiators {a} and {b} at distance {} (seed {seed})",
        tally.runs,
        d.map_or("inf".into(), |d| d.to_string())
    ))
}

/// Connected graphs on `n` nodes, one per isomorphism class.
fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let mut perms = vec![Vec::new()];
    for k in 0..n {
        perms = perms
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..=k).map(move |i| {
                    let mut q = p.clone();
                    q.insert(i, k);
                    q
                })
            })
            .collect();
    }
    let index: BTreeMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &p)| p)
            .collect();
        let mut reach = vec![false; n];
        reach[0] = true;
        let mut grew = true;
        while grew {
            grew = false;
            for &(a, b) in &edges {
                if reach[a] != reach[b] {
                    reach[a] = true;
                    reach[b] = true;
                    grew = true;
                }
            }
        }
        if !reach.iter().all(|&r| r) {
            continue;
        }
        let canon = perms
            .iter()
            .map(|p| {
                edges.iter().fold(0u32, |m, &(a, b)| {
                    let (x, y) = (p[a].min(p[b]), p[a].max(p[b]));
                    m | 1 << index[&(x, y)]
                })
            })
            .min()
            .unwrap();
        if seen.insert(canon) {
            out.push(edges);
        }
    }
    out
}

fn c6_oracle() -> Check {
    let start = Instant::now();
    let mut graphs = 0;
    let mut bad = Vec::new();
    for n in 1..=6 {
        for edges in connected_graphs(n) {
            graphs += 1;
            let t = Topology::from_edges(
                (0..n as u32).map(NodeId),
                edges.iter().map(|&(a, b)| (NodeId(a as u32), NodeId(b as u32))),
            )
            .unwrap();
            let (chi2, witness) = oracle_distance2_coloring(&t).map_err(|e| e.to_string())?;
            let witness: BTreeMap<NodeId, SlotClaim> = witness
                .into_iter()
                .map(|(u, c)| (u, SlotClaim::single(c as u16)))
                .collect();
            ensure(is_distance2_coloring(&t, &witness), || {
                format!("oracle witness invalid on {edges:?}")
            })?;
            let period = chi2 as u16 + 2;
            ensure(period as usize >= t.greedy_period_bound(), || {
                format!(
                    "P = {period} below greedy bound {} on {edges:?}",
                    t.greedy_period_bound()
                )
            })?;
            for (label, bandwidth, from_scratch) in [("joining", false, true), ("corrupted", true, false)] {
                let cfg = ProtocolConfig {
                    period,
                    tau: 3,
                    recovery_stride: 4,
                    id_capacity: n as u32,
                    bandwidth,
                };
                let mut setup = SimSetup::new(t.clone(), cfg, graphs as u64, 600);
                if from_scratch {
                    setup.start = Start::Joining;
                } else {
                    setup = setup.with(PerturbationEvent::new(
                        5,
                        PerturbationKind::CorruptAll { seed: graphs as u64 },
                    ));
                }
                let sim = run(setup);
                let claims = sim.claims();
                let primaries: BTreeSet<u16> = claims.values().filter_map(|c| c.primary).collect();
                if sim.convergence().is_none() || !is_distance2_coloring(&t, &claims) || primaries.len() < chi2 {
                    bad.push(format!("{label} {edges:?}"));
                }
            }
        }
    }
    ensure(graphs == 143, || format!("enumerated {graphs} graphs, expected 143"))?;
    ensure(bad.is_empty(), || format!("failed: {bad:?}"))?;

    let t = star(4);
    let cfg = ProtocolConfig {
        period: 7,
        tau: 3,
        recovery_stride: 4,
        id_capacity: 5,
        bandwidth: false,
    };
    let mut setup = SimSetup::new(t.clone(), cfg, 1, 400);
    setup.start = Start::Joining;
    let sim = run(setup);
    let distinct: BTreeSet<u16> = sim.claims().values().flat_map(|c| c.slots()).collect();
    ensure(distinct.len() == 5, || format!("K1,4 used {} slots", distinct.len()))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!(
        "{graphs} graphs valid; K1,4 uses 5 slots; {:.1}s",
        took.as_secs_f64()
    ))
}

fn c7_removal(tally: &mut Tally) -> Check {
    const TAU: u32 = 4;
    const KILL: u64 = 400;
    let t = grid(4, 4);
    let victim = NodeId(5);
    let cfg = config_for(&[&t], TAU, true);
    let neighbors = t.neighbors(victim).unwrap().clone();
    let mut sim = Simulation::new(SimSetup::new(t, cfg, 7, KILL + 80)).unwrap();
    sim.advance(KILL).unwrap();
    ensure(sim.obs.legit.last() == Some(&true), || {
        "not legitimate before the kill".into()
    })?;
    let freed = sim.nodes[&victim].claim.slots();
    let (scheduled, activations) = (sim.obs.scheduled, sim.obs.reset_activations);
    sim.schedule(PerturbationEvent::new(KILL, PerturbationKind::Kill { node: victim }));
    sim.run().unwrap();
    tally.add(&sim);

    ensure(
        sim.obs.scheduled == scheduled && sim.obs.reset_activations == activations,
        || "removal triggered a reset".into(),
    )?;
    let mut last_purge = KILL;
    for n in &neighbors {
        let f = sim
            .obs
            .purges
            .iter()
            .find(|(f, o, p)| *f >= KILL && o == n && *p == victim)
            .map(|p| p.0)
            .ok_or_else(|| format!("{n} never purged {victim}"))?;
        ensure(f <= KILL + TAU as u64, || format!("{n} purged at {f}"))?;
        last_purge = last_purge.max(f);
    }
    let reuse = sim
        .obs
        .claim_changes
        .iter()
        .find(|c| {
            c.frame > KILL
                && c.frame <= last_purge + 3 * TAU as u64
                && c.cause == ChangeCause::Bandwidth
                && c.claim.slots().iter().any(|s| freed.contains(s))
        })
        .ok_or_else(|| {
            format!(
                "no freed slot of {freed:?} reclaimed by frame {}",
                last_purge + 3 * TAU as u64
            )
        })?;
    ensure(sim.convergence().is_some(), || "did not settle after removal".into())?;
    Ok(format!(
        "purged by frame {last_purge}; {} reclaimed a freed slot at frame {}",
        reuse.node, reuse.frame
    ))
}

fn c8_addition(tally: &mut Tally) -> Check {
    const JOIN: u64 = 20;
    let mut bad = Vec::new();
    for j in 0..20u64 {
        let t = match j % 3 {
            0 => grid(3 + j as u32 % 2, 3),
            1 => path(6 + j as u32 % 4),
            _ => random_geometric(12, 0.35, j),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100 + j);
        let nodes: Vec<NodeId> = t.nodes().collect();
        let k = rng.gen_range(1..=3.min(nodes.len()));
        let attach: Vec<NodeId> = nodes.choose_multiple(&mut rng, k).copied().collect();
        let joiner = NodeId(nodes.len() as u32);
        let mut after = t.clone();
        after.add_node(joiner, &attach.iter().copied().collect()).unwrap();
        let cfg = config_for(&[&t, &after], 3, false);
        let setup = SimSetup::new(t, cfg, j, 400).with(PerturbationEvent::new(
            JOIN,
            PerturbationKind::Join {
                node: joiner,
                attach_to: attach,
            },
        ));
        let sim = run(setup);
        tally.add(&sim);
        let scope = after.distance_neighborhood(joiner, 2).unwrap();
        let outside: Vec<NodeId> = sim
            .obs
            .claim_changes
            .iter()
            .filter(|c| c.frame >= JOIN && c.node != joiner && !scope.contains(&c.node))
            .map(|c| c.node)
            .collect();
        let got = sim.nodes[&joiner].claim.primary;
        let claims = sim.claims();
        if got.is_none()
            || sim.convergence().is_none()
            || !is_distance2_coloring(&after, &claims)
            || !outside.is_empty()
        {
            bad.push((j, got, outside));
        }
    }
    ensure(bad.is_empty(), || format!("failed joins: {bad:?}"))?;
    Ok("20/20 joiners placed, no changes beyond distance 2".into())
}

struct Shared(std::sync::Arc<std::sync::Mutex<HashSink>>);

impl TraceSink for Shared {
    fn write_line(&mut self, line: &str) -> std::io::Result<()> {
        self.0.lock().unwrap().write_line(line)
    }
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (i, (topo, extra)) in [
        (
            "kind = \"grid\"\nwidth = 4\nheight = 4",
            "[[perturbations]]\nat_frame = 5\nkind = \"corrupt_all\"\nseed = 2\n",
        ),
        (
            "kind = \"random_geometric\"\nn = 15\nradius = 0.4",
            "[[perturbations]]\nat_frame = 30\nkind = \"kill\"\nnode = 3\n",
        ),
        (
            "kind = \"path\"\nn = 9",
            "[[perturbations]]\nat_frame = 12\nkind = \"join\"\nnode = 9\nattach_to = [8]\n",
        ),
    ]
    .iter()
    .enumerate()
    {
        let text = format!("seed = {i}\nframes = 300\n\n[topology]\n{topo}\n\n[protocol]\ntau = 3\n\n{extra}");
        let mut c = ScenarioConfig::parse(&text).map_err(|e| e.to_string())?;
        let a = scenario::trace_hash(&c).map_err(|e| e.to_string())?;
        let b = scenario::trace_hash(&c).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("scenario {i}: hashes differ"))?;
        let mut files = Vec::new();
        for k in 0..2 {
            let p = dir.path().join(format!("{i}-{k}.jsonl"));
            c.trace_path = Some(p.clone());
            scenario::run(&c).map_err(|e| e.to_string())?;
            files.push(std::fs::read(p).map_err(|e| e.to_string())?);
        }
        ensure(files[0] == files[1], || format!("scenario {i}: trace files differ"))?;
        checked += 1;
    }
    let t = family(2);
    let cfg = config_for(&[&t], 3, true);
    let hash = || {
        let h = std::sync::Arc::new(std::sync::Mutex::new(HashSink::default()));
        let setup = SimSetup::new(t.clone(), cfg, 2, 300)
            .with(PerturbationEvent::new(5, PerturbationKind::CorruptAll { seed: 2 }));
        let mut sim = Simulation::with_sink(setup, Box::new(Shared(h.clone()))).unwrap();
        sim.run().unwrap();
        let hex = h.lock().unwrap().hex();
        hex
    };
    ensure(hash() == hash(), || "direct simulation hashes differ".into())?;
    Ok(format!("{} configs byte-identical", checked + 1))
}

fn main() -> ExitCode {
    let mut tally = Tally::default();
    let mut results = BTreeMap::new();
    results.insert(1, ("wac semantics", c1_wac_semantics()));
    results.insert(2, ("closure", c2_closure(&mut tally)));
    results.insert(3, ("stabilization", c3_stabilization(&mut tally)));
    results.insert(4, ("reset exclusion", c4_exclusion(&mut tally)));
    // Scope is judged last so it covers the removal and join runs too.
    results.insert(7, ("removal and reuse", c7_removal(&mut tally)));
    results.insert(8, ("controlled addition", c8_addition(&mut tally)));
    results.insert(5, ("reset scope and concurrency", c5_scope(&mut tally)));
    results.insert(6, ("oracle equivalence", c6_oracle()));
    results.insert(9, ("determinism", c9_determinism()));
    let mut failed = 0;
    for (n, (name, r)) in results {
        match r {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
