//! Scenario files: one TOML document describing a topology, protocol
//! parameters, a perturbation schedule and output paths.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{GeneratorRegistry, TopologySpec};
use crate::injector::{ModeSet, PerturbationEvent, PerturbationKind};
use crate::protocol::{ProtocolConfig, Slot};
use crate::sim::{self, SimError, SimSetup, Simulation};
use crate::topology::Topology;
use crate::trace::{write_atomic, FileSink, HashSink, NullSink, TraceSink};
use crate::verifier::Summary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub frames: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_path: Option<PathBuf>,
    pub topology: TopologySpec,
    pub protocol: ProtocolSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<PerturbationEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// Defaults to `d² + 1` for maximum degree `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<Slot>,
    pub tau: u32,
    #[serde(default = "default_stride")]
    pub recovery_stride: u32,
    /// Defaults to one more than the largest id, joins included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_capacity: Option<u32>,
    #[serde(default = "yes")]
    pub bandwidth: bool,
    #[serde(default)]
    pub corruption: ModeSet,
}

fn default_stride() -> u32 {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Parse(_) | ScenarioError::Config(_) => 2,
            ScenarioError::Io(_) => 3,
        }
    }
}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => ScenarioError::Config(c.to_string()),
            SimError::Io(io) => ScenarioError::Io(io),
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if c.frames == 0 {
            return Err(ScenarioError::Config("frames must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML form; `parse(dump(c)) == c`.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        let mut spec = self.topology.clone();
        if spec.seed.is_none() {
            spec.seed = Some(self.seed);
        }
        GeneratorRegistry::with_builtins()
            .generate(&spec)
            .map_err(|e| ScenarioError::Config(e.to_string()))
    }

    /// Resolves defaults and validates against the topology.
    pub fn build(&self) -> Result<(Topology, ProtocolConfig), ScenarioError> {
        let t = self.topology()?;
        let d = t.max_degree();
        let period = match self.protocol.period {
            Some(p) => p,
            None => Slot::try_from(d * d + 1)
                .map_err(|_| ScenarioError::Config(format!("degree {d} needs a period beyond {}", Slot::MAX)))?,
        };
        let joins = self.perturbations.iter().filter_map(|e| match &e.kind {
            PerturbationKind::Join { node, .. } => Some(*node),
            _ => None,
        });
        let max_id = t.nodes().chain(joins).max().map_or(0, |u| u.0);
        let config = ProtocolConfig {
            period,
            tau: self.protocol.tau,
            recovery_stride: self.protocol.recovery_stride,
            id_capacity: self.protocol.id_capacity.unwrap_or(max_id + 1),
            bandwidth: self.protocol.bandwidth,
        };
        sim::validate(&t, &config, &self.perturbations).map_err(|e| ScenarioError::Config(e.to_string()))?;
        Ok((t, config))
    }

    pub fn setup(&self) -> Result<SimSetup, ScenarioError> {
        let (t, config) = self.build()?;
        let mut s = SimSetup::new(t, config, self.seed, self.frames);
        s.perturbations = self.perturbations.clone();
        s.modes = self.protocol.corruption;
        Ok(s)
    }
}

/// Runs a scenario with the given sink and returns its summary.
pub fn run_with_sink(c: &ScenarioConfig, sink: Box<dyn TraceSink>) -> Result<Summary, ScenarioError> {
    let mut sim = Simulation::with_sink(c.setup()?, sink)?;
    sim.run()?;
    Ok(sim.summary())
}

/// Runs a scenario, writing the trace and summary files it names.
pub fn run(c: &ScenarioConfig) -> Result<Summary, ScenarioError> {
    let sink: Box<dyn TraceSink> = match &c.trace_path {
        Some(p) => Box::new(FileSink::create(p)?),
        None => Box::new(NullSink),
    };
    let summary = run_with_sink(c, sink)?;
    if let Some(p) = &c.summary_path {
        let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        json.push('\n');
        write_atomic(p, json.as_bytes())?;
    }
    Ok(summary)
}

/// SHA-256 of the full trace a scenario produces.
pub fn trace_hash(c: &ScenarioConfig) -> Result<String, ScenarioError> {
    struct Shared(std::sync::Arc<std::sync::Mutex<HashSink>>);
    impl TraceSink for Shared {
        fn write_line(&mut self, line: &str) -> std::io::Result<()> {
            self.0.lock().expect("unpoisoned").write_line(line)
        }
    }
    let h = std::sync::Arc::new(std::sync::Mutex::new(HashSink::default()));
    run_with_sink(c, Box::new(Shared(h.clone())))?;
    let hex = h.lock().expect("unpoisoned").hex();
    Ok(hex)
}

/// One `--vary key=values` axis. Keys are dotted paths into the scenario
/// document, e.g. `seed`, `protocol.tau`, `topology.width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl std::str::FromStr for Axis {
    type Err = ScenarioError;

    /// `key=a,b,c`, or an integer range `key=lo..hi` / `key=lo..=hi`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, rhs) = s
            .split_once('=')
            .ok_or_else(|| ScenarioError::Parse(format!("--vary `{s}`: expected key=values")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ScenarioError::Parse(format!("--vary `{s}`: empty key")));
        }
        let rhs = rhs.trim();
        let values = if let Some((lo, hi)) = rhs.split_once("..") {
            let (hi, inclusive) = match hi.strip_prefix('=') {
                Some(h) => (h, true),
                None => (hi, false),
            };
            let bad = || ScenarioError::Parse(format!("--vary `{s}`: bad integer range"));
            let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
            let hi = if inclusive { hi + 1 } else { hi };
            (lo..hi).map(toml::Value::Integer).collect()
        } else if rhs.is_empty() {
            Vec::new()
        } else {
            rhs.split(',').map(|v| scalar(v.trim())).collect()
        };
        Ok(Axis {
            key: key.to_string(),
            values,
        })
    }
}

fn scalar(v: &str) -> toml::Value {
    if let Ok(i) = v.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = v.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = v.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(v.to_string())
    }
}

/// Every combination of axis values, first axis varying slowest. No axes
/// yields the single base cell; an axis with no values yields none.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, toml::Value)>> {
    let mut out: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    out
}

fn set_path(doc: &mut toml::Value, key: &str, v: toml::Value) -> Result<(), ScenarioError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ScenarioError::Config(format!("`{key}` does not name a table field")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), v);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Applies overrides to a base scenario.
pub fn with_overrides(base: &ScenarioConfig, cell: &[(String, toml::Value)]) -> Result<ScenarioConfig, ScenarioError> {
    let mut doc = toml::Value::try_from(base).map_err(|e| ScenarioError::Config(e.to_string()))?;
    for (k, v) in cell {
        set_path(&mut doc, k, v.clone())?;
    }
    let text = toml::to_string(&doc).map_err(|e| ScenarioError::Config(e.to_string()))?;
    ScenarioConfig::parse(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub params: String,
    pub status: String,
    pub converged_at: Option<u64>,
    pub resets: Option<u64>,
    pub slots_per_node: Option<f64>,
    pub violations: Option<usize>,
    pub collisions: Option<u64>,
    pub recovery: Option<u64>,
    pub error: String,
}

pub const SWEEP_HEADER: [&str; 10] = [
    "cell",
    "params",
    "status",
    "converged_at",
    "resets",
    "slots_per_node",
    "violations",
    "collisions",
    "recovery",
    "error",
];

/// Runs every cell in parallel. A failing cell becomes a `failed` row. Cell
/// traces, if the base names one, go to `<stem>-<cell>.<ext>`.
pub fn sweep(base: &ScenarioConfig, axes: &[Axis]) -> Vec<SweepRow> {
    let grid = cells(axes);
    grid.par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let params = cell
                .iter()
                .map(|(k, v)| format!("{k}={}", v.to_string().trim_matches('"')))
                .collect::<Vec<_>>()
                .join(";");
            let result = with_overrides(base, cell).and_then(|mut c| {
                c.trace_path = c.trace_path.map(|p| suffixed(&p, i));
                c.summary_path = c.summary_path.map(|p| suffixed(&p, i));
                run(&c)
            });
            match result {
                Ok(s) => SweepRow {
                    cell: i,
                    params,
                    status: if s.aborted.is_some() { "aborted" } else { "ok" }.into(),
                    converged_at: s.converged_at,
                    resets: Some(s.resets),
                    slots_per_node: Some(s.slots_per_node),
                    violations: Some(s.violations.len()),
                    collisions: Some(s.collisions),
                    recovery: s.recovery,
                    error: s.aborted.unwrap_or_default(),
                },
                Err(e) => SweepRow {
                    cell: i,
                    params,
                    status: "failed".into(),
                    converged_at: None,
                    resets: None,
                    slots_per_node: None,
                    violations: None,
                    collisions: None,
                    recovery: None,
                    error: e.to_string(),
                },
            }
        })
        .collect()
}

fn suffixed(p: &Path, i: usize) -> PathBuf {
    let stem = p.file_stem().unwrap_or_default().to_string_lossy();
    let name = match p.extension() {
        Some(ext) => format!("{stem}-{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{i}"),
    };
    p.with_file_name(name)
}

/// CSV with a fixed header row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SWEEP_HEADER).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
frames = 50

[topology]
kind = "grid"
width = 2
height = 2

[protocol]
tau = 3
"#;

    #[test]
    fn defaults_resolve() {
        let c = ScenarioConfig::parse(BASE).unwrap();
        let (t, p) = c.build().unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(p.period, 5);
        assert_eq!(p.id_capacity, 4);
        assert_eq!(p.recovery_stride, 4);
        assert!(p.bandwidth);
    }

    #[test]
    fn dump_round_trips() {
        let mut c = ScenarioConfig::parse(BASE).unwrap();
        c.perturbations
            .push(PerturbationEvent::new(5, PerturbationKind::CorruptAll { seed: 9 }));
        c.trace_path = Some("out/t.jsonl".into());
        let back = ScenarioConfig::parse(&c.dump()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let e = ScenarioConfig::parse(&format!("{BASE}\nbogus = 1\n")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn small_period_rejected() {
        let text = BASE
            .replace("tau = 3", "tau = 3\nperiod = 1")
            .replace("width = 2\nheight = 2", "width = 3\nheight = 3");
        let e = ScenarioConfig::parse(&text).unwrap().build().unwrap_err();
        assert!(e.to_string().contains("period too small"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn axes_parse_and_multiply() {
        let a: Axis = "seed=0..3".parse().unwrap();
        assert_eq!(a.values.len(), 3);
        let b: Axis = "protocol.bandwidth=true,false".parse().unwrap();
        assert_eq!(cells(&[a.clone(), b]).len(), 6);
        assert_eq!(cells(&[]).len(), 1);
        let empty: Axis = "seed=".parse().unwrap();
        assert!(cells(&[a, empty]).is_empty());
        assert!("noequals".parse::<Axis>().is_err());
    }

    #[test]
    fn sweep_marks_failed_cells() {
        let base = ScenarioConfig::parse(BASE).unwrap();
        let axes = ["protocol.period=5,1".parse().unwrap()];
        let rows = sweep(&base, &axes);
        assert_eq!(rows[0].status, "ok");
        assert_eq!(rows[0].converged_at, Some(0));
        assert_eq!(rows[1].status, "failed");
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("cell,params,status,converged_at"));
        assert_eq!(csv.lines().count(), 3);
    }
}
