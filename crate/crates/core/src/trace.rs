//! JSON-lines trace records and sinks.
//!
//! Kernel events are written in their bare form; every other record carries a
//! `kind` field. Only logical time (frame, slot) ever appears in a trace.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::injector::PerturbationEvent;
use crate::kernel::EventRecord;
use crate::protocol::{Message, ProtocolConfig};
use crate::topology::{NodeId, Topology};
use crate::verifier::NodeSnapshot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        protocol: ProtocolConfig,
        seed: u64,
        frames: u64,
    },
    /// Full topology, written at the start and after every mutation. Applies
    /// from the boundary before `frame`.
    Topology {
        frame: u64,
        nodes: Vec<NodeId>,
        edges: Vec<(NodeId, NodeId)>,
    },
    Tx {
        frame: u64,
        slot: u32,
        tx: NodeId,
        msgs: Vec<Message>,
    },
    /// Global state at the boundary before `frame`.
    Snapshot {
        frame: u64,
        nodes: BTreeMap<NodeId, NodeSnapshot>,
    },
    /// Nodes in a reset, mapped to their initiator. Written whenever the set
    /// changes: after `slot` of `frame`, or at the boundary after `frame`
    /// when `slot` is absent.
    Resets {
        frame: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<u32>,
        active: BTreeMap<NodeId, NodeId>,
    },
    Perturbation {
        frame: u64,
        event: PerturbationEvent,
        applied: bool,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        note: String,
    },
    Abort {
        frame: u64,
        reason: String,
    },
}

impl Record {
    pub fn topology(frame: u64, t: &Topology) -> Self {
        Record::Topology {
            frame,
            nodes: t.nodes().collect(),
            edges: t.edges().collect(),
        }
    }
}

/// One parsed trace line.
#[derive(Clone, Debug, PartialEq)]
pub enum Line {
    Event(EventRecord),
    Record(Box<Record>),
}

pub fn parse_line(line: &str) -> Result<Line, serde_json::Error> {
    let v: serde_json::Value = serde_json::from_str(line)?;
    if v.get("kind").is_some() {
        Ok(Line::Record(Box::new(serde_json::from_value(v)?)))
    } else {
        Ok(Line::Event(serde_json::from_value(v)?))
    }
}

/// Destination for trace lines. Sinks that are not `enabled` let the
/// simulation skip serialization entirely.
pub trait TraceSink: Send {
    fn enabled(&self) -> bool {
        true
    }
    fn write_line(&mut self, line: &str) -> io::Result<()>;
    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl TraceSink for NullSink {
    fn enabled(&self) -> bool {
        false
    }
    fn write_line(&mut self, _: &str) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub lines: Vec<String>,
}

impl TraceSink for MemorySink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        self.lines.push(line.to_string());
        Ok(())
    }
}

/// Running SHA-256 over the trace bytes, newline-terminated lines.
#[derive(Default)]
pub struct HashSink {
    hasher: Sha256,
    lines: u64,
}

impl HashSink {
    pub fn hex(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}

impl TraceSink for HashSink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines += 1;
        Ok(())
    }
}

/// Writes to a sibling temporary file and renames it into place on finish,
/// so a reader never sees a partial trace.
pub struct FileSink {
    out: BufWriter<File>,
    tmp: PathBuf,
    dest: PathBuf,
}

impl FileSink {
    pub fn create(dest: &Path) -> io::Result<Self> {
        let tmp = tmp_path(dest);
        let out = BufWriter::new(File::create(&tmp)?);
        Ok(FileSink {
            out,
            tmp,
            dest: dest.to_path_buf(),
        })
    }
}

impl TraceSink for FileSink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")
    }

    fn finish(&mut self) -> io::Result<()> {
        self.out.flush()?;
        std::fs::rename(&self.tmp, &self.dest)
    }
}

pub fn tmp_path(dest: &Path) -> PathBuf {
    let mut name = dest.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    dest.with_file_name(name)
}

/// Writes `contents` to `dest` through a temporary file and a rename.
pub fn write_atomic(dest: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = tmp_path(dest);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, dest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::EventRecord;

    #[test]
    fn lines_discriminate_on_kind() {
        let ev = r#"{"frame":3,"slot":1,"rx":1,"outcome":"delivered","tx":0}"#;
        assert!(matches!(
            parse_line(ev).unwrap(),
            Line::Event(EventRecord { frame: 3, .. })
        ));
        let rec = Record::Abort {
            frame: 2,
            reason: "period too small".into(),
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(s, r#"{"kind":"abort","frame":2,"reason":"period too small"}"#);
        assert_eq!(parse_line(&s).unwrap(), Line::Record(Box::new(rec)));
    }

    #[test]
    fn keyed_records_round_trip() {
        let rec = Record::Resets {
            frame: 4,
            slot: Some(2),
            active: [(NodeId(3), NodeId(1))].into_iter().collect(),
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(parse_line(&s).unwrap(), Line::Record(Box::new(rec)));
    }

    #[test]
    fn hash_sink_is_content_addressed() {
        let mut a = HashSink::default();
        let mut b = HashSink::default();
        a.write_line("x").unwrap();
        b.write_line("x").unwrap();
        assert_eq!(a.hex(), b.hex());
        b.write_line("y").unwrap();
        assert_ne!(a.hex(), b.hex());
        assert_eq!(b.lines(), 2);
    }

    #[test]
    fn file_sink_appears_on_finish() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t.jsonl");
        let mut s = FileSink::create(&dest).unwrap();
        s.write_line("{}").unwrap();
        assert!(!dest.exists());
        s.finish().unwrap();
        assert_eq!(std::fs::read_to_string(&dest).unwrap(), "{}\n");
    }
}
