//! Simulation of a self-stabilizing TDMA slot assignment protocol over a
//! slotted write-all-with-collision channel.

pub mod generate;
pub mod injector;
pub mod kernel;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod trace;
pub mod verifier;

pub use topology::{NodeId, Topology, TopologyError};
