//! Test-topology factories, registered by name so scenario files can pick one
//! with `kind = "..."`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::topology::{NodeId, Topology, TopologyError};

/// Topology section of a scenario. Which fields are read depends on `kind`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[u32; 2]>,
}

impl TopologySpec {
    pub fn grid(width: u32, height: u32) -> Self {
        TopologySpec {
            kind: "grid".into(),
            width: Some(width),
            height: Some(height),
            ..Default::default()
        }
    }

    pub fn path(n: u32) -> Self {
        TopologySpec {
            kind: "path".into(),
            n: Some(n),
            ..Default::default()
        }
    }

    pub fn random_geometric(n: u32, radius: f64, seed: u64) -> Self {
        TopologySpec {
            kind: "random_geometric".into(),
            n: Some(n),
            radius: Some(radius),
            seed: Some(seed),
            ..Default::default()
        }
    }

    pub fn explicit(t: &Topology) -> Self {
        TopologySpec {
            kind: "explicit".into(),
            nodes: t.nodes().map(|u| u.0).collect(),
            edges: t.edges().map(|(a, b)| [a.0, b.0]).collect(),
            ..Default::default()
        }
    }

    fn need<T: Copy>(&self, v: Option<T>, field: &str) -> Result<T, TopologyError> {
        v.ok_or_else(|| TopologyError::Params(format!("`{}` needs `{field}`", self.kind)))
    }

    fn positive(&self, v: Option<u32>, field: &str) -> Result<u32, TopologyError> {
        match self.need(v, field)? {
            0 => Err(TopologyError::Params(format!("`{field}` must be positive"))),
            x => Ok(x),
        }
    }
}

pub trait TopologyGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError>;
}

/// Four-connected `width x height` lattice; node id = `y * width + x`.
pub struct Grid;

impl TopologyGenerator for Grid {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        let w = spec.positive(spec.width, "width")?;
        let h = spec.positive(spec.height, "height")?;
        Ok(grid(w, h))
    }
}

pub struct Path;

impl TopologyGenerator for Path {
    fn name(&self) -> &'static str {
        "path"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        Ok(path(spec.positive(spec.n, "n")?))
    }
}

pub struct Ring;

impl TopologyGenerator for Ring {
    fn name(&self) -> &'static str {
        "ring"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        let n = spec.positive(spec.n, "n")?;
        if n < 3 {
            return Err(TopologyError::Params("ring needs n >= 3".into()));
        }
        Topology::from_edges((0..n).map(NodeId), (0..n).map(|i| (NodeId(i), NodeId((i + 1) % n))))
    }
}

/// Star with center 0 and `n` leaves.
pub struct Star;

impl TopologyGenerator for Star {
    fn name(&self) -> &'static str {
        "star"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        Ok(star(spec.positive(spec.n, "n")?))
    }
}

pub struct RandomGeometric;

impl TopologyGenerator for RandomGeometric {
    fn name(&self) -> &'static str {
        "random_geometric"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        let n = spec.positive(spec.n, "n")?;
        let r = spec.need(spec.radius, "radius")?;
        if r.is_nan() || r <= 0.0 {
            return Err(TopologyError::Params("`radius` must be positive".into()));
        }
        Ok(random_geometric(n, r, spec.seed.unwrap_or(0)))
    }
}

pub struct Explicit;

impl TopologyGenerator for Explicit {
    fn name(&self) -> &'static str {
        "explicit"
    }

    fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        Topology::from_edges(
            spec.nodes.iter().copied().map(NodeId),
            spec.edges.iter().map(|[a, b]| (NodeId(*a), NodeId(*b))),
        )
    }
}

pub struct GeneratorRegistry {
    generators: BTreeMap<&'static str, Box<dyn TopologyGenerator>>,
}

impl Default for GeneratorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl GeneratorRegistry {
    pub fn empty() -> Self {
        GeneratorRegistry {
            generators: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Grid));
        r.register(Box::new(Path));
        r.register(Box::new(Ring));
        r.register(Box::new(Star));
        r.register(Box::new(RandomGeometric));
        r.register(Box::new(Explicit));
        r
    }

    /// Replaces any generator already registered under the same name.
    pub fn register(&mut self, g: Box<dyn TopologyGenerator>) {
        self.generators.insert(g.name(), g);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.generators.keys().copied()
    }

    pub fn generate(&self, spec: &TopologySpec) -> Result<Topology, TopologyError> {
        let g = self
            .generators
            .get(spec.kind.as_str())
            .ok_or_else(|| TopologyError::Params(format!("unknown topology kind `{}`", spec.kind)))?;
        g.generate(spec)
    }
}

pub fn grid(w: u32, h: u32) -> Topology {
    let id = |x: u32, y: u32| NodeId(y * w + x);
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                edges.push((id(x, y), id(x + 1, y)));
            }
            if y + 1 < h {
                edges.push((id(x, y), id(x, y + 1)));
            }
        }
    }
    Topology::from_edges((0..w * h).map(NodeId), edges).expect("lattice edges are valid")
}

pub fn path(n: u32) -> Topology {
    Topology::from_edges((0..n).map(NodeId), (1..n).map(|i| (NodeId(i - 1), NodeId(i)))).expect("path edges are valid")
}

pub fn star(leaves: u32) -> Topology {
    Topology::from_edges([NodeId(0)], (1..=leaves).map(|i| (NodeId(0), NodeId(i)))).expect("star edges are valid")
}

/// `n` points uniform in the unit square, joined when closer than `radius`.
/// May be disconnected.
pub fn random_geometric(n: u32, radius: f64, seed: u64) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
    let mut edges = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
            if (dx * dx + dy * dy).sqrt() <= radius {
                edges.push((NodeId(i as u32), NodeId(j as u32)));
            }
        }
    }
    Topology::from_edges((0..n).map(NodeId), edges).expect("geometric edges are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = grid(2, 2);
        assert_eq!((g.len(), g.edge_count()), (4, 4));
        let g = grid(3, 3);
        assert_eq!((g.len(), g.edge_count()), (9, 12));
    }

    #[test]
    fn grid_center_neighbors() {
        let g = grid(3, 3);
        let want: Vec<NodeId> = [1, 3, 5, 7].into_iter().map(NodeId).collect();
        assert_eq!(
            g.neighbors(NodeId(4)).unwrap().iter().copied().collect::<Vec<_>>(),
            want
        );
        assert_eq!(g.distance_neighborhood(NodeId(4), 2).unwrap().len(), 8);
    }

    #[test]
    fn random_geometric_is_deterministic() {
        let a = random_geometric(20, 0.3, 42);
        let b = random_geometric(20, 0.3, 42);
        assert_eq!(a, b);
        assert_ne!(a, random_geometric(20, 0.3, 43));
    }

    #[test]
    fn registry_dispatches_by_name() {
        let reg = GeneratorRegistry::with_builtins();
        assert_eq!(reg.generate(&TopologySpec::grid(3, 2)).unwrap(), grid(3, 2));
        let mut bad = TopologySpec::path(3);
        bad.kind = "torus".into();
        assert!(reg.generate(&bad).is_err());
        let mut zero = TopologySpec::grid(0, 2);
        zero.height = Some(2);
        assert!(reg.generate(&zero).is_err());
        let selfloop = TopologySpec {
            kind: "explicit".into(),
            edges: vec![[1, 1]],
            ..Default::default()
        };
        assert_eq!(
            reg.generate(&selfloop),
            Err(TopologyError::InvalidEdge(NodeId(1), NodeId(1)))
        );
    }

    #[test]
    fn explicit_round_trip() {
        let g = grid(3, 2);
        let reg = GeneratorRegistry::default();
        assert_eq!(reg.generate(&TopologySpec::explicit(&g)).unwrap(), g);
    }
}
