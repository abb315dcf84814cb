//! CXL fabric model: a tree of root complex, switches and endpoints, with
//! depth-first enumeration and per-endpoint end-to-end latency.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::MediaProfile;
use crate::units::Latency;

pub type NodeId = u32;

/// Endpoints allowed in one virtual hierarchy.
pub const MAX_ENDPOINTS: usize = 4096;

pub const DEFAULT_SWITCH_NS: f64 = 80.0;
/// One 256 B flit at 64 GT/s over x16 (2 ns) plus a fixed port and
/// propagation constant.
pub const DEFAULT_LINK_NS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    RootComplex,
    Switch,
    Endpoint,
}

/// One node as written in a topology file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_latency_ns: Option<Latency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_latency_ns: Option<Latency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_profile: Option<MediaProfile>,
    /// Overrides the latency the endpoint declares through DOE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dslbis_ns: Option<Latency>,
    /// `false` models an endpoint without a DOE mailbox.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub doe: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl NodeSpec {
    pub fn root(id: NodeId) -> Self {
        NodeSpec {
            id,
            kind: NodeKind::RootComplex,
            parent: None,
            switch_latency_ns: None,
            link_latency_ns: None,
            media_profile: None,
            dslbis_ns: None,
            doe: true,
        }
    }

    pub fn switch(id: NodeId, parent: NodeId, switch: Latency, link: Latency) -> Self {
        NodeSpec {
            kind: NodeKind::Switch,
            parent: Some(parent),
            switch_latency_ns: Some(switch),
            link_latency_ns: Some(link),
            ..Self::root(id)
        }
    }

    pub fn endpoint(id: NodeId, parent: NodeId, link: Latency, media: MediaProfile) -> Self {
        NodeSpec {
            kind: NodeKind::Endpoint,
            parent: Some(parent),
            link_latency_ns: Some(link),
            media_profile: Some(media),
            ..Self::root(id)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("malformed topology: {0}")]
    Malformed(String),
    #[error("cycle through node {0}")]
    Cycle(NodeId),
    #[error("{0} endpoints exceed the limit of {MAX_ENDPOINTS} per virtual hierarchy")]
    TooManyEndpoints(usize),
    #[error("node {0} is not an endpoint of this topology")]
    UnknownEndpoint(NodeId),
    #[error("endpoint {0} has not been enumerated")]
    NotEnumerated(NodeId),
    #[error("endpoint {0} exposes no DOE record")]
    MissingDoe(NodeId),
    #[error("topology file: {0}")]
    Parse(String),
}

/// Registers an endpoint exposes to the host.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfigSpace {
    pub bus_number: Option<u16>,
    pub dslbis_latency_ns: Option<Latency>,
    pub e2e_latency_ns: Option<Latency>,
    pub vendor: u32,
}

/// Root-to-endpoint path through the fabric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualHierarchy {
    pub endpoint_id: NodeId,
    pub path: Vec<NodeId>,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    kind: NodeKind,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    switch_latency: Latency,
    link_latency: Latency,
    media: MediaProfile,
    dslbis_override: Option<Latency>,
    doe: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    root: NodeId,
    config: BTreeMap<NodeId, DeviceConfigSpace>,
    enumerated: bool,
}

impl Topology {
    pub fn from_spec(spec: &TopologySpec) -> Result<Self, TopologyError> {
        let mut nodes = BTreeMap::new();
        let mut root = None;
        for n in &spec.nodes {
            let (switch_latency, link_latency) = match n.kind {
                NodeKind::RootComplex => {
                    if n.parent.is_some() {
                        return Err(TopologyError::Malformed(format!("root complex {} has a parent", n.id)));
                    }
                    if root.replace(n.id).is_some() {
                        return Err(TopologyError::Malformed("more than one root complex".into()));
                    }
                    (Latency::ZERO, Latency::ZERO)
                }
                NodeKind::Switch => (
                    n.switch_latency_ns.unwrap_or(Latency::from_ns(DEFAULT_SWITCH_NS)),
                    n.link_latency_ns.unwrap_or(Latency::from_ns(DEFAULT_LINK_NS)),
                ),
                NodeKind::Endpoint => {
                    if n.switch_latency_ns.is_some() {
                        return Err(TopologyError::Malformed(format!("endpoint {} has a switch latency", n.id)));
                    }
                    (Latency::ZERO, n.link_latency_ns.unwrap_or(Latency::from_ns(DEFAULT_LINK_NS)))
                }
            };
            if n.kind != NodeKind::RootComplex && n.parent.is_none() {
                return Err(TopologyError::Malformed(format!("node {} has no parent", n.id)));
            }
            let node = Node {
                kind: n.kind,
                parent: n.parent,
                children: Vec::new(),
                switch_latency,
                link_latency,
                media: n.media_profile.unwrap_or_default(),
                dslbis_override: n.dslbis_ns,
                doe: n.doe,
            };
            if nodes.insert(n.id, node).is_some() {
                return Err(TopologyError::Malformed(format!("duplicate node id {}", n.id)));
            }
        }
        let root = root.ok_or_else(|| TopologyError::Malformed("no root complex".into()))?;

        let links: Vec<(NodeId, NodeId)> =
            nodes.iter().filter_map(|(&id, n)| n.parent.map(|p| (id, p))).collect();
        for (id, p) in links {
            let parent = nodes
                .get_mut(&p)
                .ok_or_else(|| TopologyError::Malformed(format!("node {id} names missing parent {p}")))?;
            if parent.kind == NodeKind::Endpoint {
                return Err(TopologyError::Malformed(format!("endpoint {p} cannot have children")));
            }
            parent.children.push(id);
        }
        for n in nodes.values_mut() {
            n.children.sort_unstable();
        }
        // Every node must reach the root within |nodes| steps.
        for &start in nodes.keys() {
            let mut cur = start;
            for _ in 0..=nodes.len() {
                match nodes[&cur].parent {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if cur != root {
                return Err(TopologyError::Cycle(start));
            }
        }
        let endpoints = nodes.values().filter(|n| n.kind == NodeKind::Endpoint).count();
        if endpoints > MAX_ENDPOINTS {
            return Err(TopologyError::TooManyEndpoints(endpoints));
        }
        let config = nodes
            .iter()
            .filter(|(_, n)| n.kind == NodeKind::Endpoint)
            .map(|(&id, n)| (id, DeviceConfigSpace { dslbis_latency_ns: if n.doe { n.dslbis_override } else { None }, ..Default::default() }))
            .collect();
        Ok(Topology { nodes, root, config, enumerated: false })
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let spec: TopologySpec = serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Parse(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_spec(&self) -> TopologySpec {
        let nodes = self
            .nodes
            .iter()
            .map(|(&id, n)| {
                let mut s = NodeSpec::root(id);
                s.kind = n.kind;
                s.parent = n.parent;
                match n.kind {
                    NodeKind::RootComplex => {}
                    NodeKind::Switch => {
                        s.switch_latency_ns = Some(n.switch_latency);
                        s.link_latency_ns = Some(n.link_latency);
                    }
                    NodeKind::Endpoint => {
                        s.link_latency_ns = Some(n.link_latency);
                        s.media_profile = Some(n.media);
                        s.dslbis_ns = n.dslbis_override;
                        s.doe = n.doe;
                    }
                }
                s
            })
            .collect();
        TopologySpec { nodes }
    }

    /// Root complex, `depth` switches in a chain, then one endpoint.
    /// Node ids count up from 0 along the chain.
    pub fn chain(depth: u32, link: Latency, switch: Latency, media: MediaProfile) -> Self {
        let mut nodes = vec![NodeSpec::root(0)];
        for d in 0..depth {
            nodes.push(NodeSpec::switch(d + 1, d, switch, link));
        }
        nodes.push(NodeSpec::endpoint(depth + 1, depth, link, media));
        Self::from_spec(&TopologySpec { nodes }).expect("a chain is a valid tree")
    }

    /// A directly attached endpoint with default link latency.
    pub fn direct(media: MediaProfile) -> Self {
        Self::chain(0, Latency::from_ns(DEFAULT_LINK_NS), Latency::from_ns(DEFAULT_SWITCH_NS), media)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(&id).map(|n| n.kind)
    }

    /// Endpoint ids in ascending order.
    pub fn endpoints(&self) -> Vec<NodeId> {
        self.config.keys().copied().collect()
    }

    pub fn media(&self, endpoint: NodeId) -> Result<MediaProfile, TopologyError> {
        self.endpoint_node(endpoint).map(|n| n.media)
    }

    pub fn link_latency(&self, id: NodeId) -> Option<Latency> {
        self.nodes.get(&id).map(|n| n.link_latency)
    }

    pub fn switch_latency(&self, id: NodeId) -> Option<Latency> {
        self.nodes.get(&id).map(|n| n.switch_latency)
    }

    pub fn is_enumerated(&self) -> bool {
        self.enumerated
    }

    pub fn config_space(&self, endpoint: NodeId) -> Result<&DeviceConfigSpace, TopologyError> {
        self.config.get(&endpoint).ok_or(TopologyError::UnknownEndpoint(endpoint))
    }

    fn endpoint_node(&self, endpoint: NodeId) -> Result<&Node, TopologyError> {
        match self.nodes.get(&endpoint) {
            Some(n) if n.kind == NodeKind::Endpoint => Ok(n),
            _ => Err(TopologyError::UnknownEndpoint(endpoint)),
        }
    }

    /// Depth-first walk from the root, children in ascending id order. Each
    /// switch and each endpoint takes the next bus number when first visited.
    pub fn enumerate(&mut self) -> BTreeMap<NodeId, (u16, u32)> {
        let mut out = BTreeMap::new();
        let mut bus: u16 = 0;
        let mut stack: Vec<(NodeId, u32)> = vec![(self.root, 0)];
        while let Some((id, depth)) = stack.pop() {
            let node = &self.nodes[&id];
            let below = match node.kind {
                NodeKind::RootComplex => depth,
                NodeKind::Switch => {
                    bus += 1;
                    depth + 1
                }
                NodeKind::Endpoint => {
                    bus += 1;
                    out.insert(id, (bus, depth));
                    depth
                }
            };
            for &c in node.children.iter().rev() {
                stack.push((c, below));
            }
        }
        for (id, &(b, _)) in &out {
            self.config.get_mut(id).expect("endpoint has config space").bus_number = Some(b);
        }
        self.enumerated = true;
        out
    }

    pub fn vh(&self, endpoint: NodeId) -> Result<VirtualHierarchy, TopologyError> {
        self.endpoint_node(endpoint)?;
        let mut path = vec![endpoint];
        let mut cur = endpoint;
        while let Some(p) = self.nodes[&cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        let depth = path.iter().filter(|id| self.nodes[id].kind == NodeKind::Switch).count() as u32;
        Ok(VirtualHierarchy { endpoint_id: endpoint, path, depth })
    }

    /// One-way fabric latency between the root complex and `endpoint`.
    pub fn path_latency(&self, endpoint: NodeId) -> Result<Latency, TopologyError> {
        let vh = self.vh(endpoint)?;
        Ok(vh.path.iter().map(|id| {
            let n = &self.nodes[id];
            n.link_latency + n.switch_latency
        }).sum())
    }

    /// Called by the device model at setup to publish its declared latency.
    pub fn attach_doe(&mut self, endpoint: NodeId, latency: Latency) -> Result<(), TopologyError> {
        let node = self.endpoint_node(endpoint)?;
        if !node.doe {
            return Ok(());
        }
        let declared = node.dslbis_override.unwrap_or(latency);
        self.config.get_mut(&endpoint).expect("endpoint has config space").dslbis_latency_ns = Some(declared);
        Ok(())
    }

    pub fn read_dslbis(&self, endpoint: NodeId) -> Result<Latency, TopologyError> {
        self.config_space(endpoint)?.dslbis_latency_ns.ok_or(TopologyError::MissingDoe(endpoint))
    }

    /// dslbis plus every link and switch on the path; stored in the
    /// endpoint's config space.
    pub fn compute_e2e_latency(&mut self, endpoint: NodeId) -> Result<Latency, TopologyError> {
        let cs = self.config_space(endpoint)?;
        if cs.bus_number.is_none() {
            return Err(TopologyError::NotEnumerated(endpoint));
        }
        let e2e = self.read_dslbis(endpoint)? + self.path_latency(endpoint)?;
        self.config.get_mut(&endpoint).expect("checked above").e2e_latency_ns = Some(e2e);
        Ok(e2e)
    }

    pub fn e2e_latency(&self, endpoint: NodeId) -> Result<Latency, TopologyError> {
        self.config_space(endpoint)?.e2e_latency_ns.ok_or(TopologyError::NotEnumerated(endpoint))
    }

    /// Splices a new switch between `endpoint` and its parent. The new
    /// switch's uplink gets `link`; the endpoint keeps its own link.
    /// Enumeration results are discarded.
    pub fn insert_switch(&mut self, endpoint: NodeId, switch: Latency, link: Latency) -> Result<NodeId, TopologyError> {
        self.endpoint_node(endpoint)?;
        let id = self.nodes.keys().next_back().copied().unwrap_or(0) + 1;
        let parent = self.nodes[&endpoint].parent.expect("endpoints have parents");
        let p = self.nodes.get_mut(&parent).expect("parent exists");
        let slot = p.children.iter().position(|&c| c == endpoint).expect("child registered");
        p.children.remove(slot);
        p.children.push(id);
        p.children.sort_unstable();
        self.nodes.insert(
            id,
            Node {
                kind: NodeKind::Switch,
                parent: Some(parent),
                children: vec![endpoint],
                switch_latency: switch,
                link_latency: link,
                media: MediaProfile::default(),
                dslbis_override: None,
                doe: true,
            },
        );
        self.nodes.get_mut(&endpoint).expect("checked").parent = Some(id);
        self.enumerated = false;
        for cs in self.config.values_mut() {
            cs.bus_number = None;
            cs.e2e_latency_ns = None;
        }
        Ok(id)
    }
}
