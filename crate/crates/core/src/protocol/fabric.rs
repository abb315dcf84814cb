use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Message;
use crate::topology::{NodeId, Topology, TopologyError};
use crate::units::{Clock, Latency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Host to device.
    Down,
    /// Device to host.
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Lane {
    Mem(Direction),
    Io,
}

/// Delivery timing over each endpoint's virtual hierarchy. Every lane is
/// FIFO; CXL.io notifications use their own lane so they never hold up
/// memory traffic.
#[derive(Clone, Debug)]
pub struct Fabric {
    path_cycles: BTreeMap<NodeId, u64>,
    io_cycles: u64,
    last: BTreeMap<(NodeId, Lane), u64>,
}

impl Fabric {
    pub fn new(topology: &Topology, clock: Clock, io_overhead: Latency) -> Result<Self, TopologyError> {
        let mut path_cycles = BTreeMap::new();
        for ep in topology.endpoints() {
            path_cycles.insert(ep, clock.cycles(topology.path_latency(ep)?));
        }
        Ok(Fabric { path_cycles, io_cycles: clock.cycles(io_overhead), last: BTreeMap::new() })
    }

    /// Cycles for one traversal between the root complex and `endpoint`.
    pub fn one_way_cycles(&self, endpoint: NodeId) -> Result<u64, TopologyError> {
        self.path_cycles.get(&endpoint).copied().ok_or(TopologyError::UnknownEndpoint(endpoint))
    }

    pub fn io_overhead_cycles(&self) -> u64 {
        self.io_cycles
    }

    fn schedule(&mut self, endpoint: NodeId, lane: Lane, arrival: u64) -> u64 {
        let slot = self.last.entry((endpoint, lane)).or_insert(0);
        let at = arrival.max(*slot);
        *slot = at;
        at
    }

    pub fn deliver(&mut self, msg: &Message, endpoint: NodeId, send_cycle: u64) -> Result<u64, TopologyError> {
        let arrival = send_cycle + self.one_way_cycles(endpoint)?;
        Ok(self.schedule(endpoint, Lane::Mem(msg.opcode.direction()), arrival))
    }

    /// Arrival of a host-to-device CXL.io notification.
    pub fn deliver_io(&mut self, endpoint: NodeId, send_cycle: u64) -> Result<u64, TopologyError> {
        let arrival = send_cycle + self.one_way_cycles(endpoint)? + self.io_cycles;
        Ok(self.schedule(endpoint, Lane::Io, arrival))
    }
}
