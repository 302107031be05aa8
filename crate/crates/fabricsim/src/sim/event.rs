//! Event queue primitives.
//!
//! Events execute in (time, insertion-sequence) order; the sequence
//! number breaks ties FIFO, which together with seeded generators makes
//! a run a pure function of (scenario, seed).

use std::cmp::Ordering;

use crate::model::{ControlMessage, EncapPacket, GroupId, Outbound, OverlayAddr, UnderlayAddr};
use crate::policy_server::MatrixChange;

/// Simulated clock value in microseconds.
pub type Micros = u64;

/// A fabric router (data-plane addressable node).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RouterId {
    Edge(u16),
    Border(u16),
}

/// A control-plane processing node (routers plus the servers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CtrlNode {
    Edge(u16),
    Border(u16),
    Routing,
    Policy,
    Reflector,
}

/// A packet in flight plus bookkeeping the packet itself must not carry.
#[derive(Debug, Clone, Copy)]
pub struct PacketWrap {
    pub pkt: EncapPacket,
    pub uid: u64,
    /// Underlay transmissions so far (bounded by the TTL budget).
    pub hops: u8,
    /// Traversals of a (reboot-flagged edge <-> border) link.
    pub reboot_crossings: u8,
}

/// Where generated traffic is pointed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDest {
    Endpoint(u32),
    External(OverlayAddr),
}

#[derive(Debug, Clone)]
pub enum Ev {
    PacketArrive { node: RouterId, wrap: PacketWrap },
    CtrlArrive { node: CtrlNode, from: CtrlNode, msg: ControlMessage },
    CtrlDone { node: CtrlNode },
    /// A reply held back for an extra latency (auth exchanges).
    DeferredSend { node: CtrlNode, out: Outbound },
    FlowTick { endpoint: u32 },
    FlowPacket { endpoint: u32, dest: FlowDest, remaining: u16 },
    StreamTick { stream: u32 },
    MobilityTick,
    ScriptedMove { endpoint: u32, to_edge: u16 },
    Attach { endpoint: u32, edge: u16 },
    PresenceArrive { endpoint: u32 },
    PresenceDepart { endpoint: u32 },
    DhcpDone { edge: u16, endpoint: u32 },
    RebootStart { edge: u16 },
    RebootEnd { edge: u16 },
    Redetect { edge: u16 },
    UnderlayNotice { about: UnderlayAddr, reachable: bool },
    SampleTick,
    ArpProbe { index: u32 },
    MatrixChange(MatrixChange),
    Reassign { endpoint: u32, group: GroupId },
}

#[derive(Debug)]
pub struct SimEvent {
    pub time: Micros,
    pub seq: u64,
    pub ev: Ev,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}
