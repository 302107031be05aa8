//! Effects returned by router state machines.
//!
//! Routers never touch each other directly; every handler returns a list
//! of actions that the simulation harness turns into delayed events.
//! This keeps each router a plain state machine that can be driven from
//! unit tests without any harness at all.

use std::collections::BTreeMap;

use crate::model::{EncapPacket, EndpointId, Outbound, PortId, UnderlayAddr};

/// Why a packet (or frame) stopped moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    /// Source endpoint not onboarded at this edge.
    NotOnboarded,
    /// Explicit deny rule hit at egress.
    PolicyDenied,
    /// No rule for the group pair; default action denied.
    DefaultDenied,
    /// Destination has a negative map-cache entry.
    NegativeEntry,
    /// No local entry and nothing known about the destination.
    UnknownDest,
    /// Destination endpoint moved away and the new location is not yet
    /// pulled; in-flight traffic is lost in the window.
    MovedAway,
    /// Hop budget exhausted.
    TtlExpired,
    /// Target router is down (rebooting).
    RouterDown,
    /// Next hop withdrawn from the underlay.
    PeerUnreachable,
    /// Forwarding would target this router itself.
    SelfLoop,
    /// Full-table lookup found nothing (proactive mode / border).
    NoRoute,
    /// Non-ARP broadcast frames are not converted, only counted.
    BroadcastUnsupported,
    /// ARP target IP unknown to the routing server.
    ArpUnknown,
}

impl DropReason {
    pub fn label(self) -> &'static str {
        match self {
            DropReason::NotOnboarded => "not_onboarded",
            DropReason::PolicyDenied => "policy_denied",
            DropReason::DefaultDenied => "default_denied",
            DropReason::NegativeEntry => "negative_entry",
            DropReason::UnknownDest => "unknown_dest",
            DropReason::MovedAway => "moved_away",
            DropReason::TtlExpired => "ttl_expired",
            DropReason::RouterDown => "router_down",
            DropReason::PeerUnreachable => "peer_unreachable",
            DropReason::SelfLoop => "self_loop",
            DropReason::NoRoute => "no_route",
            DropReason::BroadcastUnsupported => "broadcast_unsupported",
            DropReason::ArpUnknown => "arp_unknown",
        }
    }
}

/// Phase timestamps of one onboarding, used for ordering audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OnboardTrace {
    pub endpoint: EndpointId,
    pub detected_at: u64,
    pub auth_request_at: u64,
    pub auth_reply_at: u64,
    pub addressed_at: u64,
    pub registered_at: u64,
    pub register_count: u32,
    pub granted: bool,
}

/// One unit of router output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send a control message (serialized through the sender's control
    /// queue by the harness).
    Control(Outbound),
    /// Put a packet on the underlay toward another fabric router.
    Forward { to: UnderlayAddr, pkt: EncapPacket },
    /// Hand a packet to a locally attached endpoint.
    Deliver { endpoint: EndpointId, port: PortId, pkt: EncapPacket },
    /// Ask the address allocator for this endpoint's addresses.
    Dhcp { endpoint: EndpointId },
    /// Terminal packet loss.
    Dropped { reason: DropReason },
    /// Packet left the fabric through the external exit.
    ExternalExit { pkt: EncapPacket },
    /// Onboarding reached a terminal phase.
    Onboarded(OnboardTrace),
}

/// Per-router counters exported at every sampling interval.
#[derive(Debug, Clone, Default)]
pub struct RouterCounters {
    pub acl_hits: u64,
    pub acl_drops: u64,
    pub control_in: u64,
    pub control_out: u64,
    pub packets_fwd: u64,
    pub packets_dropped: u64,
    pub external_pkts: u64,
    pub drops_by_reason: BTreeMap<&'static str, u64>,
}

impl RouterCounters {
    pub fn count_drop(&mut self, reason: DropReason) {
        self.packets_dropped += 1;
        *self.drops_by_reason.entry(reason.label()).or_insert(0) += 1;
    }
}
