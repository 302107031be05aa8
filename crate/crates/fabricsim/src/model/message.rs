//! Control-plane message records exchanged between routers and servers.
//!
//! Real deployments speak RADIUS, SXP and a map-server protocol on the
//! wire; here every exchange is a typed record delivered through the
//! simulator with configurable delays.

use serde::{Deserialize, Serialize};

use super::{AuthToken, EndpointId, GroupId, OverlayAddr, UnderlayAddr, Vn};

/// Key of the endpoint-location store: virtual network plus overlay
/// address. Keys in distinct virtual networks never match each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MappingKey {
    pub vn: Vn,
    pub addr: OverlayAddr,
}

impl MappingKey {
    pub fn new(vn: Vn, addr: OverlayAddr) -> Self {
        Self { vn, addr: addr.normalized() }
    }
}

impl std::fmt::Display for MappingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.vn, self.addr)
    }
}

/// One unit of location state: where an overlay address currently lives.
///
/// `version` is assigned by the routing server and strictly increases on
/// every update to the same key; registering routers leave it zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub key: MappingKey,
    pub locator: UnderlayAddr,
    pub group: GroupId,
    pub registered_at: u64,
    pub version: u64,
}

/// Allow or deny for one ordered group pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleAction {
    Allow,
    Deny,
}

/// One row of the group connectivity matrix. Rules never cross virtual
/// networks; at most one rule exists per (vn, src, dst).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnectivityRule {
    pub vn: Vn,
    pub src_group: GroupId,
    pub dst_group: GroupId,
    pub action: RuleAction,
}

/// Everything the policy server knows about one endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub endpoint_id: EndpointId,
    pub auth_token: AuthToken,
    pub vn: Vn,
    pub group: GroupId,
    pub addrs: Vec<OverlayAddr>,
}

/// Successful authentication result: segment assignment plus the
/// connectivity rules whose destination is the endpoint's group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthResult {
    pub endpoint_id: EndpointId,
    pub vn: Vn,
    pub group: GroupId,
    pub rules: Vec<ConnectivityRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthOutcome {
    Granted(AuthResult),
    Denied,
}

/// Session start (onboarding) or stop (departure accounting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthRequestKind {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthReply {
    pub endpoint_id: EndpointId,
    pub outcome: AuthOutcome,
}

/// What a resolution asks for: a locator for a key, or the MAC bound to
/// an overlay IP (the L2 gateway's first lookup when converting a
/// broadcast ARP into unicast).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapQuery {
    Locator(MappingKey),
    IpToMac { vn: Vn, ip: OverlayAddr },
}

impl MapQuery {
    pub fn key(&self) -> MappingKey {
        match *self {
            MapQuery::Locator(key) => key,
            MapQuery::IpToMac { vn, ip } => MappingKey::new(vn, ip),
        }
    }
}

/// Incremental state carried to full-table holders (synchronized borders
/// and, in proactive mode, every edge).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FibUpdate {
    Snapshot(Vec<MappingEntry>),
    Upsert(MappingEntry),
    Remove { key: MappingKey, version: u64 },
}

/// The control-plane message vocabulary. One enum variant per message
/// kind; bodies are kind specific.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    /// Resolve an overlay destination.
    MapRequest { query: MapQuery },
    /// Positive resolution: exactly one mapping entry, plus the IP-to-MAC
    /// binding when the query asked for it.
    MapReply { entry: MappingEntry, l2_binding: Option<OverlayAddr> },
    /// No entry covers the queried key; carries the key only.
    NegativeMapReply { key: MappingKey },
    /// Publish or refresh the location of an overlay address. The
    /// optional binding records the endpoint MAC paired with a registered
    /// IP for L2 service. A register with `withdraw` set retracts the
    /// mapping instead (record with zero lifetime).
    MapRegister {
        entry: MappingEntry,
        arp_binding: Option<(OverlayAddr, OverlayAddr)>,
        withdraw: bool,
    },
    /// Tell the holder of a stale mapping to re-resolve it.
    SolicitUpdate { key: MappingKey },
    /// Route update stream for subscribed borders.
    SubscribeUpdate { update: FibUpdate },
    /// Endpoint authentication exchange with the policy server.
    AuthRequest { endpoint_id: EndpointId, token: AuthToken, kind: AuthRequestKind },
    AuthReply(AuthReply),
    /// Destination-filtered rule set pushed to an edge hosting the group.
    RuleDownload { vn: Vn, dst_group: GroupId, rules: Vec<ConnectivityRule> },
    /// Full-fanout location update in proactive mode.
    ProactivePush { update: FibUpdate },
}

impl ControlMessage {
    /// Stable kind label used in metrics and exports.
    pub fn kind(&self) -> &'static str {
        match self {
            ControlMessage::MapRequest { .. } => "map_request",
            ControlMessage::MapReply { .. } => "map_reply",
            ControlMessage::NegativeMapReply { .. } => "negative_map_reply",
            ControlMessage::MapRegister { .. } => "map_register",
            ControlMessage::SolicitUpdate { .. } => "solicit_update",
            ControlMessage::SubscribeUpdate { .. } => "subscribe_update",
            ControlMessage::AuthRequest { .. } => "auth_request",
            ControlMessage::AuthReply(_) => "auth_reply",
            ControlMessage::RuleDownload { .. } => "rule_download",
            ControlMessage::ProactivePush { .. } => "proactive_push",
        }
    }
}

/// Where a control message is headed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ControlDest {
    Router(UnderlayAddr),
    RoutingServer,
    PolicyServer,
    Reflector,
}

/// A control message queued for transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: ControlDest,
    pub msg: ControlMessage,
}

impl Outbound {
    pub fn to_router(addr: UnderlayAddr, msg: ControlMessage) -> Self {
        Self { to: ControlDest::Router(addr), msg }
    }
}
