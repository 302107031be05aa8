//! Edge router: onboarding, reactive map-cache, ingress encapsulation,
//! two-stage egress pipeline, roam and reboot handling, and the L2
//! broadcast-to-unicast gateway.
//!
//! The router is a state machine driven purely by the event loop. All
//! interaction with the rest of the fabric goes through returned
//! [`Action`]s, so a whole router can be relocated between execution
//! contexts as one unit.

use std::collections::{BTreeMap, BTreeSet};

use crate::effects::{Action, DropReason, OnboardTrace, RouterCounters};
use crate::model::{
    encapsulate, AuthOutcome, AuthReply, AuthRequestKind, AuthToken, ConnectivityRule,
    ControlDest, ControlMessage, EncapPacket, EndpointId, FibUpdate, GroupId, MapQuery,
    MappingEntry, MappingKey, Outbound, OverlayAddr, PortId, RuleAction, UnderlayAddr, Vn,
};

/// Per-edge behavior knobs, all scenario-tunable.
#[derive(Debug, Clone)]
pub struct EdgeConfig {
    /// Lifetime of positively resolved map-cache entries (µs).
    pub map_cache_ttl: u64,
    /// Lifetime of negative entries (µs).
    pub negative_ttl: u64,
    /// Re-resolution attempts allowed while an entry is negative.
    pub negative_retry_budget: u8,
    /// Send a stale-entry solicit back to the source for traffic to
    /// unknown destinations instead of re-forwarding it via the default
    /// route (the second reboot-loop mitigation).
    pub solicit_unknown: bool,
    /// Full-table push mode: no map-cache, no resolutions.
    pub proactive: bool,
    /// Action when no group rule matches a (src, dst) pair.
    pub default_action: RuleAction,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            map_cache_ttl: 24 * 3_600 * 1_000_000,
            negative_ttl: 60 * 1_000_000,
            negative_retry_budget: 3,
            solicit_unknown: true,
            proactive: false,
            default_action: RuleAction::Deny,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheState {
    Fresh,
    Resolving,
    Negative,
}

/// A reactively learned mapping with freshness state.
#[derive(Debug, Clone)]
pub struct MapCacheEntry {
    pub state: CacheState,
    /// Known locator. Present on Fresh entries; a Resolving entry keeps
    /// the previous locator after a solicit so in-flight traffic stays on
    /// the old path until the reply lands.
    pub locator: Option<UnderlayAddr>,
    pub learned_at: u64,
    pub expires_at: u64,
    pub retries_left: u8,
    /// A resolution is in flight for this key (dedup guard).
    pub outstanding: bool,
    /// Sources already told to re-resolve this key (data-plane solicit
    /// dedup while this router relays for a moved endpoint).
    pub solicited: BTreeSet<UnderlayAddr>,
}

/// Onboarding phases advance strictly in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OnboardPhase {
    Detected,
    Authenticating,
    RulesInstalled,
    Addressed,
    Registered,
}

#[derive(Debug, Clone)]
pub struct OnboardState {
    pub endpoint: EndpointId,
    pub phase: OnboardPhase,
    detected_at: u64,
    auth_request_at: u64,
    auth_reply_at: u64,
    addressed_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachReason {
    Moved,
    Departed,
}

#[derive(Debug, Clone)]
struct Tombstone {
    reason: DetachReason,
    since: u64,
    solicited: BTreeSet<UnderlayAddr>,
}

#[derive(Debug, Clone)]
struct PortBinding {
    endpoint: EndpointId,
    vn: Option<Vn>,
    group: Option<GroupId>,
    token: AuthToken,
    mac: Option<OverlayAddr>,
    addrs: Vec<OverlayAddr>,
}

/// Everything the edge needs to start onboarding a detected endpoint.
#[derive(Debug, Clone)]
pub struct AttachInfo {
    pub endpoint: EndpointId,
    pub port: PortId,
    pub token: AuthToken,
    pub mac: Option<OverlayAddr>,
}

/// What kind of broadcast frame a local endpoint emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Broadcast {
    ArpWhoHas { target_ip: OverlayAddr },
    Other,
}

#[derive(Debug, Clone)]
enum ArpStage {
    AwaitMac,
    AwaitLocator { mac: OverlayAddr },
}

#[derive(Debug, Clone)]
struct PendingArp {
    vn: Vn,
    group: GroupId,
    src_mac: OverlayAddr,
    payload_len: u32,
    stage: ArpStage,
}

pub struct EdgeRouter {
    locator: UnderlayAddr,
    home_border: UnderlayAddr,
    cfg: EdgeConfig,
    /// Stage-1 table: local host entries per virtual network.
    vrf_locals: BTreeMap<(Vn, OverlayAddr), (PortId, GroupId)>,
    /// Reactive map-cache for remote destinations.
    cache: BTreeMap<MappingKey, MapCacheEntry>,
    /// Non-host cached prefixes (covering routes, e.g. external space).
    cache_prefixes: BTreeSet<MappingKey>,
    /// Stage-2 exact-match group ACL, destination groups local only.
    acl: BTreeMap<(Vn, GroupId, GroupId), RuleAction>,
    /// Local endpoints per destination group, for ACL pruning.
    group_refs: BTreeMap<(Vn, GroupId), usize>,
    ports: BTreeMap<PortId, PortBinding>,
    endpoint_ports: BTreeMap<EndpointId, PortId>,
    onboardings: BTreeMap<EndpointId, OnboardState>,
    quarantined: BTreeSet<EndpointId>,
    /// Recently departed local keys awaiting a pull or expiry.
    tombstones: BTreeMap<MappingKey, Tombstone>,
    /// Peers currently withdrawn from the underlay.
    unreachable: BTreeSet<UnderlayAddr>,
    rebooting: bool,
    pending_arp: BTreeMap<MappingKey, PendingArp>,
    /// Proactive mode full table: host slots by interned index plus the
    /// handful of covering prefixes.
    proactive_hosts: Vec<Option<(UnderlayAddr, u64)>>,
    proactive_prefixes: BTreeMap<MappingKey, (UnderlayAddr, u64)>,
    pub counters: RouterCounters,
}

impl EdgeRouter {
    pub fn new(locator: UnderlayAddr, home_border: UnderlayAddr, cfg: EdgeConfig) -> Self {
        Self {
            locator,
            home_border,
            cfg,
            vrf_locals: BTreeMap::new(),
            cache: BTreeMap::new(),
            cache_prefixes: BTreeSet::new(),
            acl: BTreeMap::new(),
            group_refs: BTreeMap::new(),
            ports: BTreeMap::new(),
            endpoint_ports: BTreeMap::new(),
            onboardings: BTreeMap::new(),
            quarantined: BTreeSet::new(),
            tombstones: BTreeMap::new(),
            unreachable: BTreeSet::new(),
            rebooting: false,
            pending_arp: BTreeMap::new(),
            proactive_hosts: Vec::new(),
            proactive_prefixes: BTreeMap::new(),
            counters: RouterCounters::default(),
        }
    }

    pub fn locator(&self) -> UnderlayAddr {
        self.locator
    }

    pub fn is_rebooting(&self) -> bool {
        self.rebooting
    }

    pub fn is_quarantined(&self, endpoint: EndpointId) -> bool {
        self.quarantined.contains(&endpoint)
    }

    pub fn onboard_phase(&self, endpoint: EndpointId) -> Option<OnboardPhase> {
        self.onboardings.get(&endpoint).map(|o| o.phase)
    }

    pub fn local_entry(&self, vn: Vn, addr: &OverlayAddr) -> Option<(PortId, GroupId)> {
        self.vrf_locals.get(&(vn, addr.normalized())).copied()
    }

    pub fn cache_entry(&self, key: &MappingKey) -> Option<&MapCacheEntry> {
        self.cache.get(key)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn local_len(&self) -> usize {
        self.vrf_locals.len()
    }

    pub fn acl_len(&self) -> usize {
        self.acl.len()
    }

    pub fn acl_rules(&self) -> impl Iterator<Item = ConnectivityRule> + '_ {
        self.acl.iter().map(|((vn, src, dst), action)| ConnectivityRule {
            vn: *vn,
            src_group: *src,
            dst_group: *dst,
            action: *action,
        })
    }

    /// Fresh (unexpired) map-cache entries plus local host entries; the
    /// overlay FIB footprint of this router. Expired entries are purged
    /// on the way.
    pub fn fib_entries(&mut self, now: u64) -> u64 {
        if self.cfg.proactive {
            let hosts = self.proactive_hosts.iter().filter(|s| s.is_some()).count();
            return (hosts + self.proactive_prefixes.len() + self.vrf_locals.len()) as u64;
        }
        self.purge_expired(now);
        let fresh = self.cache.values().filter(|e| e.state == CacheState::Fresh).count();
        (fresh + self.vrf_locals.len()) as u64
    }

    fn purge_expired(&mut self, now: u64) {
        let dead: Vec<MappingKey> = self
            .cache
            .iter()
            .filter(|(_, e)| e.expires_at <= now && !e.outstanding)
            .map(|(k, _)| *k)
            .collect();
        for k in dead {
            self.cache.remove(&k);
            self.cache_prefixes.remove(&k);
        }
        let stale: Vec<MappingKey> = self
            .tombstones
            .iter()
            .filter(|(_, t)| now.saturating_sub(t.since) > self.cfg.map_cache_ttl)
            .map(|(k, _)| *k)
            .collect();
        for k in stale {
            self.tombstones.remove(&k);
        }
    }

    // ---- onboarding -----------------------------------------------------

    /// A new endpoint showed up on a local port: start authentication.
    /// Address assignment and registration follow strictly after.
    pub fn endpoint_attached(&mut self, info: AttachInfo, now: u64) -> Vec<Action> {
        if self.rebooting {
            return Vec::new();
        }
        self.quarantined.remove(&info.endpoint);
        self.ports.insert(
            info.port,
            PortBinding {
                endpoint: info.endpoint,
                vn: None,
                group: None,
                token: info.token,
                mac: info.mac,
                addrs: Vec::new(),
            },
        );
        self.endpoint_ports.insert(info.endpoint, info.port);
        self.onboardings.insert(
            info.endpoint,
            OnboardState {
                endpoint: info.endpoint,
                phase: OnboardPhase::Authenticating,
                detected_at: now,
                auth_request_at: now,
                auth_reply_at: 0,
                addressed_at: 0,
            },
        );
        vec![Action::Control(Outbound {
            to: ControlDest::PolicyServer,
            msg: ControlMessage::AuthRequest {
                endpoint_id: info.endpoint,
                token: info.token,
                kind: AuthRequestKind::Start,
            },
        })]
    }

    /// Authentication result, either for an onboarding in progress or an
    /// unsolicited refresh (group reassignment at the policy server).
    pub fn handle_auth_reply(&mut self, reply: &AuthReply, now: u64) -> Vec<Action> {
        let endpoint = reply.endpoint_id;
        let Some(port) = self.endpoint_ports.get(&endpoint).copied() else {
            return Vec::new(); // endpoint left while the reply was in flight
        };
        match &reply.outcome {
            AuthOutcome::Denied => {
                // Quarantine: no rules, no address, no registration.
                if let Some(ob) = self.onboardings.remove(&endpoint) {
                    self.ports.remove(&port);
                    self.endpoint_ports.remove(&endpoint);
                    self.quarantined.insert(endpoint);
                    return vec![Action::Onboarded(OnboardTrace {
                        endpoint,
                        detected_at: ob.detected_at,
                        auth_request_at: ob.auth_request_at,
                        auth_reply_at: now,
                        addressed_at: 0,
                        registered_at: 0,
                        register_count: 0,
                        granted: false,
                    })];
                }
                Vec::new()
            }
            AuthOutcome::Granted(result) => {
                let onboarding =
                    matches!(self.onboardings.get(&endpoint).map(|o| o.phase),
                        Some(OnboardPhase::Authenticating));
                if onboarding {
                    let binding = self.ports.get_mut(&port).expect("binding exists");
                    binding.vn = Some(result.vn);
                    binding.group = Some(result.group);
                    self.install_rules(&result.rules);
                    *self.group_refs.entry((result.vn, result.group)).or_insert(0) += 1;
                    let ob = self.onboardings.get_mut(&endpoint).unwrap();
                    ob.phase = OnboardPhase::RulesInstalled;
                    ob.auth_reply_at = now;
                    vec![Action::Dhcp { endpoint }]
                } else {
                    // Refresh for an already registered endpoint: rebind
                    // the group, update local entries, re-register.
                    self.apply_group_refresh(endpoint, port, result, now)
                }
            }
        }
    }

    fn apply_group_refresh(
        &mut self,
        endpoint: EndpointId,
        port: PortId,
        result: &crate::model::AuthResult,
        now: u64,
    ) -> Vec<Action> {
        let binding = self.ports.get_mut(&port).expect("binding exists");
        let old_group = binding.group;
        let vn = result.vn;
        binding.group = Some(result.group);
        let addrs = binding.addrs.clone();
        for addr in &addrs {
            if let Some(slot) = self.vrf_locals.get_mut(&(vn, *addr)) {
                slot.1 = result.group;
            }
        }
        if let Some(old) = old_group {
            if old != result.group {
                let refs = self.group_refs.entry((vn, old)).or_insert(1);
                *refs -= 1;
                if *refs == 0 {
                    self.group_refs.remove(&(vn, old));
                    self.prune_acl_group(vn, old);
                }
                *self.group_refs.entry((vn, result.group)).or_insert(0) += 1;
            }
        }
        self.install_rules(&result.rules);
        let mac = self.ports.get(&port).and_then(|b| b.mac);
        let mut out = Vec::new();
        for addr in &addrs {
            out.push(self.register_action(vn, *addr, result.group, mac, now));
        }
        out
    }

    /// Address allocation finished: install local entries and publish the
    /// endpoint's location. Registration is always the last step.
    pub fn dhcp_complete(
        &mut self,
        endpoint: EndpointId,
        addrs: &[OverlayAddr],
        now: u64,
    ) -> Vec<Action> {
        let Some(port) = self.endpoint_ports.get(&endpoint).copied() else {
            return Vec::new();
        };
        let Some(ob) = self.onboardings.get_mut(&endpoint) else {
            return Vec::new();
        };
        if ob.phase != OnboardPhase::RulesInstalled {
            return Vec::new();
        }
        ob.phase = OnboardPhase::Addressed;
        ob.addressed_at = now;
        let binding = self.ports.get_mut(&port).expect("binding exists");
        let vn = binding.vn.expect("vn set after auth");
        let group = binding.group.expect("group set after auth");
        let mac = binding.mac;
        binding.addrs = addrs.to_vec();
        let mut out = Vec::new();
        for addr in addrs {
            let key = MappingKey::new(vn, *addr);
            self.vrf_locals.insert((vn, key.addr), (port, group));
            self.tombstones.remove(&key);
            // A stale self-pointing cache entry would shadow-count the
            // local route; drop it.
            self.cache.remove(&key);
            self.cache_prefixes.remove(&key);
            out.push(self.register_action(vn, *addr, group, mac, now));
        }
        let ob = self.onboardings.get_mut(&endpoint).unwrap();
        ob.phase = OnboardPhase::Registered;
        out.push(Action::Onboarded(OnboardTrace {
            endpoint,
            detected_at: ob.detected_at,
            auth_request_at: ob.auth_request_at,
            auth_reply_at: ob.auth_reply_at,
            addressed_at: ob.addressed_at,
            registered_at: now,
            register_count: addrs.len() as u32,
            granted: true,
        }));
        out
    }

    fn register_action(
        &self,
        vn: Vn,
        addr: OverlayAddr,
        group: GroupId,
        mac: Option<OverlayAddr>,
        now: u64,
    ) -> Action {
        let key = MappingKey::new(vn, addr);
        let arp_binding = match (addr.family(), mac) {
            (crate::model::AddrFamily::Ipv4, Some(m)) => Some((addr, m)),
            _ => None,
        };
        Action::Control(Outbound {
            to: if self.cfg.proactive { ControlDest::Reflector } else { ControlDest::RoutingServer },
            msg: ControlMessage::MapRegister {
                entry: MappingEntry {
                    key,
                    locator: self.locator,
                    group,
                    registered_at: now,
                    version: 0,
                },
                arp_binding,
                withdraw: false,
            },
        })
    }

    fn install_rules(&mut self, rules: &[ConnectivityRule]) {
        for r in rules {
            self.acl.insert((r.vn, r.src_group, r.dst_group), r.action);
        }
    }

    fn prune_acl_group(&mut self, vn: Vn, dst: GroupId) {
        self.acl.retain(|(rvn, _, rdst), _| !(*rvn == vn && *rdst == dst));
    }

    /// Replace the rule set for one destination group (policy push).
    pub fn handle_rule_download(
        &mut self,
        vn: Vn,
        dst_group: GroupId,
        rules: &[ConnectivityRule],
    ) {
        if !self.group_refs.contains_key(&(vn, dst_group)) {
            return; // group no longer attached here
        }
        self.prune_acl_group(vn, dst_group);
        self.install_rules(rules);
    }

    /// The endpoint left this edge, by roaming or by departing outright.
    /// Departures withdraw the published mappings and close the auth
    /// session; roams leave the registration in place for the new edge's
    /// register to supersede.
    pub fn detach(&mut self, endpoint: EndpointId, reason: DetachReason, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        self.quarantined.remove(&endpoint);
        self.onboardings.remove(&endpoint);
        let Some(port) = self.endpoint_ports.remove(&endpoint) else {
            return out;
        };
        let Some(binding) = self.ports.remove(&port) else {
            return out;
        };
        let (Some(vn), Some(group)) = (binding.vn, binding.group) else {
            // Detached mid-onboarding; nothing was installed yet.
            return out;
        };
        for addr in &binding.addrs {
            let key = MappingKey::new(vn, *addr);
            self.vrf_locals.remove(&(vn, key.addr));
            self.tombstones.insert(
                key,
                Tombstone { reason, since: now, solicited: BTreeSet::new() },
            );
            if reason == DetachReason::Departed {
                out.push(Action::Control(Outbound {
                    to: if self.cfg.proactive {
                        ControlDest::Reflector
                    } else {
                        ControlDest::RoutingServer
                    },
                    msg: ControlMessage::MapRegister {
                        entry: MappingEntry {
                            key,
                            locator: self.locator,
                            group,
                            registered_at: now,
                            version: 0,
                        },
                        arp_binding: None,
                        withdraw: true,
                    },
                }));
            }
        }
        if reason == DetachReason::Departed {
            out.push(Action::Control(Outbound {
                to: ControlDest::PolicyServer,
                msg: ControlMessage::AuthRequest {
                    endpoint_id: endpoint,
                    token: binding.token,
                    kind: AuthRequestKind::Stop,
                },
            }));
        }
        let refs = self.group_refs.entry((vn, group)).or_insert(1);
        *refs = refs.saturating_sub(1);
        if *refs == 0 {
            self.group_refs.remove(&(vn, group));
            self.prune_acl_group(vn, group);
        }
        out
    }

    // ---- data plane ------------------------------------------------------

    /// Ingress: a local endpoint handed us a packet. Local destinations
    /// go straight to the egress pipeline; remote ones are encapsulated
    /// toward the cached locator, or toward the border while a
    /// resolution is outstanding.
    pub fn handle_outbound(
        &mut self,
        src_endpoint: EndpointId,
        inner_dst: OverlayAddr,
        payload_len: u32,
        now: u64,
        proactive_index: Option<&BTreeMap<MappingKey, u32>>,
    ) -> Vec<Action> {
        if self.rebooting {
            return vec![Action::Dropped { reason: DropReason::RouterDown }];
        }
        let Some((vn, group, inner_src)) = self.source_binding(src_endpoint, &inner_dst) else {
            self.counters.count_drop(DropReason::NotOnboarded);
            return vec![Action::Dropped { reason: DropReason::NotOnboarded }];
        };
        let inner_dst = inner_dst.normalized();
        // Stage 1 short-circuit: destination attached right here.
        if self.vrf_locals.contains_key(&(vn, inner_dst)) {
            return self.egress_deliver(vn, group, inner_dst, inner_src, payload_len);
        }
        if self.cfg.proactive {
            return self.proactive_forward(
                vn,
                group,
                inner_dst,
                inner_src,
                payload_len,
                proactive_index,
            );
        }
        let key = MappingKey::new(vn, inner_dst);
        match self.cache_lookup(&key, now) {
            CacheHit::Fresh(locator) | CacheHit::ResolvingVia(locator) => {
                self.forward_encap(inner_dst, inner_src, vn, group, locator, payload_len)
            }
            CacheHit::ResolvingDefault => {
                let border = self.home_border;
                self.forward_encap(inner_dst, inner_src, vn, group, border, payload_len)
            }
            CacheHit::Negative => {
                let mut out = Vec::new();
                let entry = self.cache.get_mut(&key).expect("negative entry present");
                if entry.retries_left > 0 && !entry.outstanding {
                    entry.retries_left -= 1;
                    entry.outstanding = true;
                    out.push(map_request(key));
                }
                self.counters.count_drop(DropReason::NegativeEntry);
                out.push(Action::Dropped { reason: DropReason::NegativeEntry });
                out
            }
            CacheHit::Miss => {
                self.cache.insert(
                    key,
                    MapCacheEntry {
                        state: CacheState::Resolving,
                        locator: None,
                        learned_at: now,
                        expires_at: now + self.cfg.map_cache_ttl,
                        retries_left: self.cfg.negative_retry_budget,
                        outstanding: true,
                        solicited: BTreeSet::new(),
                    },
                );
                let border = self.home_border;
                let mut out =
                    self.forward_encap(inner_dst, inner_src, vn, group, border, payload_len);
                out.push(map_request(key));
                out
            }
        }
    }

    fn source_binding(
        &self,
        endpoint: EndpointId,
        dst: &OverlayAddr,
    ) -> Option<(Vn, GroupId, OverlayAddr)> {
        let port = self.endpoint_ports.get(&endpoint)?;
        let binding = self.ports.get(port)?;
        let vn = binding.vn?;
        let group = binding.group?;
        if binding.addrs.is_empty() {
            return None; // not yet addressed/registered
        }
        let src = binding
            .addrs
            .iter()
            .find(|a| a.family() == dst.family())
            .or_else(|| binding.addrs.first())
            .copied()?;
        Some((vn, group, src))
    }

    fn forward_encap(
        &mut self,
        inner_dst: OverlayAddr,
        inner_src: OverlayAddr,
        vn: Vn,
        group: GroupId,
        locator: UnderlayAddr,
        payload_len: u32,
    ) -> Vec<Action> {
        if locator == self.locator {
            self.counters.count_drop(DropReason::SelfLoop);
            return vec![Action::Dropped { reason: DropReason::SelfLoop }];
        }
        if self.unreachable.contains(&locator) {
            self.counters.count_drop(DropReason::PeerUnreachable);
            return vec![Action::Dropped { reason: DropReason::PeerUnreachable }];
        }
        let pkt =
            encapsulate(inner_dst, inner_src, vn, group, locator, self.locator, payload_len);
        self.counters.packets_fwd += 1;
        vec![Action::Forward { to: locator, pkt }]
    }

    fn proactive_forward(
        &mut self,
        vn: Vn,
        group: GroupId,
        inner_dst: OverlayAddr,
        inner_src: OverlayAddr,
        payload_len: u32,
        index: Option<&BTreeMap<MappingKey, u32>>,
    ) -> Vec<Action> {
        let key = MappingKey::new(vn, inner_dst);
        let hit = self.proactive_lookup(&key, index);
        match hit {
            Some(locator) => {
                self.forward_encap(inner_dst, inner_src, vn, group, locator, payload_len)
            }
            None => {
                self.counters.count_drop(DropReason::NoRoute);
                vec![Action::Dropped { reason: DropReason::NoRoute }]
            }
        }
    }

    fn proactive_lookup(
        &self,
        key: &MappingKey,
        index: Option<&BTreeMap<MappingKey, u32>>,
    ) -> Option<UnderlayAddr> {
        if let Some(idx) = index.and_then(|m| m.get(key)) {
            if let Some(Some((loc, _))) = self.proactive_hosts.get(*idx as usize) {
                return Some(*loc);
            }
        }
        // Covering prefixes (external space): longest match wins.
        let mut best: Option<(u8, UnderlayAddr)> = None;
        for (pkey, (loc, _)) in &self.proactive_prefixes {
            if pkey.vn == key.vn && pkey.addr.covers(&key.addr) {
                let len = pkey.addr.prefix_len();
                if best.map_or(true, |(bl, _)| len > bl) {
                    best = Some((len, *loc));
                }
            }
        }
        best.map(|(_, loc)| loc)
    }

    /// Full-table push in proactive mode. Host entries land in the slot
    /// the harness resolved for the key; stale versions are ignored.
    pub fn apply_push(&mut self, host_slot: Option<u32>, update: &FibUpdate) {
        match update {
            FibUpdate::Upsert(entry) => {
                if entry.key.addr.is_host() {
                    let Some(slot) = host_slot else { return };
                    let slot = slot as usize;
                    if self.proactive_hosts.len() <= slot {
                        self.proactive_hosts.resize(slot + 1, None);
                    }
                    let cur = &mut self.proactive_hosts[slot];
                    if cur.map_or(true, |(_, v)| entry.version > v) {
                        *cur = Some((entry.locator, entry.version));
                    }
                } else {
                    let cur = self.proactive_prefixes.entry(entry.key).or_insert((
                        entry.locator,
                        0,
                    ));
                    if entry.version >= cur.1 {
                        *cur = (entry.locator, entry.version);
                    }
                }
            }
            FibUpdate::Remove { key, version } => {
                if key.addr.is_host() {
                    if let Some(slot) = host_slot {
                        if let Some(cur) = self.proactive_hosts.get_mut(slot as usize) {
                            if cur.map_or(false, |(_, v)| *version > v) {
                                *cur = None;
                            }
                        }
                    }
                } else {
                    self.proactive_prefixes.remove(key);
                }
            }
            FibUpdate::Snapshot(_) => {}
        }
    }

    pub fn proactive_entry(
        &self,
        key: &MappingKey,
        index: &BTreeMap<MappingKey, u32>,
    ) -> Option<UnderlayAddr> {
        self.proactive_lookup(key, Some(index))
    }

    /// Egress: decapsulate and run the two-stage pipeline. Stage 1 finds
    /// the local port and destination group, stage 2 is the exact-match
    /// group ACL. Traffic for endpoints that moved away re-triggers the
    /// source via a data-plane solicit and is relayed once the new
    /// location has been pulled.
    pub fn handle_inbound(&mut self, pkt: &EncapPacket, now: u64) -> Vec<Action> {
        if self.rebooting {
            self.counters.count_drop(DropReason::RouterDown);
            return vec![Action::Dropped { reason: DropReason::RouterDown }];
        }
        let (vn, src_group, inner_dst, inner_src) = match crate::model::decapsulate(pkt) {
            Ok(t) => t,
            Err(_) => {
                self.counters.count_drop(DropReason::TtlExpired);
                return vec![Action::Dropped { reason: DropReason::TtlExpired }];
            }
        };
        if let Some((port, dst_group)) = self.vrf_locals.get(&(vn, inner_dst)).copied() {
            self.counters.acl_hits += 1;
            let action = self
                .acl
                .get(&(vn, src_group, dst_group))
                .copied();
            let (verdict, reason) = match action {
                Some(RuleAction::Allow) => (true, None),
                Some(RuleAction::Deny) => (false, Some(DropReason::PolicyDenied)),
                None => match self.cfg.default_action {
                    RuleAction::Allow => (true, None),
                    RuleAction::Deny => (false, Some(DropReason::DefaultDenied)),
                },
            };
            if verdict {
                let binding = self.ports.get(&port).expect("bound port");
                return vec![Action::Deliver { endpoint: binding.endpoint, port, pkt: *pkt }];
            }
            self.counters.acl_drops += 1;
            let reason = reason.unwrap();
            self.counters.count_drop(reason);
            return vec![Action::Dropped { reason }];
        }
        // No local entry: moved away, departed, or (after a reboot) simply
        // unknown.
        let key = MappingKey::new(vn, inner_dst);
        let mut out = Vec::new();
        if let Some(entry) = self.cache.get_mut(&key) {
            if entry.solicited.insert(pkt.outer_src) {
                out.push(solicit(pkt.outer_src, key));
            }
            match (entry.state, entry.locator) {
                (CacheState::Fresh, Some(locator)) => {
                    // Pulled the new location already: relay in-flight
                    // traffic toward it.
                    if let Some(relayed) = pkt.reencap(self.locator, locator) {
                        self.counters.packets_fwd += 1;
                        out.push(Action::Forward { to: locator, pkt: relayed });
                    } else {
                        self.counters.count_drop(DropReason::TtlExpired);
                        out.push(Action::Dropped { reason: DropReason::TtlExpired });
                    }
                }
                _ => {
                    self.counters.count_drop(DropReason::MovedAway);
                    out.push(Action::Dropped { reason: DropReason::MovedAway });
                }
            }
            return out;
        }
        if let Some(t) = self.tombstones.get_mut(&key) {
            if t.solicited.insert(pkt.outer_src) {
                out.push(solicit(pkt.outer_src, key));
            }
            self.counters.count_drop(DropReason::MovedAway);
            out.push(Action::Dropped { reason: DropReason::MovedAway });
            return out;
        }
        if self.cfg.proactive {
            // Mid-propagation staleness: relay along our own table if it
            // already knows a better place.
            if let Some(locator) = self.proactive_lookup(&key, None) {
                if locator != self.locator {
                    if let Some(relayed) = pkt.reencap(self.locator, locator) {
                        self.counters.packets_fwd += 1;
                        return vec![Action::Forward { to: locator, pkt: relayed }];
                    }
                }
            }
            self.counters.count_drop(DropReason::UnknownDest);
            return vec![Action::Dropped { reason: DropReason::UnknownDest }];
        }
        if self.cfg.solicit_unknown {
            out.push(solicit(pkt.outer_src, key));
            self.counters.count_drop(DropReason::UnknownDest);
            out.push(Action::Dropped { reason: DropReason::UnknownDest });
            return out;
        }
        // Mitigation off: fall back to the default route like any unknown
        // destination. This is what forms the transient reboot loop.
        match pkt.reencap(self.locator, self.home_border) {
            Some(fwd) => {
                self.counters.packets_fwd += 1;
                vec![Action::Forward { to: self.home_border, pkt: fwd }]
            }
            None => {
                self.counters.count_drop(DropReason::TtlExpired);
                vec![Action::Dropped { reason: DropReason::TtlExpired }]
            }
        }
    }

    fn cache_lookup(&mut self, key: &MappingKey, now: u64) -> CacheHit {
        if let Some(entry) = self.cache.get(key) {
            if entry.expires_at <= now && !entry.outstanding {
                self.cache.remove(key);
                self.cache_prefixes.remove(key);
            } else {
                return match (entry.state, entry.locator) {
                    (CacheState::Fresh, Some(loc)) => CacheHit::Fresh(loc),
                    (CacheState::Resolving, Some(loc)) => CacheHit::ResolvingVia(loc),
                    (CacheState::Resolving, None) => CacheHit::ResolvingDefault,
                    (CacheState::Negative, _) => CacheHit::Negative,
                    (CacheState::Fresh, None) => CacheHit::Miss,
                };
            }
        }
        // Covering cached prefixes (external space).
        let mut best: Option<(u8, UnderlayAddr)> = None;
        for pkey in &self.cache_prefixes {
            if pkey.vn != key.vn {
                continue;
            }
            if let Some(entry) = self.cache.get(pkey) {
                if entry.state == CacheState::Fresh
                    && entry.expires_at > now
                    && pkey.addr.covers(&key.addr)
                {
                    let len = pkey.addr.prefix_len();
                    if best.map_or(true, |(bl, _)| len > bl) {
                        best = Some((len, entry.locator.expect("fresh entries have locators")));
                    }
                }
            }
        }
        match best {
            Some((_, loc)) => CacheHit::Fresh(loc),
            None => CacheHit::Miss,
        }
    }

    // ---- control plane ---------------------------------------------------

    /// A holder of state for `key` was told to re-resolve. A matching
    /// cache entry turns Resolving but keeps forwarding along its old
    /// path until the answer lands; a tombstoned local key starts the
    /// pull for the endpoint's new location. One resolution in flight
    /// per key, ever.
    pub fn handle_solicit(&mut self, key: MappingKey, now: u64) -> Vec<Action> {
        if self.rebooting {
            return Vec::new();
        }
        if let Some(entry) = self.cache.get_mut(&key) {
            if entry.outstanding {
                return Vec::new();
            }
            entry.state = CacheState::Resolving;
            entry.outstanding = true;
            return vec![map_request(key)];
        }
        if let Some(t) = self.tombstones.remove(&key) {
            self.cache.insert(
                key,
                MapCacheEntry {
                    state: CacheState::Resolving,
                    locator: None,
                    learned_at: now,
                    expires_at: now + self.cfg.map_cache_ttl,
                    retries_left: self.cfg.negative_retry_budget,
                    outstanding: true,
                    solicited: t.solicited,
                },
            );
            if !key.addr.is_host() {
                self.cache_prefixes.insert(key);
            }
            return vec![map_request(key)];
        }
        Vec::new()
    }

    /// Positive resolution. Installs (or refreshes) a Fresh entry at the
    /// reply's key, which may be a covering prefix of what we asked for.
    pub fn handle_map_reply(
        &mut self,
        entry: &MappingEntry,
        l2_binding: Option<OverlayAddr>,
        now: u64,
    ) -> Vec<Action> {
        if self.rebooting {
            return Vec::new();
        }
        let mut out = Vec::new();
        // ARP conversion stage 1 answered?
        out.extend(self.advance_pending_arp(&entry.key, Some(entry), l2_binding, now));
        // Complete any narrower resolutions this reply covers.
        let resolved: Vec<MappingKey> = self
            .cache
            .iter()
            .filter(|(k, e)| {
                e.outstanding
                    && k.vn == entry.key.vn
                    && entry.key.addr.covers(&k.addr)
                    && **k != entry.key
            })
            .map(|(k, _)| *k)
            .collect();
        let mut carried = BTreeSet::new();
        for k in resolved {
            if let Some(old) = self.cache.remove(&k) {
                carried.extend(old.solicited);
            }
            self.cache_prefixes.remove(&k);
        }
        if self.vrf_locals.contains_key(&(entry.key.vn, entry.key.addr))
            && entry.locator == self.locator
        {
            // The destination is local again; nothing to cache.
            return out;
        }
        let slot = self.cache.entry(entry.key).or_insert(MapCacheEntry {
            state: CacheState::Fresh,
            locator: None,
            learned_at: now,
            expires_at: 0,
            retries_left: self.cfg.negative_retry_budget,
            outstanding: false,
            solicited: BTreeSet::new(),
        });
        slot.state = CacheState::Fresh;
        slot.locator = Some(entry.locator);
        slot.learned_at = now;
        slot.expires_at = now + self.cfg.map_cache_ttl;
        slot.retries_left = self.cfg.negative_retry_budget;
        slot.outstanding = false;
        slot.solicited.extend(carried);
        if !entry.key.addr.is_host() {
            self.cache_prefixes.insert(entry.key);
        }
        // Release frames waiting on this exact key (ARP stage 2).
        out.extend(self.release_arp_after_locator(&entry.key, entry.locator));
        out
    }

    /// Negative resolution: remember the absence so repeated traffic
    /// stops asking, then drops until the entry ages out.
    pub fn handle_negative_reply(&mut self, key: MappingKey, now: u64) -> Vec<Action> {
        if self.rebooting {
            return Vec::new();
        }
        let mut out = Vec::new();
        out.extend(self.advance_pending_arp(&key, None, None, now));
        let budget = self.cfg.negative_retry_budget;
        let ttl = self.cfg.negative_ttl;
        let slot = self.cache.entry(key).or_insert(MapCacheEntry {
            state: CacheState::Negative,
            locator: None,
            learned_at: now,
            expires_at: now + ttl,
            retries_left: budget,
            outstanding: false,
            solicited: BTreeSet::new(),
        });
        slot.state = CacheState::Negative;
        slot.locator = None;
        slot.learned_at = now;
        slot.expires_at = now + ttl;
        slot.outstanding = false;
        out
    }

    /// Underlay reachability change for a peer. Losing a peer deletes
    /// every cache entry pointing at it; traffic falls back to the
    /// default route and entries are re-learned on demand only.
    pub fn underlay_route_change(&mut self, peer: UnderlayAddr, reachable: bool) -> usize {
        if reachable {
            self.unreachable.remove(&peer);
            return 0;
        }
        self.unreachable.insert(peer);
        let dead: Vec<MappingKey> = self
            .cache
            .iter()
            .filter(|(_, e)| e.locator == Some(peer))
            .map(|(k, _)| *k)
            .collect();
        let n = dead.len();
        for k in dead {
            self.cache.remove(&k);
            self.cache_prefixes.remove(&k);
        }
        n
    }

    /// Power cycle: all overlay state is gone. The underlay announcement
    /// withdrawal and later re-detection of local endpoints are driven by
    /// the harness.
    pub fn reboot_start(&mut self) {
        self.rebooting = true;
        self.vrf_locals.clear();
        self.cache.clear();
        self.cache_prefixes.clear();
        self.acl.clear();
        self.group_refs.clear();
        self.ports.clear();
        self.endpoint_ports.clear();
        self.onboardings.clear();
        self.tombstones.clear();
        self.pending_arp.clear();
        self.quarantined.clear();
        self.proactive_hosts.clear();
        self.proactive_prefixes.clear();
    }

    pub fn reboot_end(&mut self, unreachable_now: &BTreeSet<UnderlayAddr>) {
        self.rebooting = false;
        self.unreachable = unreachable_now.clone();
    }

    // ---- L2 gateway --------------------------------------------------------

    /// Broadcast-to-unicast conversion. ARP requests are resolved through
    /// the routing server (IP to MAC, then MAC to locator) and leave this
    /// router as a single unicast packet; no broadcast frame ever enters
    /// the underlay. Non-ARP broadcasts are dropped and counted.
    pub fn l2_handle_broadcast(
        &mut self,
        src_endpoint: EndpointId,
        frame: L2Broadcast,
        payload_len: u32,
        now: u64,
    ) -> Vec<Action> {
        let _ = now;
        let L2Broadcast::ArpWhoHas { target_ip } = frame else {
            self.counters.count_drop(DropReason::BroadcastUnsupported);
            return vec![Action::Dropped { reason: DropReason::BroadcastUnsupported }];
        };
        let Some(port) = self.endpoint_ports.get(&src_endpoint).copied() else {
            self.counters.count_drop(DropReason::NotOnboarded);
            return vec![Action::Dropped { reason: DropReason::NotOnboarded }];
        };
        let binding = self.ports.get(&port).expect("bound port");
        let (Some(vn), Some(group), Some(src_mac)) = (binding.vn, binding.group, binding.mac)
        else {
            self.counters.count_drop(DropReason::NotOnboarded);
            return vec![Action::Dropped { reason: DropReason::NotOnboarded }];
        };
        let target_ip = target_ip.normalized();
        // Local target: the frame never needs the underlay.
        if let Some((dst_port, dst_group)) = self.vrf_locals.get(&(vn, target_ip)).copied() {
            self.counters.acl_hits += 1;
            let allowed = match self.acl.get(&(vn, group, dst_group)).copied() {
                Some(RuleAction::Allow) => true,
                Some(RuleAction::Deny) => false,
                None => self.cfg.default_action == RuleAction::Allow,
            };
            if allowed {
                let target = self.ports.get(&dst_port).expect("bound port").endpoint;
                let pkt = encapsulate(
                    target_ip,
                    src_mac,
                    vn,
                    group,
                    self.locator,
                    self.locator,
                    payload_len,
                );
                return vec![Action::Deliver { endpoint: target, port: dst_port, pkt }];
            }
            self.counters.acl_drops += 1;
            self.counters.count_drop(DropReason::PolicyDenied);
            return vec![Action::Dropped { reason: DropReason::PolicyDenied }];
        }
        // Remote: resolve IP -> MAC first.
        let key = MappingKey::new(vn, target_ip);
        self.pending_arp.insert(
            key,
            PendingArp { vn, group, src_mac, payload_len, stage: ArpStage::AwaitMac },
        );
        vec![Action::Control(Outbound {
            to: ControlDest::RoutingServer,
            msg: ControlMessage::MapRequest {
                query: MapQuery::IpToMac { vn, ip: target_ip },
            },
        })]
    }

    fn advance_pending_arp(
        &mut self,
        key: &MappingKey,
        entry: Option<&MappingEntry>,
        l2_binding: Option<OverlayAddr>,
        _now: u64,
    ) -> Vec<Action> {
        let Some(pending) = self.pending_arp.get(key) else {
            return Vec::new();
        };
        if !matches!(pending.stage, ArpStage::AwaitMac) {
            return Vec::new();
        }
        let pending = self.pending_arp.remove(key).unwrap();
        match (entry, l2_binding) {
            (Some(_), Some(mac)) => {
                // Stage 2: resolve the MAC to its locator through the
                // normal path, holding the frame until the answer lands.
                let mac_key = MappingKey::new(pending.vn, mac);
                if let Some(e) = self.cache.get(&mac_key) {
                    if e.state == CacheState::Fresh {
                        let locator = e.locator.expect("fresh entries have locators");
                        return self.emit_converted_arp(&pending, mac, locator);
                    }
                }
                self.pending_arp.insert(
                    mac_key,
                    PendingArp { stage: ArpStage::AwaitLocator { mac }, ..pending },
                );
                vec![map_request(mac_key)]
            }
            _ => {
                self.counters.count_drop(DropReason::ArpUnknown);
                vec![Action::Dropped { reason: DropReason::ArpUnknown }]
            }
        }
    }

    fn release_arp_after_locator(
        &mut self,
        key: &MappingKey,
        locator: UnderlayAddr,
    ) -> Vec<Action> {
        let Some(pending) = self.pending_arp.get(key) else {
            return Vec::new();
        };
        let ArpStage::AwaitLocator { mac } = pending.stage else {
            return Vec::new();
        };
        let pending = self.pending_arp.remove(key).unwrap();
        self.emit_converted_arp(&pending, mac, locator)
    }

    fn emit_converted_arp(
        &mut self,
        pending: &PendingArp,
        mac: OverlayAddr,
        locator: UnderlayAddr,
    ) -> Vec<Action> {
        // The broadcast MAC is replaced with the resolved one and the
        // frame leaves as plain unicast.
        self.forward_encap(
            mac,
            pending.src_mac,
            pending.vn,
            pending.group,
            locator,
            pending.payload_len,
        )
    }

    fn egress_deliver(
        &mut self,
        vn: Vn,
        src_group: GroupId,
        inner_dst: OverlayAddr,
        inner_src: OverlayAddr,
        payload_len: u32,
    ) -> Vec<Action> {
        // Local switching still runs the egress pipeline.
        let pkt = encapsulate(
            inner_dst,
            inner_src,
            vn,
            src_group,
            self.locator,
            self.locator,
            payload_len,
        );
        self.handle_inbound(&pkt, 0)
    }

    /// Install a fully onboarded endpoint without any signaling; used by
    /// scenarios that start from a converged network.
    #[allow(clippy::too_many_arguments)]
    pub fn install_preonboarded(
        &mut self,
        endpoint: EndpointId,
        port: PortId,
        token: AuthToken,
        vn: Vn,
        group: GroupId,
        addrs: &[OverlayAddr],
        mac: Option<OverlayAddr>,
        rules: &[ConnectivityRule],
    ) {
        self.ports.insert(
            port,
            PortBinding {
                endpoint,
                vn: Some(vn),
                group: Some(group),
                token,
                mac,
                addrs: addrs.to_vec(),
            },
        );
        self.endpoint_ports.insert(endpoint, port);
        for addr in addrs {
            self.vrf_locals.insert((vn, addr.normalized()), (port, group));
        }
        *self.group_refs.entry((vn, group)).or_insert(0) += 1;
        self.install_rules(rules);
    }

    /// Preload the full table for proactive scenarios that start
    /// converged.
    pub fn preload_proactive(
        &mut self,
        hosts: &[(u32, UnderlayAddr, u64)],
        prefixes: &[(MappingKey, UnderlayAddr, u64)],
    ) {
        for (slot, loc, ver) in hosts {
            let slot = *slot as usize;
            if self.proactive_hosts.len() <= slot {
                self.proactive_hosts.resize(slot + 1, None);
            }
            self.proactive_hosts[slot] = Some((*loc, *ver));
        }
        for (key, loc, ver) in prefixes {
            self.proactive_prefixes.insert(*key, (*loc, *ver));
        }
    }
}

enum CacheHit {
    Fresh(UnderlayAddr),
    ResolvingVia(UnderlayAddr),
    ResolvingDefault,
    Negative,
    Miss,
}

fn map_request(key: MappingKey) -> Action {
    Action::Control(Outbound {
        to: ControlDest::RoutingServer,
        msg: ControlMessage::MapRequest { query: MapQuery::Locator(key) },
    })
}

fn solicit(to: UnderlayAddr, key: MappingKey) -> Action {
    Action::Control(Outbound::to_router(to, ControlMessage::SolicitUpdate { key }))
}
