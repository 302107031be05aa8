//! Logically centralized endpoint-location database.
//!
//! Location state is keyed by (virtual network, overlay address) and
//! stored in one Patricia trie per (virtual network, address family), so
//! virtual-network isolation is structural rather than a filter. The
//! server answers longest-prefix-match resolutions, accepts
//! registrations from edges, tells the previous edge to pull fresh data
//! when an endpoint moves, and streams every change to subscribed
//! borders.
//!
//! A deployment wanting more than one routing server (for load balancing
//! across edge groups) would front several of these behind a registrar
//! that fans registrations to all instances; that extension point is not
//! modeled here.

use std::collections::BTreeMap;

use crate::model::{
    AddrFamily, ControlMessage, FibUpdate, MapQuery, MappingEntry, MappingKey, Outbound,
    OverlayAddr, UnderlayAddr, Vn,
};
use crate::trie::PatriciaTrie;

/// Value stored per prefix in the location tries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RouteVal {
    locator: UnderlayAddr,
    group: crate::model::GroupId,
    registered_at: u64,
    version: u64,
}

/// Outcome of a registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Created,
    Updated { previous: UnderlayAddr },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WithdrawOutcome {
    Removed,
    NotFound,
    /// Registrar does not own the entry; state unchanged.
    NotOwner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolveResult {
    Found(MappingEntry),
    Negative(MappingKey),
}

/// Lookup-cost counters. `last_query_visits` is bounded by the key bit
/// width plus one regardless of how many entries are stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieStats {
    pub last_query_visits: u32,
    pub total_visits: u64,
    pub queries: u64,
    pub entry_count: usize,
    /// node-visit histogram: visits -> number of queries
    pub visit_histogram: BTreeMap<u32, u64>,
}

pub struct RoutingServer {
    tries: BTreeMap<(Vn, AddrFamily), PatriciaTrie<RouteVal>>,
    /// Last version handed out per key; survives removal so re-registered
    /// keys keep strictly increasing versions.
    versions: BTreeMap<MappingKey, u64>,
    /// IP-to-MAC bindings for the L2 gateway service.
    arp: BTreeMap<(Vn, u128), OverlayAddr>,
    subscribers: Vec<UnderlayAddr>,
    stats: TrieStats,
}

impl Default for RoutingServer {
    fn default() -> Self {
        Self::new()
    }
}

impl RoutingServer {
    pub fn new() -> Self {
        Self {
            tries: BTreeMap::new(),
            versions: BTreeMap::new(),
            arp: BTreeMap::new(),
            subscribers: Vec::new(),
            stats: TrieStats::default(),
        }
    }

    fn trie_mut(&mut self, vn: Vn, family: AddrFamily) -> &mut PatriciaTrie<RouteVal> {
        self.tries
            .entry((vn, family))
            .or_insert_with(|| PatriciaTrie::new(family.bit_width()))
    }

    fn next_version(&mut self, key: MappingKey) -> u64 {
        let v = self.versions.entry(key).or_insert(0);
        *v += 1;
        *v
    }

    fn entry_at(&self, key: &MappingKey) -> Option<MappingEntry> {
        let trie = self.tries.get(&(key.vn, key.addr.family()))?;
        let val = trie.get(key.addr.bits(), key.addr.prefix_len())?;
        Some(MappingEntry {
            key: *key,
            locator: val.locator,
            group: val.group,
            registered_at: val.registered_at,
            version: val.version,
        })
    }

    /// Store or refresh a mapping. The registrar must be the entry's own
    /// locator. When the locator changed, the previous holder is told to
    /// pull the new location; subscribed borders always get the update.
    pub fn register(
        &mut self,
        entry: MappingEntry,
        arp_binding: Option<(OverlayAddr, OverlayAddr)>,
        registrar: UnderlayAddr,
        now: u64,
    ) -> (RegisterOutcome, Vec<Outbound>) {
        debug_assert_eq!(registrar, entry.locator, "registrar must own the mapping");
        let key = entry.key;
        let version = self.next_version(key);
        let stored = MappingEntry {
            key,
            locator: entry.locator,
            group: entry.group,
            registered_at: now,
            version,
        };
        let prev = self.trie_mut(key.vn, key.addr.family()).insert(
            key.addr.bits(),
            key.addr.prefix_len(),
            RouteVal {
                locator: stored.locator,
                group: stored.group,
                registered_at: now,
                version,
            },
        );
        if let Some((ip, mac)) = arp_binding {
            self.arp.insert((key.vn, ip.normalized().bits()), mac);
        }
        self.stats.entry_count = self.total_entries();

        let mut out = Vec::new();
        let outcome = match prev {
            None => RegisterOutcome::Created,
            Some(old) => {
                if old.locator != stored.locator {
                    // Endpoint moved: the previous edge must pull the new
                    // location and relay in-flight traffic meanwhile.
                    out.push(Outbound::to_router(
                        old.locator,
                        ControlMessage::SolicitUpdate { key },
                    ));
                }
                RegisterOutcome::Updated { previous: old.locator }
            }
        };
        for border in &self.subscribers {
            out.push(Outbound::to_router(
                *border,
                ControlMessage::SubscribeUpdate { update: FibUpdate::Upsert(stored) },
            ));
        }
        (outcome, out)
    }

    /// Remove a mapping owned by the registrar and notify borders.
    pub fn withdraw(
        &mut self,
        key: MappingKey,
        registrar: UnderlayAddr,
    ) -> (WithdrawOutcome, Vec<Outbound>) {
        let Some(current) = self.entry_at(&key) else {
            return (WithdrawOutcome::NotFound, Vec::new());
        };
        if current.locator != registrar {
            return (WithdrawOutcome::NotOwner, Vec::new());
        }
        self.trie_mut(key.vn, key.addr.family())
            .remove(key.addr.bits(), key.addr.prefix_len());
        if key.addr.family() == AddrFamily::Ipv4 {
            self.arp.remove(&(key.vn, key.addr.bits()));
        }
        self.stats.entry_count = self.total_entries();
        let version = self.next_version(key);
        let out = self
            .subscribers
            .iter()
            .map(|border| {
                Outbound::to_router(
                    *border,
                    ControlMessage::SubscribeUpdate { update: FibUpdate::Remove { key, version } },
                )
            })
            .collect();
        (WithdrawOutcome::Removed, out)
    }

    /// Answer a resolution. Locator queries walk the trie with
    /// longest-prefix match inside the key's virtual network and family;
    /// IP-to-MAC queries consult the L2 binding table. Both count as
    /// lookups.
    pub fn resolve(&mut self, query: &MapQuery) -> (ResolveResult, Vec<Outbound>) {
        match query {
            MapQuery::Locator(key) => {
                let result = self.lookup(key);
                (result, Vec::new())
            }
            MapQuery::IpToMac { vn, ip } => {
                let key = MappingKey::new(*vn, *ip);
                // The binding lookup still resolves the IP in the trie so
                // the reply carries the owning locator alongside the MAC.
                let result = self.lookup(&key);
                (result, Vec::new())
            }
        }
    }

    /// IP-to-MAC binding for an overlay IPv4 address, if registered.
    pub fn arp_binding(&self, vn: Vn, ip: &OverlayAddr) -> Option<OverlayAddr> {
        self.arp.get(&(vn, ip.normalized().bits())).copied()
    }

    fn lookup(&mut self, key: &MappingKey) -> ResolveResult {
        let family = key.addr.family();
        let (hit, visits) = match self.tries.get(&(key.vn, family)) {
            Some(trie) => {
                let (hit, visits) = trie.lookup_lpm(key.addr.bits());
                (
                    hit.map(|(bits, len, val)| MappingEntry {
                        key: MappingKey::new(
                            key.vn,
                            OverlayAddr::new(family, bits, len).expect("stored prefix valid"),
                        ),
                        locator: val.locator,
                        group: val.group,
                        registered_at: val.registered_at,
                        version: val.version,
                    }),
                    visits,
                )
            }
            None => (None, 0),
        };
        self.stats.last_query_visits = visits;
        self.stats.total_visits += visits as u64;
        self.stats.queries += 1;
        *self.stats.visit_histogram.entry(visits).or_insert(0) += 1;
        match hit {
            Some(entry) => ResolveResult::Found(entry),
            None => ResolveResult::Negative(*key),
        }
    }

    /// Subscribe a border to the update stream. The border first gets a
    /// snapshot of everything currently stored, then every subsequent
    /// register and withdraw in per-key version order. Subscribing again
    /// replaces the previous subscription and re-sends the snapshot.
    pub fn subscribe(&mut self, border: UnderlayAddr) -> (usize, Vec<Outbound>) {
        if !self.subscribers.contains(&border) {
            self.subscribers.push(border);
        }
        let snapshot = self.all_entries();
        let handle = self.subscribers.iter().position(|b| *b == border).unwrap();
        let out = vec![Outbound::to_router(
            border,
            ControlMessage::SubscribeUpdate { update: FibUpdate::Snapshot(snapshot) },
        )];
        (handle, out)
    }

    pub fn query_stats(&self) -> TrieStats {
        let mut stats = self.stats.clone();
        stats.entry_count = self.total_entries();
        stats
    }

    pub fn total_entries(&self) -> usize {
        self.tries.values().map(|t| t.len()).sum()
    }

    /// Every stored entry, ordered by (vn, family, prefix).
    pub fn all_entries(&self) -> Vec<MappingEntry> {
        let mut out = Vec::new();
        for ((vn, family), trie) in &self.tries {
            for (bits, len, val) in trie.iter() {
                out.push(MappingEntry {
                    key: MappingKey::new(
                        *vn,
                        OverlayAddr::new(*family, bits, len).expect("stored prefix valid"),
                    ),
                    locator: val.locator,
                    group: val.group,
                    registered_at: val.registered_at,
                    version: val.version,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupId;
    use std::net::Ipv4Addr;

    fn ul(last: u8) -> UnderlayAddr {
        UnderlayAddr::new(Ipv4Addr::new(192, 0, 2, last))
    }

    fn key(vn: u32, a: [u8; 4]) -> MappingKey {
        MappingKey::new(
            Vn::new(vn).unwrap(),
            OverlayAddr::ipv4(Ipv4Addr::new(a[0], a[1], a[2], a[3])),
        )
    }

    fn prefix_key(vn: u32, a: [u8; 4], len: u8) -> MappingKey {
        MappingKey::new(
            Vn::new(vn).unwrap(),
            OverlayAddr::ipv4_prefix(Ipv4Addr::new(a[0], a[1], a[2], a[3]), len).unwrap(),
        )
    }

    fn entry(key: MappingKey, locator: UnderlayAddr) -> MappingEntry {
        MappingEntry { key, locator, group: GroupId::new(20), registered_at: 0, version: 0 }
    }

    fn solicits(out: &[Outbound]) -> Vec<(UnderlayAddr, MappingKey)> {
        out.iter()
            .filter_map(|o| match (&o.to, &o.msg) {
                (
                    crate::model::ControlDest::Router(addr),
                    ControlMessage::SolicitUpdate { key },
                ) => Some((*addr, *key)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn register_into_empty_store_creates() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        let (outcome, out) = rs.register(entry(k, ul(1)), None, ul(1), 0);
        assert_eq!(outcome, RegisterOutcome::Created);
        assert!(solicits(&out).is_empty());
        assert_eq!(rs.total_entries(), 1);
    }

    #[test]
    fn move_solicits_previous_locator_only() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        rs.register(entry(k, ul(1)), None, ul(1), 0);
        let (outcome, out) = rs.register(entry(k, ul(2)), None, ul(2), 10);
        assert_eq!(outcome, RegisterOutcome::Updated { previous: ul(1) });
        assert_eq!(solicits(&out), vec![(ul(1), k)]);
    }

    #[test]
    fn idempotent_reregistration_sends_no_solicit() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        rs.register(entry(k, ul(2)), None, ul(2), 0);
        let (outcome, out) = rs.register(entry(k, ul(2)), None, ul(2), 5);
        assert_eq!(outcome, RegisterOutcome::Updated { previous: ul(2) });
        assert!(solicits(&out).is_empty());
    }

    #[test]
    fn resolve_empty_store_is_negative() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        let (res, _) = rs.resolve(&MapQuery::Locator(k));
        assert_eq!(res, ResolveResult::Negative(k));
    }

    #[test]
    fn resolve_longest_prefix_wins() {
        let mut rs = RoutingServer::new();
        rs.register(entry(prefix_key(1, [10, 0, 0, 0], 8), ul(1)), None, ul(1), 0);
        rs.register(entry(prefix_key(1, [10, 1, 0, 0], 16), ul(2)), None, ul(2), 0);
        let q = key(1, [10, 1, 2, 3]);
        let (res, _) = rs.resolve(&MapQuery::Locator(q));
        match res {
            ResolveResult::Found(e) => assert_eq!(e.locator, ul(2)),
            other => panic!("expected hit, got {other:?}"),
        }
        // A host entry beats both covering prefixes.
        rs.register(entry(q, ul(3)), None, ul(3), 0);
        let (res, _) = rs.resolve(&MapQuery::Locator(q));
        match res {
            ResolveResult::Found(e) => assert_eq!(e.locator, ul(3)),
            other => panic!("expected host hit, got {other:?}"),
        }
    }

    #[test]
    fn virtual_networks_are_isolated() {
        let mut rs = RoutingServer::new();
        rs.register(entry(key(1, [10, 0, 1, 5]), ul(1)), None, ul(1), 0);
        let (res, _) = rs.resolve(&MapQuery::Locator(key(2, [10, 0, 1, 5])));
        assert!(matches!(res, ResolveResult::Negative(_)));
    }

    #[test]
    fn withdraw_requires_ownership() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        rs.register(entry(k, ul(1)), None, ul(1), 0);
        let (outcome, _) = rs.withdraw(k, ul(9));
        assert_eq!(outcome, WithdrawOutcome::NotOwner);
        assert_eq!(rs.total_entries(), 1);
        let (outcome, _) = rs.withdraw(k, ul(1));
        assert_eq!(outcome, WithdrawOutcome::Removed);
        let (outcome, _) = rs.withdraw(k, ul(1));
        assert_eq!(outcome, WithdrawOutcome::NotFound);
    }

    #[test]
    fn subscription_snapshot_then_incrementals() {
        let mut rs = RoutingServer::new();
        for i in 0..3u8 {
            rs.register(entry(key(1, [10, 0, 1, i]), ul(1)), None, ul(1), 0);
        }
        let (_, out) = rs.subscribe(ul(100));
        assert_eq!(out.len(), 1);
        match &out[0].msg {
            ControlMessage::SubscribeUpdate { update: FibUpdate::Snapshot(s) } => {
                assert_eq!(s.len(), 3)
            }
            other => panic!("expected snapshot, got {other:?}"),
        }
        let (_, out) = rs.register(entry(key(1, [10, 0, 2, 1]), ul(2)), None, ul(2), 1);
        let updates: Vec<_> = out
            .iter()
            .filter(|o| matches!(o.msg, ControlMessage::SubscribeUpdate { .. }))
            .collect();
        assert_eq!(updates.len(), 1);
    }

    #[test]
    fn two_borders_both_receive_every_update() {
        let mut rs = RoutingServer::new();
        rs.subscribe(ul(100));
        rs.subscribe(ul(101));
        let (_, out) = rs.register(entry(key(1, [10, 0, 1, 1]), ul(1)), None, ul(1), 0);
        let dests: Vec<_> = out
            .iter()
            .filter(|o| matches!(o.msg, ControlMessage::SubscribeUpdate { .. }))
            .map(|o| o.to)
            .collect();
        assert_eq!(
            dests,
            vec![
                crate::model::ControlDest::Router(ul(100)),
                crate::model::ControlDest::Router(ul(101))
            ]
        );
    }

    #[test]
    fn update_storm_is_version_ordered_per_key() {
        // Sequential-replay oracle: applying the emitted stream one update
        // at a time must show strictly increasing versions per key and
        // exactly k updates.
        let mut rs = RoutingServer::new();
        rs.subscribe(ul(100));
        let k = key(1, [10, 0, 1, 5]);
        let mut stream = Vec::new();
        for i in 0..50u8 {
            let loc = ul(1 + (i % 3));
            let (_, out) = rs.register(entry(k, loc), None, loc, i as u64);
            for o in out {
                if let ControlMessage::SubscribeUpdate { update: FibUpdate::Upsert(e) } = o.msg {
                    stream.push(e);
                }
            }
        }
        assert_eq!(stream.len(), 50);
        let mut last = 0;
        for e in &stream {
            assert!(e.version > last, "versions must strictly increase");
            last = e.version;
        }
    }

    #[test]
    fn version_keeps_increasing_across_withdraw() {
        let mut rs = RoutingServer::new();
        let k = key(1, [10, 0, 1, 5]);
        rs.register(entry(k, ul(1)), None, ul(1), 0);
        let v1 = rs.entry_at(&k).unwrap().version;
        rs.withdraw(k, ul(1));
        rs.register(entry(k, ul(2)), None, ul(2), 1);
        let v2 = rs.entry_at(&k).unwrap().version;
        assert!(v2 > v1 + 1, "withdraw consumed a version and re-register continues after it");
    }

    #[test]
    fn stats_track_visits_and_entries() {
        let mut rs = RoutingServer::new();
        rs.register(entry(key(1, [10, 0, 1, 5]), ul(1)), None, ul(1), 0);
        rs.resolve(&MapQuery::Locator(key(1, [10, 0, 1, 5])));
        let stats = rs.query_stats();
        assert!(stats.last_query_visits <= 33);
        assert_eq!(stats.entry_count, 1);
        assert_eq!(stats.queries, 1);
    }

    #[test]
    fn distinct_registrations_count() {
        let mut rs = RoutingServer::new();
        for i in 0..100u32 {
            let a = [10, (i >> 8) as u8, (i & 0xff) as u8, 1];
            rs.register(entry(key(1, a), ul(1)), None, ul(1), 0);
        }
        assert_eq!(rs.query_stats().entry_count, 100);
    }

    #[test]
    fn arp_binding_registered_and_withdrawn() {
        let mut rs = RoutingServer::new();
        let ip = OverlayAddr::ipv4(Ipv4Addr::new(10, 0, 1, 5));
        let mac = OverlayAddr::mac([2, 0, 0, 0, 0, 5]);
        let k = MappingKey::new(Vn::new(1).unwrap(), ip);
        rs.register(entry(k, ul(1)), Some((ip, mac)), ul(1), 0);
        assert_eq!(rs.arp_binding(Vn::new(1).unwrap(), &ip), Some(mac));
        rs.withdraw(k, ul(1));
        assert_eq!(rs.arp_binding(Vn::new(1).unwrap(), &ip), None);
    }
}
