//! Border router: a full-FIB absorber for default-routed traffic and the
//! exit toward external networks.
//!
//! The border never resolves anything on demand. Its FIB is a
//! subscription-synchronized copy of the routing server's store; once
//! in-flight updates drain, the two are identical sets. External prefixes
//! appear in the same store as ordinary entries whose locator is the
//! registering border itself.

use std::collections::{BTreeMap, BTreeSet};

use crate::effects::{Action, DropReason, RouterCounters};
use crate::model::{
    EncapPacket, FibUpdate, GroupId, MappingEntry, MappingKey, UnderlayAddr,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SyncedVal {
    locator: UnderlayAddr,
    group: GroupId,
    version: u64,
}

/// Subscription-maintained copy of the routing server contents. Updates
/// apply in per-key version order; anything older than what is already
/// held is ignored and counted.
#[derive(Debug, Default)]
pub struct SyncedFib {
    hosts: BTreeMap<MappingKey, SyncedVal>,
    prefixes: BTreeMap<MappingKey, SyncedVal>,
    /// Version high-water mark per key, surviving removals.
    seen: BTreeMap<MappingKey, u64>,
    pub stale_updates: u64,
}

impl SyncedFib {
    pub fn len(&self) -> usize {
        self.hosts.len() + self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty() && self.prefixes.is_empty()
    }

    fn table_for(&mut self, key: &MappingKey) -> &mut BTreeMap<MappingKey, SyncedVal> {
        if key.addr.is_host() {
            &mut self.hosts
        } else {
            &mut self.prefixes
        }
    }

    fn apply(&mut self, update: &FibUpdate) {
        match update {
            FibUpdate::Snapshot(entries) => {
                self.hosts.clear();
                self.prefixes.clear();
                for e in entries {
                    self.seen.insert(e.key, e.version);
                    self.table_for(&e.key).insert(
                        e.key,
                        SyncedVal { locator: e.locator, group: e.group, version: e.version },
                    );
                }
            }
            FibUpdate::Upsert(e) => {
                let high = self.seen.get(&e.key).copied().unwrap_or(0);
                if e.version <= high {
                    self.stale_updates += 1;
                    return;
                }
                self.seen.insert(e.key, e.version);
                self.table_for(&e.key).insert(
                    e.key,
                    SyncedVal { locator: e.locator, group: e.group, version: e.version },
                );
            }
            FibUpdate::Remove { key, version } => {
                let high = self.seen.get(key).copied().unwrap_or(0);
                if *version <= high {
                    self.stale_updates += 1;
                    return;
                }
                self.seen.insert(*key, *version);
                self.table_for(key).remove(key);
            }
        }
    }

    /// Exact host match first, then the longest covering prefix.
    fn lookup(&self, key: &MappingKey) -> Option<SyncedVal> {
        if let Some(v) = self.hosts.get(key) {
            return Some(*v);
        }
        let mut best: Option<(u8, SyncedVal)> = None;
        for (pkey, val) in &self.prefixes {
            if pkey.vn == key.vn && pkey.addr.covers(&key.addr) {
                let len = pkey.addr.prefix_len();
                if best.map_or(true, |(bl, _)| len > bl) {
                    best = Some((len, *val));
                }
            }
        }
        best.map(|(_, v)| v)
    }

    /// Set view for convergence checks: (key, locator, version).
    pub fn entries(&self) -> Vec<(MappingKey, UnderlayAddr, u64)> {
        self.hosts
            .iter()
            .chain(self.prefixes.iter())
            .map(|(k, v)| (*k, v.locator, v.version))
            .collect()
    }
}

pub struct BorderRouter {
    locator: UnderlayAddr,
    pub fib: SyncedFib,
    unreachable: BTreeSet<UnderlayAddr>,
    pub counters: RouterCounters,
}

impl BorderRouter {
    pub fn new(locator: UnderlayAddr) -> Self {
        Self {
            locator,
            fib: SyncedFib::default(),
            unreachable: BTreeSet::new(),
            counters: RouterCounters::default(),
        }
    }

    pub fn locator(&self) -> UnderlayAddr {
        self.locator
    }

    pub fn fib_entries(&self) -> u64 {
        self.fib.len() as u64
    }

    pub fn apply_sync(&mut self, update: &FibUpdate) {
        self.fib.apply(update);
    }

    pub fn underlay_route_change(&mut self, peer: UnderlayAddr, reachable: bool) {
        if reachable {
            self.unreachable.remove(&peer);
        } else {
            self.unreachable.insert(peer);
        }
    }

    /// Default-routed traffic: look the inner destination up in the
    /// synchronized FIB and relay to the owning edge, exit externally for
    /// prefixes we registered ourselves, or drop. Targets whose underlay
    /// announcement is currently withdrawn (a rebooting edge) are dropped
    /// rather than bounced back and forth.
    pub fn handle_default_traffic(&mut self, pkt: &EncapPacket, _now: u64) -> Vec<Action> {
        let key = MappingKey::new(pkt.vn, pkt.inner_dst);
        match self.fib.lookup(&key) {
            Some(val) => {
                if val.locator == self.locator {
                    self.counters.external_pkts += 1;
                    return vec![Action::ExternalExit { pkt: *pkt }];
                }
                if self.unreachable.contains(&val.locator) {
                    self.counters.count_drop(DropReason::PeerUnreachable);
                    return vec![Action::Dropped { reason: DropReason::PeerUnreachable }];
                }
                match pkt.reencap(self.locator, val.locator) {
                    Some(fwd) => {
                        self.counters.packets_fwd += 1;
                        vec![Action::Forward { to: val.locator, pkt: fwd }]
                    }
                    None => {
                        self.counters.count_drop(DropReason::TtlExpired);
                        vec![Action::Dropped { reason: DropReason::TtlExpired }]
                    }
                }
            }
            None => {
                self.counters.count_drop(DropReason::NoRoute);
                vec![Action::Dropped { reason: DropReason::NoRoute }]
            }
        }
    }

    /// Borders hold no reactive cache, so solicits are meaningless here;
    /// they are counted and ignored.
    pub fn handle_solicit(&mut self) {
        // Counted by the harness via control_in.
    }

    /// Install an entry directly (converged-start scenarios).
    pub fn preload(&mut self, entry: &MappingEntry) {
        self.fib.apply(&FibUpdate::Upsert(*entry));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encapsulate, GroupId, OverlayAddr, Vn};
    use std::net::Ipv4Addr;

    fn ul(last: u8) -> UnderlayAddr {
        UnderlayAddr::new(Ipv4Addr::new(192, 0, 2, last))
    }

    fn host_key(a: [u8; 4]) -> MappingKey {
        MappingKey::new(Vn::new(1).unwrap(), OverlayAddr::ipv4(Ipv4Addr::new(a[0], a[1], a[2], a[3])))
    }

    fn entry(key: MappingKey, locator: UnderlayAddr, version: u64) -> MappingEntry {
        MappingEntry { key, locator, group: GroupId::new(1), registered_at: 0, version }
    }

    fn pkt_to(dst: [u8; 4], border: UnderlayAddr) -> EncapPacket {
        encapsulate(
            OverlayAddr::ipv4(Ipv4Addr::new(dst[0], dst[1], dst[2], dst[3])),
            OverlayAddr::ipv4(Ipv4Addr::new(10, 9, 9, 9)),
            Vn::new(1).unwrap(),
            GroupId::new(1),
            border,
            ul(50),
            100,
        )
    }

    #[test]
    fn snapshot_sets_fib_size() {
        let mut b = BorderRouter::new(ul(100));
        let entries: Vec<_> =
            (0..5u8).map(|i| entry(host_key([10, 0, 0, i]), ul(1), 1)).collect();
        b.apply_sync(&FibUpdate::Snapshot(entries));
        assert_eq!(b.fib_entries(), 5);
    }

    #[test]
    fn register_then_withdraw_leaves_key_absent() {
        let mut b = BorderRouter::new(ul(100));
        let k = host_key([10, 0, 0, 1]);
        b.apply_sync(&FibUpdate::Upsert(entry(k, ul(1), 1)));
        b.apply_sync(&FibUpdate::Remove { key: k, version: 2 });
        assert_eq!(b.fib_entries(), 0);
    }

    #[test]
    fn out_of_order_versions_rejected() {
        // Replay-order oracle: apply v3 then v2; the later-arriving v2
        // must be ignored exactly as a sequential replay would demand.
        let mut b = BorderRouter::new(ul(100));
        let k = host_key([10, 0, 0, 1]);
        b.apply_sync(&FibUpdate::Upsert(entry(k, ul(3), 3)));
        b.apply_sync(&FibUpdate::Upsert(entry(k, ul(2), 2)));
        assert_eq!(b.fib.lookup(&k).unwrap().locator, ul(3));
        assert_eq!(b.fib.stale_updates, 1);
    }

    #[test]
    fn default_traffic_relayed_to_owner() {
        let mut b = BorderRouter::new(ul(100));
        let k = host_key([10, 0, 0, 7]);
        b.apply_sync(&FibUpdate::Upsert(entry(k, ul(3), 1)));
        let acts = b.handle_default_traffic(&pkt_to([10, 0, 0, 7], ul(100)), 0);
        match &acts[..] {
            [Action::Forward { to, pkt }] => {
                assert_eq!(*to, ul(3));
                assert_eq!(pkt.ttl, crate::model::INITIAL_TTL - 1);
            }
            other => panic!("expected forward, got {other:?}"),
        }
    }

    #[test]
    fn external_prefix_exits() {
        let mut b = BorderRouter::new(ul(100));
        let prefix = MappingKey::new(
            Vn::new(1).unwrap(),
            OverlayAddr::ipv4_prefix(Ipv4Addr::new(198, 18, 0, 0), 15).unwrap(),
        );
        b.apply_sync(&FibUpdate::Upsert(entry(prefix, ul(100), 1)));
        let acts = b.handle_default_traffic(&pkt_to([198, 19, 4, 4], ul(100)), 0);
        assert!(matches!(acts[..], [Action::ExternalExit { .. }]));
        assert_eq!(b.counters.external_pkts, 1);
    }

    #[test]
    fn unknown_destination_dropped() {
        let mut b = BorderRouter::new(ul(100));
        let acts = b.handle_default_traffic(&pkt_to([10, 0, 0, 7], ul(100)), 0);
        assert!(matches!(acts[..], [Action::Dropped { reason: DropReason::NoRoute }]));
    }

    #[test]
    fn withdrawn_target_dropped_not_bounced() {
        let mut b = BorderRouter::new(ul(100));
        let k = host_key([10, 0, 0, 7]);
        b.apply_sync(&FibUpdate::Upsert(entry(k, ul(3), 1)));
        b.underlay_route_change(ul(3), false);
        let acts = b.handle_default_traffic(&pkt_to([10, 0, 0, 7], ul(100)), 0);
        assert!(matches!(acts[..], [Action::Dropped { reason: DropReason::PeerUnreachable }]));
        b.underlay_route_change(ul(3), true);
        let acts = b.handle_default_traffic(&pkt_to([10, 0, 0, 7], ul(100)), 0);
        assert!(matches!(acts[..], [Action::Forward { .. }]));
    }
}
