//! Deterministic discrete-event engine: topology construction, event
//! dispatch, control-plane queueing, traffic/mobility/presence
//! generators, and metrics collection.
//!
//! One event loop per run, strictly single threaded; independent runs
//! are fully isolated and can execute on different threads. Every
//! source of randomness is a separate seeded generator per role
//! (traffic, mobility, presence, reflector fanout order), so varying one
//! model never perturbs the others. Identical (scenario, seed) pairs
//! produce identical event traces and metrics.

pub mod event;
pub mod metrics;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::net::Ipv4Addr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::border::BorderRouter;
use crate::edge::{AttachInfo, DetachReason, EdgeConfig, EdgeRouter, L2Broadcast};
use crate::effects::{Action, DropReason};
use crate::model::{
    AddrFamily, AuthToken, ControlDest, ControlMessage, EndpointId, GroupId, MappingEntry,
    MappingKey, Outbound, OverlayAddr, PortId, UnderlayAddr, Vn,
};
use crate::policy_server::{MatrixChange, PolicyServer};
use crate::proactive::RouteReflector;
use crate::routing_server::RoutingServer;
use crate::scenario::{ArpTarget, ControlPlaneMode, Scenario};

pub use event::{CtrlNode, Ev, FlowDest, Micros, PacketWrap, RouterId, SimEvent};
pub use metrics::{mean, percentile, variance, Metrics};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("event queue exceeded {0} entries; scenario is unstable")]
    QueueOverflow(usize),
}

/// Work items serialized through one control-plane node.
enum Work {
    Inbound { from: CtrlNode, msg: ControlMessage },
    Transmit(Outbound),
}

#[derive(Default)]
struct CtrlQueue {
    q: VecDeque<Work>,
    busy: bool,
}

struct EndpointSim {
    token: AuthToken,
    presented: AuthToken,
    addrs: Vec<OverlayAddr>,
    mac: Option<OverlayAddr>,
    server: bool,
    stream_sender: bool,
    stream_in: Option<u32>,
    permanent: bool,
    home_edge: u16,
    attached: Option<(u16, PortId)>,
    slot_in_edge: u32,
    onboarded: bool,
    moving: bool,
    backoff: BTreeMap<u32, u8>,
}

struct Stream {
    sender: u32,
    receiver: u32,
    interval_us: u64,
}

struct PendingMove {
    detach_us: u64,
    target_edge: Option<u16>,
}

pub struct World {
    cfg: Scenario,
    time: Micros,
    seq: u64,
    queue: BinaryHeap<Reverse<SimEvent>>,
    edges: Vec<EdgeRouter>,
    borders: Vec<BorderRouter>,
    routing: RoutingServer,
    policy: PolicyServer,
    reflector: Option<RouteReflector>,
    ctrl: Vec<CtrlQueue>,
    node_up: Vec<bool>,
    endpoints: Vec<EndpointSim>,
    edge_locals: Vec<Vec<u32>>,
    next_port: Vec<u32>,
    locator_to_node: BTreeMap<UnderlayAddr, RouterId>,
    edge_labels: Vec<String>,
    border_labels: Vec<String>,
    proactive_index: BTreeMap<MappingKey, u32>,
    streams: Vec<Stream>,
    servers: Vec<u32>,
    pending_restore: BTreeMap<u32, PendingMove>,
    reboot_flagged: Vec<bool>,
    rng_traffic: ChaCha8Rng,
    rng_mobility: ChaCha8Rng,
    rng_presence: ChaCha8Rng,
    rng_reflector: ChaCha8Rng,
    next_uid: u64,
    current_wrap: Option<PacketWrap>,
    pub metrics: Metrics,
}

fn edge_locator(i: u16) -> UnderlayAddr {
    UnderlayAddr::new(Ipv4Addr::new(10, 64, (i / 250) as u8, (i % 250) as u8 + 1))
}

fn border_locator(i: u16) -> UnderlayAddr {
    UnderlayAddr::new(Ipv4Addr::new(10, 32, 0, i as u8 + 1))
}

impl World {
    pub fn build(cfg: &Scenario) -> Self {
        let cfg = cfg.clone();
        let e = cfg.topology.edge_count as usize;
        let b = cfg.topology.border_count as usize;
        let edge_cfg = EdgeConfig {
            map_cache_ttl: cfg.map_cache_ttl_us,
            negative_ttl: cfg.negative_ttl_us,
            negative_retry_budget: cfg.negative_retry_budget,
            solicit_unknown: cfg.solicit_unknown,
            proactive: cfg.mode == ControlPlaneMode::Proactive,
            default_action: cfg.default_action,
        };

        let mut locator_to_node = BTreeMap::new();
        let mut edges = Vec::with_capacity(e);
        for i in 0..e as u16 {
            let home = border_locator(i % b as u16);
            edges.push(EdgeRouter::new(edge_locator(i), home, edge_cfg.clone()));
            locator_to_node.insert(edge_locator(i), RouterId::Edge(i));
        }
        let mut borders = Vec::with_capacity(b);
        for i in 0..b as u16 {
            borders.push(BorderRouter::new(border_locator(i)));
            locator_to_node.insert(border_locator(i), RouterId::Border(i));
        }

        let reflector = (cfg.mode == ControlPlaneMode::Proactive).then(|| {
            RouteReflector::new((0..e as u16).map(edge_locator).collect())
        });

        let mut policy = PolicyServer::new(cfg.default_action);
        for r in &cfg.rules {
            policy.seed_rule(*r);
        }

        let mut world = World {
            time: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            edges,
            borders,
            routing: RoutingServer::new(),
            policy,
            reflector,
            ctrl: (0..e + b + 3).map(|_| CtrlQueue::default()).collect(),
            node_up: vec![true; e + b],
            endpoints: Vec::new(),
            edge_locals: vec![Vec::new(); e],
            next_port: vec![0; e],
            locator_to_node,
            edge_labels: (0..e).map(|i| format!("edge-{i:03}")).collect(),
            border_labels: (0..b).map(|i| format!("border-{i}")).collect(),
            proactive_index: BTreeMap::new(),
            streams: Vec::new(),
            servers: Vec::new(),
            pending_restore: BTreeMap::new(),
            reboot_flagged: vec![false; e],
            rng_traffic: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6666_7472_6166),
            rng_mobility: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_7665_6d6f_7665),
            rng_presence: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6573_656e_6365),
            rng_reflector: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_666c_6563_7421),
            next_uid: 0,
            current_wrap: None,
            metrics: Metrics { mode: cfg.mode.label(), ..Metrics::default() },
            cfg,
        };
        world.metrics.mode = world.cfg.mode.label();
        for r in &world.cfg.reboots {
            world.reboot_flagged[r.edge as usize] = true;
        }
        world.build_endpoints();
        world.prime_control_plane();
        world.prime_events();
        world
    }

    // ---- construction ---------------------------------------------------

    fn build_endpoints(&mut self) {
        let cfg = &self.cfg;
        let n = cfg.endpoints.count;
        let pairs = cfg.streams.pairs;
        let reserved = cfg.streams.reserve_sender_edges.min(cfg.topology.edge_count);
        let pool: Vec<u16> = (0..cfg.topology.edge_count - reserved).collect();
        let reserved_edges: Vec<u16> =
            (cfg.topology.edge_count - reserved..cfg.topology.edge_count).collect();
        let has_v6 = cfg.families.contains(&AddrFamily::Ipv6);
        let has_mac = cfg.families.contains(&AddrFamily::Mac);

        let mut background_slot = 0u32;
        for i in 0..n {
            let is_receiver = i < pairs;
            let is_sender = !is_receiver && i < pairs * 2;
            let server_base = pairs * 2;
            let is_server = !is_receiver
                && !is_sender
                && i < server_base + cfg.endpoints.server_count
                && cfg.endpoints.server_count > 0;

            let group = if is_server {
                let k = (i - server_base) as usize % cfg.endpoints.server_groups.len();
                GroupId::new(cfg.endpoints.server_groups[k])
            } else {
                GroupId::new(cfg.endpoints.groups[i as usize % cfg.endpoints.groups.len()])
            };
            let home_edge = if is_sender {
                if reserved_edges.is_empty() {
                    pool[(i as usize) % pool.len()]
                } else {
                    reserved_edges[(i - pairs) as usize % reserved_edges.len()]
                }
            } else if is_server {
                match cfg.endpoints.server_edge {
                    Some(e) => e,
                    None => pool[(i as usize) % pool.len()],
                }
            } else {
                let slot = background_slot;
                background_slot += 1;
                pool[slot as usize % pool.len()]
            };

            let v4 = OverlayAddr::ipv4(Ipv4Addr::from(cfg.v4_pool_base + 1 + i));
            let mut addrs = vec![v4];
            if has_v6 {
                let bits =
                    (0x2001_0db8u128 << 96) | ((cfg.vn.value() as u128) << 64) | (i as u128 + 1);
                addrs.push(OverlayAddr::ipv6(bits));
            }
            let mac = has_mac.then(|| {
                OverlayAddr::mac([
                    0x02,
                    0x00,
                    (i >> 24) as u8,
                    (i >> 16) as u8,
                    (i >> 8) as u8,
                    i as u8,
                ])
            });
            if let Some(m) = mac {
                addrs.push(m);
            }

            let token = AuthToken(0x1000_0000 + i as u64);
            let bad = cfg.endpoints.bad_token_every > 0
                && i % cfg.endpoints.bad_token_every == cfg.endpoints.bad_token_every - 1;
            let presented = if bad { AuthToken(token.0 ^ 1) } else { token };
            // Servers and instrumented stream endpoints ignore the
            // presence routine; they are always on the network.
            let permanent = if cfg.presence.enabled {
                is_server
                    || is_receiver
                    || is_sender
                    || (i as f64 / n.max(1) as f64) < cfg.presence.permanent_fraction
            } else {
                true
            };

            self.policy.add_endpoint(EndpointId(i), token, cfg.vn, group);
            self.endpoints.push(EndpointSim {
                token,
                presented,
                addrs,
                mac,
                server: is_server,
                stream_sender: is_sender,
                stream_in: None,
                permanent,
                home_edge,
                attached: None,
                slot_in_edge: 0,
                onboarded: false,
                moving: false,
                backoff: BTreeMap::new(),
            });
        }

        for s in 0..pairs {
            let interval = (1e6 / self.cfg.streams.pps).round().max(1.0) as u64;
            self.endpoints[s as usize].stream_in = Some(s);
            self.streams.push(Stream {
                sender: pairs + s,
                receiver: s,
                interval_us: interval,
            });
        }
        self.servers = self
            .endpoints
            .iter()
            .enumerate()
            .filter(|(_, e)| e.server)
            .map(|(k, _)| k as u32)
            .collect();
    }

    /// Subscriptions, external prefixes, and (for converged-start
    /// scenarios) the full onboarded state, all installed without any
    /// signaling.
    fn prime_control_plane(&mut self) {
        // Borders subscribe before anything is registered; the snapshot
        // is empty and all later updates stream incrementally.
        for i in 0..self.borders.len() {
            let loc = self.borders[i].locator();
            let (_, outs) = self.routing.subscribe(loc);
            for o in outs {
                if let ControlMessage::SubscribeUpdate { update } = o.msg {
                    self.borders[i].apply_sync(&update);
                }
            }
        }
        // External prefixes are owned by border 0 and registered like any
        // other mapping so negative resolution and external reachability
        // coexist.
        let owner = self.borders[0].locator();
        let externals: Vec<MappingEntry> = self
            .cfg
            .external_prefixes
            .iter()
            .map(|p| MappingEntry {
                key: MappingKey::new(self.cfg.vn, *p),
                locator: owner,
                group: GroupId::new(0),
                registered_at: 0,
                version: 0,
            })
            .collect();
        for entry in &externals {
            let (_, outs) = self.routing.register(*entry, None, owner, 0);
            self.apply_subscribe_outs(outs);
            if let Some(r) = self.reflector.as_mut() {
                let stamped = MappingEntry { version: 1, ..*entry };
                r.preload(stamped);
                for e in &mut self.edges {
                    e.preload_proactive(&[], &[(stamped.key, stamped.locator, 1)]);
                }
                for b in &mut self.borders {
                    b.preload(&stamped);
                }
            }
        }

        if self.cfg.pre_onboarded {
            for i in 0..self.endpoints.len() as u32 {
                if self.endpoints[i as usize].presented != self.endpoints[i as usize].token {
                    continue; // would fail auth; leave for the live path
                }
                if !self.endpoints[i as usize].permanent {
                    continue; // arrives with the presence routine
                }
                let edge = self.endpoints[i as usize].home_edge;
                self.install_preonboarded(i, edge);
            }
        }
    }

    fn apply_subscribe_outs(&mut self, outs: Vec<Outbound>) {
        for o in outs {
            if let (ControlDest::Router(loc), ControlMessage::SubscribeUpdate { update }) =
                (o.to, &o.msg)
            {
                if let Some(RouterId::Border(bi)) = self.locator_to_node.get(&loc).copied() {
                    self.borders[bi as usize].apply_sync(update);
                }
            }
        }
    }

    fn install_preonboarded(&mut self, i: u32, edge: u16) {
        let vn = self.cfg.vn;
        let ep = &self.endpoints[i as usize];
        let (token, addrs, mac) = (ep.token, ep.addrs.clone(), ep.mac);
        let group = self.policy.endpoint_group(EndpointId(i)).expect("rostered").1;
        let port = PortId(self.next_port[edge as usize]);
        self.next_port[edge as usize] += 1;

        let outcome = self.policy.authenticate(EndpointId(i), token, edge_locator(edge));
        let rules = match outcome {
            crate::model::AuthOutcome::Granted(res) => res.rules,
            crate::model::AuthOutcome::Denied => unreachable!("token checked"),
        };
        self.edges[edge as usize].install_preonboarded(
            EndpointId(i),
            port,
            token,
            vn,
            group,
            &addrs,
            mac,
            &rules,
        );
        let locator = edge_locator(edge);
        for addr in &addrs {
            let key = MappingKey::new(vn, *addr);
            let entry =
                MappingEntry { key, locator, group, registered_at: 0, version: 0 };
            let arp = match (addr.family(), mac) {
                (AddrFamily::Ipv4, Some(m)) => Some((*addr, m)),
                _ => None,
            };
            let (_, outs) = self.routing.register(entry, arp, locator, 0);
            self.apply_subscribe_outs(outs);
            if let Some(r) = self.reflector.as_mut() {
                let stamped = MappingEntry { version: 1, ..entry };
                r.preload(stamped);
                let slot = match self.proactive_index.get(&key) {
                    Some(s) => *s,
                    None => {
                        let s = self.proactive_index.len() as u32;
                        self.proactive_index.insert(key, s);
                        s
                    }
                };
                for e in &mut self.edges {
                    e.preload_proactive(&[(slot, locator, 1)], &[]);
                }
            }
        }
        let ep = &mut self.endpoints[i as usize];
        ep.attached = Some((edge, port));
        ep.onboarded = true;
        ep.slot_in_edge = self.edge_locals[edge as usize].len() as u32;
        self.edge_locals[edge as usize].push(i);
    }

    fn prime_events(&mut self) {
        // Sampling.
        self.schedule(self.cfg.sampling_us, Ev::SampleTick);
        // Attach or presence events for everyone not already installed.
        for i in 0..self.endpoints.len() as u32 {
            let ep = &self.endpoints[i as usize];
            if ep.attached.is_some() {
                continue;
            }
            if self.cfg.presence.enabled && !ep.permanent {
                let at = self.next_presence_arrival(0);
                self.schedule(at, Ev::PresenceArrive { endpoint: i });
            } else {
                let jitter_us = (self.cfg.endpoints.attach_jitter_s * 1e6) as u64;
                let at = if jitter_us == 0 {
                    0
                } else {
                    self.rng_presence.gen_range(0..jitter_us)
                };
                let edge = self.endpoints[i as usize].home_edge;
                self.schedule(at, Ev::Attach { endpoint: i, edge });
            }
        }
        // Traffic.
        if self.cfg.traffic.flow_rate_hz > 0.0 {
            for i in 0..self.endpoints.len() as u32 {
                let gap = self.exp_gap_traffic(self.cfg.traffic.flow_rate_hz);
                self.schedule(gap, Ev::FlowTick { endpoint: i });
            }
        }
        // Streams start once the warmup has settled.
        for s in 0..self.streams.len() as u32 {
            let interval = self.streams[s as usize].interval_us;
            let phase = interval * (s as u64 + 1) / (self.streams.len() as u64 + 1);
            self.schedule(self.cfg.warmup_us + phase, Ev::StreamTick { stream: s });
        }
        // Mobility.
        if self.cfg.mobility.moves_per_second > 0.0 {
            let gap = exp_gap(&mut self.rng_mobility, self.cfg.mobility.moves_per_second);
            self.schedule(self.cfg.warmup_us + gap, Ev::MobilityTick);
        }
        // Scripted reboots and probes.
        for r in self.cfg.reboots.clone() {
            self.schedule(r.at_us, Ev::RebootStart { edge: r.edge });
        }
        for (i, p) in self.cfg.arp_probes.clone().into_iter().enumerate() {
            self.schedule(p.at_us, Ev::ArpProbe { index: i as u32 });
        }
    }

    // ---- event plumbing ---------------------------------------------------

    fn schedule(&mut self, at: Micros, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(SimEvent { time: at, seq, ev }));
    }

    fn schedule_in(&mut self, delay: Micros, ev: Ev) {
        self.schedule(self.time + delay, ev);
    }

    /// Scripted mobility event (tests and experiments).
    pub fn schedule_move(&mut self, at: Micros, endpoint: u32, to_edge: u16) {
        self.schedule(at, Ev::ScriptedMove { endpoint, to_edge });
    }

    pub fn schedule_matrix_change(&mut self, at: Micros, change: MatrixChange) {
        self.schedule(at, Ev::MatrixChange(change));
    }

    pub fn schedule_reassign(&mut self, at: Micros, endpoint: u32, group: GroupId) {
        self.schedule(at, Ev::Reassign { endpoint, group });
    }

    /// Run to the configured end of the scenario.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_until(self.cfg.duration_us)?;
        self.finalize();
        Ok(())
    }

    /// Process events up to and including `t`.
    pub fn run_until(&mut self, t: Micros) -> Result<(), SimError> {
        loop {
            match self.queue.peek() {
                Some(Reverse(ev)) if ev.time <= t => {}
                _ => break,
            }
            let Reverse(ev) = self.queue.pop().unwrap();
            self.time = ev.time;
            self.handle(ev.ev);
            if self.queue.len() > self.cfg.max_queue {
                return Err(SimError::QueueOverflow(self.cfg.max_queue));
            }
        }
        self.time = self.time.max(t.min(self.cfg.duration_us));
        Ok(())
    }

    fn finalize(&mut self) {
        let pending: Vec<u32> = self.pending_restore.keys().copied().collect();
        for ep in pending {
            let p = self.pending_restore.remove(&ep).unwrap();
            self.metrics.timeouts += 1;
            self.metrics.handover.push(metrics::HandoverRow {
                endpoint: ep,
                detach_us: p.detach_us,
                restore_us: None,
            });
        }
        let stats = self.routing.query_stats();
        self.metrics.server_queries = stats.queries;
        self.metrics.server_entry_count = stats.entry_count;
        self.metrics.server_visit_histogram = stats.visit_histogram;
        debug_assert!(self.metrics.conservation.holds(), "packet conservation broken");
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::PacketArrive { node, wrap } => self.on_packet(node, wrap),
            Ev::CtrlArrive { node, from, msg } => {
                self.ctrl_enqueue(node, Work::Inbound { from, msg })
            }
            Ev::CtrlDone { node } => self.on_ctrl_done(node),
            Ev::DeferredSend { node, out } => self.ctrl_enqueue(node, Work::Transmit(out)),
            Ev::FlowTick { endpoint } => self.on_flow_tick(endpoint),
            Ev::FlowPacket { endpoint, dest, remaining } => {
                self.on_flow_packet(endpoint, dest, remaining)
            }
            Ev::StreamTick { stream } => self.on_stream_tick(stream),
            Ev::MobilityTick => self.on_mobility_tick(),
            Ev::ScriptedMove { endpoint, to_edge } => self.do_move(endpoint, Some(to_edge)),
            Ev::Attach { endpoint, edge } => self.attach_endpoint(endpoint, edge),
            Ev::PresenceArrive { endpoint } => self.on_presence_arrive(endpoint),
            Ev::PresenceDepart { endpoint } => self.on_presence_depart(endpoint),
            Ev::DhcpDone { edge, endpoint } => {
                let addrs = self.endpoints[endpoint as usize].addrs.clone();
                let now = self.time;
                let actions = self.edges[edge as usize].dhcp_complete(
                    EndpointId(endpoint),
                    &addrs,
                    now,
                );
                self.apply(CtrlNode::Edge(edge), actions);
            }
            Ev::RebootStart { edge } => self.on_reboot_start(edge),
            Ev::RebootEnd { edge } => self.on_reboot_end(edge),
            Ev::Redetect { edge } => self.on_redetect(edge),
            Ev::UnderlayNotice { about, reachable } => self.on_underlay_notice(about, reachable),
            Ev::SampleTick => self.on_sample(),
            Ev::ArpProbe { index } => self.on_arp_probe(index),
            Ev::MatrixChange(change) => {
                let (_, _, outs) = self.policy.update_matrix(change);
                for o in outs {
                    self.ctrl_enqueue(CtrlNode::Policy, Work::Transmit(o));
                }
            }
            Ev::Reassign { endpoint, group } => {
                if let Ok((_, outs)) = self.policy.reassign_group(EndpointId(endpoint), group) {
                    for o in outs {
                        self.ctrl_enqueue(CtrlNode::Policy, Work::Transmit(o));
                    }
                }
            }
        }
    }

    // ---- control-plane queueing -------------------------------------------

    fn ctrl_index(&self, node: CtrlNode) -> usize {
        let e = self.edges.len();
        let b = self.borders.len();
        match node {
            CtrlNode::Edge(i) => i as usize,
            CtrlNode::Border(i) => e + i as usize,
            CtrlNode::Routing => e + b,
            CtrlNode::Policy => e + b + 1,
            CtrlNode::Reflector => e + b + 2,
        }
    }

    fn ctrl_enqueue(&mut self, node: CtrlNode, work: Work) {
        let idx = self.ctrl_index(node);
        let delay = self.cfg.topology.control_delay_us;
        let q = &mut self.ctrl[idx];
        q.q.push_back(work);
        if !q.busy {
            q.busy = true;
            self.schedule_in(delay, Ev::CtrlDone { node });
        }
    }

    fn on_ctrl_done(&mut self, node: CtrlNode) {
        let idx = self.ctrl_index(node);
        let Some(work) = self.ctrl[idx].q.pop_front() else {
            self.ctrl[idx].busy = false;
            return;
        };
        match work {
            Work::Transmit(out) => self.transmit(node, out),
            Work::Inbound { from, msg } => self.dispatch_inbound(node, from, msg),
        }
        let idx = self.ctrl_index(node);
        if self.ctrl[idx].q.is_empty() {
            self.ctrl[idx].busy = false;
        } else {
            let delay = self.cfg.topology.control_delay_us;
            self.schedule_in(delay, Ev::CtrlDone { node });
        }
    }

    fn transmit(&mut self, from: CtrlNode, out: Outbound) {
        // Accounting by kind, with attribution the experiments need.
        let kind = out.msg.kind();
        self.metrics.count_msg(kind);
        match &out.msg {
            ControlMessage::MapRegister { withdraw, .. } => {
                if *withdraw {
                    self.metrics.withdraws_total += 1;
                } else {
                    self.metrics.registers_total += 1;
                }
            }
            ControlMessage::SolicitUpdate { .. } => match from {
                CtrlNode::Routing => self.metrics.solicit_server_total += 1,
                _ => self.metrics.solicit_data_total += 1,
            },
            ControlMessage::ProactivePush { .. } => self.metrics.pushes_total += 1,
            _ => {}
        }
        let dest = match out.to {
            ControlDest::Router(loc) => match self.locator_to_node.get(&loc) {
                Some(RouterId::Edge(i)) => CtrlNode::Edge(*i),
                Some(RouterId::Border(i)) => CtrlNode::Border(*i),
                None => return,
            },
            ControlDest::RoutingServer => CtrlNode::Routing,
            ControlDest::PolicyServer => CtrlNode::Policy,
            ControlDest::Reflector => CtrlNode::Reflector,
        };
        let link = self.cfg.topology.link_delay_us;
        self.schedule_in(link, Ev::CtrlArrive { node: dest, from, msg: out.msg });
    }

    fn dispatch_inbound(&mut self, node: CtrlNode, from: CtrlNode, msg: ControlMessage) {
        match node {
            CtrlNode::Routing => self.routing_dispatch(from, msg),
            CtrlNode::Policy => self.policy_dispatch(from, msg),
            CtrlNode::Reflector => self.reflector_dispatch(msg),
            CtrlNode::Edge(i) => {
                self.edges[i as usize].counters.control_in += 1;
                self.edge_dispatch(i, msg);
            }
            CtrlNode::Border(i) => {
                self.borders[i as usize].counters.control_in += 1;
                let now = self.time;
                let _ = now;
                match msg {
                    ControlMessage::SubscribeUpdate { update } => {
                        self.borders[i as usize].apply_sync(&update)
                    }
                    ControlMessage::SolicitUpdate { .. } => {
                        self.borders[i as usize].handle_solicit()
                    }
                    _ => {}
                }
            }
        }
    }

    fn node_locator(&self, node: CtrlNode) -> Option<UnderlayAddr> {
        match node {
            CtrlNode::Edge(i) => Some(self.edges[i as usize].locator()),
            CtrlNode::Border(i) => Some(self.borders[i as usize].locator()),
            _ => None,
        }
    }

    fn routing_dispatch(&mut self, from: CtrlNode, msg: ControlMessage) {
        let now = self.time;
        match msg {
            ControlMessage::MapRequest { query } => {
                let Some(requester) = self.node_locator(from) else { return };
                let (result, _) = self.routing.resolve(&query);
                let reply = match result {
                    crate::routing_server::ResolveResult::Found(entry) => {
                        match query {
                            crate::model::MapQuery::IpToMac { vn, ip } => {
                                match self.routing.arp_binding(vn, &ip) {
                                    Some(mac) => ControlMessage::MapReply {
                                        entry,
                                        l2_binding: Some(mac),
                                    },
                                    None => ControlMessage::NegativeMapReply {
                                        key: query.key(),
                                    },
                                }
                            }
                            crate::model::MapQuery::Locator(_) => {
                                ControlMessage::MapReply { entry, l2_binding: None }
                            }
                        }
                    }
                    crate::routing_server::ResolveResult::Negative(key) => {
                        ControlMessage::NegativeMapReply { key }
                    }
                };
                self.ctrl_enqueue(
                    CtrlNode::Routing,
                    Work::Transmit(Outbound::to_router(requester, reply)),
                );
            }
            ControlMessage::MapRegister { entry, arp_binding, withdraw } => {
                let Some(registrar) = self.node_locator(from) else { return };
                let outs = if withdraw {
                    let (_, outs) = self.routing.withdraw(entry.key, registrar);
                    outs
                } else {
                    let entry = MappingEntry { locator: registrar, ..entry };
                    let (_, outs) = self.routing.register(entry, arp_binding, registrar, now);
                    outs
                };
                for o in outs {
                    self.ctrl_enqueue(CtrlNode::Routing, Work::Transmit(o));
                }
            }
            _ => {}
        }
    }

    fn policy_dispatch(&mut self, from: CtrlNode, msg: ControlMessage) {
        match msg {
            ControlMessage::AuthRequest { endpoint_id, token, kind } => {
                let Some(edge) = self.node_locator(from) else { return };
                match kind {
                    crate::model::AuthRequestKind::Start => {
                        let outcome = self.policy.authenticate(endpoint_id, token, edge);
                        let out = Outbound::to_router(
                            edge,
                            ControlMessage::AuthReply(crate::model::AuthReply {
                                endpoint_id,
                                outcome,
                            }),
                        );
                        // The multi-round credential exchange is folded
                        // into one configurable latency.
                        let auth = self.cfg.topology.auth_delay_us;
                        self.schedule_in(auth, Ev::DeferredSend { node: CtrlNode::Policy, out });
                    }
                    crate::model::AuthRequestKind::Stop => {
                        self.policy.session_stop(endpoint_id, edge);
                    }
                }
            }
            _ => {}
        }
    }

    fn reflector_dispatch(&mut self, msg: ControlMessage) {
        let now = self.time;
        if let ControlMessage::MapRegister { entry, withdraw, .. } = msg {
            let Some(r) = self.reflector.as_mut() else { return };
            let outs = r.push_update(entry, withdraw, now, &mut self.rng_reflector);
            for o in outs {
                self.ctrl_enqueue(CtrlNode::Reflector, Work::Transmit(o));
            }
        }
    }

    fn edge_dispatch(&mut self, i: u16, msg: ControlMessage) {
        let now = self.time;
        let actions = match msg {
            ControlMessage::MapReply { entry, l2_binding } => {
                self.edges[i as usize].handle_map_reply(&entry, l2_binding, now)
            }
            ControlMessage::NegativeMapReply { key } => {
                self.edges[i as usize].handle_negative_reply(key, now)
            }
            ControlMessage::SolicitUpdate { key } => {
                self.edges[i as usize].handle_solicit(key, now)
            }
            ControlMessage::AuthReply(reply) => {
                self.edges[i as usize].handle_auth_reply(&reply, now)
            }
            ControlMessage::RuleDownload { vn, dst_group, rules } => {
                self.edges[i as usize].handle_rule_download(vn, dst_group, &rules);
                Vec::new()
            }
            ControlMessage::ProactivePush { update } => {
                let slot = match &update {
                    crate::model::FibUpdate::Upsert(e) if e.key.addr.is_host() => {
                        Some(self.proactive_slot(e.key))
                    }
                    crate::model::FibUpdate::Remove { key, .. } if key.addr.is_host() => {
                        Some(self.proactive_slot(*key))
                    }
                    _ => None,
                };
                self.edges[i as usize].apply_push(slot, &update);
                Vec::new()
            }
            _ => Vec::new(),
        };
        self.apply(CtrlNode::Edge(i), actions);
    }

    fn proactive_slot(&mut self, key: MappingKey) -> u32 {
        match self.proactive_index.get(&key) {
            Some(s) => *s,
            None => {
                let s = self.proactive_index.len() as u32;
                self.proactive_index.insert(key, s);
                s
            }
        }
    }

    // ---- actions ----------------------------------------------------------

    fn apply(&mut self, src: CtrlNode, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Control(out) => {
                    match src {
                        CtrlNode::Edge(i) => self.edges[i as usize].counters.control_out += 1,
                        CtrlNode::Border(i) => {
                            self.borders[i as usize].counters.control_out += 1
                        }
                        _ => {}
                    }
                    self.ctrl_enqueue(src, Work::Transmit(out));
                }
                Action::Forward { to, pkt } => self.forward_packet(src, to, pkt),
                Action::Deliver { endpoint, port: _, pkt: _ } => {
                    self.metrics.conservation.delivered += 1;
                    self.metrics.conservation.in_flight -= 1;
                    self.current_wrap = None;
                    let ep = endpoint.0;
                    if self.cfg.debug_drop_log {
                        self.metrics.delivery_log.push((self.time, ep));
                    }
                    if let CtrlNode::Edge(e) = src {
                        if let Some(p) = self.pending_restore.get(&ep) {
                            if p.target_edge == Some(e) {
                                let p = self.pending_restore.remove(&ep).unwrap();
                                self.metrics.handover.push(metrics::HandoverRow {
                                    endpoint: ep,
                                    detach_us: p.detach_us,
                                    restore_us: Some(self.time),
                                });
                            }
                        }
                    }
                }
                Action::ExternalExit { pkt: _ } => {
                    self.metrics.conservation.delivered_external += 1;
                    self.metrics.conservation.in_flight -= 1;
                    self.current_wrap = None;
                }
                Action::Dropped { reason } => {
                    self.metrics.count_drop(self.time, reason.label(), self.cfg.debug_drop_log);
                    self.current_wrap = None;
                }
                Action::Dhcp { endpoint } => {
                    if let CtrlNode::Edge(e) = src {
                        let d = self.cfg.topology.dhcp_delay_us;
                        self.schedule_in(d, Ev::DhcpDone { edge: e, endpoint: endpoint.0 });
                    }
                }
                Action::Onboarded(trace) => {
                    self.metrics.onboard_traces.push(trace);
                    let ep = &mut self.endpoints[trace.endpoint.0 as usize];
                    ep.onboarded = trace.granted;
                }
            }
        }
    }

    fn forward_packet(&mut self, src: CtrlNode, to: UnderlayAddr, pkt: crate::model::EncapPacket) {
        let mut wrap = match self.current_wrap.take() {
            Some(w) => PacketWrap { pkt, ..w },
            None => {
                // A frame released from a control-plane hold (ARP
                // conversion); it was counted at injection.
                let uid = self.next_uid;
                self.next_uid += 1;
                PacketWrap { pkt, uid, hops: 0, reboot_crossings: 0 }
            }
        };
        let Some(target) = self.locator_to_node.get(&to).copied() else {
            self.metrics.count_drop(self.time, "no_route", self.cfg.debug_drop_log);
            return;
        };
        let node_idx = match target {
            RouterId::Edge(i) => i as usize,
            RouterId::Border(i) => self.edges.len() + i as usize,
        };
        if !self.node_up[node_idx] {
            self.metrics.count_drop(
                self.time,
                DropReason::RouterDown.label(),
                self.cfg.debug_drop_log,
            );
            return;
        }
        wrap.hops += 1;
        self.metrics.max_packet_hops = self.metrics.max_packet_hops.max(wrap.hops);
        // Crossing audit for the reboot experiments: traversals between a
        // reboot-flagged edge and any border, either direction.
        let crossing = match (src, target) {
            (CtrlNode::Edge(e), RouterId::Border(_)) => self.reboot_flagged[e as usize],
            (CtrlNode::Border(_), RouterId::Edge(e)) => self.reboot_flagged[e as usize],
            _ => false,
        };
        if crossing {
            wrap.reboot_crossings += 1;
            self.metrics.max_reboot_pair_crossings =
                self.metrics.max_reboot_pair_crossings.max(wrap.reboot_crossings);
        }
        let fwd = match src {
            CtrlNode::Border(_) => self.cfg.topology.border_forward_delay_us,
            _ => self.cfg.topology.edge_forward_delay_us,
        };
        let at = self.time + fwd + self.cfg.topology.link_delay_us;
        self.schedule(at, Ev::PacketArrive { node: target, wrap });
    }

    fn on_packet(&mut self, node: RouterId, wrap: PacketWrap) {
        self.current_wrap = Some(wrap);
        let now = self.time;
        match node {
            RouterId::Edge(i) => {
                let actions = self.edges[i as usize].handle_inbound(&wrap.pkt, now);
                self.apply(CtrlNode::Edge(i), actions);
            }
            RouterId::Border(i) => {
                let actions = self.borders[i as usize].handle_default_traffic(&wrap.pkt, now);
                self.apply(CtrlNode::Border(i), actions);
            }
        }
        // A packet that produced no terminal action (e.g. swallowed by a
        // rebooting router guard) is accounted as dropped.
        if self.current_wrap.take().is_some() {
            self.metrics.count_drop(self.time, "router_down", self.cfg.debug_drop_log);
        }
    }

    // ---- attach / detach / mobility ---------------------------------------

    fn attach_endpoint(&mut self, i: u32, edge: u16) {
        let now = self.time;
        if self.endpoints[i as usize].attached.is_some() {
            return;
        }
        let port = PortId(self.next_port[edge as usize]);
        self.next_port[edge as usize] += 1;
        {
            let slot = self.edge_locals[edge as usize].len() as u32;
            let ep = &mut self.endpoints[i as usize];
            ep.attached = Some((edge, port));
            ep.moving = false;
            ep.slot_in_edge = slot;
        }
        self.edge_locals[edge as usize].push(i);
        if let Some(p) = self.pending_restore.get_mut(&i) {
            p.target_edge = Some(edge);
        }
        let ep = &self.endpoints[i as usize];
        let info = AttachInfo {
            endpoint: EndpointId(i),
            port,
            token: ep.presented,
            mac: ep.mac,
        };
        let actions = self.edges[edge as usize].endpoint_attached(info, now);
        self.apply(CtrlNode::Edge(edge), actions);
    }

    fn detach_endpoint(&mut self, i: u32, reason: DetachReason) {
        let now = self.time;
        let Some((edge, _)) = self.endpoints[i as usize].attached else {
            return;
        };
        let actions = self.edges[edge as usize].detach(EndpointId(i), reason, now);
        self.apply(CtrlNode::Edge(edge), actions);
        // Remove from the per-edge roster with a swap.
        let slot = self.endpoints[i as usize].slot_in_edge as usize;
        let list = &mut self.edge_locals[edge as usize];
        list.swap_remove(slot);
        if let Some(&moved) = list.get(slot) {
            self.endpoints[moved as usize].slot_in_edge = slot as u32;
        }
        let ep = &mut self.endpoints[i as usize];
        ep.attached = None;
        ep.onboarded = false;
    }

    fn on_mobility_tick(&mut self) {
        let rate = self.cfg.mobility.moves_per_second;
        let gap = exp_gap(&mut self.rng_mobility, rate);
        if self.time + gap < self.cfg.duration_us {
            self.schedule_in(gap, Ev::MobilityTick);
        }
        // Pick a movable endpoint: attached, not a stream sender or
        // server, not mid-move.
        for _ in 0..8 {
            let i = self.rng_mobility.gen_range(0..self.endpoints.len()) as u32;
            let ep = &self.endpoints[i as usize];
            if ep.stream_sender || ep.server || ep.moving || ep.attached.is_none() {
                continue;
            }
            self.do_move(i, None);
            return;
        }
    }

    fn do_move(&mut self, i: u32, target: Option<u16>) {
        let Some((old_edge, _)) = self.endpoints[i as usize].attached else {
            return;
        };
        let pool = self.cfg.mover_pool_edges();
        let new_edge = match target {
            Some(e) => e,
            None => {
                if pool.len() < 2 {
                    return;
                }
                loop {
                    let e = pool[self.rng_mobility.gen_range(0..pool.len())];
                    if e != old_edge {
                        break e;
                    }
                }
            }
        };
        self.metrics.moves_total += 1;
        if self.endpoints[i as usize].stream_in.is_some() {
            self.pending_restore.insert(
                i,
                PendingMove { detach_us: self.time, target_edge: None },
            );
        }
        self.detach_endpoint(i, DetachReason::Moved);
        self.endpoints[i as usize].moving = true;
        let delay = self.cfg.mobility.reattach_delay_us;
        self.schedule_in(delay, Ev::Attach { endpoint: i, edge: new_edge });
    }

    fn on_presence_arrive(&mut self, i: u32) {
        let edge = self.endpoints[i as usize].home_edge;
        self.attach_endpoint(i, edge);
        let depart = self.presence_departure_today();
        self.schedule(depart, Ev::PresenceDepart { endpoint: i });
    }

    fn on_presence_depart(&mut self, i: u32) {
        self.detach_endpoint(i, DetachReason::Departed);
        let day = self.time / self.cfg.day_us;
        let next = self.next_presence_arrival(day + 1);
        if next < self.cfg.duration_us {
            self.schedule(next, Ev::PresenceArrive { endpoint: i });
        }
    }

    fn next_presence_arrival(&mut self, from_day: u64) -> u64 {
        let mut day = from_day;
        while day % 7 >= 5 {
            day += 1;
        }
        let hour_us = self.cfg.day_us / 24;
        let jitter_us = (self.cfg.presence.jitter_s * 1e6 / self.cfg.timescale) as u64;
        let jitter = if jitter_us == 0 { 0 } else { self.rng_presence.gen_range(0..jitter_us) };
        day * self.cfg.day_us
            + (self.cfg.presence.arrival_hour * hour_us as f64) as u64
            + jitter
    }

    fn presence_departure_today(&mut self) -> u64 {
        let day = self.time / self.cfg.day_us;
        let hour_us = self.cfg.day_us / 24;
        let jitter_us = (self.cfg.presence.jitter_s * 1e6 / self.cfg.timescale) as u64;
        let jitter = if jitter_us == 0 { 0 } else { self.rng_presence.gen_range(0..jitter_us) };
        let t = day * self.cfg.day_us
            + (self.cfg.presence.departure_hour * hour_us as f64) as u64
            + jitter;
        t.max(self.time + 1)
    }

    // ---- reboots ------------------------------------------------------------

    fn on_reboot_start(&mut self, edge: u16) {
        self.edges[edge as usize].reboot_start();
        self.node_up[edge as usize] = false;
        for i in 0..self.endpoints.len() {
            if let Some((e, _)) = self.endpoints[i].attached {
                if e == edge {
                    self.endpoints[i].onboarded = false;
                }
            }
        }
        let about = self.edges[edge as usize].locator();
        if self.cfg.underlay_tracking {
            let igp = self.cfg.topology.igp_notify_delay_us;
            self.schedule_in(igp, Ev::UnderlayNotice { about, reachable: false });
        }
        let dur = self
            .cfg
            .reboots
            .iter()
            .find(|r| r.edge == edge)
            .map(|r| r.duration_us)
            .unwrap_or(1_000_000);
        self.schedule_in(dur, Ev::RebootEnd { edge });
    }

    fn on_reboot_end(&mut self, edge: u16) {
        self.node_up[edge as usize] = true;
        let down: std::collections::BTreeSet<UnderlayAddr> = if self.cfg.underlay_tracking {
            (0..self.edges.len())
                .filter(|i| !self.node_up[*i])
                .map(|i| self.edges[i].locator())
                .collect()
        } else {
            Default::default()
        };
        self.edges[edge as usize].reboot_end(&down);
        let about = self.edges[edge as usize].locator();
        if self.cfg.underlay_tracking {
            let igp = self.cfg.topology.igp_notify_delay_us;
            self.schedule_in(igp, Ev::UnderlayNotice { about, reachable: true });
        }
        let detect = self.cfg.topology.endpoint_detect_delay_us;
        self.schedule_in(detect, Ev::Redetect { edge });
    }

    fn on_redetect(&mut self, edge: u16) {
        let now = self.time;
        let attached: Vec<(u32, PortId)> = self
            .endpoints
            .iter()
            .enumerate()
            .filter_map(|(i, ep)| match ep.attached {
                Some((e, port)) if e == edge => Some((i as u32, port)),
                _ => None,
            })
            .collect();
        for (i, port) in attached {
            let ep = &self.endpoints[i as usize];
            let info = AttachInfo {
                endpoint: EndpointId(i),
                port,
                token: ep.presented,
                mac: ep.mac,
            };
            let actions = self.edges[edge as usize].endpoint_attached(info, now);
            self.apply(CtrlNode::Edge(edge), actions);
        }
    }

    fn on_underlay_notice(&mut self, about: UnderlayAddr, reachable: bool) {
        for e in &mut self.edges {
            if e.locator() != about {
                e.underlay_route_change(about, reachable);
            }
        }
        for b in &mut self.borders {
            b.underlay_route_change(about, reachable);
        }
    }

    // ---- generators -----------------------------------------------------------

    fn exp_gap_traffic(&mut self, rate_hz: f64) -> u64 {
        exp_gap(&mut self.rng_traffic, rate_hz)
    }

    fn diurnal_mult(&self, t: Micros) -> f64 {
        let tcfg = &self.cfg.traffic;
        let day = t / self.cfg.day_us;
        let workday = !tcfg.workdays_only || day % 7 < 5;
        let hour = (t % self.cfg.day_us) as f64 / (self.cfg.day_us as f64 / 24.0);
        if workday && hour >= tcfg.work_start_hour && hour < tcfg.work_end_hour {
            tcfg.day_mult
        } else {
            tcfg.night_mult
        }
    }

    fn on_flow_tick(&mut self, i: u32) {
        // Schedule the next flow under the current diurnal multiplier.
        let mult = self.diurnal_mult(self.time);
        let rate = self.cfg.traffic.flow_rate_hz * mult;
        let gap = if rate > 0.0 {
            exp_gap(&mut self.rng_traffic, rate)
        } else {
            self.cfg.day_us / 24
        };
        if self.time + gap < self.cfg.duration_us {
            self.schedule_in(gap, Ev::FlowTick { endpoint: i });
        }
        if !self.can_send(i) {
            return;
        }
        let Some(dest) = self.pick_destination(i) else { return };
        self.inject(i, dest, self.cfg.traffic.payload_len);
        let remaining = self.cfg.traffic.packets_per_flow.saturating_sub(1);
        if remaining > 0 {
            let iv = self.cfg.traffic.packet_interval_us;
            self.schedule_in(iv, Ev::FlowPacket { endpoint: i, dest, remaining });
        }
    }

    fn on_flow_packet(&mut self, i: u32, dest: FlowDest, remaining: u16) {
        if self.can_send(i) {
            self.inject(i, dest, self.cfg.traffic.payload_len);
        }
        if remaining > 1 {
            let iv = self.cfg.traffic.packet_interval_us;
            self.schedule_in(iv, Ev::FlowPacket { endpoint: i, dest, remaining: remaining - 1 });
        }
    }

    fn on_stream_tick(&mut self, s: u32) {
        let stream = &self.streams[s as usize];
        let (sender, receiver, interval) = (stream.sender, stream.receiver, stream.interval_us);
        if self.time + interval < self.cfg.duration_us {
            self.schedule_in(interval, Ev::StreamTick { stream: s });
        }
        if !self.can_send(sender) {
            return;
        }
        let payload = self.cfg.streams.payload_len;
        self.inject(sender, FlowDest::Endpoint(receiver), payload);
    }

    fn can_send(&self, i: u32) -> bool {
        let ep = &self.endpoints[i as usize];
        match ep.attached {
            Some((e, _)) => ep.onboarded && !self.edges[e as usize].is_rebooting(),
            None => false,
        }
    }

    fn pick_destination(&mut self, i: u32) -> Option<FlowDest> {
        let t = &self.cfg.traffic;
        let weights =
            [t.dest_same_edge, t.dest_server, t.dest_external, t.dest_uniform];
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        for _attempt in 0..4 {
            let mut x = self.rng_traffic.gen::<f64>() * total;
            let mut pick = 3;
            for (k, w) in weights.iter().enumerate() {
                if x < *w {
                    pick = k;
                    break;
                }
                x -= w;
            }
            let dest = match pick {
                0 => {
                    let edge = self.endpoints[i as usize].attached?.0;
                    let list = &self.edge_locals[edge as usize];
                    if list.len() < 2 {
                        continue;
                    }
                    let j = list[self.rng_traffic.gen_range(0..list.len())];
                    if j == i {
                        continue;
                    }
                    FlowDest::Endpoint(j)
                }
                1 => {
                    if self.servers.is_empty() {
                        continue;
                    }
                    let j = self.servers[self.rng_traffic.gen_range(0..self.servers.len())];
                    FlowDest::Endpoint(j)
                }
                2 => {
                    let p = self.cfg.external_prefixes.first()?;
                    let host = p.bits() as u32 | (self.rng_traffic.gen::<u16>() as u32);
                    FlowDest::External(OverlayAddr::ipv4(Ipv4Addr::from(host)))
                }
                _ => {
                    if self.endpoints.len() < 2 {
                        return None;
                    }
                    let j = self.rng_traffic.gen_range(0..self.endpoints.len()) as u32;
                    if j == i {
                        continue;
                    }
                    FlowDest::Endpoint(j)
                }
            };
            // Human backoff: after enough failures against a denied
            // destination, stop asking for it.
            if let FlowDest::Endpoint(j) = dest {
                let k = self.cfg.traffic.backoff_failures;
                if k > 0 && self.is_denied(i, j) {
                    let attempts = self.endpoints[i as usize].backoff.entry(j).or_insert(0);
                    if *attempts >= k {
                        continue;
                    }
                    *attempts += 1;
                }
            }
            return Some(dest);
        }
        None
    }

    fn is_denied(&self, src: u32, dst: u32) -> bool {
        let Some((vn_s, g_s)) = self.policy.endpoint_group(EndpointId(src)) else {
            return false;
        };
        let Some((vn_d, g_d)) = self.policy.endpoint_group(EndpointId(dst)) else {
            return false;
        };
        if vn_s != vn_d {
            return true;
        }
        self.policy.matrix().action(vn_s, g_s, g_d) == crate::model::RuleAction::Deny
    }

    fn inject(&mut self, i: u32, dest: FlowDest, payload: u32) {
        let dst_addr = match dest {
            FlowDest::Endpoint(j) => *self.endpoints[j as usize]
                .addrs
                .iter()
                .find(|a| a.family() == AddrFamily::Ipv4)
                .expect("every endpoint has an IPv4 address"),
            FlowDest::External(a) => a,
        };
        let Some((edge, _)) = self.endpoints[i as usize].attached else {
            return;
        };
        self.metrics.conservation.injected += 1;
        self.metrics.conservation.in_flight += 1;
        let uid = self.next_uid;
        self.next_uid += 1;
        self.current_wrap = Some(PacketWrap {
            pkt: crate::model::encapsulate(
                dst_addr,
                dst_addr,
                self.cfg.vn,
                GroupId::new(0),
                edge_locator(edge),
                edge_locator(edge),
                payload,
            ),
            uid,
            hops: 0,
            reboot_crossings: 0,
        });
        let now = self.time;
        let actions = self.edges[edge as usize].handle_outbound(
            EndpointId(i),
            dst_addr,
            payload,
            now,
            Some(&self.proactive_index),
        );
        self.apply(CtrlNode::Edge(edge), actions);
        // Packets terminated synchronously clear the wrap; anything else
        // was forwarded.
        if self.current_wrap.take().is_some() {
            // Source edge refused without a terminal action; treat as a
            // drop so conservation holds.
            self.metrics.count_drop(self.time, "router_down", self.cfg.debug_drop_log);
        }
    }

    fn on_arp_probe(&mut self, index: u32) {
        let probe = self.cfg.arp_probes[index as usize];
        let Some((edge, _)) = self.endpoints[probe.from as usize].attached else { return };
        let frame = match probe.target {
            ArpTarget::Endpoint(j) => {
                let ip = *self.endpoints[j as usize]
                    .addrs
                    .iter()
                    .find(|a| a.family() == AddrFamily::Ipv4)
                    .expect("every endpoint has an IPv4 address");
                L2Broadcast::ArpWhoHas { target_ip: ip }
            }
            ArpTarget::Ip(ip) => L2Broadcast::ArpWhoHas { target_ip: ip },
            ArpTarget::OtherBroadcast => L2Broadcast::Other,
        };
        self.metrics.conservation.injected += 1;
        self.metrics.conservation.in_flight += 1;
        let now = self.time;
        let actions = self.edges[edge as usize].l2_handle_broadcast(
            EndpointId(probe.from),
            frame,
            64,
            now,
        );
        // Frames held for resolution stay in flight; clear the wrap
        // marker so nothing double-counts.
        self.current_wrap = None;
        self.apply(CtrlNode::Edge(edge), actions);
    }

    // ---- sampling ----------------------------------------------------------

    fn on_sample(&mut self) {
        let now = self.time;
        if now + self.cfg.sampling_us <= self.cfg.duration_us {
            self.schedule_in(self.cfg.sampling_us, Ev::SampleTick);
        }
        for i in 0..self.edges.len() {
            let fib = self.edges[i].fib_entries(now);
            self.metrics.fib_rows.push(metrics::FibRow {
                time_us: now,
                router_id: self.edge_labels[i].clone(),
                role: "edge",
                fib_entries: fib,
            });
            self.metrics.drops_rows.push(metrics::DropsRow {
                time_us: now,
                router_id: self.edge_labels[i].clone(),
                acl_hits: self.edges[i].counters.acl_hits,
                acl_drops: self.edges[i].counters.acl_drops,
            });
        }
        for i in 0..self.borders.len() {
            self.metrics.fib_rows.push(metrics::FibRow {
                time_us: now,
                router_id: self.border_labels[i].clone(),
                role: "border",
                fib_entries: self.borders[i].fib_entries(),
            });
            self.metrics.drops_rows.push(metrics::DropsRow {
                time_us: now,
                router_id: self.border_labels[i].clone(),
                acl_hits: self.borders[i].counters.acl_hits,
                acl_drops: self.borders[i].counters.acl_drops,
            });
        }
        for kind in MSG_KINDS {
            let count = self.metrics.msg_window.get(kind).copied().unwrap_or(0);
            self.metrics.control_rows.push(metrics::ControlRow {
                time_us: now,
                msg_kind: kind,
                count,
            });
        }
        self.metrics.msg_window.clear();
        debug_assert!(self.metrics.conservation.holds(), "conservation broken at {now}");
    }

    // ---- inspection ---------------------------------------------------------

    pub fn time(&self) -> Micros {
        self.time
    }

    pub fn scenario(&self) -> &Scenario {
        &self.cfg
    }

    pub fn edge(&self, i: u16) -> &EdgeRouter {
        &self.edges[i as usize]
    }

    pub fn edge_mut(&mut self, i: u16) -> &mut EdgeRouter {
        &mut self.edges[i as usize]
    }

    pub fn border(&self, i: u16) -> &BorderRouter {
        &self.borders[i as usize]
    }

    pub fn routing_server(&self) -> &RoutingServer {
        &self.routing
    }

    pub fn policy_server(&self) -> &PolicyServer {
        &self.policy
    }

    pub fn reflector(&self) -> Option<&RouteReflector> {
        self.reflector.as_ref()
    }

    pub fn proactive_index(&self) -> &BTreeMap<MappingKey, u32> {
        &self.proactive_index
    }

    pub fn endpoint_addr(&self, i: u32) -> OverlayAddr {
        *self.endpoints[i as usize]
            .addrs
            .iter()
            .find(|a| a.family() == AddrFamily::Ipv4)
            .expect("every endpoint has an IPv4 address")
    }

    pub fn endpoint_attachment(&self, i: u32) -> Option<(u16, PortId)> {
        self.endpoints[i as usize].attached
    }

    pub fn endpoint_onboarded(&self, i: u32) -> bool {
        self.endpoints[i as usize].onboarded
    }

    pub fn vn(&self) -> Vn {
        self.cfg.vn
    }

    pub fn into_metrics(self) -> Metrics {
        self.metrics
    }
}

/// Control message kinds in stable export order.
pub const MSG_KINDS: &[&str] = &[
    "auth_request",
    "auth_reply",
    "map_register",
    "map_request",
    "map_reply",
    "negative_map_reply",
    "solicit_update",
    "subscribe_update",
    "rule_download",
    "proactive_push",
];

fn exp_gap(rng: &mut ChaCha8Rng, rate_hz: f64) -> u64 {
    let u: f64 = rng.gen();
    let gap = -(1.0 - u).ln() / rate_hz * 1e6;
    (gap.round() as u64).max(1)
}

/// Build and run a scenario to completion, returning its metrics.
pub fn run_scenario(cfg: &Scenario) -> Result<Metrics, SimError> {
    let mut world = World::build(cfg);
    world.run()?;
    Ok(world.into_metrics())
}
