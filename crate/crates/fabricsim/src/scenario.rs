//! Scenario files: loading, validation, defaults, and the bundled
//! presets.
//!
//! A scenario is a TOML document with sections for topology, endpoints,
//! policy, traffic, streams, mobility, presence, cache behavior, loop
//! mitigations, external prefixes, scripted reboots and ARP probes.
//! `validate` checks every cross-reference and returns the full list of
//! violations; a scenario that validates never aborts the simulation for
//! a configuration reason.
//!
//! The `timescale` factor compresses wall-clock-like spans (run
//! duration, sampling interval, diurnal schedule, cache lifetimes) and
//! scales event rates up to match, leaving microsecond-level delays
//! untouched.

use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::Deserialize;

use crate::model::{
    AddrFamily, ConnectivityRule, GroupId, OverlayAddr, RuleAction, Vn,
};

/// One named violation, pointing at the section and field that caused it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub section: &'static str,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.section, self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario invalid: {} issue(s)", .0.len())]
    Invalid(Vec<ValidationIssue>),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

impl ScenarioError {
    pub fn issues(&self) -> &[ValidationIssue] {
        match self {
            ScenarioError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPlaneMode {
    Reactive,
    Proactive,
}

impl ControlPlaneMode {
    pub fn label(self) -> &'static str {
        match self {
            ControlPlaneMode::Reactive => "reactive",
            ControlPlaneMode::Proactive => "proactive",
        }
    }
}

fn default_one_f64() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub seed: u64,
    pub control_plane: ControlPlaneMode,
    pub duration_s: f64,
    #[serde(default)]
    pub warmup_s: f64,
    pub sampling_interval_s: f64,
    #[serde(default = "default_one_f64")]
    pub timescale: f64,
    #[serde(default)]
    pub pre_onboarded: bool,
    #[serde(default)]
    pub debug_drop_log: bool,
    pub topology: TopologySection,
    pub endpoints: EndpointsSection,
    pub policy: PolicySection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub streams: StreamsSection,
    #[serde(default)]
    pub mobility: MobilitySection,
    #[serde(default)]
    pub presence: PresenceSection,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub mitigations: MitigationsSection,
    #[serde(default)]
    pub external: ExternalSection,
    #[serde(default)]
    pub reboots: Vec<RebootSection>,
    #[serde(default)]
    pub arp_probes: Vec<ArpProbeSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub border_count: u16,
    pub edge_count: u16,
    #[serde(default = "d_link_delay")]
    pub link_delay_us: u64,
    #[serde(default = "d_control_delay")]
    pub control_delay_us: u64,
    #[serde(default = "d_edge_fwd")]
    pub edge_forward_delay_us: u64,
    #[serde(default = "d_border_fwd")]
    pub border_forward_delay_us: u64,
    #[serde(default = "d_auth_delay")]
    pub auth_delay_us: u64,
    #[serde(default = "d_dhcp_delay")]
    pub dhcp_delay_us: u64,
    #[serde(default = "d_igp_delay")]
    pub igp_notify_delay_us: u64,
    #[serde(default = "d_detect_delay")]
    pub endpoint_detect_delay_us: u64,
}

fn d_link_delay() -> u64 {
    50
}
fn d_control_delay() -> u64 {
    500
}
fn d_edge_fwd() -> u64 {
    5
}
fn d_border_fwd() -> u64 {
    2
}
fn d_auth_delay() -> u64 {
    2_000
}
fn d_dhcp_delay() -> u64 {
    500
}
fn d_igp_delay() -> u64 {
    1_000
}
fn d_detect_delay() -> u64 {
    1_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsSection {
    pub count: u32,
    pub vn: u32,
    pub groups: Vec<u16>,
    #[serde(default)]
    pub address_families: Vec<String>,
    #[serde(default)]
    pub server_count: u32,
    #[serde(default)]
    pub server_groups: Vec<u16>,
    #[serde(default)]
    pub server_edge: Option<u16>,
    #[serde(default)]
    pub bad_token_every: u32,
    #[serde(default)]
    pub attach_jitter_s: f64,
    #[serde(default = "d_pool")]
    pub v4_pool_base: String,
}

fn d_pool() -> String {
    "10.80.0.0".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub default_action: String,
    #[serde(default)]
    pub rules: Vec<RuleSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSection {
    pub vn: u32,
    pub src: u16,
    pub dst: u16,
    pub action: String,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    #[serde(default)]
    pub flow_rate_hz: f64,
    #[serde(default = "d_ppf")]
    pub packets_per_flow: u16,
    #[serde(default = "d_pkt_interval")]
    pub packet_interval_us: u64,
    #[serde(default = "d_payload")]
    pub payload_len: u32,
    #[serde(default)]
    pub dest_same_edge: f64,
    #[serde(default)]
    pub dest_server: f64,
    #[serde(default)]
    pub dest_external: f64,
    #[serde(default)]
    pub dest_uniform: f64,
    #[serde(default)]
    pub backoff_failures: u8,
    #[serde(default = "default_one_f64")]
    pub day_mult: f64,
    #[serde(default = "default_one_f64")]
    pub night_mult: f64,
    #[serde(default = "d_work_start")]
    pub work_start_hour: f64,
    #[serde(default = "d_work_end")]
    pub work_end_hour: f64,
    #[serde(default)]
    pub workdays_only: bool,
}

fn d_ppf() -> u16 {
    1
}
fn d_pkt_interval() -> u64 {
    10_000
}
fn d_payload() -> u32 {
    1_500
}
fn d_work_start() -> f64 {
    9.0
}
fn d_work_end() -> f64 {
    19.0
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StreamsSection {
    #[serde(default)]
    pub pairs: u32,
    #[serde(default)]
    pub pps: f64,
    #[serde(default = "d_payload")]
    pub payload_len: u32,
    #[serde(default)]
    pub reserve_sender_edges: u16,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MobilitySection {
    #[serde(default)]
    pub moves_per_second: f64,
    #[serde(default)]
    pub reattach_delay_us: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresenceSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_one_f64")]
    pub permanent_fraction: f64,
    #[serde(default = "d_arrival")]
    pub arrival_hour: f64,
    #[serde(default = "d_departure")]
    pub departure_hour: f64,
    #[serde(default = "d_jitter")]
    pub jitter_s: f64,
}

impl Default for PresenceSection {
    fn default() -> Self {
        Self {
            enabled: false,
            permanent_fraction: 1.0,
            arrival_hour: d_arrival(),
            departure_hour: d_departure(),
            jitter_s: d_jitter(),
        }
    }
}

fn d_arrival() -> f64 {
    9.0
}
fn d_departure() -> f64 {
    19.0
}
fn d_jitter() -> f64 {
    1_800.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    #[serde(default = "d_cache_ttl")]
    pub map_cache_ttl_s: f64,
    #[serde(default = "d_negative_ttl")]
    pub negative_ttl_s: f64,
    #[serde(default = "d_retry")]
    pub negative_retry_budget: u8,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            map_cache_ttl_s: d_cache_ttl(),
            negative_ttl_s: d_negative_ttl(),
            negative_retry_budget: d_retry(),
        }
    }
}

fn d_cache_ttl() -> f64 {
    86_400.0
}
fn d_negative_ttl() -> f64 {
    60.0
}
fn d_retry() -> u8 {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitigationsSection {
    #[serde(default = "d_true")]
    pub underlay_tracking: bool,
    #[serde(default = "d_true")]
    pub solicit_unknown: bool,
}

impl Default for MitigationsSection {
    fn default() -> Self {
        Self { underlay_tracking: true, solicit_unknown: true }
    }
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    #[serde(default)]
    pub prefixes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebootSection {
    pub edge: u16,
    pub at_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArpProbeSection {
    pub at_s: f64,
    pub from: u32,
    #[serde(default)]
    pub target_endpoint: Option<u32>,
    #[serde(default)]
    pub target_ip: Option<String>,
    #[serde(default)]
    pub other_broadcast: bool,
}

// ---- validated effective configuration -----------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArpTarget {
    Endpoint(u32),
    Ip(OverlayAddr),
    OtherBroadcast,
}

#[derive(Debug, Clone, Copy)]
pub struct ArpProbe {
    pub at_us: u64,
    pub from: u32,
    pub target: ArpTarget,
}

#[derive(Debug, Clone, Copy)]
pub struct RebootEvent {
    pub edge: u16,
    pub at_us: u64,
    pub duration_us: u64,
}

/// A validated scenario with all times in microseconds and all rates in
/// events per second of simulated time (timescale already applied).
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub mode: ControlPlaneMode,
    pub duration_us: u64,
    pub warmup_us: u64,
    pub sampling_us: u64,
    pub timescale: f64,
    pub day_us: u64,
    pub pre_onboarded: bool,
    pub debug_drop_log: bool,
    pub topology: TopologySection,
    pub endpoints: EndpointsSection,
    pub vn: Vn,
    pub families: Vec<AddrFamily>,
    pub default_action: RuleAction,
    pub rules: Vec<ConnectivityRule>,
    pub traffic: TrafficSection,
    pub streams: StreamsSection,
    pub mobility: MobilitySection,
    pub presence: PresenceSection,
    pub map_cache_ttl_us: u64,
    pub negative_ttl_us: u64,
    pub negative_retry_budget: u8,
    pub underlay_tracking: bool,
    pub solicit_unknown: bool,
    pub external_prefixes: Vec<OverlayAddr>,
    pub reboots: Vec<RebootEvent>,
    pub arp_probes: Vec<ArpProbe>,
    pub v4_pool_base: u32,
    pub max_queue: usize,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        file.validate().map_err(ScenarioError::Invalid)
    }

    /// A bundled preset by name.
    pub fn preset(name: &str) -> Result<Self, ScenarioError> {
        let text = preset_text(name).ok_or_else(|| ScenarioError::UnknownPreset(name.into()))?;
        Self::from_toml_str(text)
    }

    pub fn mover_pool_edges(&self) -> Vec<u16> {
        let reserved = self.streams.reserve_sender_edges.min(self.topology.edge_count);
        (0..self.topology.edge_count - reserved).collect()
    }
}

pub const PRESET_NAMES: &[&str] =
    &["minimal", "campus-a", "campus-b", "warehouse", "reboot", "egress", "arp"];

pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "minimal" => Some(include_str!("../presets/minimal.toml")),
        "campus-a" => Some(include_str!("../presets/campus-a.toml")),
        "campus-b" => Some(include_str!("../presets/campus-b.toml")),
        "warehouse" => Some(include_str!("../presets/warehouse.toml")),
        "reboot" => Some(include_str!("../presets/reboot.toml")),
        "egress" => Some(include_str!("../presets/egress.toml")),
        "arp" => Some(include_str!("../presets/arp.toml")),
        _ => None,
    }
}

fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round().max(0.0) as u64
}

fn parse_action(s: &str) -> Option<RuleAction> {
    match s {
        "allow" => Some(RuleAction::Allow),
        "deny" => Some(RuleAction::Deny),
        _ => None,
    }
}

fn parse_family(s: &str) -> Option<AddrFamily> {
    match s {
        "ipv4" => Some(AddrFamily::Ipv4),
        "ipv6" => Some(AddrFamily::Ipv6),
        "mac" => Some(AddrFamily::Mac),
        _ => None,
    }
}

fn parse_prefix(s: &str) -> Option<OverlayAddr> {
    let (addr, len) = match s.split_once('/') {
        Some((a, l)) => (a, l.parse::<u8>().ok()?),
        None => (s, 32),
    };
    let v4 = Ipv4Addr::from_str(addr).ok()?;
    OverlayAddr::ipv4_prefix(v4, len).ok()
}

impl ScenarioFile {
    /// Check every cross-reference and produce the effective scenario.
    /// All violations are reported, not just the first.
    pub fn validate(&self) -> Result<Scenario, Vec<ValidationIssue>> {
        let mut issues = Vec::new();

        macro_rules! fail {
            ($section:literal, $field:expr, $($msg:tt)*) => {
                issues.push(ValidationIssue {
                    section: $section,
                    field: $field.to_string(),
                    message: format!($($msg)*),
                })
            };
        }

        if self.topology.edge_count == 0 {
            fail!("topology", "edge_count", "must be at least 1");
        }
        if self.topology.border_count == 0 {
            fail!("topology", "border_count", "must be at least 1");
        }
        if self.duration_s <= 0.0 {
            fail!("scenario", "duration_s", "must be positive");
        }
        if self.sampling_interval_s <= 0.0 {
            fail!("scenario", "sampling_interval_s", "must be positive");
        }
        if self.timescale <= 0.0 {
            fail!("scenario", "timescale", "must be positive");
        }
        if self.warmup_s < 0.0 || self.warmup_s >= self.duration_s {
            fail!("scenario", "warmup_s", "must lie inside [0, duration_s)");
        }

        let vn = match Vn::new(self.endpoints.vn) {
            Ok(v) => Some(v),
            Err(e) => {
                fail!("endpoints", "vn", "{e}");
                None
            }
        };
        if self.endpoints.groups.is_empty() {
            fail!("endpoints", "groups", "at least one group required");
        }
        if self.endpoints.server_count > 0 && self.endpoints.server_groups.is_empty() {
            fail!("endpoints", "server_groups", "required when server_count > 0");
        }
        if self.endpoints.server_count > self.endpoints.count {
            fail!("endpoints", "server_count", "exceeds endpoint count");
        }
        if let Some(e) = self.endpoints.server_edge {
            if e >= self.topology.edge_count {
                fail!("endpoints", "server_edge", "edge {e} not in topology");
            }
        }
        let mut families = Vec::new();
        let fam_specs = if self.endpoints.address_families.is_empty() {
            vec!["ipv4".to_string()]
        } else {
            self.endpoints.address_families.clone()
        };
        for f in &fam_specs {
            match parse_family(f) {
                Some(fam) => families.push(fam),
                None => fail!("endpoints", "address_families", "unknown family `{f}`"),
            }
        }
        if !families.contains(&AddrFamily::Ipv4) {
            fail!("endpoints", "address_families", "ipv4 is required");
        }
        let v4_pool_base = match Ipv4Addr::from_str(&self.endpoints.v4_pool_base) {
            Ok(a) => u32::from(a),
            Err(_) => {
                fail!("endpoints", "v4_pool_base", "not an IPv4 address");
                0
            }
        };

        let default_action = match parse_action(&self.policy.default_action) {
            Some(a) => a,
            None => {
                fail!("policy", "default_action", "must be `allow` or `deny`");
                RuleAction::Deny
            }
        };
        let mut declared_groups: Vec<u16> = self.endpoints.groups.clone();
        declared_groups.extend(&self.endpoints.server_groups);
        let mut rules = Vec::new();
        for (i, r) in self.policy.rules.iter().enumerate() {
            let action = match parse_action(&r.action) {
                Some(a) => a,
                None => {
                    fail!("policy", format!("rules[{i}].action"), "must be `allow` or `deny`");
                    continue;
                }
            };
            if r.vn != self.endpoints.vn {
                fail!(
                    "policy",
                    format!("rules[{i}].vn"),
                    "virtual network {} not declared by endpoints",
                    r.vn
                );
                continue;
            }
            for (side, g) in [("src", r.src), ("dst", r.dst)] {
                if !declared_groups.contains(&g) {
                    fail!(
                        "policy",
                        format!("rules[{i}].{side}"),
                        "group {g} not declared by any endpoint"
                    );
                }
            }
            if let Some(vn) = vn {
                rules.push(ConnectivityRule {
                    vn,
                    src_group: GroupId::new(r.src),
                    dst_group: GroupId::new(r.dst),
                    action,
                });
            }
        }

        let t = &self.traffic;
        for (field, v) in [
            ("dest_same_edge", t.dest_same_edge),
            ("dest_server", t.dest_server),
            ("dest_external", t.dest_external),
            ("dest_uniform", t.dest_uniform),
        ] {
            if v < 0.0 {
                fail!("traffic", field, "weight must be non-negative");
            }
        }
        let wsum = t.dest_same_edge + t.dest_server + t.dest_external + t.dest_uniform;
        if t.flow_rate_hz > 0.0 && wsum <= 0.0 {
            fail!("traffic", "dest_*", "positive flow rate needs a destination weight");
        }
        if t.flow_rate_hz < 0.0 {
            fail!("traffic", "flow_rate_hz", "must be non-negative");
        }
        if t.dest_server > 0.0 && self.endpoints.server_count == 0 {
            fail!("traffic", "dest_server", "no servers declared in endpoints");
        }
        if t.dest_external > 0.0 && self.external.prefixes.is_empty() {
            fail!("traffic", "dest_external", "no external prefixes declared");
        }
        if !(0.0..=24.0).contains(&t.work_start_hour)
            || !(0.0..=24.0).contains(&t.work_end_hour)
            || t.work_start_hour >= t.work_end_hour
        {
            fail!("traffic", "work_start_hour/work_end_hour", "need 0 <= start < end <= 24");
        }

        if self.streams.pairs > 0 {
            if self.streams.pps <= 0.0 {
                fail!("streams", "pps", "must be positive when pairs > 0");
            }
            if self.streams.pairs * 2 > self.endpoints.count {
                fail!("streams", "pairs", "2*pairs exceeds endpoint count");
            }
            if self.streams.reserve_sender_edges >= self.topology.edge_count {
                fail!("streams", "reserve_sender_edges", "must leave at least one mover edge");
            }
        }

        if self.mobility.moves_per_second < 0.0 {
            fail!("mobility", "moves_per_second", "must be non-negative");
        }

        let p = &self.presence;
        if p.enabled {
            if !(0.0..=1.0).contains(&p.permanent_fraction) {
                fail!("presence", "permanent_fraction", "must lie in [0, 1]");
            }
            if p.arrival_hour >= p.departure_hour || p.departure_hour > 24.0 {
                fail!("presence", "arrival_hour/departure_hour", "need arrival < departure <= 24");
            }
            if p.jitter_s < 0.0 || p.jitter_s > 3.0 * 3_600.0 {
                fail!("presence", "jitter_s", "must lie in [0, 10800]");
            }
        }

        if self.cache.map_cache_ttl_s <= 0.0 || self.cache.negative_ttl_s <= 0.0 {
            fail!("cache", "map_cache_ttl_s/negative_ttl_s", "must be positive");
        }

        let mut external_prefixes = Vec::new();
        for (i, s) in self.external.prefixes.iter().enumerate() {
            match parse_prefix(s) {
                Some(p) => external_prefixes.push(p),
                None => fail!("external", format!("prefixes[{i}]"), "not an IPv4 prefix"),
            }
        }

        for (i, r) in self.reboots.iter().enumerate() {
            if r.edge >= self.topology.edge_count {
                fail!("reboots", format!("[{i}].edge"), "edge {} not in topology", r.edge);
            }
            if r.at_s < 0.0 || r.duration_s <= 0.0 || r.at_s + r.duration_s >= self.duration_s {
                fail!("reboots", format!("[{i}]"), "reboot window must fit inside the run");
            }
        }

        let mut arp_probes = Vec::new();
        for (i, a) in self.arp_probes.iter().enumerate() {
            if a.from >= self.endpoints.count {
                fail!("arp_probes", format!("[{i}].from"), "endpoint {} not declared", a.from);
            }
            let target = match (a.target_endpoint, &a.target_ip, a.other_broadcast) {
                (Some(ep), None, false) => {
                    if ep >= self.endpoints.count {
                        fail!(
                            "arp_probes",
                            format!("[{i}].target_endpoint"),
                            "endpoint {ep} not declared"
                        );
                        continue;
                    }
                    ArpTarget::Endpoint(ep)
                }
                (None, Some(ip), false) => match parse_prefix(ip) {
                    Some(p) if p.is_host() => ArpTarget::Ip(p),
                    _ => {
                        fail!("arp_probes", format!("[{i}].target_ip"), "not a host IPv4 address");
                        continue;
                    }
                },
                (None, None, true) => ArpTarget::OtherBroadcast,
                _ => {
                    fail!(
                        "arp_probes",
                        format!("[{i}]"),
                        "exactly one of target_endpoint, target_ip, other_broadcast"
                    );
                    continue;
                }
            };
            if !a.other_broadcast && !families.contains(&AddrFamily::Mac) {
                fail!("arp_probes", format!("[{i}]"), "ARP probes need the mac address family");
            }
            arp_probes.push(ArpProbe { at_us: secs_to_us(a.at_s / self.timescale), from: a.from, target });
        }

        if !issues.is_empty() {
            return Err(issues);
        }

        let ts = self.timescale;
        let mut traffic = self.traffic.clone();
        traffic.flow_rate_hz *= ts;
        let mut streams = self.streams.clone();
        streams.pps *= ts;
        let mut mobility = self.mobility.clone();
        mobility.moves_per_second *= ts;

        Ok(Scenario {
            name: self.name.clone(),
            seed: self.seed,
            mode: self.control_plane,
            duration_us: secs_to_us(self.duration_s / ts),
            warmup_us: secs_to_us(self.warmup_s / ts),
            sampling_us: secs_to_us(self.sampling_interval_s / ts),
            timescale: ts,
            day_us: secs_to_us(86_400.0 / ts),
            pre_onboarded: self.pre_onboarded,
            debug_drop_log: self.debug_drop_log,
            topology: self.topology.clone(),
            endpoints: self.endpoints.clone(),
            vn: vn.expect("validated"),
            families,
            default_action,
            rules,
            traffic,
            streams,
            mobility,
            presence: self.presence.clone(),
            map_cache_ttl_us: secs_to_us(self.cache.map_cache_ttl_s / ts),
            negative_ttl_us: secs_to_us(self.cache.negative_ttl_s / ts),
            negative_retry_budget: self.cache.negative_retry_budget,
            underlay_tracking: self.mitigations.underlay_tracking,
            solicit_unknown: self.mitigations.solicit_unknown,
            external_prefixes,
            reboots: self
                .reboots
                .iter()
                .map(|r| RebootEvent {
                    edge: r.edge,
                    at_us: secs_to_us(r.at_s / ts),
                    duration_us: secs_to_us(r.duration_s / ts),
                })
                .collect(),
            arp_probes,
            v4_pool_base,
            max_queue: 50_000_000,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            match Scenario::preset(name) {
                Ok(sc) => assert_eq!(&sc.name, name),
                Err(e) => panic!("preset {name} invalid: {e}: {:?}", e.issues()),
            }
        }
    }

    #[test]
    fn zero_edges_rejected() {
        let text = preset_text("minimal").unwrap().replace("edge_count = 1", "edge_count = 0");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err
            .issues()
            .iter()
            .any(|i| i.section == "topology" && i.field == "edge_count"));
    }

    #[test]
    fn undeclared_group_is_named() {
        let text = preset_text("minimal").unwrap().replace(
            "rules = [{ vn = 100, src = 20, dst = 20, action = \"allow\" }]",
            "rules = [{ vn = 100, src = 99, dst = 20, action = \"allow\" }]",
        );
        let err = Scenario::from_toml_str(&text).unwrap_err();
        let issues = err.issues();
        assert!(
            issues.iter().any(|i| i.field == "rules[0].src" && i.message.contains("99")),
            "issues: {issues:?}"
        );
    }

    #[test]
    fn multiple_issues_reported_together() {
        let text = preset_text("minimal")
            .unwrap()
            .replace("edge_count = 1", "edge_count = 0")
            .replace("border_count = 1", "border_count = 0");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.issues().len() >= 2);
    }

    #[test]
    fn timescale_compresses_spans_and_scales_rates() {
        let text = preset_text("minimal").unwrap().replace("timescale = 1.0", "timescale = 2.0");
        let sc = Scenario::from_toml_str(&text).unwrap();
        let base = Scenario::preset("minimal").unwrap();
        assert_eq!(sc.duration_us * 2, base.duration_us);
        assert!((sc.traffic.flow_rate_hz - base.traffic.flow_rate_hz * 2.0).abs() < 1e-9);
    }
}
