//! Measurement collection: FIB size series, handover delays, control
//! message counts, ACL drop counters, and the conservation ledger.

use std::collections::BTreeMap;

use crate::effects::OnboardTrace;

/// One FIB-size sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FibRow {
    pub time_us: u64,
    pub router_id: String,
    pub role: &'static str,
    pub fib_entries: u64,
}

/// One completed (or timed out) handover measurement. `restore_us` is
/// absent when traffic never came back before the scenario ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoverRow {
    pub endpoint: u32,
    pub detach_us: u64,
    pub restore_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlRow {
    pub time_us: u64,
    pub msg_kind: &'static str,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropsRow {
    pub time_us: u64,
    pub router_id: String,
    pub acl_hits: u64,
    pub acl_drops: u64,
}

/// Packet conservation ledger: injected equals delivered plus dropped
/// plus still-in-flight at every instant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conservation {
    pub injected: u64,
    pub delivered: u64,
    pub delivered_external: u64,
    pub dropped: u64,
    pub in_flight: i64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.injected as i64
            == self.delivered as i64
                + self.delivered_external as i64
                + self.dropped as i64
                + self.in_flight
    }
}

/// Everything a run measures.
#[derive(Debug, Default)]
pub struct Metrics {
    pub mode: &'static str,
    pub fib_rows: Vec<FibRow>,
    pub handover: Vec<HandoverRow>,
    pub control_rows: Vec<ControlRow>,
    pub drops_rows: Vec<DropsRow>,
    /// Total transmitted control messages by kind.
    pub msg_totals: BTreeMap<&'static str, u64>,
    pub(crate) msg_window: BTreeMap<&'static str, u64>,
    /// Registrations excluding withdraws.
    pub registers_total: u64,
    pub withdraws_total: u64,
    /// Move-triggered solicits sent by the routing server.
    pub solicit_server_total: u64,
    /// Data-plane solicits sent by edges holding stale or departed state.
    pub solicit_data_total: u64,
    pub pushes_total: u64,
    pub moves_total: u64,
    pub onboard_traces: Vec<OnboardTrace>,
    pub conservation: Conservation,
    pub drops_by_reason: BTreeMap<&'static str, u64>,
    /// Time-stamped drop log for small scenarios (loss-window audits).
    pub drop_events: Vec<(u64, &'static str)>,
    pub delivery_log: Vec<(u64, u32)>,
    pub underlay_broadcasts: u64,
    pub max_packet_hops: u8,
    pub max_reboot_pair_crossings: u8,
    pub timeouts: u64,
    /// Routing-server lookup count at scenario end.
    pub server_queries: u64,
    pub server_entry_count: usize,
    pub server_visit_histogram: BTreeMap<u32, u64>,
}

impl Metrics {
    pub fn count_msg(&mut self, kind: &'static str) {
        *self.msg_totals.entry(kind).or_insert(0) += 1;
        *self.msg_window.entry(kind).or_insert(0) += 1;
    }

    pub fn count_drop(&mut self, now: u64, reason: &'static str, log: bool) {
        self.conservation.dropped += 1;
        self.conservation.in_flight -= 1;
        *self.drops_by_reason.entry(reason).or_insert(0) += 1;
        if log {
            self.drop_events.push((now, reason));
        }
    }

    /// Completed handover delays in microseconds.
    pub fn handover_delays(&self) -> Vec<u64> {
        self.handover
            .iter()
            .filter_map(|h| h.restore_us.map(|r| r - h.detach_us))
            .collect()
    }
}

/// Mean of a sample set, zero when empty.
pub fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|x| *x as f64).sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[u64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// p-th percentile (nearest-rank) of a sample set.
pub fn percentile(xs: &[u64], p: f64) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_unstable();
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_identity() {
        let c = Conservation {
            injected: 10,
            delivered: 4,
            delivered_external: 2,
            dropped: 3,
            in_flight: 1,
        };
        assert!(c.holds());
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&xs, 50.0), 50);
        assert_eq!(percentile(&xs, 99.0), 99);
        assert_eq!(percentile(&xs, 100.0), 100);
    }
}
