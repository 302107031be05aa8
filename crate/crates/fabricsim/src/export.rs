//! Metrics export: four CSV files with fixed column sets, plus a
//! human-readable run summary.
//!
//! Column sets and order never vary with scenario content, and rows are
//! time-ordered, so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::sim::metrics::{mean, percentile, variance, Metrics};

pub const CSV_FILES: &[&str] = &["fib.csv", "handover.csv", "control.csv", "drops.csv"];

pub fn fib_csv(m: &Metrics) -> String {
    let mut out = String::from("time_us,router_id,role,fib_entries\n");
    for r in &m.fib_rows {
        let _ = writeln!(out, "{},{},{},{}", r.time_us, r.router_id, r.role, r.fib_entries);
    }
    out
}

pub fn handover_csv(m: &Metrics) -> String {
    let mut out = String::from("endpoint_id,detach_us,restore_us,delay_us,mode\n");
    for h in &m.handover {
        match h.restore_us {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    h.endpoint,
                    h.detach_us,
                    r,
                    r - h.detach_us,
                    m.mode
                );
            }
            None => {
                let _ = writeln!(out, "{},{},,,{}", h.endpoint, h.detach_us, m.mode);
            }
        }
    }
    out
}

pub fn control_csv(m: &Metrics) -> String {
    let mut out = String::from("time_us,msg_kind,count\n");
    for r in &m.control_rows {
        let _ = writeln!(out, "{},{},{}", r.time_us, r.msg_kind, r.count);
    }
    out
}

pub fn drops_csv(m: &Metrics) -> String {
    let mut out = String::from("time_us,router_id,acl_hits,acl_drops\n");
    for r in &m.drops_rows {
        let _ = writeln!(out, "{},{},{},{}", r.time_us, r.router_id, r.acl_hits, r.acl_drops);
    }
    out
}

/// All four exports, in file order.
pub fn all_csvs(m: &Metrics) -> Vec<(&'static str, String)> {
    vec![
        ("fib.csv", fib_csv(m)),
        ("handover.csv", handover_csv(m)),
        ("control.csv", control_csv(m)),
        ("drops.csv", drops_csv(m)),
    ]
}

pub fn write_csvs(m: &Metrics, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in all_csvs(m) {
        let mut f = std::fs::File::create(dir.join(name))?;
        f.write_all(body.as_bytes())?;
    }
    Ok(())
}

/// Average FIB size over all samples of one role.
pub fn avg_fib(m: &Metrics, role: &str) -> f64 {
    let xs: Vec<u64> = m
        .fib_rows
        .iter()
        .filter(|r| r.role == role)
        .map(|r| r.fib_entries)
        .collect();
    mean(&xs)
}

/// The state-reduction figure: 1 - avg(edge)/avg(border).
pub fn fib_reduction(m: &Metrics) -> f64 {
    let border = avg_fib(m, "border");
    if border <= 0.0 {
        return 0.0;
    }
    1.0 - avg_fib(m, "edge") / border
}

/// ACL drop permille over all ACL lookups, cumulative.
pub fn drop_permille(m: &Metrics) -> f64 {
    let (hits, drops) = m
        .drops_rows
        .iter()
        .rev()
        .take_while(|r| r.time_us == m.drops_rows.last().map(|l| l.time_us).unwrap_or(0))
        .fold((0u64, 0u64), |(h, d), r| (h + r.acl_hits, d + r.acl_drops));
    if hits == 0 {
        return 0.0;
    }
    drops as f64 / hits as f64 * 1000.0
}

/// Human-readable run report.
pub fn summary(m: &Metrics) -> String {
    let mut out = String::new();
    let delays = m.handover_delays();
    let _ = writeln!(out, "mode: {}", m.mode);
    let _ = writeln!(
        out,
        "handover: {} samples, {} timeouts",
        delays.len(),
        m.timeouts
    );
    if !delays.is_empty() {
        let _ = writeln!(
            out,
            "handover delay us: mean {:.0}  p50 {}  p95 {}  p99 {}  variance {:.0}",
            mean(&delays),
            percentile(&delays, 50.0),
            percentile(&delays, 95.0),
            percentile(&delays, 99.0),
            variance(&delays),
        );
    }
    let _ = writeln!(
        out,
        "fib: avg edge {:.1}  avg border {:.1}  reduction {:.1}%",
        avg_fib(m, "edge"),
        avg_fib(m, "border"),
        fib_reduction(m) * 100.0
    );
    let _ = writeln!(out, "acl drop permille (final): {:.3}", drop_permille(m));
    let _ = writeln!(
        out,
        "packets: injected {}  delivered {}  external {}  dropped {}  in-flight {}",
        m.conservation.injected,
        m.conservation.delivered,
        m.conservation.delivered_external,
        m.conservation.dropped,
        m.conservation.in_flight
    );
    let _ = writeln!(out, "moves: {}", m.moves_total);
    let _ = writeln!(
        out,
        "signaling: registers {}  withdraws {}  solicits server/data {}/{}  pushes {}",
        m.registers_total,
        m.withdraws_total,
        m.solicit_server_total,
        m.solicit_data_total,
        m.pushes_total
    );
    let mut kinds: Vec<String> = m
        .msg_totals
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    kinds.sort();
    let _ = writeln!(out, "messages: {}", kinds.join(" "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::metrics::{FibRow, HandoverRow};

    #[test]
    fn csv_headers_stable() {
        let m = Metrics::default();
        assert!(fib_csv(&m).starts_with("time_us,router_id,role,fib_entries\n"));
        assert!(handover_csv(&m).starts_with("endpoint_id,detach_us,restore_us,delay_us,mode\n"));
        assert!(control_csv(&m).starts_with("time_us,msg_kind,count\n"));
        assert!(drops_csv(&m).starts_with("time_us,router_id,acl_hits,acl_drops\n"));
    }

    #[test]
    fn handover_timeout_row_has_empty_fields() {
        let mut m = Metrics { mode: "reactive", ..Metrics::default() };
        m.handover.push(HandoverRow { endpoint: 3, detach_us: 100, restore_us: None });
        assert!(handover_csv(&m).contains("3,100,,,reactive"));
    }

    #[test]
    fn reduction_math() {
        let mut m = Metrics::default();
        for (role, n) in [("edge", 20u64), ("border", 100u64)] {
            m.fib_rows.push(FibRow {
                time_us: 1,
                router_id: role.into(),
                role: if role == "edge" { "edge" } else { "border" },
                fib_entries: n,
            });
        }
        assert!((fib_reduction(&m) - 0.8).abs() < 1e-9);
    }
}
