//! Benchmark outputs and their CSV and text renderings.

use std::fmt::Write as _;
use std::io;

use super::config::{Mode, Scenario};
use super::world::WorldResult;

/// Delivery latency summary of one source label, in microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencySummary {
    pub label: u16,
    pub count: usize,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn from_nanos(label: u16, values: &[u64]) -> Self {
        let mut v = values.to_vec();
        v.sort_unstable();
        let us = |x: u64| x as f64 / 1000.0;
        LatencySummary {
            label,
            count: v.len(),
            p50_us: us(percentile(&v, 50.0)),
            p90_us: us(percentile(&v, 90.0)),
            p99_us: us(percentile(&v, 99.0)),
            max_us: us(v.last().copied().unwrap_or(0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub mode: Mode,
    /// Topology or sub-run name within a scenario; empty for plain runs.
    pub variant: String,
    pub seed: u64,
    pub drop_prob: f64,
    pub completed: bool,
    pub goodput_mbps: f64,
    pub bytes_delivered: u64,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub packets_retransmitted: u64,
    pub sacks: u64,
    pub copy_bytes: u64,
    /// Cost units; a model, not a CPU measurement.
    pub cpu_proxy: f64,
    pub elapsed_proxy_coarse: f64,
    pub elapsed_proxy_fine: f64,
    pub latency: Vec<LatencySummary>,
    pub handshake_us: Option<f64>,
    pub tcb_footprint: usize,
    pub sim_time_ms: f64,
    pub events: u64,
}

impl MetricsReport {
    pub fn from_world(
        scenario: Scenario,
        mode: Mode,
        seed: u64,
        drop_prob: f64,
        w: &WorldResult,
    ) -> Self {
        let goodput_mbps = match (w.first_submit, w.last_delivery) {
            (Some(a), Some(b)) if b > a => {
                w.bytes_delivered as f64 * 8.0 / (b - a).as_secs_f64() / 1e6
            }
            _ => 0.0,
        };
        MetricsReport {
            scenario,
            mode,
            variant: String::new(),
            seed,
            drop_prob,
            completed: w.completed,
            goodput_mbps,
            bytes_delivered: w.bytes_delivered,
            packets_sent: w.packets_sent,
            packets_delivered: w.packets_delivered,
            packets_dropped: w.packets_dropped,
            packets_retransmitted: w.packets_retransmitted,
            sacks: w.sacks,
            copy_bytes: w.copy_bytes,
            cpu_proxy: w.cpu_proxy_milli as f64 / 1000.0,
            elapsed_proxy_coarse: w.elapsed_coarse_milli as f64 / 1000.0,
            elapsed_proxy_fine: w.elapsed_fine_milli as f64 / 1000.0,
            latency: w
                .latencies
                .iter()
                .map(|(l, v)| LatencySummary::from_nanos(*l, v))
                .collect(),
            handshake_us: w.handshake.map(|d| d.as_secs_f64() * 1e6),
            tcb_footprint: w.tcb_footprint,
            sim_time_ms: w.end_time.as_secs_f64() * 1e3,
            events: w.events,
        }
    }

    pub const CSV_HEADER: &'static str = "scenario,mode,variant,seed,drop_prob,completed,goodput_mbps,bytes_delivered,\
packets_sent,packets_delivered,packets_dropped,packets_retransmitted,sacks,copy_bytes,cpu_proxy,\
elapsed_proxy_coarse,elapsed_proxy_fine,latency_p50_us,latency_p99_us,handshake_us,tcb_footprint,sim_time_ms";

    pub fn csv_fields(&self) -> Vec<String> {
        // worst label, so a single row still shows the slowest flow
        let p50 = self.latency.iter().map(|l| l.p50_us).fold(0.0, f64::max);
        let p99 = self.latency.iter().map(|l| l.p99_us).fold(0.0, f64::max);
        vec![
            self.scenario.to_string(),
            self.mode.to_string(),
            self.variant.clone(),
            self.seed.to_string(),
            sig6(self.drop_prob),
            self.completed.to_string(),
            sig6(self.goodput_mbps),
            self.bytes_delivered.to_string(),
            self.packets_sent.to_string(),
            self.packets_delivered.to_string(),
            self.packets_dropped.to_string(),
            self.packets_retransmitted.to_string(),
            self.sacks.to_string(),
            self.copy_bytes.to_string(),
            sig6(self.cpu_proxy),
            sig6(self.elapsed_proxy_coarse),
            sig6(self.elapsed_proxy_fine),
            sig6(p50),
            sig6(p99),
            self.handshake_us.map(sig6).unwrap_or_default(),
            self.tcb_footprint.to_string(),
            sig6(self.sim_time_ms),
        ]
    }

    pub fn csv_row(&self) -> String {
        self.csv_fields().join(",")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {}  mode {}{}  seed {}  drop {}",
            self.scenario,
            self.mode,
            if self.variant.is_empty() {
                String::new()
            } else {
                format!("  variant {}", self.variant)
            },
            self.seed,
            sig6(self.drop_prob)
        );
        let _ = writeln!(s, "  completed            {}", self.completed);
        let _ = writeln!(s, "  goodput              {} Mb/s", sig6(self.goodput_mbps));
        let _ = writeln!(s, "  bytes delivered      {}", self.bytes_delivered);
        let _ = writeln!(
            s,
            "  packets              sent {}  delivered {}  dropped {}  retransmitted {}",
            self.packets_sent,
            self.packets_delivered,
            self.packets_dropped,
            self.packets_retransmitted
        );
        let _ = writeln!(s, "  acks/sacks sent      {}", self.sacks);
        let _ = writeln!(s, "  copy bytes           {}", self.copy_bytes);
        let _ = writeln!(
            s,
            "  cpu proxy            {} units (elapsed coarse {} / fine {}; model units, not CPU %)",
            sig6(self.cpu_proxy),
            sig6(self.elapsed_proxy_coarse),
            sig6(self.elapsed_proxy_fine)
        );
        if let Some(h) = self.handshake_us {
            let _ = writeln!(s, "  handshake            {} us", sig6(h));
        }
        let _ = writeln!(s, "  tcb footprint        {} B", self.tcb_footprint);
        let _ = writeln!(
            s,
            "  simulated time       {} ms ({} events)",
            sig6(self.sim_time_ms),
            self.events
        );
        for l in &self.latency {
            let _ = writeln!(
                s,
                "  latency label {:<5}  n {}  p50 {} us  p90 {} us  p99 {} us  max {} us",
                l.label,
                l.count,
                sig6(l.p50_us),
                sig6(l.p90_us),
                sig6(l.p99_us),
                sig6(l.max_us)
            );
        }
        s
    }
}

/// Renders with at most 6 significant digits and no trailing zeros.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x == 0.0 {
            "0".into()
        } else {
            format!("{x}")
        };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// One row of a loss sweep, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub drop_prob: f64,
    pub mode: Mode,
    pub goodput_mbps: f64,
    pub retransmits: f64,
    pub sacks: f64,
    pub cpu_proxy: f64,
    /// Per-seed goodputs, in seed order.
    pub samples: Vec<f64>,
}

pub const SWEEP_HEADER: &str = "drop_prob,mode,goodput_mbps,retransmits,sacks,cpu_proxy";

impl SweepRow {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            sig6(self.drop_prob),
            self.mode.to_string(),
            sig6(self.goodput_mbps),
            sig6(self.retransmits),
            sig6(self.sacks),
            sig6(self.cpu_proxy),
        ]
    }
}

fn write_table(header: &str, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let put = |w: &mut csv::Writer<Vec<u8>>, rec: &[String]| {
        w.write_record(rec).expect("in-memory write")
    };
    put(
        &mut w,
        &header.split(',').map(String::from).collect::<Vec<_>>(),
    );
    for r in rows {
        put(&mut w, &r);
    }
    let bytes = w.into_inner().expect("in-memory flush");
    String::from_utf8(bytes).expect("fields are utf-8")
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    write_table(SWEEP_HEADER, rows.iter().map(SweepRow::csv_fields))
}

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    write_table(
        MetricsReport::CSV_HEADER,
        reports.iter().map(MetricsReport::csv_fields),
    )
}

/// Writes `text` to `dest`, returning the byte count.
pub fn emit_csv(text: &str, dest: &mut impl io::Write) -> io::Result<usize> {
    dest.write_all(text.as_bytes())?;
    Ok(text.len())
}
