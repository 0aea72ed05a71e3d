//! Scenario drivers: each turns a [`ScenarioConfig`] into one or more
//! simulation runs and assembles the reports.

use std::fmt::Write as _;
use std::time::Duration;

use thiserror::Error;

use crate::assoc::AssocConfig;
use crate::netsim::{LinkConfig, SimError, SimTime};
use crate::rxpath::SackPolicy;
use crate::tcpbase::TcpConfig;
use crate::txpath::AckMode;
use crate::wire::DEFAULT_MTU;

use super::config::{ConfigError, Mode, Protocol, Scenario, ScenarioConfig};
use super::report::{reports_csv, sig6, sweep_csv, MetricsReport, SweepRow};
use super::sweep::map_runs;
use super::world::{AppModel, Injection, Source, World, WorldConfig, WorldResult};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit code: 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 1,
            _ => 2,
        }
    }
}

/// Builds the topology described by `cfg` with its per-scenario defaults.
pub fn world_config(cfg: &ScenarioConfig) -> WorldConfig {
    let streams = cfg.streams();
    let assoc = AssocConfig {
        streams_out: streams,
        streams_in: streams,
        paths: cfg.paths(),
        rwnd: cfg.rwnd,
        mtu: DEFAULT_MTU,
        mbs: cfg.mbs,
        no_delay: cfg.no_delay(),
        ack_mode: if cfg.gbn {
            AckMode::GoBackN
        } else {
            AckMode::Selective
        },
        copy_mode: cfg.copy_mode,
        sack_policy: SackPolicy::new(cfg.sack_policy),
        checksum: cfg.checksum,
        hb_interval: cfg.hb_interval(),
        seed: cfg.seed,
        ..AssocConfig::default()
    };
    let tcp = TcpConfig {
        nagle: !cfg.no_delay(),
        rwnd: cfg.rwnd,
        ..TcpConfig::default()
    };
    let link = LinkConfig {
        bandwidth: cfg.bandwidth,
        prop_delay: cfg.one_way(),
        drop_prob: cfg.drop_prob,
        queue_capacity: cfg.queue_capacity,
    };
    let flows = cfg.assocs();
    let mut w = WorldConfig::new(cfg.protocol, assoc, tcp, link);
    w.flows = flows;
    w.sources = (0..streams)
        .map(|s| Source {
            label: s,
            stream: s,
        })
        .collect();
    w.message_size = cfg.message_size();
    w.bytes_per_flow = (cfg.byte_target() / flows as u64).max(1);
    w.seed = cfg.seed;
    w.deadline = SimTime::from_millis(cfg.duration_ms);
    w.max_events = cfg.max_events;
    w.cpu_budget = cfg.cpu_budget();
    w
}

fn run_world(
    cfg: &ScenarioConfig,
    w: WorldConfig,
    variant: &str,
) -> Result<(MetricsReport, WorldResult), BenchError> {
    let result = World::new(w).run()?;
    let mut r =
        MetricsReport::from_world(cfg.scenario, cfg.mode(), cfg.seed, cfg.drop_prob, &result);
    r.variant = variant.to_string();
    Ok((r, result))
}

/// One simulation of `cfg` as configured (single drop probability, one topology).
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, BenchError> {
    cfg.validate()?;
    let mut w = world_config(cfg);
    match cfg.scenario {
        Scenario::Scaling => w.dedicated_links = true,
        Scenario::Failover => failover_setup(cfg, &mut w),
        _ => {}
    }
    Ok(run_world(cfg, w, "")?.0)
}

/// Runs many configurations, in parallel when the `parallel` feature is on.
pub fn run_many(cfgs: Vec<ScenarioConfig>) -> Vec<Result<MetricsReport, BenchError>> {
    map_runs(cfgs, |c| run_scenario(&c))
}

/// Every (drop probability, mode) pair over `seeds` consecutive seeds; rows
/// hold per-seed means, sorted by drop probability then mode.
pub fn run_loss_sweep(cfg: &ScenarioConfig) -> Result<Vec<SweepRow>, BenchError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (di, &drop) in cfg.drop_list.iter().enumerate() {
        for &mode in &cfg.modes {
            for i in 0..cfg.seeds {
                let mut c = cfg.with_mode(mode);
                c.drop_prob = drop;
                c.seed = cfg.seed.wrapping_add(i as u64);
                jobs.push((di, mode, c));
            }
        }
    }
    let results = map_runs(jobs, |(di, mode, c)| {
        run_scenario(&c).map(|r| (di, mode, r))
    });
    let mut rows: Vec<(usize, SweepRow)> = Vec::new();
    for res in results {
        let (di, mode, r) = res?;
        let row = match rows
            .iter_mut()
            .find(|(d, row)| *d == di && row.mode == mode)
        {
            Some((_, row)) => row,
            None => {
                rows.push((
                    di,
                    SweepRow {
                        drop_prob: cfg.drop_list[di],
                        mode,
                        goodput_mbps: 0.0,
                        retransmits: 0.0,
                        sacks: 0.0,
                        cpu_proxy: 0.0,
                        samples: Vec::new(),
                    },
                ));
                &mut rows.last_mut().expect("just pushed").1
            }
        };
        row.samples.push(r.goodput_mbps);
        row.retransmits += r.packets_retransmitted as f64;
        row.sacks += r.sacks as f64;
        row.cpu_proxy += r.cpu_proxy;
    }
    let n = cfg.seeds as f64;
    let mut out: Vec<SweepRow> = rows
        .into_iter()
        .map(|(_, mut row)| {
            row.goodput_mbps = row.samples.iter().sum::<f64>() / n;
            row.retransmits /= n;
            row.sacks /= n;
            row.cpu_proxy /= n;
            row
        })
        .collect();
    out.sort_by(|a, b| {
        a.drop_prob
            .total_cmp(&b.drop_prob)
            .then(a.mode.cmp(&b.mode))
    });
    Ok(out)
}

/// Stream-isolation sub-runs of the multistream scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct IsolationReport {
    /// Two streams, loss on label 1 only: lossless and lossy runs.
    pub multi_lossless: MetricsReport,
    pub multi_lossy: MetricsReport,
    /// The same two message flows sharing one stream.
    pub single_lossless: MetricsReport,
    pub single_lossy: MetricsReport,
    /// Raw per-message latencies (ns) of the victim flow (label 2), in delivery order.
    pub multi_victim_lossless: Vec<u64>,
    pub multi_victim_lossy: Vec<u64>,
    pub single_victim_lossless: Vec<u64>,
    pub single_victim_lossy: Vec<u64>,
    pub injected_drops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultistreamReport {
    /// (a) tcp connections, (b) single-stream associations, (c) associations with two streams.
    pub topologies: Vec<MetricsReport>,
    /// Topology (c) with one stream per association.
    pub c_single_stream: MetricsReport,
    pub isolation: IsolationReport,
}

pub const VICTIM_LABEL: u16 = 2;
pub const LOSSY_LABEL: u16 = 1;

fn isolation_run(
    cfg: &ScenarioConfig,
    streams: u16,
    lossy: bool,
    variant: &str,
) -> Result<(MetricsReport, WorldResult), BenchError> {
    let mut c = cfg.with_mode(Mode::SctpSack);
    c.streams = Some(streams);
    c.assocs = Some(1);
    c.no_delay = Some(true);
    c.drop_prob = 0.0;
    let mut w = world_config(&c);
    let per_source = 200u64;
    w.sources = vec![
        Source {
            label: LOSSY_LABEL,
            stream: 0,
        },
        Source {
            label: VICTIM_LABEL,
            stream: streams - 1,
        },
    ];
    w.app = AppModel::Paced {
        interval: Duration::from_micros(2000),
    };
    w.bytes_per_flow = per_source * 2 * c.message_size() as u64;
    w.injection = lossy.then_some(Injection {
        flow: 0,
        label: LOSSY_LABEL,
        every: 10,
    });
    run_world(&c, w, variant)
}

fn victim(w: &WorldResult) -> Vec<u64> {
    w.latencies
        .iter()
        .find(|(l, _)| *l == VICTIM_LABEL)
        .map(|(_, v)| v.clone())
        .unwrap_or_default()
}

/// Topologies (a), (b), (c) with 2.56 KB messages, plus the stream-isolation runs.
pub fn run_multistream(cfg: &ScenarioConfig) -> Result<MultistreamReport, BenchError> {
    cfg.validate()?;
    let base = {
        let mut c = cfg.clone();
        c.scenario = Scenario::Multistream;
        c
    };
    let variants: Vec<(&str, ScenarioConfig)> = vec![
        ("a_tcp_4conn", {
            let mut c = base.with_mode(Mode::Tcp);
            c.assocs = Some(4);
            c.streams = Some(1);
            c
        }),
        ("b_sctp_4assoc", {
            let mut c = base.with_mode(Mode::SctpSack);
            c.assocs = Some(4);
            c.streams = Some(1);
            c
        }),
        ("c_sctp_2assoc_2stream", {
            let mut c = base.with_mode(Mode::SctpSack);
            c.assocs = Some(2);
            c.streams = Some(2);
            c
        }),
        ("c_sctp_2assoc_1stream", {
            let mut c = base.with_mode(Mode::SctpSack);
            c.assocs = Some(2);
            c.streams = Some(1);
            c
        }),
    ];
    let mut reports = map_runs(variants, |(name, c)| {
        run_world(&c, world_config(&c), name).map(|r| r.0)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let c_single_stream = reports.pop().expect("four variants");

    let iso = map_runs(
        vec![
            (2u16, false, "iso_2stream_lossless"),
            (2, true, "iso_2stream_lossy"),
            (1, false, "iso_1stream_lossless"),
            (1, true, "iso_1stream_lossy"),
        ],
        |(s, lossy, name)| isolation_run(&base, s, lossy, name),
    )
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut iso = iso.into_iter();
    let (ml, mlw) = iso.next().expect("4 runs");
    let (my, myw) = iso.next().expect("4 runs");
    let (sl, slw) = iso.next().expect("4 runs");
    let (sy, syw) = iso.next().expect("4 runs");
    Ok(MultistreamReport {
        topologies: reports,
        c_single_stream,
        isolation: IsolationReport {
            injected_drops: myw.injected_drops + syw.injected_drops,
            multi_victim_lossless: victim(&mlw),
            multi_victim_lossy: victim(&myw),
            single_victim_lossless: victim(&slw),
            single_victim_lossy: victim(&syw),
            multi_lossless: ml,
            multi_lossy: my,
            single_lossless: sl,
            single_lossy: sy,
        },
    })
}

/// Connection scaling: 1..=assocs flows on dedicated links under a shared host budget.
pub fn run_scaling(cfg: &ScenarioConfig) -> Result<Vec<MetricsReport>, BenchError> {
    cfg.validate()?;
    let max = cfg.assocs();
    let per_flow = (cfg.byte_target() / max as u64).max(1);
    let jobs: Vec<ScenarioConfig> = (1..=max)
        .map(|n| {
            let mut c = cfg.clone();
            c.scenario = Scenario::Scaling;
            c.assocs = Some(n);
            c.bytes = Some(per_flow * n as u64);
            c
        })
        .collect();
    let out = map_runs(jobs, |c| {
        let n = c.assocs();
        run_scenario(&c).map(|mut r| {
            r.variant = format!("{n}_flows");
            r
        })
    });
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailoverReport {
    pub metrics: MetricsReport,
    pub kill_at: SimTime,
    pub revive_at: Option<SimTime>,
    /// Primary declared inactive.
    pub failover_at: Option<SimTime>,
    /// Last DATA on the primary before it was declared inactive.
    pub last_primary_send: Option<SimTime>,
    /// First DATA on an alternate path.
    pub first_alternate_send: Option<SimTime>,
    /// Primary declared active again.
    pub restored_at: Option<SimTime>,
    /// First new DATA on the primary after restoration.
    pub primary_resumed_at: Option<SimTime>,
    /// New-data packets on the primary between failover and restoration.
    pub new_data_on_primary_while_down: u64,
    pub alternate_data_packets: u64,
    pub hb_interval: Duration,
    /// Highest RTO the primary path reached.
    pub rto_max_observed: Option<Duration>,
}

impl FailoverReport {
    pub fn time_to_failover(&self) -> Option<Duration> {
        match (self.last_primary_send, self.first_alternate_send) {
            (Some(a), Some(b)) if b >= a => Some(b - a),
            _ => None,
        }
    }

    pub fn restoration_delay(&self) -> Option<Duration> {
        match (self.revive_at, self.primary_resumed_at) {
            (Some(a), Some(b)) if b >= a => Some(b - a),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let ms = |t: Option<SimTime>| {
            t.map_or("-".to_string(), |t| {
                format!("{} ms", sig6(t.as_secs_f64() * 1e3))
            })
        };
        let dms = |d: Option<Duration>| {
            d.map_or("-".to_string(), |d| {
                format!("{} ms", sig6(d.as_secs_f64() * 1e3))
            })
        };
        let mut s = self.metrics.to_text();
        let _ = writeln!(s, "failover timeline");
        let _ = writeln!(s, "  primary killed           {}", ms(Some(self.kill_at)));
        let _ = writeln!(
            s,
            "  last primary data        {}",
            ms(self.last_primary_send)
        );
        let _ = writeln!(
            s,
            "  first alternate data     {}",
            ms(self.first_alternate_send)
        );
        let _ = writeln!(s, "  primary inactive         {}", ms(self.failover_at));
        let _ = writeln!(
            s,
            "  time to failover         {}",
            dms(self.time_to_failover())
        );
        let _ = writeln!(s, "  primary revived          {}", ms(self.revive_at));
        let _ = writeln!(s, "  primary active again     {}", ms(self.restored_at));
        let _ = writeln!(
            s,
            "  new data back on primary {}",
            ms(self.primary_resumed_at)
        );
        let _ = writeln!(
            s,
            "  restoration delay        {}",
            dms(self.restoration_delay())
        );
        let _ = writeln!(
            s,
            "  new data on primary while inactive {}",
            self.new_data_on_primary_while_down
        );
        let _ = writeln!(
            s,
            "  data packets on alternates         {}",
            self.alternate_data_packets
        );
        let _ = writeln!(
            s,
            "  largest rto observed               {}",
            dms(self.rto_max_observed)
        );
        s
    }
}

fn failover_setup(cfg: &ScenarioConfig, w: &mut WorldConfig) {
    w.app = AppModel::Paced {
        interval: Duration::from_millis(1),
    };
    w.trace = true;
    w.link_schedule
        .push((SimTime::from_millis(cfg.kill_at_ms), 0, false));
    if let Some(r) = cfg.revive_at_ms {
        w.link_schedule.push((SimTime::from_millis(r), 0, true));
    }
}

/// Kills the primary path at `kill_at_ms` and optionally revives it at `revive_at_ms`.
pub fn run_failover(cfg: &ScenarioConfig) -> Result<FailoverReport, BenchError> {
    cfg.validate()?;
    if cfg.protocol != Protocol::Sctp {
        return Err(ConfigError::Invalid {
            field: "protocol".into(),
            msg: "failover needs sctp".into(),
        }
        .into());
    }
    let mut c = cfg.clone();
    c.scenario = Scenario::Failover;
    let mut w = world_config(&c);
    failover_setup(&c, &mut w);
    let (metrics, res) = run_world(&c, w, "")?;
    Ok(failover_report(&c, metrics, &res))
}

fn failover_report(
    cfg: &ScenarioConfig,
    metrics: MetricsReport,
    res: &WorldResult,
) -> FailoverReport {
    let flow0 = |f: usize| f == 0;
    let failover_at = res
        .path_changes
        .iter()
        .find(|p| flow0(p.flow) && p.path == 0 && !p.up)
        .map(|p| p.at);
    let restored_at = failover_at.and_then(|f| {
        res.path_changes
            .iter()
            .find(|p| flow0(p.flow) && p.path == 0 && p.up && p.at >= f)
            .map(|p| p.at)
    });
    let sends = || res.data_sends.iter().filter(|d| flow0(d.flow));
    let last_primary_send = sends()
        .filter(|d| d.path == 0 && failover_at.is_none_or(|f| d.at <= f))
        .map(|d| d.at)
        .next_back();
    // retransmissions reach the alternate early; the switch is when new data
    // moves there
    let first_alternate_send = sends()
        .find(|d| d.path != 0 && d.new_data && last_primary_send.is_none_or(|l| d.at >= l))
        .map(|d| d.at);
    let new_data_on_primary_while_down = match failover_at {
        Some(f) => sends()
            .filter(|d| {
                d.path == 0 && d.new_data && d.at > f && restored_at.is_none_or(|r| d.at < r)
            })
            .count() as u64,
        None => 0,
    };
    let primary_resumed_at = restored_at.and_then(|r| {
        sends()
            .find(|d| d.path == 0 && d.new_data && d.at >= r)
            .map(|d| d.at)
    });
    FailoverReport {
        metrics,
        kill_at: SimTime::from_millis(cfg.kill_at_ms),
        revive_at: cfg.revive_at_ms.map(SimTime::from_millis),
        failover_at,
        last_primary_send,
        first_alternate_send,
        restored_at,
        primary_resumed_at,
        new_data_on_primary_while_down,
        alternate_data_packets: sends().filter(|d| d.path != 0).count() as u64,
        hb_interval: cfg.hb_interval(),
        rto_max_observed: res.rto_max.first().copied(),
    }
}

/// Result of whichever driver a scenario calls for.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Single(MetricsReport),
    Sweep(Vec<SweepRow>),
    Multistream(Box<MultistreamReport>),
    Scaling(Vec<MetricsReport>),
    Failover(Box<FailoverReport>),
}

pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Outcome, BenchError> {
    Ok(match cfg.scenario {
        Scenario::Bulk12k | Scenario::Small128b => Outcome::Single(run_scenario(cfg)?),
        Scenario::LossSweep => Outcome::Sweep(run_loss_sweep(cfg)?),
        Scenario::Multistream => Outcome::Multistream(Box::new(run_multistream(cfg)?)),
        Scenario::Scaling => Outcome::Scaling(run_scaling(cfg)?),
        Scenario::Failover => Outcome::Failover(Box::new(run_failover(cfg)?)),
    })
}

impl Outcome {
    pub fn to_csv(&self) -> String {
        match self {
            Outcome::Single(r) => reports_csv(std::slice::from_ref(r)),
            Outcome::Sweep(rows) => sweep_csv(rows),
            Outcome::Multistream(m) => {
                let mut all = m.topologies.clone();
                all.push(m.c_single_stream.clone());
                let i = &m.isolation;
                all.extend([
                    i.multi_lossless.clone(),
                    i.multi_lossy.clone(),
                    i.single_lossless.clone(),
                    i.single_lossy.clone(),
                ]);
                reports_csv(&all)
            }
            Outcome::Scaling(v) => reports_csv(v),
            Outcome::Failover(f) => reports_csv(std::slice::from_ref(&f.metrics)),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Outcome::Single(r) => r.to_text(),
            Outcome::Sweep(rows) => {
                let mut s = format!(
                    "{:>9}  {:<10} {:>14} {:>12} {:>12} {:>14}\n",
                    "drop", "mode", "goodput Mb/s", "retransmits", "sacks", "cpu proxy"
                );
                for r in rows {
                    let _ = writeln!(
                        s,
                        "{:>9}  {:<10} {:>14} {:>12} {:>12} {:>14}",
                        sig6(r.drop_prob),
                        r.mode.name(),
                        sig6(r.goodput_mbps),
                        sig6(r.retransmits),
                        sig6(r.sacks),
                        sig6(r.cpu_proxy)
                    );
                }
                s
            }
            Outcome::Multistream(m) => {
                let mut s = String::new();
                for r in m.topologies.iter().chain([&m.c_single_stream]) {
                    s.push_str(&r.to_text());
                }
                let i = &m.isolation;
                for r in [
                    &i.multi_lossless,
                    &i.multi_lossy,
                    &i.single_lossless,
                    &i.single_lossy,
                ] {
                    s.push_str(&r.to_text());
                }
                let _ = writeln!(
                    s,
                    "isolation: victim latencies identical across loss with 2 streams: {}; with 1 stream: {}",
                    i.multi_victim_lossless == i.multi_victim_lossy,
                    i.single_victim_lossless == i.single_victim_lossy
                );
                s
            }
            Outcome::Scaling(v) => v.iter().map(|r| r.to_text()).collect(),
            Outcome::Failover(f) => f.to_text(),
        }
    }
}
