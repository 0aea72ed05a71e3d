//! The simulated topology: client and server hosts joined by one link pair
//! per path, carrying one or more SCTP associations or TCP connections.

use std::collections::{HashMap, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use rand::Rng;

use crate::assoc::{AssocConfig, AssocEvent, Association, Listener, ListenerEndpoint, Transmit};
use crate::mhoming::PathId;
use crate::netsim::{
    rng_stream, CostLedger, EventHandle, EventQueue, Link, LinkConfig, LinkOutcome, LockModel,
    SimError, SimTime,
};
use crate::tcpbase::{Segment, TcpConfig, TcpConn};
use crate::wire::{decode_packet, Chunk, CodecConfig, StreamId};

use super::config::Protocol;

#[derive(Clone, Debug)]
pub enum Frame {
    Sctp(Bytes),
    Tcp(Segment),
}

impl Frame {
    /// Bytes on the wire including the network header.
    pub fn wire_len(&self) -> usize {
        match self {
            Frame::Sctp(b) => b.len() + crate::wire::NETWORK_HEADER_BUDGET,
            Frame::Tcp(s) => s.wire_len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Client,
    Server,
}

impl Side {
    fn dir(self) -> usize {
        match self {
            Side::Client => 0,
            Side::Server => 1,
        }
    }

    fn peer(self) -> Side {
        match self {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        }
    }
}

/// One application message flow inside a transport flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Source {
    /// Reporting label; latencies are grouped by it.
    pub label: u16,
    pub stream: u16,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AppModel {
    /// Keep the send buffer topped up until the byte target is submitted.
    Bulk,
    /// Each source submits one message per `interval`, sources staggered evenly.
    Paced { interval: Duration },
}

/// Deterministic loss of first transmissions of packets that carry only `label`'s data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Injection {
    pub flow: usize,
    pub label: u16,
    /// Every `every`-th such packet is lost.
    pub every: u64,
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub protocol: Protocol,
    pub assoc: AssocConfig,
    pub tcp: TcpConfig,
    pub link: LinkConfig,
    pub paths: usize,
    /// Each flow gets its own links instead of sharing one bottleneck.
    pub dedicated_links: bool,
    pub flows: usize,
    pub sources: Vec<Source>,
    pub message_size: usize,
    pub bytes_per_flow: u64,
    pub app: AppModel,
    pub seed: u64,
    pub deadline: SimTime,
    pub max_events: u64,
    /// `(at, path, up)` changes applied to both directions of a path.
    pub link_schedule: Vec<(SimTime, PathId, bool)>,
    pub injection: Option<Injection>,
    /// Client host cost units per simulated second.
    pub cpu_budget: Option<f64>,
    /// Record every client DATA transmission.
    pub trace: bool,
}

impl WorldConfig {
    pub fn new(protocol: Protocol, assoc: AssocConfig, tcp: TcpConfig, link: LinkConfig) -> Self {
        WorldConfig {
            protocol,
            paths: assoc.paths,
            assoc,
            tcp,
            link,
            dedicated_links: false,
            flows: 1,
            sources: vec![Source {
                label: 0,
                stream: 0,
            }],
            message_size: 12 * 1024,
            bytes_per_flow: 1 << 20,
            app: AppModel::Bulk,
            seed: 7,
            deadline: SimTime::from_millis(120_000),
            max_events: 200_000_000,
            link_schedule: Vec::new(),
            injection: None,
            cpu_budget: None,
            trace: false,
        }
    }

    fn messages_per_flow(&self) -> u64 {
        self.bytes_per_flow.div_ceil(self.message_size as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataSend {
    pub at: SimTime,
    pub flow: usize,
    pub path: PathId,
    pub new_data: bool,
    pub retransmission: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathChange {
    pub at: SimTime,
    pub flow: usize,
    pub path: PathId,
    pub up: bool,
}

/// Raw counters of one finished run.
#[derive(Clone, Debug, Default)]
pub struct WorldResult {
    pub completed: bool,
    pub failed_flows: usize,
    pub end_time: SimTime,
    pub events: u64,
    pub first_submit: Option<SimTime>,
    pub last_delivery: Option<SimTime>,
    pub bytes_delivered: u64,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub injected_drops: u64,
    pub packets_retransmitted: u64,
    pub sacks: u64,
    pub copy_bytes: u64,
    pub cpu_proxy_milli: u64,
    pub elapsed_coarse_milli: u64,
    pub elapsed_fine_milli: u64,
    /// Delivery latency in nanoseconds per source label, in delivery order.
    pub latencies: Vec<(u16, Vec<u64>)>,
    pub handshake: Option<Duration>,
    pub tcb_footprint: usize,
    pub data_sends: Vec<DataSend>,
    pub path_changes: Vec<PathChange>,
    /// Highest primary-path RTO seen per SCTP flow.
    pub rto_max: Vec<Duration>,
}

enum Endpoints {
    Sctp {
        client: Box<Association>,
        server: Box<ListenerEndpoint>,
    },
    Tcp {
        client: Box<TcpConn>,
        server: Box<TcpConn>,
    },
}

#[derive(Debug)]
struct Pending {
    label: u16,
    at: SimTime,
    len: usize,
}

struct FlowState {
    ep: Endpoints,
    started: bool,
    failed: bool,
    submitted: u64,
    next_source: usize,
    /// Paced sources: messages due but not yet accepted by the transport.
    allowance: Vec<u64>,
    /// Per stream for SCTP, a single queue for TCP's byte stream.
    pending: Vec<VecDeque<Pending>>,
    tcp_rx_bytes: u64,
    tcp_rx_mark: u64,
    delivered: u64,
    labels: HashMap<(u16, u16), u16>,
    injection_count: u64,
    timers: [Option<(SimTime, EventHandle)>; 2],
    tx_ready: [bool; 2],
    last_path: [PathId; 2],
    rto_max: Duration,
}

#[derive(Debug)]
enum Ev {
    Deliver {
        link: usize,
        flow: usize,
        to: Side,
        path: PathId,
        frame: Frame,
        lost: bool,
    },
    Timer {
        flow: usize,
        side: Side,
    },
    TxReady {
        flow: usize,
        side: Side,
    },
    Tick {
        flow: usize,
        source: usize,
    },
    Wake,
    Link {
        path: PathId,
        up: bool,
    },
}

pub struct World {
    cfg: WorldConfig,
    codec: CodecConfig,
    links: Vec<Link>,
    flows: Vec<FlowState>,
    lat: HashMap<u16, Vec<u64>>,
    first_submit: Option<SimTime>,
    last_delivery: Option<SimTime>,
    injected: u64,
    retransmitted: u64,
    data_sends: Vec<DataSend>,
    path_changes: Vec<PathChange>,
    handshake: Option<Duration>,
    wake_pending: bool,
    done_flows: usize,
}

impl World {
    pub fn new(cfg: WorldConfig) -> World {
        let link_sets = if cfg.dedicated_links { cfg.flows } else { 1 };
        let links = (0..link_sets * cfg.paths * 2)
            .map(|i| Link::new(cfg.link, cfg.seed, 0x4c49_4e4b_0000 + i as u64))
            .collect();
        let mut rng = rng_stream(cfg.seed, 0x464c_4f57);
        let streams = cfg.sources.iter().map(|s| s.stream).max().unwrap_or(0) as usize + 1;
        let flows = (0..cfg.flows)
            .map(|f| {
                let ep = match cfg.protocol {
                    Protocol::Sctp => {
                        let mut ac = cfg.assoc.clone();
                        ac.seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(f as u64);
                        let mut lc = ac.clone();
                        std::mem::swap(&mut lc.src_port, &mut lc.dst_port);
                        lc.seed = ac.seed ^ 0x005e_4ee5;
                        let secret: [u8; 32] = rng.random();
                        let listener = Listener::new(lc, secret).expect("validated");
                        Endpoints::Sctp {
                            client: Box::new(
                                Association::connect(ac, SimTime::ZERO).expect("validated"),
                            ),
                            server: Box::new(ListenerEndpoint::new(listener)),
                        }
                    }
                    Protocol::Tcp => {
                        let a: u32 = rng.random();
                        let b: u32 = rng.random();
                        Endpoints::Tcp {
                            client: Box::new(TcpConn::new(cfg.tcp, a, b)),
                            server: Box::new(TcpConn::new(cfg.tcp, b, a)),
                        }
                    }
                };
                FlowState {
                    ep,
                    started: false,
                    failed: false,
                    submitted: 0,
                    next_source: 0,
                    allowance: vec![0; cfg.sources.len()],
                    pending: (0..streams).map(|_| VecDeque::new()).collect(),
                    tcp_rx_bytes: 0,
                    tcp_rx_mark: 0,
                    delivered: 0,
                    labels: HashMap::new(),
                    injection_count: 0,
                    timers: [None, None],
                    tx_ready: [false, false],
                    last_path: [0, 0],
                    rto_max: Duration::ZERO,
                }
            })
            .collect();
        World {
            codec: cfg.assoc.codec(),
            links,
            flows,
            lat: HashMap::new(),
            first_submit: None,
            last_delivery: None,
            injected: 0,
            retransmitted: 0,
            data_sends: Vec::new(),
            path_changes: Vec::new(),
            handshake: None,
            wake_pending: false,
            done_flows: 0,
            cfg,
        }
    }

    fn link_index(&self, flow: usize, path: PathId, side: Side) -> usize {
        let set = if self.cfg.dedicated_links { flow } else { 0 };
        (set * self.cfg.paths + path) * 2 + side.dir()
    }

    pub fn run(mut self) -> Result<WorldResult, SimError> {
        let mut q: EventQueue<Ev> = EventQueue::new();
        for &(at, path, up) in &self.cfg.link_schedule {
            q.schedule_at(at, Ev::Link { path, up });
        }
        for f in 0..self.flows.len() {
            if self.cfg.protocol == Protocol::Tcp {
                self.start_app(&mut q, f);
                self.feed(SimTime::ZERO, f);
            }
            self.pump(&mut q, f, Side::Client);
        }
        let deadline = self.cfg.deadline;
        let stats =
            crate::netsim::run_until(&mut q, Some(deadline), self.cfg.max_events, |q, now, ev| {
                self.handle(q, now, ev);
                self.done_flows + self.flows.iter().filter(|f| f.failed).count() < self.flows.len()
            })?;
        Ok(self.finish(stats.events, stats.end_time))
    }

    fn handle(&mut self, q: &mut EventQueue<Ev>, now: SimTime, ev: Ev) {
        match ev {
            Ev::Deliver {
                link,
                flow,
                to,
                path,
                frame,
                lost,
            } => {
                let arrived = self.links[link].complete_arrival();
                if !arrived || lost {
                    return;
                }
                self.deliver(q, now, flow, to, path, frame);
            }
            Ev::Timer { flow, side } => {
                self.flows[flow].timers[side.dir()] = None;
                let fs = &mut self.flows[flow];
                match (&mut fs.ep, side) {
                    (Endpoints::Sctp { client, .. }, Side::Client) => {
                        client.handle_timeout(now);
                        fs.rto_max = fs.rto_max.max(client.paths().get(0).cc.rto);
                    }
                    (Endpoints::Sctp { server, .. }, Side::Server) => server.handle_timeout(now),
                    (Endpoints::Tcp { client, .. }, Side::Client) => client.handle_timeout(now),
                    (Endpoints::Tcp { server, .. }, Side::Server) => server.handle_timeout(now),
                }
                self.after_input(q, now, flow, side);
            }
            Ev::TxReady { flow, side } => {
                let fs = &mut self.flows[flow];
                fs.tx_ready[side.dir()] = false;
                match (&mut fs.ep, side) {
                    (Endpoints::Sctp { client, .. }, Side::Client) => client.on_tx_ready(),
                    (Endpoints::Sctp { server, .. }, Side::Server) => server.on_tx_ready(),
                    _ => {}
                }
                self.pump(q, flow, side);
            }
            Ev::Tick { flow, source } => {
                if let AppModel::Paced { interval } = self.cfg.app {
                    let fs = &mut self.flows[flow];
                    let issued: u64 = fs.submitted / self.cfg.message_size as u64
                        + fs.allowance.iter().sum::<u64>();
                    if issued < self.cfg.messages_per_flow() && !fs.failed {
                        fs.allowance[source] += 1;
                        q.schedule(interval, Ev::Tick { flow, source });
                    }
                    self.feed(now, flow);
                    self.pump(q, flow, Side::Client);
                }
            }
            Ev::Wake => {
                self.wake_pending = false;
                for f in 0..self.flows.len() {
                    self.pump(q, f, Side::Client);
                }
            }
            Ev::Link { path, up } => {
                let set_count = if self.cfg.dedicated_links {
                    self.cfg.flows
                } else {
                    1
                };
                for set in 0..set_count {
                    for dir in 0..2 {
                        self.links[(set * self.cfg.paths + path) * 2 + dir].set_up(up);
                    }
                }
            }
        }
    }

    fn deliver(
        &mut self,
        q: &mut EventQueue<Ev>,
        now: SimTime,
        flow: usize,
        to: Side,
        path: PathId,
        frame: Frame,
    ) {
        let fs = &mut self.flows[flow];
        match (&mut fs.ep, to, frame) {
            (Endpoints::Sctp { client, .. }, Side::Client, Frame::Sctp(b)) => {
                let _ = client.handle_datagram(now, path, b);
            }
            (Endpoints::Sctp { server, .. }, Side::Server, Frame::Sctp(b)) => {
                server.handle_datagram(now, path, b);
            }
            (Endpoints::Tcp { client, .. }, Side::Client, Frame::Tcp(s)) => {
                client.handle_segment(now, s)
            }
            (Endpoints::Tcp { server, .. }, Side::Server, Frame::Tcp(s)) => {
                server.handle_segment(now, s)
            }
            _ => unreachable!("frame kind matches the flow protocol"),
        }
        self.after_input(q, now, flow, to);
    }

    fn after_input(&mut self, q: &mut EventQueue<Ev>, now: SimTime, flow: usize, side: Side) {
        match side {
            Side::Client => {
                self.client_events(q, now, flow);
                self.feed(now, flow);
            }
            Side::Server => self.collect_deliveries(now, flow),
        }
        self.pump(q, flow, side);
    }

    fn client_events(&mut self, q: &mut EventQueue<Ev>, now: SimTime, flow: usize) {
        let mut established = false;
        if let Endpoints::Sctp { client, .. } = &mut self.flows[flow].ep {
            while let Some(ev) = client.poll_event() {
                match ev {
                    AssocEvent::Established => {
                        established = true;
                        if flow == 0 {
                            self.handshake = client.handshake_duration();
                        }
                    }
                    AssocEvent::PathDown(path) => self.path_changes.push(PathChange {
                        at: now,
                        flow,
                        path,
                        up: false,
                    }),
                    AssocEvent::PathUp(path) => self.path_changes.push(PathChange {
                        at: now,
                        flow,
                        path,
                        up: true,
                    }),
                    AssocEvent::Closed | AssocEvent::Aborted | AssocEvent::HandshakeFailed => {
                        self.flows[flow].failed = true;
                        break;
                    }
                }
            }
        }
        if established {
            self.start_app(q, flow);
        }
    }

    fn start_app(&mut self, q: &mut EventQueue<Ev>, flow: usize) {
        let fs = &mut self.flows[flow];
        if fs.started {
            return;
        }
        fs.started = true;
        if let AppModel::Paced { interval } = self.cfg.app {
            let n = self.cfg.sources.len() as u32;
            for s in 0..self.cfg.sources.len() {
                q.schedule(interval / n * s as u32, Ev::Tick { flow, source: s });
            }
        }
    }

    /// Submits messages while the transport accepts them.
    fn feed(&mut self, now: SimTime, flow: usize) {
        let msg = self.cfg.message_size;
        let total = self.cfg.messages_per_flow() * msg as u64;
        let paced = matches!(self.cfg.app, AppModel::Paced { .. });
        let nsrc = self.cfg.sources.len();
        let fs = &mut self.flows[flow];
        if !fs.started || fs.failed {
            return;
        }
        let mut idle_rounds = 0;
        while fs.submitted < total && idle_rounds < nsrc {
            let si = fs.next_source;
            if paced && fs.allowance[si] == 0 {
                fs.next_source = (si + 1) % nsrc;
                idle_rounds += 1;
                continue;
            }
            let src = self.cfg.sources[si];
            let payload = Bytes::from(vec![src.label as u8; msg]);
            let accepted = match &mut fs.ep {
                Endpoints::Sctp { client, .. } => {
                    if client.send_buffer_free() < msg {
                        false
                    } else {
                        let ssn = client
                            .sender()
                            .map(|s| s.next_ssn(StreamId(src.stream)).0)
                            .unwrap_or(0);
                        let ok = client.submit(StreamId(src.stream), payload, true).is_ok();
                        if ok && self.cfg.injection.is_some() {
                            fs.labels.insert((src.stream, ssn), src.label);
                        }
                        ok
                    }
                }
                Endpoints::Tcp { client, .. } => client.submit(payload).is_ok(),
            };
            if !accepted {
                break;
            }
            idle_rounds = 0;
            if paced {
                fs.allowance[si] -= 1;
            }
            let queue = match fs.ep {
                Endpoints::Sctp { .. } => src.stream as usize,
                Endpoints::Tcp { .. } => 0,
            };
            fs.pending[queue].push_back(Pending {
                label: src.label,
                at: now,
                len: msg,
            });
            fs.submitted += msg as u64;
            fs.next_source = (si + 1) % nsrc;
            self.first_submit.get_or_insert(now);
        }
    }

    fn collect_deliveries(&mut self, now: SimTime, flow: usize) {
        let target = self.cfg.messages_per_flow() * self.cfg.message_size as u64;
        let fs = &mut self.flows[flow];
        let before = fs.delivered;
        match &mut fs.ep {
            Endpoints::Sctp { server, .. } => {
                for (_, m) in server.take_delivered() {
                    let p = fs.pending[m.stream.0 as usize]
                        .pop_front()
                        .expect("every delivery was submitted");
                    debug_assert_eq!(p.len, m.payload.len());
                    fs.delivered += m.payload.len() as u64;
                    self.lat
                        .entry(p.label)
                        .or_default()
                        .push((now - p.at).as_nanos() as u64);
                }
            }
            Endpoints::Tcp { server, .. } => {
                for b in server.take_delivered() {
                    fs.tcp_rx_bytes += b.len() as u64;
                    fs.delivered += b.len() as u64;
                }
                let queue = &mut fs.pending[0];
                while let Some(p) = queue.front() {
                    if fs.tcp_rx_mark + p.len as u64 > fs.tcp_rx_bytes {
                        break;
                    }
                    fs.tcp_rx_mark += p.len as u64;
                    self.lat
                        .entry(p.label)
                        .or_default()
                        .push((now - p.at).as_nanos() as u64);
                    queue.pop_front();
                }
            }
        }
        if fs.delivered > before {
            self.last_delivery = Some(now);
            if before < target && fs.delivered >= target {
                self.done_flows += 1;
            }
        }
    }

    fn client_cpu_milli(&self) -> u64 {
        self.flows
            .iter()
            .map(|f| match &f.ep {
                Endpoints::Sctp { client, .. } => client.ledger.cpu_proxy_milli(),
                Endpoints::Tcp { client, .. } => client.ledger.cpu_proxy_milli(),
            })
            .sum()
    }

    /// If the client host is over its processing budget, the time it catches up.
    fn budget_wait(&self, now: SimTime) -> Option<SimTime> {
        let budget = self.cfg.cpu_budget?;
        let start = self.first_submit?;
        let used = self.client_cpu_milli() as f64 / 1000.0;
        let free_at = start + Duration::from_secs_f64(used / budget);
        (free_at > now).then_some(free_at)
    }

    /// Moves everything the endpoint wants to send onto the links.
    fn pump(&mut self, q: &mut EventQueue<Ev>, flow: usize, side: Side) {
        let now = q.now();
        loop {
            if side == Side::Client {
                if let Some(at) = self.budget_wait(now) {
                    if !self.wake_pending {
                        self.wake_pending = true;
                        q.schedule_at(at, Ev::Wake);
                    }
                    break;
                }
            }
            let fs = &mut self.flows[flow];
            let (path, frame, t) = match (&mut fs.ep, side) {
                (Endpoints::Sctp { client, .. }, Side::Client) => match client.poll_transmit(now) {
                    Some(t) => (t.path, Frame::Sctp(t.bytes.clone()), Some(t)),
                    None => break,
                },
                (Endpoints::Sctp { server, .. }, Side::Server) => match server.poll_transmit(now) {
                    Some(t) => (t.path, Frame::Sctp(t.bytes.clone()), Some(t)),
                    None => break,
                },
                (Endpoints::Tcp { client, .. }, Side::Client) => match client.poll_transmit(now) {
                    Some(s) => (0, Frame::Tcp(s), None),
                    None => break,
                },
                (Endpoints::Tcp { server, .. }, Side::Server) => match server.poll_transmit(now) {
                    Some(s) => (0, Frame::Tcp(s), None),
                    None => break,
                },
            };
            let path = path.min(self.cfg.paths - 1);
            let mut lost = false;
            if let (Some(t), Side::Client) = (&t, side) {
                if t.data_chunks > 0 {
                    if t.retransmission {
                        self.retransmitted += 1;
                    }
                    if self.cfg.trace {
                        self.data_sends.push(DataSend {
                            at: now,
                            flow,
                            path,
                            new_data: t.new_data,
                            retransmission: t.retransmission,
                        });
                    }
                    lost = self.inject(flow, t);
                }
            }
            self.flows[flow].last_path[side.dir()] = path;
            let link = self.link_index(flow, path, side);
            if let LinkOutcome::Arrive(at) = self.links[link].transmit(frame.wire_len(), now) {
                q.schedule_at(
                    at,
                    Ev::Deliver {
                        link,
                        flow,
                        to: side.peer(),
                        path,
                        frame,
                        lost,
                    },
                );
            }
        }
        let fs = &mut self.flows[flow];
        let wants_ready = match (&mut fs.ep, side) {
            (Endpoints::Sctp { client, .. }, Side::Client) => client.take_tx_ready_request(),
            (Endpoints::Sctp { server, .. }, Side::Server) => server.take_tx_ready_request(),
            _ => false,
        };
        if wants_ready && !fs.tx_ready[side.dir()] {
            fs.tx_ready[side.dir()] = true;
            let last = fs.last_path[side.dir()];
            let link = self.link_index(flow, last, side);
            let at = self.links[link].idle_at().max(now);
            q.schedule_at(at, Ev::TxReady { flow, side });
        }
        self.reschedule_timer(q, flow, side);
    }

    fn inject(&mut self, flow: usize, t: &Transmit) -> bool {
        let Some(inj) = self.cfg.injection else {
            return false;
        };
        if inj.flow != flow || t.retransmission {
            return false;
        }
        let fs = &mut self.flows[flow];
        let Ok(p) = decode_packet(&t.bytes, &self.codec) else {
            return false;
        };
        let only_victim = p.chunks.iter().all(|c| match c {
            Chunk::Data(d) => fs.labels.get(&(d.stream.0, d.ssn.0)) == Some(&inj.label),
            _ => true,
        });
        if !only_victim {
            return false;
        }
        fs.injection_count += 1;
        let drop = fs.injection_count.is_multiple_of(inj.every);
        if drop {
            self.injected += 1;
        }
        drop
    }

    fn reschedule_timer(&mut self, q: &mut EventQueue<Ev>, flow: usize, side: Side) {
        let fs = &mut self.flows[flow];
        let want = match (&fs.ep, side) {
            (Endpoints::Sctp { client, .. }, Side::Client) => client.poll_timeout(),
            (Endpoints::Sctp { server, .. }, Side::Server) => server.poll_timeout(),
            (Endpoints::Tcp { client, .. }, Side::Client) => client.poll_timeout(),
            (Endpoints::Tcp { server, .. }, Side::Server) => server.poll_timeout(),
        };
        let slot = &mut fs.timers[side.dir()];
        if slot.map(|s| s.0) == want {
            return;
        }
        if let Some((_, h)) = slot.take() {
            q.cancel(h);
        }
        if let Some(at) = want {
            *slot = Some((at, q.schedule_at(at, Ev::Timer { flow, side })));
        }
    }

    fn finish(self, events: u64, end_time: SimTime) -> WorldResult {
        let mut r = WorldResult {
            completed: self.done_flows == self.flows.len(),
            failed_flows: self.flows.iter().filter(|f| f.failed).count(),
            end_time,
            events,
            first_submit: self.first_submit,
            last_delivery: self.last_delivery,
            injected_drops: self.injected,
            handshake: self.handshake,
            data_sends: self.data_sends,
            path_changes: self.path_changes,
            ..Default::default()
        };
        for l in &self.links {
            let s = l.stats();
            r.packets_sent += s.sent;
            r.packets_delivered += s.delivered;
            r.packets_dropped += s.dropped;
        }
        r.packets_delivered -= self.injected;
        r.packets_dropped += self.injected;
        let mut ledgers: Vec<&CostLedger> = Vec::new();
        for f in &self.flows {
            r.bytes_delivered += f.delivered;
            r.rto_max.push(f.rto_max);
            match &f.ep {
                Endpoints::Sctp { client, server } => {
                    r.packets_retransmitted = self.retransmitted;
                    r.sacks += server
                        .associations()
                        .filter_map(|a| a.receiver())
                        .map(|rx| rx.stats.sacks_built)
                        .sum::<u64>();
                    if let Some(s) = client.sender() {
                        r.copy_bytes += s.copy.copy_bytes;
                    }
                    r.tcb_footprint = client.footprint_bytes();
                    ledgers.push(&client.ledger);
                    ledgers.extend(server.associations().map(|a| &a.ledger));
                }
                Endpoints::Tcp { client, server } => {
                    r.packets_retransmitted += client.stats.retransmitted_segments;
                    r.sacks += server.stats.acks_sent;
                    r.copy_bytes += client.ledger.copy_bytes;
                    r.tcb_footprint = client.footprint_bytes();
                    ledgers.push(&client.ledger);
                    ledgers.push(&server.ledger);
                }
            }
        }
        for l in ledgers {
            r.cpu_proxy_milli += l.cpu_proxy_milli();
            r.elapsed_coarse_milli += l.elapsed_proxy_milli_with(LockModel::Coarse);
            r.elapsed_fine_milli += l.elapsed_proxy_milli_with(LockModel::Fine);
        }
        let mut lat: Vec<(u16, Vec<u64>)> = self.lat.into_iter().collect();
        lat.sort_by_key(|x| x.0);
        r.latencies = lat;
        r
    }
}
