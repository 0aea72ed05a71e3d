//! Test support: a two-endpoint harness over a lossy, reordering channel.
//!
//! The channel draws a fresh random delay for every packet, so later packets
//! routinely overtake earlier ones; the simulator's FIFO links never do that.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sctp_dc::assoc::{AssocConfig, Association, Listener, ListenerEndpoint};
use sctp_dc::netsim::SimTime;
use sctp_dc::rxpath::{SackMode, SackPolicy};
use sctp_dc::txpath::AckMode;
use sctp_dc::wire::StreamId;

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub ack_mode: AckMode,
    pub streams: u16,
    /// (stream, payload) in submission order.
    pub messages: Vec<(u16, Bytes)>,
    pub drop_prob: f64,
    pub min_delay: Duration,
    pub jitter: Duration,
    pub sack: SackMode,
    pub no_delay: bool,
}

impl Instance {
    /// A small random instance: at most 50 messages over 1 to 4 streams.
    pub fn random(seed: u64, ack_mode: AckMode) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams = rng.random_range(1..=4u16);
        let n = rng.random_range(1..=50usize);
        let messages = (0..n)
            .map(|i| {
                let len = match rng.random_range(0..4) {
                    0 => rng.random_range(1..64),
                    1 => rng.random_range(64..1452),
                    _ => rng.random_range(1452..5000),
                };
                let tag = (i as u32).to_be_bytes();
                let body: Vec<u8> = (0..len).map(|j| tag[j % 4] ^ (j as u8)).collect();
                (rng.random_range(0..streams), Bytes::from(body))
            })
            .collect();
        let sack = match rng.random_range(0..3) {
            0 => SackMode::EveryPacket,
            1 => SackMode::EveryK(rng.random_range(2..8)),
            _ => SackMode::Delayed(Duration::from_micros(rng.random_range(50..400))),
        };
        Instance {
            seed,
            ack_mode,
            streams,
            messages,
            drop_prob: rng.random_range(0.0..0.2),
            min_delay: Duration::from_micros(20),
            jitter: Duration::from_micros(rng.random_range(0..400)),
            sack,
            no_delay: rng.random_bool(0.5),
        }
    }

    fn config(&self) -> AssocConfig {
        AssocConfig {
            streams_out: self.streams,
            streams_in: self.streams,
            ack_mode: self.ack_mode,
            sack_policy: SackPolicy::new(self.sack),
            no_delay: self.no_delay,
            checksum: true,
            assoc_max_retrans: 1000,
            error_threshold: 1000,
            max_init_retransmits: 1000,
            seed: self.seed,
            ..AssocConfig::default()
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    /// Per stream, payloads in delivery order.
    pub delivered: BTreeMap<u16, Vec<Bytes>>,
    pub established: bool,
    pub sim_time: SimTime,
    pub dropped: u64,
    pub reordered: u64,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct InFlight {
    at: SimTime,
    seq: u64,
    to_server: bool,
    bytes: Bytes,
}

/// Runs an instance to quiescence (or 60 simulated seconds).
pub fn run(inst: &Instance) -> Outcome {
    let cfg = inst.config();
    let mut lcfg = cfg.clone();
    std::mem::swap(&mut lcfg.src_port, &mut lcfg.dst_port);
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 0x5eed);
    let mut client = Association::connect(cfg, SimTime::ZERO).expect("valid config");
    let mut server =
        ListenerEndpoint::new(Listener::new(lcfg, rng.random()).expect("valid config"));

    let mut wire: Vec<InFlight> = Vec::new();
    let mut seq = 0u64;
    let mut now = SimTime::ZERO;
    let mut next_msg = 0usize;
    let mut out = Outcome {
        delivered: BTreeMap::new(),
        established: false,
        sim_time: SimTime::ZERO,
        dropped: 0,
        reordered: 0,
    };
    let mut last_arrival = [SimTime::ZERO; 2];
    let deadline = SimTime::from_millis(60_000);

    loop {
        // submit what the send buffer takes
        if client.is_established() {
            out.established = true;
            while let Some((s, m)) = inst.messages.get(next_msg) {
                if client.send_buffer_free() < m.len() {
                    break;
                }
                client
                    .submit(StreamId(*s), m.clone(), true)
                    .expect("submit");
                next_msg += 1;
            }
        }
        // drain both sides onto the channel
        for _ in 0..64 {
            let mut any = false;
            let mut emit = |bytes: Bytes, to_server: bool, rng: &mut ChaCha8Rng| {
                any = true;
                if rng.random_bool(inst.drop_prob) {
                    out.dropped += 1;
                    return;
                }
                let j = inst.jitter.as_nanos() as u64;
                let d = inst.min_delay
                    + Duration::from_nanos(if j == 0 { 0 } else { rng.random_range(0..j) });
                let at = now + d;
                let lane = to_server as usize;
                if at < last_arrival[lane] {
                    out.reordered += 1;
                }
                last_arrival[lane] = last_arrival[lane].max(at);
                seq += 1;
                wire.push(InFlight {
                    at,
                    seq,
                    to_server,
                    bytes,
                });
            };
            while let Some(t) = client.poll_transmit(now) {
                emit(t.bytes, true, &mut rng);
            }
            while let Some(t) = server.poll_transmit(now) {
                emit(t.bytes, false, &mut rng);
            }
            if client.take_tx_ready_request() {
                client.on_tx_ready();
                any = true;
            }
            if server.take_tx_ready_request() {
                server.on_tx_ready();
                any = true;
            }
            if !any {
                break;
            }
        }
        for (_, m) in server.take_delivered() {
            out.delivered.entry(m.stream.0).or_default().push(m.payload);
        }
        let all_in = out.delivered.values().map(Vec::len).sum::<usize>() == inst.messages.len();
        if all_in && next_msg == inst.messages.len() {
            break;
        }

        let next_arrival = wire.iter().map(|f| (f.at, f.seq)).min();
        let next_timer = [client.poll_timeout(), server.poll_timeout()]
            .into_iter()
            .flatten()
            .min();
        let step = match (next_arrival, next_timer) {
            (Some((a, _)), Some(t)) => a.min(t),
            (Some((a, _)), None) => a,
            (None, Some(t)) => t,
            (None, None) => break,
        };
        if step > deadline {
            break;
        }
        now = now.max(step);
        if let Some((a, s)) = next_arrival {
            if a <= now {
                let i = wire.iter().position(|f| f.seq == s).expect("present");
                let f = wire.swap_remove(i);
                if f.to_server {
                    server.handle_datagram(now, 0, f.bytes);
                } else {
                    let _ = client.handle_datagram(now, 0, f.bytes);
                }
                continue;
            }
        }
        if client.poll_timeout().is_some_and(|t| t <= now) {
            client.handle_timeout(now);
        }
        if server.poll_timeout().is_some_and(|t| t <= now) {
            server.handle_timeout(now);
        }
    }
    out.sim_time = now;
    out
}

/// Brute-force delivery check: every stream's delivered sequence must equal
/// its submitted subsequence, element by element.
pub fn check_delivery(inst: &Instance, out: &Outcome) -> Result<(), String> {
    for s in 0..inst.streams {
        let want: Vec<&Bytes> = inst
            .messages
            .iter()
            .filter(|(st, _)| *st == s)
            .map(|(_, m)| m)
            .collect();
        let got: Vec<&Bytes> = out
            .delivered
            .get(&s)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        if got.len() != want.len() {
            return Err(format!(
                "stream {s}: delivered {} of {} messages",
                got.len(),
                want.len()
            ));
        }
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            if g != w {
                return Err(format!(
                    "stream {s}: message {i} differs ({} vs {} bytes)",
                    g.len(),
                    w.len()
                ));
            }
        }
    }
    for s in out.delivered.keys() {
        if *s >= inst.streams {
            return Err(format!("delivery on unknown stream {s}"));
        }
    }
    Ok(())
}

pub mod packets;
