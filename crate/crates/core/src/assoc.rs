//! Association lifecycle: cookie handshake with a stateless listener,
//! verification tags, shutdown, timers and the sans-IO driver API.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mhoming::{HeartbeatAckOutcome, PathId, PathSet, PathStatus};
use crate::netsim::{rng_stream, CostKind, CostLedger, SimTime};
use crate::rxpath::{Message, Receiver, ReceiverConfig, SackPolicy};
use crate::txpath::{
    AckMode, CongestionState, CopyMode, RtoConfig, Sender, SenderConfig, SubmitError,
};
use crate::wire::{
    decode_bytes, encode_packet, Chunk, ChunkKind, CodecConfig, DecodeError, InitParams, Packet,
    SackChunk, StreamId, Tsn, DEFAULT_MTU,
};

pub const TCB_FOOTPRINT_BASELINE: usize = 10240;
pub const TCB_FOOTPRINT_COMPACT: usize = 1024;
pub const COOKIE_LEN: usize = 42;
const MAC_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AssocState {
    Closed,
    CookieWait,
    CookieEchoed,
    Established,
    ShutdownPending,
    ShutdownSent,
    ShutdownReceived,
    ShutdownAckSent,
}

impl AssocState {
    pub const ALL: [AssocState; 8] = [
        AssocState::Closed,
        AssocState::CookieWait,
        AssocState::CookieEchoed,
        AssocState::Established,
        AssocState::ShutdownPending,
        AssocState::ShutdownSent,
        AssocState::ShutdownReceived,
        AssocState::ShutdownAckSent,
    ];
}

/// What an association does with an inbound chunk in a given state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disposition {
    Discard,
    InitAck,
    CookieEcho,
    CookieAck,
    Data,
    Sack,
    Heartbeat,
    HeartbeatAck,
    Shutdown,
    ShutdownAck,
    ShutdownComplete,
    Abort,
}

pub fn disposition(state: AssocState, kind: ChunkKind) -> Disposition {
    use AssocState::*;
    use ChunkKind as K;
    match (state, kind) {
        // a lost SHUTDOWN_COMPLETE is answered again after close
        (Closed, K::ShutdownAck) => Disposition::ShutdownAck,
        (Closed, _) => Disposition::Discard,
        // INITs are the listener's business
        (_, K::Init) => Disposition::Discard,
        (CookieWait, K::InitAck) => Disposition::InitAck,
        (_, K::InitAck) => Disposition::Discard,
        (CookieEchoed, K::CookieAck) => Disposition::CookieAck,
        (_, K::CookieAck) => Disposition::Discard,
        (CookieWait | CookieEchoed, K::Abort) => Disposition::Abort,
        (CookieWait | CookieEchoed, _) => Disposition::Discard,
        (_, K::CookieEcho) => Disposition::CookieEcho,
        (Established | ShutdownPending | ShutdownSent, K::Data) => Disposition::Data,
        (_, K::Data) => Disposition::Discard,
        (_, K::Sack) => Disposition::Sack,
        (_, K::Heartbeat) => Disposition::Heartbeat,
        (_, K::HeartbeatAck) => Disposition::HeartbeatAck,
        (_, K::Shutdown) => Disposition::Shutdown,
        (ShutdownSent | ShutdownAckSent, K::ShutdownAck) => Disposition::ShutdownAck,
        (_, K::ShutdownAck) => Disposition::Discard,
        (ShutdownAckSent, K::ShutdownComplete) => Disposition::ShutdownComplete,
        (_, K::ShutdownComplete) => Disposition::Discard,
        (_, K::Abort) => Disposition::Abort,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocConfig {
    pub src_port: u16,
    pub dst_port: u16,
    pub streams_out: u16,
    pub streams_in: u16,
    pub paths: usize,
    pub rwnd: usize,
    pub mtu: usize,
    pub mbs: usize,
    pub no_delay: bool,
    pub ack_mode: AckMode,
    pub copy_mode: CopyMode,
    pub sack_policy: SackPolicy,
    pub sack_flush: Duration,
    pub send_buffer: usize,
    pub checksum: bool,
    pub rto: RtoConfig,
    pub error_threshold: u32,
    pub hb_interval: Duration,
    pub max_init_retransmits: u32,
    pub max_shutdown_retransmits: u32,
    /// Consecutive retransmission timeouts before the association is aborted.
    pub assoc_max_retrans: u32,
    pub cookie_lifetime: Duration,
    pub bundle_data_with_cookie: bool,
    pub compact_tcb: bool,
    pub fast_retransmit_threshold: u32,
    pub seed: u64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            src_port: 5000,
            dst_port: 5001,
            streams_out: 4,
            streams_in: 4,
            paths: 1,
            rwnd: 128 * 1024,
            mtu: DEFAULT_MTU,
            mbs: 4,
            no_delay: false,
            ack_mode: AckMode::Selective,
            copy_mode: CopyMode::Legacy,
            sack_policy: SackPolicy::default(),
            sack_flush: Duration::from_micros(200),
            send_buffer: 256 * 1024,
            checksum: false,
            rto: RtoConfig::data_center(),
            error_threshold: 5,
            hb_interval: Duration::from_millis(500),
            max_init_retransmits: 8,
            max_shutdown_retransmits: 8,
            assoc_max_retrans: 10,
            cookie_lifetime: Duration::from_secs(60),
            bundle_data_with_cookie: false,
            compact_tcb: false,
            fast_retransmit_threshold: 4,
            seed: 0,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<(), AssocError> {
        let bad = |m: &str| Err(AssocError::InvalidConfig(m.to_string()));
        if self.streams_out == 0 || self.streams_in == 0 {
            return bad("stream counts must be at least 1");
        }
        if self.paths == 0 {
            return bad("at least one path is required");
        }
        if self.mtu < 128 {
            return bad("mtu must be at least 128");
        }
        if self.mbs == 0 {
            return bad("mbs must be at least 1");
        }
        if self.rwnd < self.mtu {
            return bad("rwnd must hold at least one packet");
        }
        Ok(())
    }

    fn sender_config(&self) -> SenderConfig {
        SenderConfig {
            mtu: self.mtu,
            mbs: self.mbs,
            no_delay: self.no_delay,
            ack_mode: self.ack_mode,
            copy_mode: self.copy_mode,
            fast_retransmit_threshold: self.fast_retransmit_threshold,
            send_buffer: self.send_buffer,
        }
    }

    fn receiver_config(&self) -> ReceiverConfig {
        ReceiverConfig {
            rwnd: self.rwnd,
            policy: self.sack_policy,
            ack_mode: self.ack_mode,
            sack_flush: self.sack_flush,
            mtu: self.mtu,
        }
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            mtu: self.mtu,
            checksum: self.checksum,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssocError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error("operation not valid in state {0:?}")]
    WrongState(AssocState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssocEvent {
    Established,
    Closed,
    Aborted,
    HandshakeFailed,
    PathDown(PathId),
    PathUp(PathId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssocStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub data_packets_sent: u64,
    pub sack_packets_sent: u64,
    pub control_packets_sent: u64,
    pub bad_vtag: u64,
    pub decode_errors: u64,
    pub t1_expirations: u64,
    pub t2_expirations: u64,
    pub t3_expirations: u64,
}

/// An encoded packet ready for the link of `path`.
#[derive(Clone, Debug)]
pub struct Transmit {
    pub path: PathId,
    pub bytes: Bytes,
    pub data_chunks: usize,
    pub new_data: bool,
    pub retransmission: bool,
    pub sack: bool,
}

#[derive(Clone, Debug)]
struct Outgoing {
    path: PathId,
    packet: Packet,
    new_data: bool,
    retransmission: bool,
}

/// Parameters carried in the state cookie.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cookie {
    pub peer_vtag: u32,
    pub local_vtag: u32,
    pub peer_initial_tsn: Tsn,
    pub local_initial_tsn: Tsn,
    pub peer_rwnd: u32,
    pub streams_out: u16,
    pub streams_in: u16,
    pub path: u16,
    pub issued_at: SimTime,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CookieError {
    #[error("cookie has wrong length {0}")]
    Malformed(usize),
    #[error("cookie authenticator mismatch")]
    BadMac,
    #[error("cookie expired")]
    Stale,
}

impl Cookie {
    fn body(&self) -> BytesMut {
        let mut b = BytesMut::with_capacity(COOKIE_LEN);
        b.put_u32(self.peer_vtag);
        b.put_u32(self.local_vtag);
        b.put_u32(self.peer_initial_tsn.0);
        b.put_u32(self.local_initial_tsn.0);
        b.put_u32(self.peer_rwnd);
        b.put_u16(self.streams_out);
        b.put_u16(self.streams_in);
        b.put_u16(self.path);
        b.put_u64(self.issued_at.as_nanos());
        b
    }

    pub fn seal(&self, secret: &[u8]) -> Bytes {
        let mut b = self.body();
        let mac = mac(secret, &b);
        b.put_slice(&mac);
        b.freeze()
    }

    pub fn open(
        bytes: &[u8],
        secret: &[u8],
        now: SimTime,
        lifetime: Duration,
    ) -> Result<Cookie, CookieError> {
        if bytes.len() != COOKIE_LEN {
            return Err(CookieError::Malformed(bytes.len()));
        }
        let (body, tag) = bytes.split_at(COOKIE_LEN - MAC_LEN);
        if mac(secret, body) != tag {
            return Err(CookieError::BadMac);
        }
        let mut b = body;
        let c = Cookie {
            peer_vtag: b.get_u32(),
            local_vtag: b.get_u32(),
            peer_initial_tsn: Tsn(b.get_u32()),
            local_initial_tsn: Tsn(b.get_u32()),
            peer_rwnd: b.get_u32(),
            streams_out: b.get_u16(),
            streams_in: b.get_u16(),
            path: b.get_u16(),
            issued_at: SimTime(b.get_u64()),
        };
        if now.saturating_since(c.issued_at) > lifetime {
            return Err(CookieError::Stale);
        }
        Ok(c)
    }
}

fn mac(secret: &[u8], body: &[u8]) -> [u8; MAC_LEN] {
    let mut h = Sha256::new();
    h.update(secret);
    h.update(body);
    let digest = h.finalize();
    let mut out = [0u8; MAC_LEN];
    out.copy_from_slice(&digest[..MAC_LEN]);
    out
}

fn nonzero_u32(rng: &mut ChaCha8Rng) -> u32 {
    loop {
        let v = rng.random::<u32>();
        if v != 0 {
            return v;
        }
    }
}

#[derive(Debug)]
pub struct Association {
    cfg: AssocConfig,
    codec: CodecConfig,
    state: AssocState,
    local_vtag: u32,
    peer_vtag: u32,
    initial_tsn: Tsn,
    paths: PathSet,
    sender: Option<Sender>,
    receiver: Option<Receiver>,
    pub ledger: CostLedger,
    outbox: VecDeque<Outgoing>,
    pending_sacks: u32,
    /// SACKs return on the path the latest DATA came in on.
    sack_path: PathId,
    tx_armed: bool,
    tx_ready_wanted: bool,
    t1: Option<SimTime>,
    t1_count: u32,
    t1_packet: Option<Packet>,
    t2: Option<SimTime>,
    t2_count: u32,
    consecutive_timeouts: u32,
    delivered: VecDeque<Message>,
    events: VecDeque<AssocEvent>,
    started_at: SimTime,
    established_at: Option<SimTime>,
    pub stats: AssocStats,
}

impl Association {
    fn blank(
        cfg: AssocConfig,
        state: AssocState,
        local_vtag: u32,
        initial_tsn: Tsn,
        now: SimTime,
    ) -> Self {
        let cc = CongestionState::new(cfg.mtu, cfg.rwnd, cfg.mbs, cfg.rto);
        let paths = PathSet::new(
            cfg.paths,
            cc,
            cfg.error_threshold,
            cfg.hb_interval,
            cfg.seed,
            now,
        );
        Association {
            codec: cfg.codec(),
            state,
            local_vtag,
            peer_vtag: 0,
            initial_tsn,
            paths,
            sender: None,
            receiver: None,
            ledger: CostLedger::default(),
            outbox: VecDeque::new(),
            pending_sacks: 0,
            sack_path: 0,
            tx_armed: false,
            tx_ready_wanted: false,
            t1: None,
            t1_count: 0,
            t1_packet: None,
            t2: None,
            t2_count: 0,
            consecutive_timeouts: 0,
            delivered: VecDeque::new(),
            events: VecDeque::new(),
            started_at: now,
            established_at: None,
            stats: AssocStats::default(),
            cfg,
        }
    }

    /// Starts an active open; the INIT is queued for [`poll_transmit`](Self::poll_transmit).
    pub fn connect(cfg: AssocConfig, now: SimTime) -> Result<Association, AssocError> {
        cfg.validate()?;
        let mut rng = rng_stream(cfg.seed, 0x494e4954);
        let local_vtag = nonzero_u32(&mut rng);
        let initial_tsn = Tsn(rng.random());
        let mut a = Association::blank(cfg, AssocState::CookieWait, local_vtag, initial_tsn, now);
        let init = InitParams {
            init_tag: local_vtag,
            a_rwnd: a.cfg.rwnd as u32,
            n_out_streams: a.cfg.streams_out,
            n_in_streams: a.cfg.streams_in,
            initial_tsn,
        };
        let pkt = Packet::new(a.cfg.src_port, a.cfg.dst_port, 0, vec![Chunk::Init(init)]);
        a.start_t1(pkt, now);
        Ok(a)
    }

    /// Materializes an established association from a verified cookie.
    pub fn from_cookie(cfg: AssocConfig, cookie: &Cookie, now: SimTime) -> Association {
        let mut a = Association::blank(
            cfg,
            AssocState::Established,
            cookie.local_vtag,
            cookie.local_initial_tsn,
            now,
        );
        a.peer_vtag = cookie.peer_vtag;
        a.install_transfer_state(
            cookie.streams_out,
            cookie.streams_in,
            cookie.peer_initial_tsn,
            cookie.peer_rwnd as usize,
        );
        a.established_at = Some(now);
        a.events.push_back(AssocEvent::Established);
        a
    }

    fn install_transfer_state(
        &mut self,
        streams_out: u16,
        streams_in: u16,
        peer_initial_tsn: Tsn,
        peer_rwnd: usize,
    ) {
        let mut sender = Sender::new(
            self.cfg.sender_config(),
            streams_out,
            self.initial_tsn,
            peer_rwnd,
        );
        sender.set_peer_rwnd(peer_rwnd);
        self.sender = Some(sender);
        self.receiver = Some(Receiver::new(
            self.cfg.receiver_config(),
            peer_initial_tsn,
            streams_in,
        ));
        for p in self.paths.iter_mut() {
            p.cc.ssthresh = peer_rwnd;
        }
    }

    pub fn config(&self) -> &AssocConfig {
        &self.cfg
    }

    pub fn state(&self) -> AssocState {
        self.state
    }

    pub fn local_vtag(&self) -> u32 {
        self.local_vtag
    }

    pub fn peer_vtag(&self) -> u32 {
        self.peer_vtag
    }

    pub fn is_established(&self) -> bool {
        self.state == AssocState::Established
    }

    pub fn is_closed(&self) -> bool {
        self.state == AssocState::Closed
    }

    pub fn paths(&self) -> &PathSet {
        &self.paths
    }

    pub fn paths_mut(&mut self) -> &mut PathSet {
        &mut self.paths
    }

    pub fn sender(&self) -> Option<&Sender> {
        self.sender.as_ref()
    }

    pub fn receiver(&self) -> Option<&Receiver> {
        self.receiver.as_ref()
    }

    /// TSN the next submitted chunk will carry.
    pub fn next_tsn(&self) -> Tsn {
        self.sender
            .as_ref()
            .map_or(self.initial_tsn, |s| s.next_tsn())
    }

    /// Cumulative TSN received from the peer.
    pub fn peer_cum_tsn(&self) -> Option<Tsn> {
        self.receiver.as_ref().map(|r| r.cum_tsn())
    }

    pub fn footprint_bytes(&self) -> usize {
        if self.cfg.compact_tcb {
            TCB_FOOTPRINT_COMPACT
        } else {
            TCB_FOOTPRINT_BASELINE
        }
    }

    /// Time from the active open to the COOKIE_ACK (or cookie acceptance).
    pub fn handshake_duration(&self) -> Option<Duration> {
        self.established_at.map(|t| t - self.started_at)
    }

    pub fn established_at(&self) -> Option<SimTime> {
        self.established_at
    }

    pub fn poll_event(&mut self) -> Option<AssocEvent> {
        self.events.pop_front()
    }

    pub fn take_delivered(&mut self) -> Vec<Message> {
        self.delivered.drain(..).collect()
    }

    fn can_submit(&self) -> bool {
        match self.state {
            AssocState::Established => true,
            AssocState::CookieEchoed => self.cfg.bundle_data_with_cookie,
            _ => false,
        }
    }

    pub fn send_buffer_free(&self) -> usize {
        self.sender.as_ref().map_or(0, |s| s.send_buffer_free())
    }

    pub fn submit(
        &mut self,
        stream: StreamId,
        payload: Bytes,
        ordered: bool,
    ) -> Result<u64, AssocError> {
        if !self.can_submit() {
            return Err(AssocError::WrongState(self.state));
        }
        let sender = self
            .sender
            .as_mut()
            .ok_or(AssocError::WrongState(self.state))?;
        let id = sender.submit(stream, payload, ordered, &mut self.ledger)?;
        self.tx_armed = true;
        Ok(id)
    }

    /// Graceful close once all outstanding data is acknowledged.
    pub fn shutdown(&mut self) -> Result<(), AssocError> {
        if self.state != AssocState::Established {
            return Err(AssocError::WrongState(self.state));
        }
        self.state = AssocState::ShutdownPending;
        Ok(())
    }

    pub fn abort(&mut self) {
        if self.state != AssocState::Closed {
            self.queue_control(self.paths.select_path(), vec![Chunk::Abort]);
            self.close(AssocEvent::Aborted);
        }
    }

    fn close(&mut self, ev: AssocEvent) {
        self.state = AssocState::Closed;
        self.t1 = None;
        self.t2 = None;
        for p in self.paths.iter_mut() {
            p.t3 = None;
        }
        self.events.push_back(ev);
    }

    fn start_t1(&mut self, pkt: Packet, now: SimTime) {
        self.outbox.push_back(Outgoing {
            path: 0,
            packet: pkt.clone(),
            new_data: false,
            retransmission: false,
        });
        self.t1_packet = Some(pkt);
        self.t1_count = 0;
        self.t1 = Some(now + self.cfg.rto.initial);
    }

    fn backed_off(&self, count: u32) -> Duration {
        let d = self.cfg.rto.initial.saturating_mul(1u32 << count.min(20));
        d.min(self.cfg.rto.max)
    }

    fn packet(&self, chunks: Vec<Chunk>) -> Packet {
        Packet::new(self.cfg.src_port, self.cfg.dst_port, self.peer_vtag, chunks)
    }

    fn queue_control(&mut self, path: PathId, chunks: Vec<Chunk>) {
        let packet = self.packet(chunks);
        self.outbox.push_back(Outgoing {
            path,
            packet,
            new_data: false,
            retransmission: false,
        });
    }

    /// Decodes and processes one datagram that arrived on `path`.
    pub fn handle_datagram(
        &mut self,
        now: SimTime,
        path: PathId,
        bytes: Bytes,
    ) -> Result<(), DecodeError> {
        if self.codec.checksum {
            self.ledger.charge(CostKind::CrcBytes, bytes.len() as u64);
        }
        match decode_bytes(bytes, &self.codec) {
            Ok(p) => {
                self.handle_packet(now, path, p);
                Ok(())
            }
            Err(e) => {
                self.stats.decode_errors += 1;
                Err(e)
            }
        }
    }

    pub fn handle_packet(&mut self, now: SimTime, path: PathId, packet: Packet) {
        self.stats.packets_received += 1;
        if packet.verification_tag != self.local_vtag {
            self.stats.bad_vtag += 1;
            return;
        }
        let path = path.min(self.paths.len() - 1);
        let mut data = Vec::new();
        for chunk in packet.chunks {
            match (disposition(self.state, chunk.kind()), chunk) {
                (Disposition::Discard, _) => {}
                (Disposition::InitAck, Chunk::InitAck { params, cookie }) => {
                    self.on_init_ack(params, cookie, now)
                }
                (Disposition::CookieEcho, _) => self.queue_control(path, vec![Chunk::CookieAck]),
                (Disposition::CookieAck, _) => {
                    self.state = AssocState::Established;
                    self.t1 = None;
                    self.t1_packet = None;
                    self.established_at = Some(now);
                    self.events.push_back(AssocEvent::Established);
                    self.tx_armed = true;
                }
                (Disposition::Data, Chunk::Data(d)) => data.push(d),
                (Disposition::Sack, Chunk::Sack(s)) => self.on_sack(&s, now),
                (Disposition::Heartbeat, Chunk::Heartbeat { nonce, path_id }) => {
                    self.queue_control(path, vec![Chunk::HeartbeatAck { nonce, path_id }]);
                }
                (Disposition::HeartbeatAck, Chunk::HeartbeatAck { nonce, path_id }) => {
                    if self.paths.on_heartbeat_ack(nonce, path_id, now)
                        == HeartbeatAckOutcome::Restored
                    {
                        self.events.push_back(AssocEvent::PathUp(path_id as PathId));
                        self.tx_armed = true;
                    }
                }
                (Disposition::Shutdown, Chunk::Shutdown { cum_tsn }) => {
                    self.on_shutdown(cum_tsn, now)
                }
                (Disposition::ShutdownAck, _) => {
                    let closed = self.state == AssocState::Closed;
                    self.queue_control(path, vec![Chunk::ShutdownComplete]);
                    if !closed {
                        self.close(AssocEvent::Closed);
                    }
                }
                (Disposition::ShutdownComplete, _) => self.close(AssocEvent::Closed),
                (Disposition::Abort, _) => self.close(AssocEvent::Aborted),
                (d, c) => unreachable!("disposition {d:?} for {:?}", c.kind()),
            }
        }
        if !data.is_empty() {
            if let Some(r) = self.receiver.as_mut() {
                let out = r.on_data_packet(&data, now, &mut self.ledger);
                self.pending_sacks += out.sacks;
                self.sack_path = path;
                self.delivered.extend(out.delivered);
            }
        }
    }

    fn on_init_ack(&mut self, params: InitParams, cookie: Bytes, now: SimTime) {
        self.peer_vtag = params.init_tag;
        let streams_out = self.cfg.streams_out.min(params.n_in_streams);
        let streams_in = self.cfg.streams_in.min(params.n_out_streams);
        self.install_transfer_state(
            streams_out,
            streams_in,
            params.initial_tsn,
            params.a_rwnd as usize,
        );
        self.state = AssocState::CookieEchoed;
        let pkt = self.packet(vec![Chunk::CookieEcho { cookie }]);
        self.start_t1(pkt, now);
    }

    fn on_sack(&mut self, sack: &SackChunk, now: SimTime) {
        let Some(sender) = self.sender.as_mut() else {
            return;
        };
        let fx = sender.on_sack(sack, &mut self.paths, now, &mut self.ledger);
        if fx.newly_acked > 0 {
            self.consecutive_timeouts = 0;
        }
        self.tx_armed = true;
    }

    fn on_shutdown(&mut self, cum_tsn: Tsn, now: SimTime) {
        // the cumulative TSN acknowledges our data like a SACK without gaps
        if let Some(s) = self.sender.as_ref() {
            let sack = SackChunk {
                cum_tsn,
                a_rwnd: s.last_a_rwnd() as u32,
                gaps: vec![],
                dups: vec![],
            };
            self.on_sack(&sack, now);
        }
        match self.state {
            AssocState::Established | AssocState::ShutdownPending => {
                self.state = AssocState::ShutdownReceived;
            }
            AssocState::ShutdownSent | AssocState::ShutdownAckSent => {
                // simultaneous close, or our SHUTDOWN_ACK was lost
                self.state = AssocState::ShutdownAckSent;
                self.queue_control(self.paths.select_path(), vec![Chunk::ShutdownAck]);
                self.t2 = Some(now + self.current_rto());
            }
            _ => {}
        }
    }

    fn current_rto(&self) -> Duration {
        self.paths.get(self.paths.select_path()).cc.rto
    }

    fn progress_shutdown(&mut self, now: SimTime) {
        let idle = self.sender.as_ref().is_none_or(|s| s.is_idle());
        match self.state {
            AssocState::ShutdownPending if idle => {
                let cum = self.peer_cum_tsn().unwrap_or_default();
                self.queue_control(
                    self.paths.select_path(),
                    vec![Chunk::Shutdown { cum_tsn: cum }],
                );
                self.state = AssocState::ShutdownSent;
                self.t2_count = 0;
                self.t2 = Some(now + self.current_rto());
            }
            AssocState::ShutdownReceived if idle => {
                self.queue_control(self.paths.select_path(), vec![Chunk::ShutdownAck]);
                self.state = AssocState::ShutdownAckSent;
                self.t2_count = 0;
                self.t2 = Some(now + self.current_rto());
            }
            _ => {}
        }
    }

    fn sending_data(&self) -> bool {
        matches!(
            self.state,
            AssocState::Established | AssocState::ShutdownPending | AssocState::ShutdownReceived
        )
    }

    fn fill(&mut self, now: SimTime) {
        while self.pending_sacks > 0 {
            self.pending_sacks -= 1;
            let r = self.receiver.as_mut().expect("sacks imply a receiver");
            let sack = r.build_sack(&mut self.ledger);
            self.queue_control(self.sack_path, vec![Chunk::Sack(sack)]);
        }
        if self.tx_armed && self.sending_data() {
            self.tx_armed = false;
            let sender = self.sender.as_mut().expect("established");
            let r = sender.bundle_and_send(&mut self.paths, now, &mut self.ledger);
            if r.burst_capped {
                self.tx_ready_wanted = true;
            }
            for p in r.packets {
                let packet = Packet::new(
                    self.cfg.src_port,
                    self.cfg.dst_port,
                    self.peer_vtag,
                    p.chunks,
                );
                self.outbox.push_back(Outgoing {
                    path: p.path,
                    packet,
                    new_data: p.new_data,
                    retransmission: p.retransmission,
                });
            }
        } else if self.tx_armed
            && self.state == AssocState::CookieEchoed
            && self.cfg.bundle_data_with_cookie
        {
            self.tx_armed = false;
            self.bundle_with_cookie(now);
        }
        self.progress_shutdown(now);
    }

    /// Moves DATA into the queued COOKIE_ECHO packet where it fits.
    fn bundle_with_cookie(&mut self, now: SimTime) {
        let Some(pos) = self.outbox.iter().position(|o| {
            o.packet
                .chunks
                .first()
                .is_some_and(|c| c.kind() == ChunkKind::CookieEcho)
        }) else {
            return;
        };
        let sender = self.sender.as_mut().expect("installed at INIT_ACK");
        let r = sender.bundle_and_send(&mut self.paths, now, &mut self.ledger);
        let budget = self.codec.max_packet_len();
        for p in r.packets {
            let host = &mut self.outbox[pos].packet;
            let extra: usize = p.chunks.iter().map(|c| c.wire_len()).sum();
            if host.encoded_len() + extra <= budget {
                host.chunks.extend(p.chunks);
                self.outbox[pos].new_data = true;
            } else {
                let packet = Packet::new(
                    self.cfg.src_port,
                    self.cfg.dst_port,
                    self.peer_vtag,
                    p.chunks,
                );
                self.outbox.push_back(Outgoing {
                    path: p.path,
                    packet,
                    new_data: true,
                    retransmission: false,
                });
            }
        }
    }

    /// Next packet to put on the wire, if any.
    pub fn poll_transmit(&mut self, now: SimTime) -> Option<Transmit> {
        let early_data = self.tx_armed && self.state == AssocState::CookieEchoed;
        if self.outbox.is_empty() || early_data {
            self.fill(now);
        }
        let o = self.outbox.pop_front()?;
        let bytes =
            encode_packet(&o.packet, &self.codec).expect("packets are built within the MTU budget");
        if self.codec.checksum {
            self.ledger.charge(CostKind::CrcBytes, bytes.len() as u64);
        }
        let data_chunks = o.packet.data_chunks().count();
        let sack = o.packet.chunks.iter().any(|c| c.kind() == ChunkKind::Sack);
        self.stats.packets_sent += 1;
        if data_chunks > 0 {
            self.stats.data_packets_sent += 1;
        } else if sack {
            self.stats.sack_packets_sent += 1;
        } else {
            self.stats.control_packets_sent += 1;
        }
        Some(Transmit {
            path: o.path,
            bytes,
            data_chunks,
            new_data: o.new_data,
            retransmission: o.retransmission,
            sack,
        })
    }

    /// True once after a burst-limited send; the driver should offer another
    /// send opportunity (see [`on_tx_ready`](Self::on_tx_ready)) when the NIC drains.
    pub fn take_tx_ready_request(&mut self) -> bool {
        std::mem::take(&mut self.tx_ready_wanted)
    }

    pub fn on_tx_ready(&mut self) {
        self.tx_armed = true;
    }

    pub fn poll_timeout(&self) -> Option<SimTime> {
        if self.state == AssocState::Closed {
            return None;
        }
        let mut t = [self.t1, self.t2].into_iter().flatten().min();
        let mut merge = |x: Option<SimTime>| {
            if let Some(x) = x {
                t = Some(t.map_or(x, |c| c.min(x)));
            }
        };
        merge(self.receiver.as_ref().and_then(|r| r.sack_deadline()));
        if self.sender.is_some() {
            for p in self.paths.iter() {
                merge(p.t3);
            }
        }
        if self.heartbeats_enabled() {
            merge(self.paths.next_heartbeat_deadline());
        }
        t
    }

    fn heartbeats_enabled(&self) -> bool {
        !matches!(
            self.state,
            AssocState::Closed | AssocState::CookieWait | AssocState::CookieEchoed
        )
    }

    pub fn handle_timeout(&mut self, now: SimTime) {
        if self.t1.is_some_and(|t| now >= t) {
            self.stats.t1_expirations += 1;
            self.t1_count += 1;
            if self.t1_count > self.cfg.max_init_retransmits {
                self.close(AssocEvent::HandshakeFailed);
                return;
            }
            let pkt = self.t1_packet.clone().expect("t1 implies a packet");
            self.outbox.push_back(Outgoing {
                path: 0,
                packet: pkt,
                new_data: false,
                retransmission: true,
            });
            self.t1 = Some(now + self.backed_off(self.t1_count));
        }
        if self.t2.is_some_and(|t| now >= t) {
            self.stats.t2_expirations += 1;
            self.t2_count += 1;
            if self.t2_count > self.cfg.max_shutdown_retransmits {
                self.abort();
                return;
            }
            let chunk = match self.state {
                AssocState::ShutdownSent => Chunk::Shutdown {
                    cum_tsn: self.peer_cum_tsn().unwrap_or_default(),
                },
                _ => Chunk::ShutdownAck,
            };
            self.queue_control(self.paths.select_path(), vec![chunk]);
            self.t2 = Some(now + self.backed_off(self.t2_count));
        }
        if let Some(r) = self.receiver.as_mut() {
            self.pending_sacks += r.on_sack_timer(now);
        }
        if let Some(sender) = self.sender.as_mut() {
            for id in 0..self.paths.len() {
                if !self.paths.get(id).t3.is_some_and(|t| now >= t) {
                    continue;
                }
                self.stats.t3_expirations += 1;
                sender.on_rto(id, &mut self.paths, now);
                if self.paths.on_path_error(id, now) {
                    self.events.push_back(AssocEvent::PathDown(id));
                }
                self.consecutive_timeouts += 1;
                self.tx_armed = true;
            }
            if self.consecutive_timeouts > self.cfg.assoc_max_retrans {
                self.abort();
                return;
            }
        }
        if self.heartbeats_enabled()
            && self
                .paths
                .next_heartbeat_deadline()
                .is_some_and(|t| now >= t)
        {
            let before: Vec<PathStatus> = self.paths.iter().map(|p| p.status).collect();
            for (id, hb) in self.paths.heartbeat_tick(now) {
                self.queue_control(id, vec![hb]);
            }
            for (id, was) in before.into_iter().enumerate() {
                if was == PathStatus::Active && !self.paths.get(id).is_active() {
                    self.events.push_back(AssocEvent::PathDown(id));
                }
            }
        }
    }
}

/// Answers INITs and verifies cookies without keeping per-association state.
#[derive(Debug)]
pub struct Listener {
    cfg: AssocConfig,
    secret: [u8; 32],
    rng: ChaCha8Rng,
    pub inits_answered: u64,
    pub cookie_errors: u64,
}

/// Result of a valid COOKIE_ECHO.
#[derive(Debug)]
pub enum CookieAccept {
    New(Box<Association>),
    /// An association with this tag exists; the echo is a replay or retransmission.
    Duplicate {
        local_vtag: u32,
    },
}

impl Listener {
    pub fn new(cfg: AssocConfig, secret: [u8; 32]) -> Result<Self, AssocError> {
        cfg.validate()?;
        Ok(Listener {
            rng: rng_stream(cfg.seed, 0x4c53544e),
            cfg,
            secret,
            inits_answered: 0,
            cookie_errors: 0,
        })
    }

    pub fn config(&self) -> &AssocConfig {
        &self.cfg
    }

    /// Builds the INIT_ACK for an INIT received on `path`.
    pub fn on_init(&mut self, init: &InitParams, path: PathId, now: SimTime) -> Packet {
        self.inits_answered += 1;
        let local_vtag = nonzero_u32(&mut self.rng);
        let local_initial_tsn = Tsn(self.rng.random());
        let cookie = Cookie {
            peer_vtag: init.init_tag,
            local_vtag,
            peer_initial_tsn: init.initial_tsn,
            local_initial_tsn,
            peer_rwnd: init.a_rwnd,
            streams_out: self.cfg.streams_out.min(init.n_in_streams),
            streams_in: self.cfg.streams_in.min(init.n_out_streams),
            path: path as u16,
            issued_at: now,
        };
        let params = InitParams {
            init_tag: local_vtag,
            a_rwnd: self.cfg.rwnd as u32,
            n_out_streams: self.cfg.streams_out,
            n_in_streams: self.cfg.streams_in,
            initial_tsn: local_initial_tsn,
        };
        Packet::new(
            self.cfg.src_port,
            self.cfg.dst_port,
            init.init_tag,
            vec![Chunk::InitAck {
                params,
                cookie: cookie.seal(&self.secret),
            }],
        )
    }

    pub fn on_cookie_echo(
        &mut self,
        cookie: &[u8],
        now: SimTime,
        exists: impl Fn(u32) -> bool,
    ) -> Result<CookieAccept, CookieError> {
        let c = Cookie::open(cookie, &self.secret, now, self.cfg.cookie_lifetime).inspect_err(
            |_| {
                self.cookie_errors += 1;
            },
        )?;
        if exists(c.local_vtag) {
            return Ok(CookieAccept::Duplicate {
                local_vtag: c.local_vtag,
            });
        }
        let mut cfg = self.cfg.clone();
        cfg.seed = self.cfg.seed ^ u64::from(c.local_vtag);
        Ok(CookieAccept::New(Box::new(Association::from_cookie(
            cfg, &c, now,
        ))))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ListenerStats {
    pub unknown_vtag: u64,
    pub decode_errors: u64,
}

/// A listener plus the associations it has accepted, routed by verification tag.
#[derive(Debug)]
pub struct ListenerEndpoint {
    pub listener: Listener,
    assocs: BTreeMap<u32, Association>,
    outbox: VecDeque<Transmit>,
    pub stats: ListenerStats,
}

impl ListenerEndpoint {
    pub fn new(listener: Listener) -> Self {
        ListenerEndpoint {
            listener,
            assocs: BTreeMap::new(),
            outbox: VecDeque::new(),
            stats: ListenerStats::default(),
        }
    }

    pub fn association_count(&self) -> usize {
        self.assocs.len()
    }

    /// Modelled TCB memory held by accepted associations.
    pub fn modeled_state_bytes(&self) -> usize {
        self.assocs.values().map(|a| a.footprint_bytes()).sum()
    }

    pub fn association(&self, vtag: u32) -> Option<&Association> {
        self.assocs.get(&vtag)
    }

    pub fn association_mut(&mut self, vtag: u32) -> Option<&mut Association> {
        self.assocs.get_mut(&vtag)
    }

    pub fn associations(&self) -> impl Iterator<Item = &Association> {
        self.assocs.values()
    }

    pub fn associations_mut(&mut self) -> impl Iterator<Item = &mut Association> {
        self.assocs.values_mut()
    }

    pub fn handle_datagram(&mut self, now: SimTime, path: PathId, bytes: Bytes) {
        let codec = self.listener.cfg.codec();
        match decode_bytes(bytes, &codec) {
            Ok(p) => self.handle_packet(now, path, p),
            Err(_) => self.stats.decode_errors += 1,
        }
    }

    pub fn handle_packet(&mut self, now: SimTime, path: PathId, packet: Packet) {
        match packet.chunks.first() {
            Some(Chunk::Init(init)) if packet.verification_tag == 0 => {
                let reply = self.listener.on_init(init, path, now);
                let bytes =
                    encode_packet(&reply, &self.listener.cfg.codec()).expect("INIT_ACK fits");
                self.outbox.push_back(Transmit {
                    path,
                    bytes,
                    data_chunks: 0,
                    new_data: false,
                    retransmission: false,
                    sack: false,
                });
                return;
            }
            Some(Chunk::CookieEcho { cookie }) => {
                let assocs = &self.assocs;
                match self
                    .listener
                    .on_cookie_echo(cookie, now, |v| assocs.contains_key(&v))
                {
                    Ok(CookieAccept::New(a)) => {
                        self.assocs.insert(a.local_vtag(), *a);
                    }
                    Ok(CookieAccept::Duplicate { .. }) => {}
                    Err(_) => return,
                }
            }
            _ => {}
        }
        match self.assocs.get_mut(&packet.verification_tag) {
            Some(a) => a.handle_packet(now, path, packet),
            None => self.stats.unknown_vtag += 1,
        }
    }

    pub fn poll_transmit(&mut self, now: SimTime) -> Option<Transmit> {
        if let Some(t) = self.outbox.pop_front() {
            return Some(t);
        }
        self.assocs.values_mut().find_map(|a| a.poll_transmit(now))
    }

    pub fn take_tx_ready_request(&mut self) -> bool {
        let mut any = false;
        for a in self.assocs.values_mut() {
            any |= a.take_tx_ready_request();
        }
        any
    }

    pub fn on_tx_ready(&mut self) {
        for a in self.assocs.values_mut() {
            a.on_tx_ready();
        }
    }

    pub fn poll_timeout(&self) -> Option<SimTime> {
        self.assocs.values().filter_map(|a| a.poll_timeout()).min()
    }

    pub fn handle_timeout(&mut self, now: SimTime) {
        for a in self.assocs.values_mut() {
            a.handle_timeout(now);
        }
    }

    pub fn take_delivered(&mut self) -> Vec<(u32, Message)> {
        let mut out = Vec::new();
        for (v, a) in self.assocs.iter_mut() {
            out.extend(a.take_delivered().into_iter().map(|m| (*v, m)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rxpath::SackMode;
    use crate::wire::decode_packet;

    const ONE_WAY: Duration = Duration::from_micros(51);

    fn listener(cfg: AssocConfig) -> ListenerEndpoint {
        let mut lc = cfg;
        std::mem::swap(&mut lc.src_port, &mut lc.dst_port);
        ListenerEndpoint::new(Listener::new(lc, [7; 32]).unwrap())
    }

    /// Lossless ping-pong with a fixed one-way delay, optionally dropping the
    /// n-th packet from each side.
    struct Pair {
        now: SimTime,
        client: Association,
        server: ListenerEndpoint,
        drop_client: Vec<usize>,
        drop_server: Vec<usize>,
        sent_client: usize,
        sent_server: usize,
    }

    impl Pair {
        fn new(cfg: AssocConfig) -> Pair {
            let server = listener(cfg.clone());
            Pair {
                now: SimTime::ZERO,
                client: Association::connect(cfg, SimTime::ZERO).unwrap(),
                server,
                drop_client: vec![],
                drop_server: vec![],
                sent_client: 0,
                sent_server: 0,
            }
        }

        /// Runs until quiet or `limit`; delivers in one-way steps.
        fn run(&mut self, limit: SimTime) {
            let mut in_flight: Vec<(SimTime, bool, Bytes)> = Vec::new();
            loop {
                while let Some(t) = self.client.poll_transmit(self.now) {
                    self.sent_client += 1;
                    if !self.drop_client.contains(&self.sent_client) {
                        in_flight.push((self.now + ONE_WAY, true, t.bytes));
                    }
                }
                while let Some(t) = self.server.poll_transmit(self.now) {
                    self.sent_server += 1;
                    if !self.drop_server.contains(&self.sent_server) {
                        in_flight.push((self.now + ONE_WAY, false, t.bytes));
                    }
                }
                let next_arrival = in_flight.iter().map(|x| x.0).min();
                let next_timer = [self.client.poll_timeout(), self.server.poll_timeout()]
                    .into_iter()
                    .flatten()
                    .min();
                let next = match (next_arrival, next_timer) {
                    (None, None) => return,
                    (a, b) => a.into_iter().chain(b).min().unwrap(),
                };
                if next > limit {
                    return;
                }
                self.now = next;
                let (due, rest): (Vec<_>, Vec<_>) =
                    in_flight.into_iter().partition(|x| x.0 <= next);
                in_flight = rest;
                for (_, to_server, bytes) in due {
                    if to_server {
                        self.server.handle_datagram(self.now, 0, bytes);
                    } else {
                        let _ = self.client.handle_datagram(self.now, 0, bytes);
                    }
                }
                if self.client.poll_timeout().is_some_and(|t| t <= self.now) {
                    self.client.handle_timeout(self.now);
                }
                if self.server.poll_timeout().is_some_and(|t| t <= self.now) {
                    self.server.handle_timeout(self.now);
                }
            }
        }

        fn server_assoc(&mut self) -> &mut Association {
            self.server.associations_mut().next().unwrap()
        }
    }

    #[test]
    fn init_passthrough_and_tags() {
        let cfg = AssocConfig {
            streams_out: 2,
            rwnd: 131072,
            ..Default::default()
        };
        let mut a = Association::connect(cfg.clone(), SimTime::ZERO).unwrap();
        let t = a.poll_transmit(SimTime::ZERO).unwrap();
        let p = decode_packet(&t.bytes, &CodecConfig::default()).unwrap();
        assert_eq!(p.verification_tag, 0);
        let Chunk::Init(init) = p.chunks[0] else {
            panic!()
        };
        assert_eq!(init.n_out_streams, 2);
        assert_eq!(init.a_rwnd, 131072);
        assert_eq!(init.init_tag, a.local_vtag());

        let b = Association::connect(
            AssocConfig {
                seed: 2,
                ..cfg.clone()
            },
            SimTime::ZERO,
        )
        .unwrap();
        let a1 = Association::connect(AssocConfig { seed: 1, ..cfg }, SimTime::ZERO).unwrap();
        assert_ne!(a1.local_vtag(), b.local_vtag());
    }

    #[test]
    fn invalid_config() {
        let cfg = AssocConfig {
            streams_out: 0,
            ..Default::default()
        };
        assert!(matches!(
            Association::connect(cfg, SimTime::ZERO),
            Err(AssocError::InvalidConfig(_))
        ));
        let cfg = AssocConfig {
            paths: 0,
            ..Default::default()
        };
        assert!(matches!(
            Association::connect(cfg, SimTime::ZERO),
            Err(AssocError::InvalidConfig(_))
        ));
    }

    #[test]
    fn handshake_takes_two_round_trips() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        assert!(p.client.is_established());
        assert_eq!(p.client.handshake_duration(), Some(ONE_WAY * 4));
        assert_eq!(p.server.association_count(), 1);
        assert_eq!(p.server_assoc().peer_vtag(), p.client.local_vtag());
        assert_eq!(p.client.peer_vtag(), p.server_assoc().local_vtag());
    }

    #[test]
    fn cookie_mac_and_lifetime() {
        let c = Cookie {
            peer_vtag: 1,
            local_vtag: 2,
            peer_initial_tsn: Tsn(3),
            local_initial_tsn: Tsn(4),
            peer_rwnd: 5,
            streams_out: 6,
            streams_in: 7,
            path: 0,
            issued_at: SimTime::ZERO,
        };
        let sealed = c.seal(b"secret-a");
        assert_eq!(sealed.len(), COOKIE_LEN);
        let life = Duration::from_secs(60);
        assert_eq!(
            Cookie::open(&sealed, b"secret-a", SimTime::ZERO, life),
            Ok(c)
        );
        assert_eq!(
            Cookie::open(&sealed, b"secret-b", SimTime::ZERO, life),
            Err(CookieError::BadMac)
        );
        let late = SimTime::ZERO + Duration::from_secs(61);
        assert_eq!(
            Cookie::open(&sealed, b"secret-a", late, life),
            Err(CookieError::Stale)
        );
        for i in 0..COOKIE_LEN {
            let mut m = sealed.to_vec();
            m[i] ^= 0x10;
            assert!(Cookie::open(&m, b"secret-a", SimTime::ZERO, life).is_err());
        }
    }

    #[test]
    fn many_inits_allocate_nothing() {
        let cfg = AssocConfig::default();
        let mut ep = listener(cfg.clone());
        for seed in 0..10_000u64 {
            let init = InitParams {
                init_tag: seed as u32 + 1,
                a_rwnd: 65536,
                n_out_streams: 1,
                n_in_streams: 1,
                initial_tsn: Tsn(seed as u32),
            };
            ep.handle_packet(
                SimTime::ZERO,
                0,
                Packet::new(1, 2, 0, vec![Chunk::Init(init)]),
            );
        }
        assert_eq!(ep.association_count(), 0);
        assert_eq!(ep.modeled_state_bytes(), 0);
        assert_eq!(ep.listener.inits_answered, 10_000);
    }

    #[test]
    fn replayed_cookie_does_not_duplicate() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        let vtag = p.server_assoc().local_vtag();
        // the first COOKIE_ECHO the client sent, replayed
        let cfg = AssocConfig::default();
        let mut probe = Association::connect(cfg.clone(), SimTime::ZERO).unwrap();
        let init = decode_packet(
            &probe.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        let Chunk::Init(ip) = init.chunks[0] else {
            panic!()
        };
        let ack = p.server.listener.on_init(&ip, 0, p.now);
        probe.handle_packet(p.now, 0, ack);
        let echo = decode_packet(
            &probe.poll_transmit(p.now).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        p.server.handle_packet(p.now, 0, echo.clone());
        assert_eq!(p.server.association_count(), 2);
        p.server.handle_packet(p.now, 0, echo);
        assert_eq!(p.server.association_count(), 2);
        assert!(p.server.association(vtag).is_some());
        // the replay is answered with a COOKIE_ACK
        let mut acks = 0;
        while let Some(t) = p.server.poll_transmit(p.now) {
            let pk = decode_packet(&t.bytes, &CodecConfig::default()).unwrap();
            acks += pk
                .chunks
                .iter()
                .filter(|c| c.kind() == ChunkKind::CookieAck)
                .count();
        }
        assert_eq!(acks, 2);
    }

    #[test]
    fn init_ack_in_wrong_state_is_discarded() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        let params = InitParams {
            init_tag: 99,
            a_rwnd: 1,
            n_out_streams: 1,
            n_in_streams: 1,
            initial_tsn: Tsn(1),
        };
        let pk = Packet::new(
            1,
            2,
            p.client.local_vtag(),
            vec![Chunk::InitAck {
                params,
                cookie: Bytes::new(),
            }],
        );
        p.client.handle_packet(p.now, 0, pk);
        assert!(p.client.is_established());
        assert_ne!(p.client.peer_vtag(), 99);
    }

    #[test]
    fn cookie_echo_carries_peer_tag() {
        let mut p = Pair::new(AssocConfig::default());
        let init = decode_packet(
            &p.client.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        p.server.handle_packet(SimTime::ZERO, 0, init);
        let ack_bytes = p.server.poll_transmit(SimTime::ZERO).unwrap().bytes;
        let ack = decode_packet(&ack_bytes, &CodecConfig::default()).unwrap();
        let Chunk::InitAck { params, .. } = &ack.chunks[0] else {
            panic!()
        };
        let tag = params.init_tag;
        p.client.handle_packet(SimTime::ZERO, 0, ack);
        assert_eq!(p.client.state(), AssocState::CookieEchoed);
        let echo = decode_packet(
            &p.client.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(echo.verification_tag, tag);
    }

    #[test]
    fn tag_mismatch_is_discarded() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        let tag = p.client.local_vtag();
        let sack = Chunk::Sack(SackChunk::default());
        p.client
            .handle_packet(p.now, 0, Packet::new(1, 2, tag ^ 1, vec![sack.clone()]));
        assert_eq!(p.client.stats.bad_vtag, 1);
        p.client
            .handle_packet(p.now, 0, Packet::new(1, 2, tag, vec![sack]));
        assert_eq!(p.client.stats.bad_vtag, 1);
    }

    #[test]
    fn handshake_survives_lost_init_and_cookie_echo() {
        let mut p = Pair::new(AssocConfig::default());
        p.drop_client = vec![1, 3];
        p.run(SimTime::from_millis(50));
        assert!(p.client.is_established());
        assert_eq!(p.server.association_count(), 1);
    }

    #[test]
    fn handshake_gives_up() {
        let mut p = Pair::new(AssocConfig::default());
        p.drop_client = (1..100).collect();
        p.run(SimTime::from_millis(120_000));
        assert_eq!(p.client.state(), AssocState::Closed);
        let evs: Vec<_> = std::iter::from_fn(|| p.client.poll_event()).collect();
        assert!(evs.contains(&AssocEvent::HandshakeFailed));
        assert_eq!(p.client.stats.t1_expirations, 9);
    }

    fn transfer(p: &mut Pair, msgs: usize) -> Vec<Bytes> {
        let mut sent = Vec::new();
        for i in 0..msgs {
            let m = Bytes::from(vec![i as u8; 3000 + i]);
            p.client.submit(StreamId(0), m.clone(), true).unwrap();
            sent.push(m);
        }
        sent
    }

    #[test]
    fn data_flows_and_shutdown_closes_both() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        let sent = transfer(&mut p, 10);
        p.run(p.now + Duration::from_millis(50));
        let got: Vec<Bytes> = p
            .server
            .take_delivered()
            .into_iter()
            .map(|(_, m)| m.payload)
            .collect();
        assert_eq!(got, sent);
        p.client.shutdown().unwrap();
        let before = p.sent_client + p.sent_server;
        p.run(p.now + Duration::from_millis(50));
        assert!(p.client.is_closed());
        assert!(p.server_assoc().is_closed());
        assert_eq!(p.sent_client + p.sent_server - before, 3);
    }

    #[test]
    fn shutdown_waits_for_outstanding_data() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        transfer(&mut p, 3);
        p.client.shutdown().unwrap();
        while let Some(t) = p.client.poll_transmit(p.now) {
            let pk = decode_packet(&t.bytes, &CodecConfig::default()).unwrap();
            assert!(pk.chunks.iter().all(|c| c.kind() != ChunkKind::Shutdown));
            p.server.handle_datagram(p.now, 0, t.bytes);
        }
        assert_eq!(p.client.state(), AssocState::ShutdownPending);
        p.run(p.now + Duration::from_millis(50));
        assert!(p.client.is_closed());
    }

    #[test]
    fn lost_shutdown_is_retransmitted() {
        let mut p = Pair::new(AssocConfig::default());
        p.run(SimTime::from_millis(1));
        p.client.shutdown().unwrap();
        p.drop_client = vec![p.sent_client + 1];
        p.run(p.now + Duration::from_millis(100));
        assert!(p.client.is_closed());
        assert!(p.server_assoc().is_closed());
        assert_eq!(p.client.stats.t2_expirations, 1);
    }

    #[test]
    fn data_bundled_with_cookie_echo() {
        let cfg = AssocConfig {
            bundle_data_with_cookie: true,
            no_delay: true,
            ..Default::default()
        };
        let mut p = Pair::new(cfg);
        let init = decode_packet(
            &p.client.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        p.server.handle_packet(SimTime::ZERO, 0, init);
        let ack = decode_packet(
            &p.server.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        p.client.handle_packet(SimTime::ZERO, 0, ack);
        p.client
            .submit(StreamId(0), Bytes::from_static(b"early"), true)
            .unwrap();
        let echo = decode_packet(
            &p.client.poll_transmit(SimTime::ZERO).unwrap().bytes,
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(echo.chunks.len(), 2);
        p.server.handle_packet(SimTime::ZERO, 0, echo);
        let got = p.server.take_delivered();
        assert_eq!(&got[0].1.payload[..], b"early");
    }

    #[test]
    fn submit_before_established_fails() {
        let mut a = Association::connect(AssocConfig::default(), SimTime::ZERO).unwrap();
        assert_eq!(
            a.submit(StreamId(0), Bytes::from_static(b"x"), true),
            Err(AssocError::WrongState(AssocState::CookieWait))
        );
    }

    #[test]
    fn footprint_modes() {
        let a = Association::connect(AssocConfig::default(), SimTime::ZERO).unwrap();
        assert_eq!(a.footprint_bytes(), 10240);
        let b = Association::connect(
            AssocConfig {
                compact_tcb: true,
                ..Default::default()
            },
            SimTime::ZERO,
        )
        .unwrap();
        assert_eq!(b.footprint_bytes(), 1024);
    }

    #[test]
    fn disposition_table() {
        use AssocState::*;
        for s in AssocState::ALL {
            for k in ChunkKind::ALL {
                let d = disposition(s, k);
                if s == Closed {
                    let expect = if k == ChunkKind::ShutdownAck {
                        Disposition::ShutdownAck
                    } else {
                        Disposition::Discard
                    };
                    assert_eq!(d, expect, "{s:?} {k:?}");
                }
                if k == ChunkKind::Init {
                    assert_eq!(d, Disposition::Discard);
                }
                if k == ChunkKind::Data {
                    let accepts = matches!(s, Established | ShutdownPending | ShutdownSent);
                    assert_eq!(d == Disposition::Data, accepts, "{s:?}");
                }
            }
        }
        assert_eq!(
            disposition(CookieWait, ChunkKind::InitAck),
            Disposition::InitAck
        );
        assert_eq!(
            disposition(Established, ChunkKind::InitAck),
            Disposition::Discard
        );
        assert_eq!(
            disposition(CookieEchoed, ChunkKind::CookieAck),
            Disposition::CookieAck
        );
        assert_eq!(
            disposition(Established, ChunkKind::CookieAck),
            Disposition::Discard
        );
        assert_eq!(
            disposition(ShutdownAckSent, ChunkKind::ShutdownComplete),
            Disposition::ShutdownComplete
        );
    }

    #[test]
    fn every_k_sacks_flow() {
        let cfg = AssocConfig {
            sack_policy: SackPolicy::new(SackMode::EveryK(7)),
            ..Default::default()
        };
        let mut p = Pair::new(cfg);
        p.run(SimTime::from_millis(1));
        let sent = transfer(&mut p, 20);
        p.run(p.now + Duration::from_millis(50));
        assert_eq!(p.server.take_delivered().len(), sent.len());
        assert!(p.client.sender().unwrap().is_idle());
    }
}
