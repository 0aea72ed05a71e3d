//! Sender side: fragmentation, bundling, congestion and flow control, burst
//! limiting, SACK and go-back-N driven retransmission, copy accounting.

use std::collections::{BTreeSet, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::mhoming::{PathId, PathSet};
use crate::netsim::{CostKind, CostLedger, SimTime};
use crate::wire::{
    Chunk, DataChunk, DataFlags, SackChunk, Ssn, StreamId, Tsn, COMMON_HEADER_LEN, DATA_HEADER_LEN,
    NETWORK_HEADER_BUDGET,
};

/// IP budget + common header + DATA chunk header.
pub const FRAGMENT_OVERHEAD: usize = NETWORK_HEADER_BUDGET + COMMON_HEADER_LEN + DATA_HEADER_LEN;

pub fn fragment_payload(mtu: usize) -> usize {
    mtu - FRAGMENT_OVERHEAD
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RtoConfig {
    pub initial: Duration,
    pub min: Duration,
    pub max: Duration,
}

impl RtoConfig {
    /// 1 ms floor, 60 s ceiling, 3 ms initial.
    pub fn data_center() -> Self {
        RtoConfig {
            initial: Duration::from_millis(3),
            min: Duration::from_millis(1),
            max: Duration::from_secs(60),
        }
    }

    fn clamp(&self, d: Duration) -> Duration {
        d.clamp(self.min, self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CongestionState {
    pub mtu: usize,
    pub cwnd: usize,
    pub ssthresh: usize,
    pub partial_bytes_acked: usize,
    pub flight_size: usize,
    pub srtt: Option<Duration>,
    pub rttvar: Duration,
    pub rto: Duration,
    pub mbs: usize,
    pub rto_cfg: RtoConfig,
}

impl CongestionState {
    pub fn new(mtu: usize, peer_rwnd: usize, mbs: usize, rto_cfg: RtoConfig) -> Self {
        CongestionState {
            mtu,
            cwnd: 2 * mtu,
            ssthresh: peer_rwnd,
            partial_bytes_acked: 0,
            flight_size: 0,
            srtt: None,
            rttvar: Duration::ZERO,
            rto: rto_cfg.initial,
            mbs,
            rto_cfg,
        }
    }

    /// Exponential estimator with alpha = 1/8, beta = 1/4.
    pub fn rtt_update(&mut self, sample: Duration) {
        match self.srtt {
            None => {
                self.srtt = Some(sample);
                self.rttvar = sample / 2;
            }
            Some(srtt) => {
                let diff = srtt.abs_diff(sample);
                self.rttvar = (self.rttvar * 3 + diff) / 4;
                self.srtt = Some((srtt * 7 + sample) / 8);
            }
        }
        let srtt = self.srtt.expect("just set");
        self.rto = self.rto_cfg.clamp(srtt + self.rttvar * 4);
    }

    pub fn backoff(&mut self) {
        self.rto = self.rto_cfg.clamp(self.rto * 2);
    }

    fn cut_on_loss(&mut self) {
        self.ssthresh = (self.cwnd / 2).max(4 * self.mtu);
        self.cwnd = self.ssthresh;
        self.partial_bytes_acked = 0;
    }

    fn collapse_on_timeout(&mut self) {
        self.ssthresh = (self.cwnd / 2).max(4 * self.mtu);
        self.cwnd = self.mtu;
        self.partial_bytes_acked = 0;
    }

    pub(crate) fn reset_after_reactivation(&mut self) {
        self.cwnd = 2 * self.mtu;
        self.partial_bytes_acked = 0;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AckMode {
    #[default]
    Selective,
    GoBackN,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CopyMode {
    /// Three memory-to-memory copies per message.
    #[default]
    Legacy,
    /// One copy eliminated.
    Optimized,
}

impl CopyMode {
    pub fn copies(self) -> u64 {
        match self {
            CopyMode::Legacy => 3,
            CopyMode::Optimized => 2,
        }
    }
}

/// Messages at or below this size take the shortened path in optimized mode.
pub const SHORT_PATH_LIMIT: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CopyLedger {
    pub copy_events: u64,
    pub copy_bytes: u64,
    pub mode: CopyMode,
}

impl CopyLedger {
    pub fn charge_message(&mut self, len: usize) -> u64 {
        let copies = self.mode.copies();
        self.copy_events += copies;
        self.copy_bytes += copies * len as u64;
        copies * len as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    Queued,
    InFlight,
    /// Sent, dropped from flight accounting by a timer expiry, still unacknowledged.
    Released,
    Acked,
    ToRetransmit,
}

#[derive(Clone, Debug)]
pub struct OutboundChunkEntry {
    pub chunk: DataChunk,
    pub state: EntryState,
    pub first_sent_at: Option<SimTime>,
    pub last_sent_at: Option<SimTime>,
    pub path: PathId,
    pub transmit_count: u32,
    pub missing_reports: u32,
    fast_retransmitted: bool,
    avoid_path: Option<PathId>,
}

impl OutboundChunkEntry {
    fn len(&self) -> usize {
        self.chunk.payload.len()
    }

    fn outstanding(&self) -> bool {
        matches!(self.state, EntryState::InFlight | EntryState::Released)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenderConfig {
    pub mtu: usize,
    pub mbs: usize,
    pub no_delay: bool,
    pub ack_mode: AckMode,
    pub copy_mode: CopyMode,
    pub fast_retransmit_threshold: u32,
    pub send_buffer: usize,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig {
            mtu: crate::wire::DEFAULT_MTU,
            mbs: 4,
            no_delay: false,
            ack_mode: AckMode::Selective,
            copy_mode: CopyMode::Legacy,
            fast_retransmit_threshold: 4,
            send_buffer: 256 * 1024,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("stream {stream} out of range ({streams_out} outbound streams)")]
    StreamOutOfRange { stream: u16, streams_out: u16 },
    #[error("send buffer full: {buffered} + {len} > {capacity}")]
    SendBufferFull {
        buffered: usize,
        len: usize,
        capacity: usize,
    },
    #[error("empty message")]
    EmptyMessage,
    #[error("association not established")]
    NotEstablished,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SenderStats {
    pub packets_sent: u64,
    pub chunks_sent: u64,
    pub retransmitted_chunks: u64,
    pub fast_retransmits: u64,
    pub go_backs: u64,
    pub timeouts: u64,
    pub stale_sacks: u64,
    pub sacks_processed: u64,
    pub bytes_submitted: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SackEffects {
    pub newly_acked: usize,
    pub marked_for_retransmit: usize,
    pub cwnd_cut: bool,
    pub stale: bool,
}

/// Chunks selected for one outgoing packet.
#[derive(Clone, Debug)]
pub struct OutboundPacket {
    pub path: PathId,
    pub chunks: Vec<Chunk>,
    pub new_data: bool,
    pub retransmission: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BundleResult {
    pub packets: Vec<OutboundPacket>,
    /// The burst limit stopped the call while more could have been sent.
    pub burst_capped: bool,
}

#[derive(Debug)]
pub struct Sender {
    cfg: SenderConfig,
    streams_out: u16,
    initial_tsn: Tsn,
    entries: VecDeque<OutboundChunkEntry>,
    /// Extended (non-wrapping) TSN of `entries[0]`; TSN `initial_tsn` is ext 1.
    base_ext: u64,
    next_ext: u64,
    next_new_ext: u64,
    rtx: BTreeSet<u64>,
    next_ssn: Vec<Ssn>,
    buffered_bytes: usize,
    queued_bytes: usize,
    peer_rwnd: usize,
    last_a_rwnd: usize,
    recovery_until: Option<u64>,
    dup_cum_sacks: u32,
    went_back: bool,
    next_message_id: u64,
    pub copy: CopyLedger,
    pub stats: SenderStats,
}

impl Sender {
    pub fn new(cfg: SenderConfig, streams_out: u16, initial_tsn: Tsn, peer_rwnd: usize) -> Self {
        Sender {
            copy: CopyLedger {
                mode: cfg.copy_mode,
                ..Default::default()
            },
            cfg,
            streams_out,
            initial_tsn,
            entries: VecDeque::new(),
            base_ext: 1,
            next_ext: 1,
            next_new_ext: 1,
            rtx: BTreeSet::new(),
            next_ssn: vec![Ssn(0); streams_out as usize],
            buffered_bytes: 0,
            queued_bytes: 0,
            peer_rwnd,
            last_a_rwnd: peer_rwnd,
            recovery_until: None,
            dup_cum_sacks: 0,
            went_back: false,
            next_message_id: 0,
            stats: SenderStats::default(),
        }
    }

    pub fn config(&self) -> &SenderConfig {
        &self.cfg
    }

    fn tsn_of(&self, ext: u64) -> Tsn {
        self.initial_tsn.wrapping_add((ext - 1) as u32)
    }

    fn cum_ext(&self) -> u64 {
        self.base_ext - 1
    }

    /// Highest TSN acknowledged cumulatively by the peer.
    /// SSN the next ordered message on `stream` will carry.
    pub fn next_ssn(&self, stream: StreamId) -> Ssn {
        self.next_ssn
            .get(stream.0 as usize)
            .copied()
            .unwrap_or_default()
    }

    pub fn cum_tsn(&self) -> Tsn {
        self.initial_tsn
            .wrapping_add((self.base_ext as u32).wrapping_sub(2))
    }

    pub fn next_tsn(&self) -> Tsn {
        self.tsn_of(self.next_ext)
    }

    pub fn peer_rwnd(&self) -> usize {
        self.peer_rwnd
    }

    /// Peer window learned during the handshake.
    pub fn set_peer_rwnd(&mut self, rwnd: usize) {
        self.peer_rwnd = rwnd;
        self.last_a_rwnd = rwnd;
    }

    pub fn last_a_rwnd(&self) -> usize {
        self.last_a_rwnd
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffered_bytes
    }

    pub fn queued_bytes(&self) -> usize {
        self.queued_bytes
    }

    pub fn send_buffer_free(&self) -> usize {
        self.cfg.send_buffer.saturating_sub(self.buffered_bytes)
    }

    /// Nothing queued and nothing awaiting acknowledgement.
    pub fn is_idle(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_pending_retransmissions(&self) -> bool {
        !self.rtx.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &OutboundChunkEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, tsn: Tsn) -> Option<&OutboundChunkEntry> {
        let off = tsn.offset_from(self.tsn_of(self.base_ext)) as usize;
        self.entries.get(off)
    }

    fn idx(&self, ext: u64) -> usize {
        (ext - self.base_ext) as usize
    }

    /// Total payload bytes counted in flight across paths.
    pub fn total_flight(&self, paths: &PathSet) -> usize {
        paths.iter().map(|p| p.cc.flight_size).sum()
    }

    /// Fragments `payload` into DATA chunks with consecutive TSNs and charges the copy ledger.
    pub fn submit(
        &mut self,
        stream: StreamId,
        payload: Bytes,
        ordered: bool,
        ledger: &mut CostLedger,
    ) -> Result<u64, SubmitError> {
        if stream.0 >= self.streams_out {
            return Err(SubmitError::StreamOutOfRange {
                stream: stream.0,
                streams_out: self.streams_out,
            });
        }
        let len = payload.len();
        if len == 0 {
            return Err(SubmitError::EmptyMessage);
        }
        if self.buffered_bytes + len > self.cfg.send_buffer {
            return Err(SubmitError::SendBufferFull {
                buffered: self.buffered_bytes,
                len,
                capacity: self.cfg.send_buffer,
            });
        }

        let ssn = if ordered {
            let s = self.next_ssn[stream.0 as usize];
            self.next_ssn[stream.0 as usize] = s.next();
            s
        } else {
            Ssn(0)
        };
        let frag = fragment_payload(self.cfg.mtu);
        let n = len.div_ceil(frag);
        for i in 0..n {
            let start = i * frag;
            let end = (start + frag).min(len);
            let chunk = DataChunk {
                tsn: self.tsn_of(self.next_ext),
                stream,
                ssn,
                flags: DataFlags {
                    unordered: !ordered,
                    begin_fragment: i == 0,
                    end_fragment: i + 1 == n,
                },
                payload: payload.slice(start..end),
            };
            self.entries.push_back(OutboundChunkEntry {
                chunk,
                state: EntryState::Queued,
                first_sent_at: None,
                last_sent_at: None,
                path: 0,
                transmit_count: 0,
                missing_reports: 0,
                fast_retransmitted: false,
                avoid_path: None,
            });
            self.next_ext += 1;
        }
        self.buffered_bytes += len;
        self.queued_bytes += len;
        self.stats.bytes_submitted += len as u64;

        let copied = self.copy.charge_message(len);
        let kind = if self.cfg.copy_mode == CopyMode::Optimized && len <= SHORT_PATH_LIMIT {
            CostKind::ShortCopyBytes
        } else {
            CostKind::CopyBytes
        };
        ledger.charge_stream(stream.0, kind, copied);

        let id = self.next_message_id;
        self.next_message_id += 1;
        Ok(id)
    }

    fn chunk_budget(&self) -> usize {
        self.cfg.mtu - NETWORK_HEADER_BUDGET - COMMON_HEADER_LEN
    }

    fn rtx_target(&self, e: &OutboundChunkEntry, paths: &PathSet) -> PathId {
        match e.avoid_path {
            Some(avoid) => paths.select_alternate(avoid),
            None => paths.select_path(),
        }
    }

    /// Whether another full-sized chunk would not fit: the window counts as used.
    fn fully_utilized(&self, flight: usize, cwnd: usize) -> bool {
        flight + fragment_payload(self.cfg.mtu) > cwnd
    }

    /// Fills packets from pending retransmissions, then new data, under the
    /// cwnd, peer rwnd, Nagle and burst limits.
    pub fn bundle_and_send(
        &mut self,
        paths: &mut PathSet,
        now: SimTime,
        ledger: &mut CostLedger,
    ) -> BundleResult {
        let mut result = BundleResult::default();
        let budget = self.chunk_budget();
        loop {
            if result.packets.len() >= self.cfg.mbs {
                result.burst_capped = self.has_sendable(paths);
                break;
            }
            let mut picked: Vec<u64> = Vec::new();
            let path;
            let retransmission;
            if let Some(&first) = self.rtx.iter().next() {
                retransmission = true;
                path = self.rtx_target(&self.entries[self.idx(first)], paths);
                let cc = &paths.get(path).cc;
                let mut used = 0;
                let mut flight = cc.flight_size;
                for &ext in &self.rtx {
                    let e = &self.entries[self.idx(ext)];
                    if self.rtx_target(e, paths) != path {
                        break;
                    }
                    let size = Chunk::Data(e.chunk.clone()).wire_len();
                    if used + size > budget || flight + e.len() > cc.cwnd {
                        break;
                    }
                    used += size;
                    flight += e.len();
                    picked.push(ext);
                }
            } else {
                retransmission = false;
                if self.next_new_ext == self.next_ext {
                    break;
                }
                path = paths.select_path();
                let total_flight = self.total_flight(paths);
                if !self.cfg.no_delay
                    && total_flight > 0
                    && self.queued_bytes < fragment_payload(self.cfg.mtu)
                {
                    break;
                }
                let cc = &paths.get(path).cc;
                let mut used = 0;
                let mut flight = cc.flight_size;
                let mut rwnd = self.peer_rwnd;
                let mut ext = self.next_new_ext;
                while ext < self.next_ext {
                    let e = &self.entries[self.idx(ext)];
                    let size = DATA_HEADER_LEN + e.len().next_multiple_of(4);
                    if used + size > budget || flight + e.len() > cc.cwnd {
                        break;
                    }
                    // zero-window probe: one chunk when nothing is outstanding
                    let probe = rwnd < e.len() && total_flight == 0 && picked.is_empty();
                    if e.len() > rwnd && !probe {
                        break;
                    }
                    rwnd = rwnd.saturating_sub(e.len());
                    used += size;
                    flight += e.len();
                    picked.push(ext);
                    ext += 1;
                }
            }
            if picked.is_empty() {
                break;
            }
            let packet = self.commit(picked, path, retransmission, paths, now, ledger);
            result.packets.push(packet);
        }
        result
    }

    fn has_sendable(&self, paths: &PathSet) -> bool {
        if let Some(&first) = self.rtx.iter().next() {
            let e = &self.entries[self.idx(first)];
            let cc = &paths.get(self.rtx_target(e, paths)).cc;
            return cc.flight_size + e.len() <= cc.cwnd;
        }
        if self.next_new_ext < self.next_ext {
            let e = &self.entries[self.idx(self.next_new_ext)];
            let cc = &paths.get(paths.select_path()).cc;
            return cc.flight_size + e.len() <= cc.cwnd && e.len() <= self.peer_rwnd;
        }
        false
    }

    fn commit(
        &mut self,
        picked: Vec<u64>,
        path: PathId,
        retransmission: bool,
        paths: &mut PathSet,
        now: SimTime,
        ledger: &mut CostLedger,
    ) -> OutboundPacket {
        let mut chunks = Vec::with_capacity(picked.len());
        let mut bytes = 0;
        for ext in picked {
            let i = self.idx(ext);
            let e = &mut self.entries[i];
            if retransmission {
                self.rtx.remove(&ext);
                self.stats.retransmitted_chunks += 1;
            } else {
                self.queued_bytes -= e.len();
                self.peer_rwnd = self.peer_rwnd.saturating_sub(e.len());
                self.next_new_ext = ext + 1;
            }
            e.state = EntryState::InFlight;
            e.path = path;
            e.transmit_count += 1;
            e.first_sent_at.get_or_insert(now);
            e.last_sent_at = Some(now);
            e.missing_reports = 0;
            e.avoid_path = None;
            bytes += e.len();
            ledger.charge_stream(e.chunk.stream.0, CostKind::Chunks, 1);
            chunks.push(Chunk::Data(e.chunk.clone()));
        }
        let p = paths.get_mut(path);
        p.cc.flight_size += bytes;
        p.outstanding_bytes += bytes;
        p.last_activity = now;
        p.stats.data_packets += 1;
        if !retransmission {
            p.stats.new_data_packets += 1;
        }
        if p.t3.is_none() {
            p.t3 = Some(now + p.cc.rto);
        }
        self.stats.packets_sent += 1;
        self.stats.chunks_sent += chunks.len() as u64;
        OutboundPacket {
            path,
            chunks,
            new_data: !retransmission,
            retransmission,
        }
    }

    fn remove_from_flight(e: &OutboundChunkEntry, paths: &mut PathSet) {
        let p = paths.get_mut(e.path);
        if e.state == EntryState::InFlight {
            p.cc.flight_size -= e.len();
        }
    }

    fn release_outstanding(e: &OutboundChunkEntry, paths: &mut PathSet) {
        if e.outstanding() {
            let p = paths.get_mut(e.path);
            p.outstanding_bytes -= e.len();
        }
    }

    /// Applies a SACK: cumulative and gap acknowledgement, missing reports,
    /// fast retransmit, congestion window update, RTT sampling.
    pub fn on_sack(
        &mut self,
        sack: &SackChunk,
        paths: &mut PathSet,
        now: SimTime,
        ledger: &mut CostLedger,
    ) -> SackEffects {
        let mut fx = SackEffects::default();
        ledger.charge(CostKind::Sacks, 1);
        self.stats.sacks_processed += 1;

        let delta = sack.cum_tsn.0.wrapping_sub(self.cum_tsn().0) as i32;
        if delta < 0 {
            self.stats.stale_sacks += 1;
            fx.stale = true;
            return fx;
        }
        let sack_cum = (self.cum_ext() + delta as u64).min(self.next_new_ext - 1);
        let advanced = sack_cum > self.cum_ext();

        let n = paths.len();
        let pre_flight: Vec<usize> = paths.iter().map(|p| p.cc.flight_size).collect();
        let mut acked_cum = vec![0usize; n];
        let mut acked_any = vec![0usize; n];
        let mut rtt_sample: Option<(PathId, std::time::Duration)> = None;

        while self.base_ext <= sack_cum {
            let e = self
                .entries
                .pop_front()
                .expect("sack_cum below next_new_ext");
            self.base_ext += 1;
            self.buffered_bytes -= e.len();
            if e.state != EntryState::Acked {
                Self::remove_from_flight(&e, paths);
                Self::release_outstanding(&e, paths);
                acked_cum[e.path] += e.len();
                acked_any[e.path] += e.len();
                if e.transmit_count == 1 {
                    rtt_sample = Some((e.path, now - e.first_sent_at.expect("sent")));
                }
            }
            self.rtx.remove(&(self.base_ext - 1));
        }

        let mut newly_marked: Vec<PathId> = Vec::new();
        match self.cfg.ack_mode {
            AckMode::Selective => {
                let cum = self.cum_ext();
                let mut covered_to = cum;
                let mut highest_gap = cum;
                for g in &sack.gaps {
                    let lo = cum + g.start as u64;
                    let hi = (cum + g.end as u64).min(self.next_new_ext - 1);
                    for ext in lo..=hi {
                        let i = self.idx(ext);
                        let e = &self.entries[i];
                        if e.state == EntryState::Acked || e.state == EntryState::Queued {
                            continue;
                        }
                        let (path, len, once, sent) =
                            (e.path, e.len(), e.transmit_count == 1, e.first_sent_at);
                        Self::remove_from_flight(e, paths);
                        Self::release_outstanding(e, paths);
                        self.entries[i].state = EntryState::Acked;
                        self.rtx.remove(&ext);
                        acked_any[path] += len;
                        if once {
                            rtt_sample = Some((path, now - sent.expect("sent")));
                        }
                    }
                    covered_to = covered_to.max(hi);
                    highest_gap = highest_gap.max(hi);
                }
                let _ = covered_to;
                // everything below the highest gap that is still outstanding was skipped by the peer
                for ext in (cum + 1)..highest_gap {
                    let i = self.idx(ext);
                    let threshold = self.cfg.fast_retransmit_threshold;
                    let e = &mut self.entries[i];
                    if !e.outstanding() {
                        continue;
                    }
                    e.missing_reports += 1;
                    if e.missing_reports >= threshold && !e.fast_retransmitted {
                        e.fast_retransmitted = true;
                        let snapshot = e.clone();
                        Self::remove_from_flight(&snapshot, paths);
                        Self::release_outstanding(&snapshot, paths);
                        let e = &mut self.entries[i];
                        e.state = EntryState::ToRetransmit;
                        self.rtx.insert(ext);
                        newly_marked.push(snapshot.path);
                        fx.marked_for_retransmit += 1;
                        self.stats.fast_retransmits += 1;
                    }
                }
            }
            AckMode::GoBackN => {
                if advanced {
                    self.dup_cum_sacks = 0;
                    self.went_back = false;
                } else if self.entries.iter().any(|e| e.outstanding()) {
                    self.dup_cum_sacks += 1;
                    if self.dup_cum_sacks >= self.cfg.fast_retransmit_threshold && !self.went_back {
                        self.went_back = true;
                        self.stats.go_backs += 1;
                        for i in 0..self.entries.len() {
                            let e = &self.entries[i];
                            if !e.outstanding() {
                                continue;
                            }
                            let snapshot = e.clone();
                            Self::remove_from_flight(&snapshot, paths);
                            Self::release_outstanding(&snapshot, paths);
                            self.entries[i].state = EntryState::ToRetransmit;
                            self.rtx.insert(self.base_ext + i as u64);
                            if !newly_marked.contains(&snapshot.path) {
                                newly_marked.push(snapshot.path);
                            }
                            fx.marked_for_retransmit += 1;
                        }
                    }
                }
            }
        }

        let in_recovery_before = self.recovery_until.is_some_and(|r| self.cum_ext() < r);
        if !newly_marked.is_empty() && !in_recovery_before {
            for &p in &newly_marked {
                paths.get_mut(p).cc.cut_on_loss();
            }
            self.recovery_until = Some(self.next_new_ext - 1);
            fx.cwnd_cut = true;
        }
        if self.recovery_until.is_some_and(|r| self.cum_ext() >= r) {
            self.recovery_until = None;
        }
        let in_recovery = self.recovery_until.is_some();

        for id in 0..n {
            if acked_any[id] == 0 {
                continue;
            }
            fx.newly_acked += acked_any[id];
            paths.note_ack(id);
            if in_recovery || fx.cwnd_cut {
                continue;
            }
            let utilized = self.fully_utilized(pre_flight[id], paths.get(id).cc.cwnd);
            let cc = &mut paths.get_mut(id).cc;
            if cc.cwnd <= cc.ssthresh {
                if advanced && utilized {
                    cc.cwnd += acked_cum[id].min(cc.mtu);
                }
            } else {
                cc.partial_bytes_acked += acked_any[id];
                if cc.partial_bytes_acked >= cc.cwnd && utilized {
                    let before = cc.cwnd;
                    cc.cwnd += cc.mtu;
                    cc.partial_bytes_acked -= before;
                }
            }
        }

        if let Some((path, sample)) = rtt_sample {
            paths.get_mut(path).cc.rtt_update(sample);
        }

        self.last_a_rwnd = sack.a_rwnd as usize;
        self.peer_rwnd = (sack.a_rwnd as usize).saturating_sub(self.total_flight(paths));

        for p in paths.iter_mut() {
            if p.outstanding_bytes == 0 {
                p.t3 = None;
            } else if advanced && acked_cum[p.id] > 0 {
                p.t3 = Some(now + p.cc.rto);
            }
        }
        fx
    }

    /// Retransmission timer expiry on `path`.
    pub fn on_rto(&mut self, path: PathId, paths: &mut PathSet, now: SimTime) -> usize {
        self.stats.timeouts += 1;
        {
            let cc = &mut paths.get_mut(path).cc;
            cc.collapse_on_timeout();
            cc.backoff();
        }
        self.recovery_until = None;
        self.went_back = false;
        self.dup_cum_sacks = 0;

        let mtu = self.cfg.mtu;
        let mut marked = 0;
        let mut marked_bytes = 0;
        for i in 0..self.entries.len() {
            let e = &self.entries[i];
            if e.path != path || !e.outstanding() {
                continue;
            }
            let snapshot = e.clone();
            Self::remove_from_flight(&snapshot, paths);
            let retransmit_this = match self.cfg.ack_mode {
                AckMode::GoBackN => true,
                AckMode::Selective => marked == 0 || marked_bytes + snapshot.len() <= mtu,
            };
            let e = &mut self.entries[i];
            e.missing_reports = 0;
            e.fast_retransmitted = false;
            if retransmit_this
                && (marked == 0
                    || self.cfg.ack_mode == AckMode::GoBackN
                    || marked_bytes + snapshot.len() <= mtu)
            {
                Self::release_outstanding(&snapshot, paths);
                let e = &mut self.entries[i];
                e.state = EntryState::ToRetransmit;
                e.avoid_path = Some(path);
                self.rtx.insert(self.base_ext + i as u64);
                marked += 1;
                marked_bytes += snapshot.len();
            } else {
                e.state = EntryState::Released;
            }
        }
        let p = paths.get_mut(path);
        debug_assert_eq!(p.cc.flight_size, 0);
        p.t3 = if p.outstanding_bytes > 0 {
            Some(now + p.cc.rto)
        } else {
            None
        };
        marked
    }

    /// Checks the accounting invariants; used by tests.
    pub fn check_invariants(&self, paths: &PathSet) -> Result<(), String> {
        for p in paths.iter() {
            let flight: usize = self
                .entries
                .iter()
                .filter(|e| e.path == p.id && e.state == EntryState::InFlight)
                .map(|e| e.len())
                .sum();
            if flight != p.cc.flight_size {
                return Err(format!(
                    "path {} flight {} != entries {}",
                    p.id, p.cc.flight_size, flight
                ));
            }
            let out: usize = self
                .entries
                .iter()
                .filter(|e| e.path == p.id && e.outstanding())
                .map(|e| e.len())
                .sum();
            if out != p.outstanding_bytes {
                return Err(format!(
                    "path {} outstanding {} != entries {}",
                    p.id, p.outstanding_bytes, out
                ));
            }
            if p.cc.cwnd < p.cc.mtu {
                return Err(format!("path {} cwnd {} below one MTU", p.id, p.cc.cwnd));
            }
        }
        for e in &self.entries {
            if e.state == EntryState::InFlight && e.transmit_count == 0 {
                return Err("in-flight entry never transmitted".into());
            }
        }
        for &ext in &self.rtx {
            if self.entries[self.idx(ext)].state != EntryState::ToRetransmit {
                return Err(format!("rtx set holds ext {ext} in wrong state"));
            }
        }
        Ok(())
    }
}
