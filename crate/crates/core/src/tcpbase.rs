//! Reno-style TCP baseline: byte stream, cumulative ACK with optional SACK
//! blocks, Nagle, delayed ACK, slow start, congestion avoidance and fast
//! retransmit. Connection setup is abstracted away.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use thiserror::Error;

use crate::netsim::{CostKind, CostLedger, SimTime};
use crate::txpath::RtoConfig;

pub const TCP_HEADER_LEN: usize = 40;
pub const TCB_FOOTPRINT_TCP: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpConfig {
    pub mss: usize,
    pub nagle: bool,
    pub sack_enabled: bool,
    /// Receive buffer, advertised as the window.
    pub rwnd: usize,
    pub send_buffer: usize,
    pub rto: RtoConfig,
    pub delayed_ack: Duration,
    pub ack_every: u32,
    pub dup_ack_threshold: u32,
    pub initial_cwnd_segments: usize,
    /// Add 3 MSS to cwnd on entering fast recovery.
    pub fr_inflation: bool,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            mss: crate::wire::DEFAULT_MTU - TCP_HEADER_LEN,
            nagle: true,
            sack_enabled: false,
            rwnd: 128 * 1024,
            send_buffer: 256 * 1024,
            rto: RtoConfig::data_center(),
            delayed_ack: Duration::from_micros(200),
            ack_every: 2,
            dup_ack_threshold: 3,
            initial_cwnd_segments: 2,
            fr_inflation: false,
        }
    }
}

/// One TCP segment. Sequence and ack numbers are 32-bit serial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub seq: u32,
    pub ack: u32,
    pub window: u32,
    pub payload: Bytes,
    /// SACK blocks as [start, end) sequence numbers.
    pub sack: Vec<(u32, u32)>,
}

impl Segment {
    pub fn wire_len(&self) -> usize {
        let opts = if self.sack.is_empty() {
            0
        } else {
            4 + 8 * self.sack.len()
        };
        TCP_HEADER_LEN + opts + self.payload.len()
    }

    pub fn is_pure_ack(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TcpError {
    #[error("send buffer full: {buffered} + {len} > {capacity}")]
    BufferFull {
        buffered: usize,
        len: usize,
        capacity: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TcpStats {
    pub segments_sent: u64,
    pub data_segments_sent: u64,
    pub acks_sent: u64,
    pub retransmitted_segments: u64,
    pub fast_retransmits: u64,
    pub timeouts: u64,
    pub stale_acks: u64,
    pub bytes_delivered: u64,
}

/// Unacknowledged plus unsent bytes, addressed by stream offset.
#[derive(Debug, Default)]
struct SendQueue {
    chunks: VecDeque<Bytes>,
    start: u64,
    end: u64,
}

impl SendQueue {
    fn push(&mut self, b: Bytes) {
        self.end += b.len() as u64;
        self.chunks.push_back(b);
    }

    fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    fn read(&self, from: u64, len: usize) -> Bytes {
        let mut off = from - self.start;
        let mut out: Option<BytesMut> = None;
        let mut need = len;
        for c in &self.chunks {
            let cl = c.len() as u64;
            if off >= cl {
                off -= cl;
                continue;
            }
            let take = need.min((cl - off) as usize);
            let piece = c.slice(off as usize..off as usize + take);
            if out.is_none() && take == need {
                return piece;
            }
            out.get_or_insert_with(|| BytesMut::with_capacity(len))
                .extend_from_slice(&piece);
            need -= take;
            off = 0;
            if need == 0 {
                break;
            }
        }
        out.map(|b| b.freeze()).unwrap_or_default()
    }

    fn release_to(&mut self, upto: u64) {
        while let Some(c) = self.chunks.front_mut() {
            let cl = c.len() as u64;
            if self.start + cl <= upto {
                self.start += cl;
                self.chunks.pop_front();
            } else {
                let cut = (upto - self.start) as usize;
                *c = c.slice(cut..);
                self.start = upto;
                break;
            }
        }
    }
}

#[derive(Debug)]
pub struct TcpConn {
    cfg: TcpConfig,
    isn: u32,
    peer_isn: u32,
    // sender, in stream offsets
    snd_una: u64,
    snd_nxt: u64,
    /// Highest offset ever sent; snd_nxt falls below it after a timeout.
    snd_max: u64,
    queue: SendQueue,
    pub cwnd: usize,
    pub ssthresh: usize,
    pub peer_window: usize,
    dup_acks: u32,
    recover: Option<u64>,
    sacked: BTreeMap<u64, u64>,
    rtx_next: u64,
    pending_rtx: Option<u64>,
    srtt: Option<Duration>,
    rttvar: Duration,
    pub rto: Duration,
    rtt_probe: Option<(u64, SimTime)>,
    rto_deadline: Option<SimTime>,
    // receiver
    rcv_nxt: u64,
    ooo: BTreeMap<u64, Bytes>,
    ooo_bytes: usize,
    last_ooo: Option<u64>,
    unacked_segments: u32,
    ack_now: u32,
    delack_deadline: Option<SimTime>,
    delivered: VecDeque<Bytes>,
    pub ledger: CostLedger,
    pub stats: TcpStats,
}

impl TcpConn {
    pub fn new(cfg: TcpConfig, isn: u32, peer_isn: u32) -> Self {
        TcpConn {
            isn,
            peer_isn,
            snd_una: 0,
            snd_nxt: 0,
            snd_max: 0,
            queue: SendQueue::default(),
            cwnd: cfg.initial_cwnd_segments * cfg.mss,
            ssthresh: usize::MAX / 2,
            peer_window: cfg.rwnd,
            dup_acks: 0,
            recover: None,
            sacked: BTreeMap::new(),
            rtx_next: 0,
            pending_rtx: None,
            srtt: None,
            rttvar: Duration::ZERO,
            rto: cfg.rto.initial,
            rtt_probe: None,
            rto_deadline: None,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            ooo_bytes: 0,
            last_ooo: None,
            unacked_segments: 0,
            ack_now: 0,
            delack_deadline: None,
            delivered: VecDeque::new(),
            ledger: CostLedger::default(),
            stats: TcpStats::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &TcpConfig {
        &self.cfg
    }

    pub fn footprint_bytes(&self) -> usize {
        TCB_FOOTPRINT_TCP
    }

    pub fn flight(&self) -> usize {
        (self.snd_nxt - self.snd_una) as usize
    }

    pub fn snd_una(&self) -> u32 {
        self.isn.wrapping_add(self.snd_una as u32)
    }

    pub fn snd_nxt(&self) -> u32 {
        self.isn.wrapping_add(self.snd_nxt as u32)
    }

    pub fn rcv_nxt(&self) -> u32 {
        self.peer_isn.wrapping_add(self.rcv_nxt as u32)
    }

    pub fn unsent_bytes(&self) -> usize {
        (self.queue.end - self.snd_nxt) as usize
    }

    pub fn buffered_bytes(&self) -> usize {
        self.queue.len()
    }

    pub fn send_buffer_free(&self) -> usize {
        self.cfg.send_buffer.saturating_sub(self.queue.len())
    }

    pub fn is_idle(&self) -> bool {
        self.queue.len() == 0
    }

    pub fn srtt(&self) -> Option<Duration> {
        self.srtt
    }

    pub fn submit(&mut self, data: Bytes) -> Result<(), TcpError> {
        let len = data.len();
        if self.queue.len() + len > self.cfg.send_buffer {
            return Err(TcpError::BufferFull {
                buffered: self.queue.len(),
                len,
                capacity: self.cfg.send_buffer,
            });
        }
        // user-to-kernel and kernel-to-NIC
        self.ledger
            .charge_stream(0, CostKind::CopyBytes, 2 * len as u64);
        self.queue.push(data);
        Ok(())
    }

    pub fn take_delivered(&mut self) -> Vec<Bytes> {
        self.delivered.drain(..).collect()
    }

    fn ext_from_ack(&self, ack: u32) -> Option<u64> {
        // offsets relative to snd_una, within the sent range
        let d = ack.wrapping_sub(self.snd_una()) as i32;
        if d < 0 || self.snd_una + d as u64 > self.snd_max {
            None
        } else {
            Some(self.snd_una + d as u64)
        }
    }

    fn rcv_ext(&self, seq: u32) -> i64 {
        let d = seq.wrapping_sub(self.rcv_nxt()) as i32;
        self.rcv_nxt as i64 + d as i64
    }

    fn window_free(&self) -> usize {
        self.cfg.rwnd.saturating_sub(self.ooo_bytes)
    }

    fn make_segment(&self, seq_off: u64, payload: Bytes) -> Segment {
        Segment {
            seq: self.isn.wrapping_add(seq_off as u32),
            ack: self.rcv_nxt(),
            window: self.window_free() as u32,
            payload,
            sack: if self.cfg.sack_enabled {
                self.sack_blocks()
            } else {
                Vec::new()
            },
        }
    }

    fn sack_blocks(&self) -> Vec<(u32, u32)> {
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for (&s, b) in &self.ooo {
            let e = s + b.len() as u64;
            match ranges.last_mut() {
                Some(r) if s <= r.1 => r.1 = r.1.max(e),
                _ => ranges.push((s, e)),
            }
        }
        // the block holding the latest arrival goes first
        if let Some(l) = self.last_ooo {
            if let Some(i) = ranges.iter().position(|r| r.0 <= l && l < r.1) {
                let r = ranges.remove(i);
                ranges.insert(0, r);
            }
        }
        ranges.truncate(3);
        let base = self.peer_isn;
        ranges
            .into_iter()
            .map(|(s, e)| (base.wrapping_add(s as u32), base.wrapping_add(e as u32)))
            .collect()
    }

    fn send_data(&mut self, off: u64, len: usize, now: SimTime, retransmission: bool) -> Segment {
        let payload = self.queue.read(off, len);
        let seg = self.make_segment(off, payload);
        self.stats.segments_sent += 1;
        self.stats.data_segments_sent += 1;
        self.ledger.charge_stream(0, CostKind::Chunks, 1);
        if retransmission || off < self.snd_max {
            self.stats.retransmitted_segments += 1;
            if self.rtt_probe.is_some_and(|(o, _)| o >= off) {
                self.rtt_probe = None;
            }
        } else if self.rtt_probe.is_none() {
            self.rtt_probe = Some((off + len as u64, now));
        }
        if self.rto_deadline.is_none() {
            self.rto_deadline = Some(now + self.rto);
        }
        // the ack rides along
        self.unacked_segments = 0;
        self.ack_now = 0;
        self.delack_deadline = None;
        seg
    }

    /// Next segment to send: a retransmission, new data within the window, or an ACK.
    pub fn poll_transmit(&mut self, now: SimTime) -> Option<Segment> {
        if let Some(off) = self.pending_rtx.take() {
            let len = self.cfg.mss.min((self.snd_max - off) as usize);
            let len = match self.sacked.range(off + 1..).next() {
                Some((&s, _)) => len.min((s - off) as usize),
                None => len,
            };
            if len > 0 {
                return Some(self.send_data(off, len, now, true));
            }
        }
        let window = self.cwnd.min(self.peer_window);
        let flight = self.flight();
        let unsent = self.unsent_bytes();
        if unsent > 0 && flight < window {
            let room = window - flight;
            let len = self.cfg.mss.min(unsent);
            let sub_mss = len < self.cfg.mss;
            let nagle_hold = self.cfg.nagle && sub_mss && flight > 0;
            if len <= room && !nagle_hold {
                let off = self.snd_nxt;
                let seg = self.send_data(off, len, now, false);
                self.snd_nxt += len as u64;
                self.snd_max = self.snd_max.max(self.snd_nxt);
                return Some(seg);
            }
        }
        if self.ack_now > 0 {
            self.ack_now -= 1;
            self.unacked_segments = 0;
            self.delack_deadline = None;
            self.stats.segments_sent += 1;
            self.stats.acks_sent += 1;
            self.ledger.charge(CostKind::Sacks, 1);
            return Some(self.make_segment(self.snd_nxt, Bytes::new()));
        }
        None
    }

    pub fn handle_segment(&mut self, now: SimTime, seg: Segment) {
        self.ledger.charge_stream(0, CostKind::Chunks, 1);
        self.on_ack(now, &seg);
        if !seg.payload.is_empty() {
            self.on_data(now, seg.seq, seg.payload);
        }
    }

    fn rtt_update(&mut self, sample: Duration) {
        match self.srtt {
            None => {
                self.srtt = Some(sample);
                self.rttvar = sample / 2;
            }
            Some(s) => {
                self.rttvar = (self.rttvar * 3 + s.abs_diff(sample)) / 4;
                self.srtt = Some((s * 7 + sample) / 8);
            }
        }
        let s = self.srtt.expect("set");
        self.rto = (s + self.rttvar * 4).clamp(self.cfg.rto.min, self.cfg.rto.max);
    }

    fn on_ack(&mut self, now: SimTime, seg: &Segment) {
        let Some(ack) = self.ext_from_ack(seg.ack) else {
            self.stats.stale_acks += 1;
            return;
        };
        self.peer_window = seg.window as usize;
        for &(s, e) in &seg.sack {
            let s = self.snd_una + s.wrapping_sub(self.snd_una()) as u64;
            let e = self.snd_una + e.wrapping_sub(self.snd_una()) as u64;
            if s < e && e <= self.snd_max {
                self.sacked.insert(s, e);
            }
        }
        let mss = self.cfg.mss;
        if ack > self.snd_una {
            let acked = (ack - self.snd_una) as usize;
            self.snd_una = ack;
            self.snd_nxt = self.snd_nxt.max(ack);
            self.queue.release_to(ack);
            self.ledger.charge(CostKind::Sacks, 1);
            self.sacked = self.sacked.split_off(&ack);
            self.dup_acks = 0;
            if let Some((o, t)) = self.rtt_probe {
                if ack >= o {
                    self.rtt_update(now - t);
                    self.rtt_probe = None;
                }
            }
            match self.recover {
                Some(r) if ack < r && self.cfg.sack_enabled => {
                    // keep filling holes until the whole loss window is repaired
                    self.queue_next_hole();
                }
                Some(_) => {
                    self.recover = None;
                    self.cwnd = self.ssthresh;
                }
                None => {
                    if self.cwnd < self.ssthresh {
                        self.cwnd += mss.min(acked);
                    } else {
                        self.cwnd += (mss * mss / self.cwnd).max(1);
                    }
                }
            }
            self.rto_deadline = if self.snd_una < self.snd_max {
                Some(now + self.rto)
            } else {
                None
            };
        } else if seg.is_pure_ack() && self.snd_una < self.snd_max && ack == self.snd_una {
            self.dup_acks += 1;
            if self.dup_acks == self.cfg.dup_ack_threshold && self.recover.is_none() {
                self.stats.fast_retransmits += 1;
                self.ssthresh = (self.flight() / 2).max(2 * mss);
                self.cwnd = self.ssthresh + if self.cfg.fr_inflation { 3 * mss } else { 0 };
                self.recover = Some(self.snd_max);
                self.pending_rtx = Some(self.snd_una);
                self.rtx_next = self.snd_una + mss as u64;
            } else if self.recover.is_some() && self.cfg.sack_enabled {
                self.queue_next_hole();
            }
        }
    }

    fn queue_next_hole(&mut self) {
        let Some((&hi, _)) = self.sacked.iter().next_back() else {
            return;
        };
        let mut off = self.rtx_next.max(self.snd_una);
        for (&s, &e) in &self.sacked {
            if off >= s && off < e {
                off = e;
            }
        }
        if off < hi {
            self.pending_rtx = Some(off);
            self.rtx_next = off + self.cfg.mss as u64;
        }
    }

    fn on_data(&mut self, now: SimTime, seq: u32, payload: Bytes) {
        let start = self.rcv_ext(seq);
        let end = start + payload.len() as i64;
        let next = self.rcv_nxt as i64;
        if end <= next {
            // duplicate: tell the sender at once
            self.ack_now += 1;
            return;
        }
        if start > next {
            let s = start as u64;
            let fits = self.ooo_bytes + payload.len() <= self.cfg.rwnd;
            if !self.ooo.contains_key(&s) && fits {
                self.ooo_bytes += payload.len();
                self.ooo.insert(s, payload);
                self.last_ooo = Some(s);
            }
            self.ack_now += 1;
            return;
        }
        let filled_hole = !self.ooo.is_empty();
        let skip = (next - start) as usize;
        self.deliver(payload.slice(skip..));
        while let Some((&s, _)) = self.ooo.iter().next() {
            if s > self.rcv_nxt {
                break;
            }
            let b = self.ooo.remove(&s).expect("present");
            self.ooo_bytes -= b.len();
            let e = s + b.len() as u64;
            if e > self.rcv_nxt {
                let skip = (self.rcv_nxt - s) as usize;
                self.deliver(b.slice(skip..));
            }
        }
        if filled_hole {
            self.ack_now += 1;
            return;
        }
        self.unacked_segments += 1;
        if self.unacked_segments >= self.cfg.ack_every {
            self.ack_now = self.ack_now.max(1);
        } else if self.delack_deadline.is_none() {
            self.delack_deadline = Some(now + self.cfg.delayed_ack);
        }
    }

    fn deliver(&mut self, b: Bytes) {
        self.rcv_nxt += b.len() as u64;
        self.stats.bytes_delivered += b.len() as u64;
        self.delivered.push_back(b);
    }

    pub fn poll_timeout(&self) -> Option<SimTime> {
        [self.rto_deadline, self.delack_deadline]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn handle_timeout(&mut self, now: SimTime) {
        if self.delack_deadline.is_some_and(|t| now >= t) {
            self.delack_deadline = None;
            if self.unacked_segments > 0 {
                self.ack_now = self.ack_now.max(1);
            }
        }
        if self.rto_deadline.is_some_and(|t| now >= t) {
            self.stats.timeouts += 1;
            let mss = self.cfg.mss;
            self.ssthresh = (self.flight() / 2).max(2 * mss);
            self.cwnd = mss;
            self.rto = (self.rto * 2).min(self.cfg.rto.max);
            self.recover = None;
            self.dup_acks = 0;
            self.sacked.clear();
            self.rtt_probe = None;
            self.pending_rtx = None;
            // go back to the first unacknowledged byte
            self.snd_nxt = self.snd_una;
            self.rto_deadline = if self.snd_una < self.snd_max {
                Some(now + self.rto)
            } else {
                None
            };
        }
    }
}
