//! Receiver side: duplicate detection, reassembly, per-stream ordering,
//! receive window accounting and the SACK policy engine.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use bytes::{Bytes, BytesMut};

use crate::netsim::{CostKind, CostLedger, SimTime};
use crate::txpath::{fragment_payload, AckMode};
use crate::wire::{DataChunk, GapBlock, SackChunk, Ssn, StreamId, Tsn};

/// Received TSNs relative to the peer's initial TSN.
#[derive(Clone, Debug)]
pub struct TsnMap {
    initial_tsn: Tsn,
    /// Extended TSN: `initial_tsn` is 1, so 0 means nothing received yet.
    cum_ext: u64,
    out_of_order: BTreeSet<u64>,
    dups: Vec<Tsn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsnStatus {
    Duplicate,
    /// New; extended TSN attached.
    New(u64),
}

impl TsnMap {
    pub fn new(initial_tsn: Tsn) -> Self {
        TsnMap {
            initial_tsn,
            cum_ext: 0,
            out_of_order: BTreeSet::new(),
            dups: Vec::new(),
        }
    }

    pub fn cum_tsn(&self) -> Tsn {
        self.initial_tsn
            .wrapping_add((self.cum_ext as u32).wrapping_sub(1))
    }

    pub fn cum_ext(&self) -> u64 {
        self.cum_ext
    }

    pub fn highest_ext(&self) -> u64 {
        self.out_of_order.last().copied().unwrap_or(self.cum_ext)
    }

    pub fn tsn_of(&self, ext: u64) -> Tsn {
        self.initial_tsn.wrapping_add((ext as u32).wrapping_sub(1))
    }

    pub fn out_of_order(&self) -> impl Iterator<Item = Tsn> + '_ {
        self.out_of_order.iter().map(|&e| self.tsn_of(e))
    }

    pub fn has_gaps(&self) -> bool {
        !self.out_of_order.is_empty()
    }

    /// Classifies without recording.
    pub fn classify(&self, tsn: Tsn) -> TsnStatus {
        let d = tsn.offset_from(self.cum_tsn()) as i32;
        if d <= 0 {
            return TsnStatus::Duplicate;
        }
        let ext = self.cum_ext + d as u64;
        if self.out_of_order.contains(&ext) {
            TsnStatus::Duplicate
        } else {
            TsnStatus::New(ext)
        }
    }

    pub fn record_dup(&mut self, tsn: Tsn) {
        self.dups.push(tsn);
    }

    /// Marks `ext` received and advances the cumulative point over any contiguous prefix.
    pub fn insert(&mut self, ext: u64) {
        if ext == self.cum_ext + 1 {
            self.cum_ext = ext;
            while self.out_of_order.remove(&(self.cum_ext + 1)) {
                self.cum_ext += 1;
            }
        } else if ext > self.cum_ext {
            self.out_of_order.insert(ext);
        }
    }

    /// Maximal runs of out-of-order TSNs as offsets from the cumulative TSN.
    pub fn gap_blocks(&self) -> Vec<GapBlock> {
        let mut gaps: Vec<GapBlock> = Vec::new();
        for &ext in &self.out_of_order {
            let off = ext - self.cum_ext;
            if off > u16::MAX as u64 {
                break;
            }
            let off = off as u16;
            match gaps.last_mut() {
                Some(g) if g.end + 1 == off => g.end = off,
                _ => gaps.push(GapBlock {
                    start: off,
                    end: off,
                }),
            }
        }
        gaps
    }

    pub fn drain_dups(&mut self) -> Vec<Tsn> {
        std::mem::take(&mut self.dups)
    }
}

/// A fully reassembled message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub stream: StreamId,
    pub ssn: Ssn,
    pub unordered: bool,
    pub payload: Bytes,
}

/// Ordered delivery state for one stream.
#[derive(Clone, Debug, Default)]
pub struct StreamInbox {
    pub next_ssn: Ssn,
    pending: HashMap<u16, Message>,
}

impl StreamInbox {
    /// Accepts a complete ordered message; returns it and any contiguous successors.
    pub fn deliver_ordered(&mut self, msg: Message) -> Vec<Message> {
        let mut out = Vec::new();
        if msg.ssn != self.next_ssn {
            self.pending.insert(msg.ssn.0, msg);
            return out;
        }
        out.push(msg);
        self.next_ssn = self.next_ssn.next();
        while let Some(m) = self.pending.remove(&self.next_ssn.0) {
            out.push(m);
            self.next_ssn = self.next_ssn.next();
        }
        out
    }

    pub fn pending_bytes(&self) -> usize {
        self.pending.values().map(|m| m.payload.len()).sum()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SackMode {
    EveryPacket,
    /// Two SACKs per data packet: one at receipt and one at delivery.
    LkDouble,
    EveryK(u32),
    Delayed(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SackPolicy {
    pub mode: SackMode,
    pub immediate_on_gap: bool,
}

impl SackPolicy {
    pub fn new(mode: SackMode) -> Self {
        SackPolicy {
            mode,
            immediate_on_gap: true,
        }
    }
}

impl Default for SackPolicy {
    fn default() -> Self {
        SackPolicy::new(SackMode::EveryPacket)
    }
}

/// Counters consulted by [`sack_decision`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SackCounters {
    pub packets_since_sack: u32,
}

/// How many SACKs to emit for one received data packet. Also reports whether
/// unacknowledged data remains, in which case the caller arms a flush timer.
pub fn sack_decision(
    policy: &SackPolicy,
    counters: &mut SackCounters,
    new_gap: bool,
) -> (u32, bool) {
    let gap_now = policy.immediate_on_gap && new_gap;
    match policy.mode {
        SackMode::EveryPacket => (1, false),
        SackMode::LkDouble => (2, false),
        SackMode::EveryK(k) => {
            counters.packets_since_sack += 1;
            if counters.packets_since_sack >= k.max(1) {
                counters.packets_since_sack = 0;
                (1, false)
            } else if gap_now {
                (1, counters.packets_since_sack > 0)
            } else {
                (0, true)
            }
        }
        SackMode::Delayed(_) => {
            if gap_now {
                (1, false)
            } else {
                (0, true)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceiverConfig {
    pub rwnd: usize,
    pub policy: SackPolicy,
    pub ack_mode: AckMode,
    /// Flush timer for every-k when fewer than k packets arrive.
    pub sack_flush: Duration,
    pub mtu: usize,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            rwnd: 128 * 1024,
            policy: SackPolicy::default(),
            ack_mode: AckMode::Selective,
            sack_flush: Duration::from_micros(200),
            mtu: crate::wire::DEFAULT_MTU,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReceiverStats {
    pub data_packets: u64,
    pub chunks_received: u64,
    pub duplicates: u64,
    pub discarded_out_of_order: u64,
    pub rwnd_drops: u64,
    pub invalid_stream: u64,
    pub sacks_built: u64,
    pub messages_delivered: u64,
    pub bytes_delivered: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RxOutcome {
    pub delivered: Vec<Message>,
    /// SACKs to emit now; call [`Receiver::build_sack`] once per SACK.
    pub sacks: u32,
}

#[derive(Debug)]
pub struct Receiver {
    cfg: ReceiverConfig,
    map: TsnMap,
    /// Chunks received but not yet part of a completed message.
    fragments: BTreeMap<u64, DataChunk>,
    fragment_bytes: usize,
    inboxes: Vec<StreamInbox>,
    counters: SackCounters,
    sack_deadline: Option<SimTime>,
    pub stats: ReceiverStats,
}

impl Receiver {
    pub fn new(cfg: ReceiverConfig, peer_initial_tsn: Tsn, streams_in: u16) -> Self {
        Receiver {
            cfg,
            map: TsnMap::new(peer_initial_tsn),
            fragments: BTreeMap::new(),
            fragment_bytes: 0,
            inboxes: vec![StreamInbox::default(); streams_in as usize],
            counters: SackCounters::default(),
            sack_deadline: None,
            stats: ReceiverStats::default(),
        }
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.cfg
    }

    pub fn tsn_map(&self) -> &TsnMap {
        &self.map
    }

    pub fn cum_tsn(&self) -> Tsn {
        self.map.cum_tsn()
    }

    pub fn inbox(&self, stream: StreamId) -> Option<&StreamInbox> {
        self.inboxes.get(stream.0 as usize)
    }

    /// Bytes held: out-of-order or incomplete fragments plus ordered messages
    /// waiting for an earlier SSN.
    pub fn buffered_bytes(&self) -> usize {
        self.fragment_bytes
            + self
                .inboxes
                .iter()
                .map(|i| i.pending_bytes())
                .sum::<usize>()
    }

    pub fn rwnd_free(&self) -> usize {
        self.cfg.rwnd.saturating_sub(self.buffered_bytes())
    }

    pub fn sack_deadline(&self) -> Option<SimTime> {
        self.sack_deadline
    }

    fn accepts(&self, ext: u64, len: usize) -> bool {
        let held = self.buffered_bytes();
        if ext == self.map.cum_ext() + 1 {
            held + len <= self.cfg.rwnd
        } else {
            // keep room for the chunk that fills the hole
            held + len + fragment_payload(self.cfg.mtu) <= self.cfg.rwnd
        }
    }

    /// Processes the DATA chunks of one packet.
    pub fn on_data_packet(
        &mut self,
        chunks: &[DataChunk],
        now: SimTime,
        ledger: &mut CostLedger,
    ) -> RxOutcome {
        let mut out = RxOutcome::default();
        if chunks.is_empty() {
            return out;
        }
        self.stats.data_packets += 1;
        let highest_before = self.map.highest_ext();
        let mut new_gap = false;
        let mut gbn_discard = false;

        for c in chunks {
            self.stats.chunks_received += 1;
            ledger.charge_stream(c.stream.0, CostKind::Chunks, 1);
            let ext = match self.map.classify(c.tsn) {
                TsnStatus::Duplicate => {
                    self.stats.duplicates += 1;
                    self.map.record_dup(c.tsn);
                    continue;
                }
                TsnStatus::New(ext) => ext,
            };
            if self.cfg.ack_mode == AckMode::GoBackN && ext != self.map.cum_ext() + 1 {
                self.stats.discarded_out_of_order += 1;
                gbn_discard = true;
                continue;
            }
            if c.stream.0 as usize >= self.inboxes.len() {
                // acknowledged so the sender stops retrying, then dropped
                self.map.insert(ext);
                self.stats.invalid_stream += 1;
                continue;
            }
            if !self.accepts(ext, c.payload.len()) {
                self.stats.rwnd_drops += 1;
                continue;
            }
            if ext > highest_before.max(self.map.highest_ext()) + 1 {
                new_gap = true;
            }
            self.map.insert(ext);
            self.fragment_bytes += c.payload.len();
            self.fragments.insert(ext, c.clone());
            self.try_complete(ext, &mut out.delivered);
        }

        for m in &out.delivered {
            self.stats.messages_delivered += 1;
            self.stats.bytes_delivered += m.payload.len() as u64;
        }

        if gbn_discard {
            // a discarded chunk always gets a cumulative-only SACK at once
            out.sacks = 1;
            self.counters.packets_since_sack = 0;
            self.sack_deadline = None;
            return out;
        }
        let (n, arm) = sack_decision(&self.cfg.policy, &mut self.counters, new_gap);
        out.sacks = n;
        if arm {
            if self.sack_deadline.is_none() {
                let wait = match self.cfg.policy.mode {
                    SackMode::Delayed(t) => t,
                    _ => self.cfg.sack_flush,
                };
                self.sack_deadline = Some(now + wait);
            }
        } else if n > 0 {
            self.sack_deadline = None;
        }
        out
    }

    /// Flush timer expiry; returns SACKs to emit.
    pub fn on_sack_timer(&mut self, now: SimTime) -> u32 {
        match self.sack_deadline {
            Some(d) if now >= d => {
                self.sack_deadline = None;
                self.counters.packets_since_sack = 0;
                1
            }
            _ => 0,
        }
    }

    pub fn build_sack(&mut self, ledger: &mut CostLedger) -> SackChunk {
        self.stats.sacks_built += 1;
        ledger.charge(CostKind::Sacks, 1);
        let gaps = match self.cfg.ack_mode {
            AckMode::Selective => self.map.gap_blocks(),
            AckMode::GoBackN => Vec::new(),
        };
        SackChunk {
            cum_tsn: self.map.cum_tsn(),
            a_rwnd: self.rwnd_free() as u32,
            gaps,
            dups: self.map.drain_dups(),
        }
    }

    /// Looks for a complete begin..end run around `ext` and hands it to delivery.
    fn try_complete(&mut self, ext: u64, delivered: &mut Vec<Message>) {
        let stream = self.fragments[&ext].stream;
        let mut start = ext;
        loop {
            let c = &self.fragments[&start];
            if c.flags.begin_fragment {
                break;
            }
            match self.fragments.get(&(start - 1)) {
                Some(p) if p.stream == stream => start -= 1,
                _ => return,
            }
        }
        let mut end = ext;
        loop {
            let c = &self.fragments[&end];
            if c.flags.end_fragment {
                break;
            }
            match self.fragments.get(&(end + 1)) {
                Some(n) if n.stream == stream => end += 1,
                _ => return,
            }
        }
        let first = self.fragments[&start].clone();
        let payload = if start == end {
            self.fragments.remove(&start);
            first.payload.clone()
        } else {
            let mut buf = BytesMut::new();
            for e in start..=end {
                let c = self.fragments.remove(&e).expect("run checked");
                buf.extend_from_slice(&c.payload);
            }
            buf.freeze()
        };
        self.fragment_bytes -= payload.len();
        let msg = Message {
            stream,
            ssn: first.ssn,
            unordered: first.flags.unordered,
            payload,
        };
        if msg.unordered {
            delivered.push(msg);
        } else {
            let inbox = &mut self.inboxes[stream.0 as usize];
            delivered.extend(inbox.deliver_ordered(msg));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::DataFlags;
    use proptest::prelude::*;

    fn chunk(tsn: u32, stream: u16, ssn: u16, flags: DataFlags, body: &[u8]) -> DataChunk {
        DataChunk {
            tsn: Tsn(tsn),
            stream: StreamId(stream),
            ssn: Ssn(ssn),
            flags,
            payload: Bytes::copy_from_slice(body),
        }
    }

    fn whole(tsn: u32, stream: u16, ssn: u16) -> DataChunk {
        chunk(tsn, stream, ssn, DataFlags::COMPLETE, &[tsn as u8])
    }

    fn rx(mode: SackMode, ack: AckMode) -> Receiver {
        let cfg = ReceiverConfig {
            policy: SackPolicy::new(mode),
            ack_mode: ack,
            ..Default::default()
        };
        Receiver::new(cfg, Tsn(1), 4)
    }

    #[test]
    fn in_order_delivery() {
        let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
        let mut l = CostLedger::default();
        let mut got = Vec::new();
        for t in 1..=3 {
            got.extend(
                r.on_data_packet(&[whole(t, 0, t as u16 - 1)], SimTime::ZERO, &mut l)
                    .delivered,
            );
        }
        assert_eq!(
            got.iter().map(|m| m.ssn.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn reorder_with_gap_report() {
        let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
        let mut l = CostLedger::default();
        let mut order = Vec::new();
        order.extend(
            r.on_data_packet(&[whole(1, 0, 0)], SimTime::ZERO, &mut l)
                .delivered,
        );
        order.extend(
            r.on_data_packet(&[whole(3, 0, 2)], SimTime::ZERO, &mut l)
                .delivered,
        );
        let s = r.build_sack(&mut l);
        assert_eq!(s.cum_tsn, Tsn(1));
        assert_eq!(s.gaps, vec![GapBlock { start: 2, end: 2 }]);
        order.extend(
            r.on_data_packet(&[whole(2, 0, 1)], SimTime::ZERO, &mut l)
                .delivered,
        );
        assert_eq!(
            order.iter().map(|m| m.ssn.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn gbn_discards_out_of_order() {
        let mut r = rx(SackMode::EveryK(7), AckMode::GoBackN);
        let mut l = CostLedger::default();
        r.on_data_packet(&[whole(1, 0, 0)], SimTime::ZERO, &mut l);
        let o = r.on_data_packet(&[whole(3, 0, 2)], SimTime::ZERO, &mut l);
        assert_eq!(o.sacks, 1);
        assert!(o.delivered.is_empty());
        assert_eq!(r.buffered_bytes(), 0);
        let s = r.build_sack(&mut l);
        assert_eq!(s.cum_tsn, Tsn(1));
        assert!(s.gaps.is_empty());
    }

    #[test]
    fn gap_blocks_from_map() {
        let mut m = TsnMap::new(Tsn(1));
        for e in [1, 2, 3, 4, 5, 7, 8, 10] {
            m.insert(e);
        }
        assert_eq!(m.cum_tsn(), Tsn(5));
        assert_eq!(
            m.gap_blocks(),
            vec![GapBlock { start: 2, end: 3 }, GapBlock { start: 5, end: 5 }]
        );
        let mut empty = TsnMap::new(Tsn(1));
        empty.insert(1);
        assert!(empty.gap_blocks().is_empty());
    }

    #[test]
    fn dups_drained() {
        let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
        let mut l = CostLedger::default();
        for t in 1..=4 {
            r.on_data_packet(&[whole(t, 0, t as u16 - 1)], SimTime::ZERO, &mut l);
        }
        r.build_sack(&mut l);
        r.on_data_packet(&[whole(4, 0, 3)], SimTime::ZERO, &mut l);
        r.on_data_packet(&[whole(4, 0, 3)], SimTime::ZERO, &mut l);
        assert_eq!(r.build_sack(&mut l).dups, vec![Tsn(4), Tsn(4)]);
        assert!(r.build_sack(&mut l).dups.is_empty());
    }

    fn count_sacks(mode: SackMode, tsns: &[u32]) -> u32 {
        let mut r = rx(mode, AckMode::Selective);
        let mut l = CostLedger::default();
        tsns.iter()
            .map(|&t| {
                r.on_data_packet(&[whole(t, 0, t as u16 - 1)], SimTime::ZERO, &mut l)
                    .sacks
            })
            .sum()
    }

    #[test]
    fn sack_frequencies() {
        let seq: Vec<u32> = (1..=14).collect();
        assert_eq!(count_sacks(SackMode::EveryK(7), &seq), 2);
        assert_eq!(count_sacks(SackMode::LkDouble, &seq), 28);
        assert_eq!(count_sacks(SackMode::EveryPacket, &seq), 14);
        // packet 3 lost, arriving last is never needed for the count
        assert_eq!(count_sacks(SackMode::EveryK(7), &[1, 2, 4, 5, 6, 7, 8]), 2);
    }

    #[test]
    fn every_k_flush_timer() {
        let mut r = rx(SackMode::EveryK(7), AckMode::Selective);
        let mut l = CostLedger::default();
        assert_eq!(
            r.on_data_packet(&[whole(1, 0, 0)], SimTime::ZERO, &mut l)
                .sacks,
            0
        );
        let d = r.sack_deadline().unwrap();
        assert_eq!(d, SimTime::from_micros(200));
        assert_eq!(r.on_sack_timer(SimTime::from_micros(100)), 0);
        assert_eq!(r.on_sack_timer(d), 1);
        assert_eq!(r.sack_deadline(), None);
    }

    #[test]
    fn inbox_ordering_and_bypass() {
        let mut ib = StreamInbox::default();
        let m = |ssn| Message {
            stream: StreamId(0),
            ssn: Ssn(ssn),
            unordered: false,
            payload: Bytes::new(),
        };
        assert!(ib.deliver_ordered(m(1)).is_empty());
        let out = ib.deliver_ordered(m(0));
        assert_eq!(out.iter().map(|m| m.ssn.0).collect::<Vec<_>>(), vec![0, 1]);

        let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
        let mut l = CostLedger::default();
        // stream 0 ssn 0 lost (tsn 1); stream 1 unaffected
        assert!(r
            .on_data_packet(&[whole(2, 0, 1)], SimTime::ZERO, &mut l)
            .delivered
            .is_empty());
        assert_eq!(
            r.on_data_packet(&[whole(3, 1, 0)], SimTime::ZERO, &mut l)
                .delivered
                .len(),
            1
        );
        let unordered = chunk(
            4,
            0,
            0,
            DataFlags {
                unordered: true,
                ..DataFlags::COMPLETE
            },
            b"u",
        );
        assert_eq!(
            r.on_data_packet(&[unordered], SimTime::ZERO, &mut l)
                .delivered
                .len(),
            1
        );
    }

    #[test]
    fn fragments_reassemble() {
        let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
        let mut l = CostLedger::default();
        let b = DataFlags {
            begin_fragment: true,
            ..Default::default()
        };
        let mid = DataFlags::default();
        let e = DataFlags {
            end_fragment: true,
            ..Default::default()
        };
        assert!(r
            .on_data_packet(&[chunk(3, 0, 0, e, b"c")], SimTime::ZERO, &mut l)
            .delivered
            .is_empty());
        assert!(r
            .on_data_packet(&[chunk(1, 0, 0, b, b"a")], SimTime::ZERO, &mut l)
            .delivered
            .is_empty());
        assert_eq!(r.buffered_bytes(), 2);
        let out = r
            .on_data_packet(&[chunk(2, 0, 0, mid, b"b")], SimTime::ZERO, &mut l)
            .delivered;
        assert_eq!(&out[0].payload[..], b"abc");
        assert_eq!(r.buffered_bytes(), 0);
    }

    #[test]
    fn rwnd_bounds_buffer() {
        let cfg = ReceiverConfig {
            rwnd: 4000,
            ..Default::default()
        };
        let mut r = Receiver::new(cfg, Tsn(1), 1);
        let mut l = CostLedger::default();
        let big = |t| chunk(t, 0, t as u16 - 1, DataFlags::COMPLETE, &[0u8; 1452]);
        r.on_data_packet(&[big(3)], SimTime::ZERO, &mut l);
        r.on_data_packet(&[big(4)], SimTime::ZERO, &mut l);
        assert_eq!(r.stats.rwnd_drops, 1);
        assert!(r.buffered_bytes() <= 4000);
        let out = r.on_data_packet(&[big(1)], SimTime::ZERO, &mut l);
        assert_eq!(out.delivered.len(), 1);
    }

    #[test]
    fn wraparound_tsns() {
        let mut r = Receiver::new(ReceiverConfig::default(), Tsn(u32::MAX - 1), 1);
        let mut l = CostLedger::default();
        let mut n = 0;
        for (i, t) in [u32::MAX - 1, u32::MAX, 0, 1].into_iter().enumerate() {
            n += r
                .on_data_packet(&[whole(t, 0, i as u16)], SimTime::ZERO, &mut l)
                .delivered
                .len();
        }
        assert_eq!(n, 4);
        assert_eq!(r.cum_tsn(), Tsn(1));
    }

    proptest! {
        #[test]
        fn every_k_count_bound(n in 1u32..200, k in 1u32..12) {
            let mut c = SackCounters::default();
            let p = SackPolicy::new(SackMode::EveryK(k));
            let sacks: u32 = (0..n).map(|_| sack_decision(&p, &mut c, false).0).sum();
            prop_assert!(sacks >= n / k && sacks <= n / k + 1);
        }

        #[test]
        fn every_1_matches_every_packet(gaps in proptest::collection::vec(any::<bool>(), 1..50)) {
            let mut a = SackCounters::default();
            let mut b = SackCounters::default();
            let p1 = SackPolicy::new(SackMode::EveryK(1));
            let pp = SackPolicy::new(SackMode::EveryPacket);
            for g in gaps {
                prop_assert_eq!(sack_decision(&p1, &mut a, g).0, sack_decision(&pp, &mut b, g).0);
            }
        }

        #[test]
        fn sacks_well_formed(order in Just((1u32..=40).collect::<Vec<_>>()).prop_shuffle(), keep in proptest::collection::vec(any::<bool>(), 40)) {
            let mut r = rx(SackMode::EveryPacket, AckMode::Selective);
            let mut l = CostLedger::default();
            for (t, k) in order.into_iter().zip(keep) {
                if !k { continue; }
                r.on_data_packet(&[whole(t, 0, t as u16 - 1)], SimTime::ZERO, &mut l);
                let s = r.build_sack(&mut l);
                prop_assert!(s.gaps_well_formed());
                let cum = s.cum_tsn;
                for g in &s.gaps {
                    for off in g.start..=g.end {
                        prop_assert!(r.tsn_map().out_of_order().any(|t| t == cum.wrapping_add(off as u32)));
                    }
                }
            }
        }
    }
}
