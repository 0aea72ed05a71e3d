//! Deterministic discrete-event simulation primitives: integer virtual time,
//! an ordered event queue, lossy bandwidth-limited links, seeded random
//! streams and the cost-unit ledger.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Virtual time in integer nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;
    fn add(self, d: Duration) -> SimTime {
        SimTime(self.0 + d.as_nanos() as u64)
    }
}

impl Sub for SimTime {
    type Output = Duration;
    fn sub(self, rhs: SimTime) -> Duration {
        Duration::from_nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}ms", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// Priority queue keyed by `(due_time, insertion sequence)`.
#[derive(Debug)]
pub struct EventQueue<E> {
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    payloads: BTreeMap<u64, E>,
    cancelled: HashSet<u64>,
    fired: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            payloads: BTreeMap::new(),
            cancelled: HashSet::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, delay: Duration, event: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule_at(at, event)
    }

    /// Times in the past are clamped to `now`.
    pub fn schedule_at(&mut self, at: SimTime, event: E) -> EventHandle {
        let at = at.max(self.now);
        let id = self.seq;
        self.seq += 1;
        self.heap.push(Reverse((at, id)));
        self.payloads.insert(id, event);
        EventHandle(id)
    }

    /// No-op for events that already fired or were cancelled.
    pub fn cancel(&mut self, handle: EventHandle) {
        if self.payloads.remove(&handle.0).is_some() {
            self.cancelled.insert(handle.0);
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse((at, id))) = self.heap.peek().copied() {
            if self.cancelled.remove(&id) {
                self.heap.pop();
                continue;
            }
            return Some(at);
        }
        None
    }

    /// Advances the clock to the next live event and returns it.
    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        while let Some(Reverse((at, id))) = self.heap.pop() {
            if self.cancelled.remove(&id) {
                continue;
            }
            let event = self.payloads.remove(&id).expect("live event has a payload");
            debug_assert!(at >= self.now);
            self.now = at;
            self.fired += 1;
            return Some((at, event));
        }
        None
    }

    pub fn is_empty(&mut self) -> bool {
        self.peek_time().is_none()
    }

    pub fn pending(&self) -> usize {
        self.payloads.len()
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event limit of {limit} exceeded at {at}")]
    EventLimitExceeded { limit: u64, at: SimTime },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub events: u64,
    pub end_time: SimTime,
}

/// Drives `queue` until it is empty, `until` is reached, or `handler` returns false.
pub fn run_until<E>(
    queue: &mut EventQueue<E>,
    until: Option<SimTime>,
    max_events: u64,
    mut handler: impl FnMut(&mut EventQueue<E>, SimTime, E) -> bool,
) -> Result<RunStats, SimError> {
    let start = queue.fired();
    loop {
        match queue.peek_time() {
            None => break,
            Some(t) if until.is_some_and(|u| t > u) => break,
            Some(_) => {}
        }
        if queue.fired() - start >= max_events {
            return Err(SimError::EventLimitExceeded {
                limit: max_events,
                at: queue.now(),
            });
        }
        let (at, ev) = queue.pop().expect("peeked");
        if !handler(queue, at, ev) {
            break;
        }
    }
    Ok(RunStats {
        events: queue.fired() - start,
        end_time: queue.now(),
    })
}

/// Splittable deterministic generator: one independent stream per `(seed, stream_id)`.
pub fn rng_stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkConfig {
    /// Bits per second.
    pub bandwidth: u64,
    pub prop_delay: Duration,
    pub drop_prob: f64,
    /// Packets waiting for or in serialization.
    pub queue_capacity: usize,
}

impl LinkConfig {
    /// 1 Gb/s, 51 us each way (102 us RTT).
    pub fn data_center() -> Self {
        LinkConfig {
            bandwidth: 1_000_000_000,
            prop_delay: Duration::from_micros(51),
            drop_prob: 0.0,
            queue_capacity: 256,
        }
    }

    pub fn serialization(&self, bytes: usize) -> Duration {
        Duration::from_nanos(bytes as u64 * 8 * 1_000_000_000 / self.bandwidth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    TailDrop,
    Random,
    LinkDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkOutcome {
    Arrive(SimTime),
    Dropped(DropReason),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_transit: u64,
    pub bytes_sent: u64,
}

/// FIFO link: tail-drop queue, serialization at `bandwidth`, then `prop_delay`.
#[derive(Debug)]
pub struct Link {
    pub config: LinkConfig,
    up: bool,
    busy_until: SimTime,
    departures: VecDeque<SimTime>,
    rng: ChaCha8Rng,
    stats: LinkStats,
}

impl Link {
    pub fn new(config: LinkConfig, seed: u64, link_id: u64) -> Self {
        Link {
            config,
            up: true,
            busy_until: SimTime::ZERO,
            departures: VecDeque::new(),
            rng: rng_stream(seed, link_id),
            stats: LinkStats::default(),
        }
    }

    pub fn transmit(&mut self, bytes: usize, now: SimTime) -> LinkOutcome {
        self.stats.sent += 1;
        if !self.up {
            self.stats.dropped += 1;
            return LinkOutcome::Dropped(DropReason::LinkDown);
        }
        while self.departures.front().is_some_and(|&t| t <= now) {
            self.departures.pop_front();
        }
        if self.departures.len() >= self.config.queue_capacity {
            self.stats.dropped += 1;
            return LinkOutcome::Dropped(DropReason::TailDrop);
        }
        let start = self.busy_until.max(now);
        let done = start + self.config.serialization(bytes);
        self.busy_until = done;
        self.departures.push_back(done);
        self.stats.bytes_sent += bytes as u64;
        // one draw per accepted packet keeps the loss pattern independent of timing
        let lost = self.config.drop_prob > 0.0 && self.rng.random::<f64>() < self.config.drop_prob;
        if lost {
            self.stats.dropped += 1;
            return LinkOutcome::Dropped(DropReason::Random);
        }
        self.stats.in_transit += 1;
        LinkOutcome::Arrive(done + self.config.prop_delay)
    }

    /// Must be called once for every `Arrive` outcome when the arrival is processed.
    /// Returns false if the link went down while the packet was on the wire.
    pub fn complete_arrival(&mut self) -> bool {
        self.stats.in_transit -= 1;
        if self.up {
            self.stats.delivered += 1;
            true
        } else {
            self.stats.dropped += 1;
            false
        }
    }

    pub fn set_up(&mut self, up: bool) {
        self.up = up;
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    /// Time at which the transmit queue drains.
    pub fn idle_at(&self) -> SimTime {
        self.busy_until
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostKind {
    CopyBytes,
    /// Copies on the shortened small-message path.
    ShortCopyBytes,
    Chunks,
    Sacks,
    CrcBytes,
}

impl CostKind {
    pub const ALL: [CostKind; 5] = [
        CostKind::CopyBytes,
        CostKind::ShortCopyBytes,
        CostKind::Chunks,
        CostKind::Sacks,
        CostKind::CrcBytes,
    ];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LockModel {
    /// One lock per association: stream work serializes.
    #[default]
    Coarse,
    /// Per-stream locks: stream work overlaps.
    Fine,
}

/// Weights in milli-units per counted unit, so sums stay exact integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostWeights {
    pub copy_byte: u64,
    pub short_copy_byte: u64,
    pub chunk: u64,
    pub sack: u64,
    pub crc_byte: u64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            copy_byte: 1_000,
            short_copy_byte: 500,
            chunk: 50_000,
            sack: 200_000,
            crc_byte: 500,
        }
    }
}

impl CostWeights {
    pub fn zero() -> Self {
        CostWeights {
            copy_byte: 0,
            short_copy_byte: 0,
            chunk: 0,
            sack: 0,
            crc_byte: 0,
        }
    }

    fn of(&self, kind: CostKind) -> u64 {
        match kind {
            CostKind::CopyBytes => self.copy_byte,
            CostKind::ShortCopyBytes => self.short_copy_byte,
            CostKind::Chunks => self.chunk,
            CostKind::Sacks => self.sack,
            CostKind::CrcBytes => self.crc_byte,
        }
    }
}

/// Modelled processing cost. Not a measurement: only ratios and orderings mean anything.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub copy_bytes: u64,
    pub short_copy_bytes: u64,
    pub chunks_processed: u64,
    pub sacks_processed: u64,
    pub crc_bytes: u64,
    pub weights: CostWeights,
    pub lock_model: LockModel,
    running_milli: u64,
    shared_milli: u64,
    per_stream_milli: BTreeMap<u16, u64>,
}

impl CostLedger {
    pub fn new(weights: CostWeights, lock_model: LockModel) -> Self {
        CostLedger {
            weights,
            lock_model,
            ..Default::default()
        }
    }

    fn counter_mut(&mut self, kind: CostKind) -> &mut u64 {
        match kind {
            CostKind::CopyBytes => &mut self.copy_bytes,
            CostKind::ShortCopyBytes => &mut self.short_copy_bytes,
            CostKind::Chunks => &mut self.chunks_processed,
            CostKind::Sacks => &mut self.sacks_processed,
            CostKind::CrcBytes => &mut self.crc_bytes,
        }
    }

    pub fn counter(&self, kind: CostKind) -> u64 {
        match kind {
            CostKind::CopyBytes => self.copy_bytes,
            CostKind::ShortCopyBytes => self.short_copy_bytes,
            CostKind::Chunks => self.chunks_processed,
            CostKind::Sacks => self.sacks_processed,
            CostKind::CrcBytes => self.crc_bytes,
        }
    }

    /// Association-wide work, not attributable to a stream.
    pub fn charge(&mut self, kind: CostKind, amount: u64) {
        *self.counter_mut(kind) += amount;
        let milli = amount * self.weights.of(kind);
        self.running_milli += milli;
        self.shared_milli += milli;
    }

    pub fn charge_stream(&mut self, stream: u16, kind: CostKind, amount: u64) {
        *self.counter_mut(kind) += amount;
        let milli = amount * self.weights.of(kind);
        self.running_milli += milli;
        *self.per_stream_milli.entry(stream).or_default() += milli;
    }

    /// Incrementally maintained total, in cost units.
    pub fn cpu_proxy(&self) -> f64 {
        self.running_milli as f64 / 1000.0
    }

    pub fn cpu_proxy_milli(&self) -> u64 {
        self.running_milli
    }

    /// Total recomputed from the raw counters.
    pub fn recompute_milli(&self) -> u64 {
        CostKind::ALL
            .iter()
            .map(|&k| self.counter(k) * self.weights.of(k))
            .sum()
    }

    /// Elapsed-processing proxy: shared work plus the sum (coarse) or max
    /// (fine) of per-stream work.
    pub fn elapsed_proxy_milli(&self) -> u64 {
        let streams = self.per_stream_milli.values().copied();
        let stream_part = match self.lock_model {
            LockModel::Coarse => streams.sum(),
            LockModel::Fine => streams.max().unwrap_or(0),
        };
        self.shared_milli + stream_part
    }

    pub fn elapsed_proxy_milli_with(&self, model: LockModel) -> u64 {
        let mut l = self.clone();
        l.lock_model = model;
        l.elapsed_proxy_milli()
    }

    pub fn active_streams(&self) -> usize {
        self.per_stream_milli.values().filter(|&&v| v > 0).count()
    }

    pub fn absorb(&mut self, other: &CostLedger) {
        self.copy_bytes += other.copy_bytes;
        self.short_copy_bytes += other.short_copy_bytes;
        self.chunks_processed += other.chunks_processed;
        self.sacks_processed += other.sacks_processed;
        self.crc_bytes += other.crc_bytes;
        self.running_milli += other.running_milli;
        self.shared_milli += other.shared_milli;
        for (s, v) in &other.per_stream_milli {
            *self.per_stream_milli.entry(*s).or_default() += v;
        }
    }
}
