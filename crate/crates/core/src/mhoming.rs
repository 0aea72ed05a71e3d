//! Multi-homing: per-path liveness, error-threshold failover and restoration
//! of the primary path through heartbeat probes.

use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::netsim::{rng_stream, SimTime};
use crate::txpath::CongestionState;
use crate::wire::Chunk;

pub type PathId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathStatus {
    Active,
    Inactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Probe {
    nonce: u64,
    sent_at: SimTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PathStats {
    pub data_packets: u64,
    pub new_data_packets: u64,
    pub heartbeats_sent: u64,
    pub heartbeats_acked: u64,
}

#[derive(Clone, Debug)]
pub struct PathState {
    pub id: PathId,
    pub status: PathStatus,
    pub is_primary: bool,
    pub error_count: u32,
    pub error_threshold: u32,
    pub hb_interval: Duration,
    pub last_activity: SimTime,
    pub cc: CongestionState,
    /// Retransmission timer deadline.
    pub t3: Option<SimTime>,
    /// Payload bytes sent on this path and not yet acknowledged, in flight or not.
    pub outstanding_bytes: usize,
    pub stats: PathStats,
    probe: Option<Probe>,
}

impl PathState {
    pub fn is_active(&self) -> bool {
        self.status == PathStatus::Active
    }

    /// A probe is abandoned after one RTO, but never waits longer than the
    /// heartbeat interval: a backed-off RTO would otherwise stall restoration.
    pub fn probe_timeout(&self) -> Duration {
        self.cc.rto.min(self.hb_interval)
    }
}

/// A status change, kept as a timeline for failover reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathEvent {
    pub at: SimTime,
    pub path: PathId,
    pub status: PathStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeartbeatAckOutcome {
    /// Probe matched; the path was already active.
    Confirmed,
    /// Probe matched and brought an inactive path back.
    Restored,
    /// Nonce did not match an outstanding probe.
    Ignored,
}

#[derive(Clone, Debug)]
pub struct PathSet {
    paths: Vec<PathState>,
    primary: PathId,
    rng: ChaCha8Rng,
    pub unknown_nonce_acks: u64,
    pub timeline: Vec<PathEvent>,
}

impl PathSet {
    pub fn new(
        count: usize,
        cc: CongestionState,
        error_threshold: u32,
        hb_interval: Duration,
        seed: u64,
        now: SimTime,
    ) -> Self {
        assert!(count >= 1, "an association needs at least one path");
        let paths = (0..count)
            .map(|id| PathState {
                id,
                status: PathStatus::Active,
                is_primary: id == 0,
                error_count: 0,
                error_threshold,
                hb_interval,
                last_activity: now,
                cc: cc.clone(),
                t3: None,
                outstanding_bytes: 0,
                stats: PathStats::default(),
                probe: None,
            })
            .collect();
        PathSet {
            paths,
            primary: 0,
            rng: rng_stream(seed, 0x4842),
            unknown_nonce_acks: 0,
            timeline: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn primary(&self) -> PathId {
        self.primary
    }

    pub fn get(&self, id: PathId) -> &PathState {
        &self.paths[id]
    }

    pub fn get_mut(&mut self, id: PathId) -> &mut PathState {
        &mut self.paths[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PathState> {
        self.paths.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut PathState> {
        self.paths.iter_mut()
    }

    pub fn set_primary(&mut self, id: PathId) {
        for p in &mut self.paths {
            p.is_primary = p.id == id;
        }
        self.primary = id;
    }

    /// Primary if active, else the lowest-id active alternate, else the primary.
    pub fn select_path(&self) -> PathId {
        if self.paths[self.primary].is_active() {
            return self.primary;
        }
        self.paths
            .iter()
            .find(|p| p.is_active())
            .map_or(self.primary, |p| p.id)
    }

    /// An active path other than `avoid`, falling back to [`select_path`](Self::select_path).
    pub fn select_alternate(&self, avoid: PathId) -> PathId {
        if self.paths[self.primary].is_active() && self.primary != avoid {
            return self.primary;
        }
        self.paths
            .iter()
            .find(|p| p.is_active() && p.id != avoid)
            .map_or_else(|| self.select_path(), |p| p.id)
    }

    /// Counts one timeout against `id`; returns true if the path just went inactive.
    pub fn on_path_error(&mut self, id: PathId, now: SimTime) -> bool {
        let p = &mut self.paths[id];
        p.error_count += 1;
        if p.is_active() && p.error_count >= p.error_threshold {
            p.status = PathStatus::Inactive;
            self.timeline.push(PathEvent {
                at: now,
                path: id,
                status: PathStatus::Inactive,
            });
            return true;
        }
        false
    }

    /// Data on `id` was acknowledged.
    pub fn note_ack(&mut self, id: PathId) {
        self.paths[id].error_count = 0;
    }

    pub fn all_inactive(&self) -> bool {
        self.paths.iter().all(|p| !p.is_active())
    }

    /// Expires unanswered probes and emits a HEARTBEAT for every idle path.
    pub fn heartbeat_tick(&mut self, now: SimTime) -> Vec<(PathId, Chunk)> {
        let mut out = Vec::new();
        for id in 0..self.paths.len() {
            let expired = {
                let p = &self.paths[id];
                p.probe
                    .is_some_and(|pr| now >= pr.sent_at + p.probe_timeout())
            };
            if expired {
                self.paths[id].probe = None;
                self.paths[id].cc.backoff();
                self.on_path_error(id, now);
            }
            let p = &self.paths[id];
            if p.probe.is_none() && now >= p.last_activity + p.hb_interval {
                let nonce = self.rng.random::<u64>();
                let p = &mut self.paths[id];
                p.probe = Some(Probe {
                    nonce,
                    sent_at: now,
                });
                p.last_activity = now;
                p.stats.heartbeats_sent += 1;
                out.push((
                    id,
                    Chunk::Heartbeat {
                        nonce,
                        path_id: id as u16,
                    },
                ));
            }
        }
        out
    }

    pub fn next_heartbeat_deadline(&self) -> Option<SimTime> {
        self.paths
            .iter()
            .map(|p| match p.probe {
                Some(pr) => pr.sent_at + p.probe_timeout(),
                None => p.last_activity + p.hb_interval,
            })
            .min()
    }

    pub fn on_heartbeat_ack(
        &mut self,
        nonce: u64,
        path_id: u16,
        now: SimTime,
    ) -> HeartbeatAckOutcome {
        let id = path_id as usize;
        let matches = self
            .paths
            .get(id)
            .and_then(|p| p.probe)
            .is_some_and(|pr| pr.nonce == nonce);
        if !matches {
            self.unknown_nonce_acks += 1;
            return HeartbeatAckOutcome::Ignored;
        }
        let p = &mut self.paths[id];
        let probe = p.probe.take().expect("matched");
        p.error_count = 0;
        p.stats.heartbeats_acked += 1;
        p.cc.rtt_update(now - probe.sent_at);
        if p.status == PathStatus::Inactive {
            p.status = PathStatus::Active;
            p.cc.reset_after_reactivation();
            self.timeline.push(PathEvent {
                at: now,
                path: id,
                status: PathStatus::Active,
            });
            HeartbeatAckOutcome::Restored
        } else {
            HeartbeatAckOutcome::Confirmed
        }
    }

    pub fn outstanding_probe_nonce(&self, id: PathId) -> Option<u64> {
        self.paths[id].probe.map(|p| p.nonce)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txpath::RtoConfig;

    fn set(n: usize) -> PathSet {
        let cc = CongestionState::new(1500, 131072, 4, RtoConfig::data_center());
        PathSet::new(n, cc, 5, Duration::from_millis(500), 9, SimTime::ZERO)
    }

    #[test]
    fn selection_rules() {
        let mut s = set(3);
        assert_eq!(s.select_path(), 0);
        for _ in 0..5 {
            s.on_path_error(0, SimTime::ZERO);
        }
        assert_eq!(s.select_path(), 1);
        for id in 1..3 {
            for _ in 0..5 {
                s.on_path_error(id, SimTime::ZERO);
            }
        }
        assert!(s.all_inactive());
        assert_eq!(s.select_path(), 0);
    }

    #[test]
    fn threshold_and_reset() {
        let mut s = set(2);
        for i in 0..4 {
            assert!(!s.on_path_error(0, SimTime(i)));
        }
        s.note_ack(0);
        assert_eq!(s.get(0).error_count, 0);
        assert!(s.get(0).is_active());
        for i in 0..4 {
            assert!(!s.on_path_error(0, SimTime(i)));
        }
        assert!(s.on_path_error(0, SimTime(9)));
        assert_eq!(s.get(0).status, PathStatus::Inactive);
    }

    #[test]
    fn idle_paths_are_probed() {
        let mut s = set(2);
        assert!(s.heartbeat_tick(SimTime::from_millis(100)).is_empty());
        s.get_mut(1).last_activity = SimTime::from_millis(400);
        let hbs = s.heartbeat_tick(SimTime::from_millis(500));
        assert_eq!(hbs.len(), 1);
        assert_eq!(hbs[0].0, 0);
        let hbs = s.heartbeat_tick(SimTime::from_millis(900));
        assert_eq!(hbs.len(), 1);
        assert_eq!(hbs[0].0, 1);
    }

    #[test]
    fn two_idle_paths_two_heartbeats() {
        let mut s = set(2);
        assert_eq!(s.heartbeat_tick(SimTime::from_millis(500)).len(), 2);
    }

    #[test]
    fn restoration_via_heartbeat_ack() {
        let mut s = set(2);
        for _ in 0..5 {
            s.on_path_error(0, SimTime::ZERO);
        }
        assert_eq!(s.select_path(), 1);
        let t = SimTime::from_millis(600);
        let hbs = s.heartbeat_tick(t);
        let nonce = match hbs.iter().find(|(p, _)| *p == 0).unwrap().1 {
            Chunk::Heartbeat { nonce, .. } => nonce,
            _ => unreachable!(),
        };
        assert_eq!(
            s.on_heartbeat_ack(nonce ^ 1, 0, t),
            HeartbeatAckOutcome::Ignored
        );
        assert_eq!(
            s.on_heartbeat_ack(nonce, 0, t + Duration::from_micros(102)),
            HeartbeatAckOutcome::Restored
        );
        assert_eq!(s.select_path(), 0);
        assert_eq!(s.get(0).cc.cwnd, 3000);
        // duplicate ack: probe already consumed
        assert_eq!(
            s.on_heartbeat_ack(nonce, 0, t),
            HeartbeatAckOutcome::Ignored
        );
        assert!(s.get(0).is_active());
        assert_eq!(s.unknown_nonce_acks, 2);
    }

    #[test]
    fn unanswered_probe_counts_as_error() {
        let mut s = set(1);
        let t = SimTime::from_millis(500);
        assert_eq!(s.heartbeat_tick(t).len(), 1);
        let deadline = s.next_heartbeat_deadline().unwrap();
        s.heartbeat_tick(deadline);
        assert_eq!(s.get(0).error_count, 1);
    }

    #[test]
    fn exactly_one_primary() {
        let mut s = set(3);
        s.set_primary(2);
        assert_eq!(s.iter().filter(|p| p.is_primary).count(), 1);
        assert_eq!(s.primary(), 2);
    }
}
