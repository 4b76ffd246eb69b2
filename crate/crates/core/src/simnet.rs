//! Deterministic discrete-event network simulator.
//!
//! Simulated time is an integer count of nanoseconds and is the only clock
//! in the system. Events are ordered by `(time, sequence number)`, where the
//! sequence number is a global counter assigned at enqueue time, so every
//! run with the same inputs processes events in the same order.
//!
//! Message transit follows
//!
//! ```text
//! transit(m) = per_message_fixed + ceil(size_bytes * 1e9 / bandwidth)   [ns]
//! ```
//!
//! and delivery is additionally held back so messages between one
//! (src, dst) pair never overtake each other.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated nanoseconds.
pub type SimTime = u64;

pub const NANOS_PER_MS: u64 = 1_000_000;

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / NANOS_PER_MS as f64
}

/// Identifier of a simulated device (trusted or untrusted worker).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(WorkerId),
    #[error("faults cannot be injected into trusted worker {0}")]
    TrustedWorkerFault(WorkerId),
    #[error("worker {0} already has a fault")]
    DuplicateFault(WorkerId),
    #[error("message send time {send_time} precedes the clock {now}")]
    SendInPast { send_time: SimTime, now: SimTime },
    #[error("deadlock: event queue drained with unfinished work ({0})")]
    Deadlock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Activation,
    Gradient,
    Digest,
    /// Segment parameters moving from one worker to the next.
    Handoff,
}

#[derive(Debug, Clone)]
pub struct Message<P> {
    pub src: WorkerId,
    pub dst: WorkerId,
    pub kind: MessageKind,
    pub job: u64,
    pub size_bytes: u64,
    pub send_time: SimTime,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Bytes per simulated second. Default: 1 Gbit/s.
    pub bandwidth: u64,
    pub per_message_fixed_ns: u64,
    /// Cost of one trusted scheduling run. Default: 176.66 ms.
    pub sgx_scheduling_overhead_ns: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            bandwidth: 125_000_000,
            per_message_fixed_ns: 100_000,
            sgx_scheduling_overhead_ns: 176_660_000,
        }
    }
}

impl LatencyModel {
    pub fn transit(&self, size_bytes: u64) -> SimTime {
        let wire = (u128::from(size_bytes) * 1_000_000_000).div_ceil(u128::from(self.bandwidth));
        self.per_message_fixed_ns + u64::try_from(wire).expect("transit fits in u64 ns")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Stops responding from the trigger on.
    Crash,
    /// Adds 1.0 to one entry of its output tensor at the trigger.
    CorruptResult,
    /// Records every shard it receives from the trigger on.
    ExfiltrateAttempt,
}

/// Position in a job's training: `(epoch, step within the epoch)`.
pub type Trigger = (u32, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub worker: WorkerId,
    pub kind: FaultKind,
    pub epoch: u32,
    pub step: u32,
}

impl FaultSpec {
    pub fn trigger(&self) -> Trigger {
        (self.epoch, self.step)
    }
}

/// Per-job cost buckets, each an exact sum of cost-model terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub compute_ns: u64,
    pub comm_ns: u64,
    pub scheduling_ns: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

#[derive(Debug, Clone)]
pub enum EventKind<P> {
    Deliver(Message<P>),
    Timer {
        node: WorkerId,
        job: u64,
        payload: P,
    },
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub id: EventId,
    pub time: SimTime,
    pub kind: EventKind<P>,
}

/// One delivered message, kept for causality and FIFO audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub src: WorkerId,
    pub dst: WorkerId,
    pub kind: MessageKind,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    pub seq: u64,
}

pub trait Handler<P> {
    type Error: From<SimError>;

    fn handle(&mut self, sim: &mut Simulator<P>, event: Event<P>) -> Result<(), Self::Error>;

    /// Description of outstanding work, if any. Checked when the queue drains.
    fn unfinished(&self) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub end_time: SimTime,
    pub accounting: BTreeMap<u64, Accounting>,
}

struct Queued<P> {
    time: SimTime,
    seq: u64,
    kind: EventKind<P>,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

pub struct Simulator<P> {
    latency: LatencyModel,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    cancelled: BTreeSet<u64>,
    endpoints: BTreeMap<WorkerId, bool>,
    last_delivery: BTreeMap<(WorkerId, WorkerId), SimTime>,
    faults: BTreeMap<WorkerId, FaultSpec>,
    accounting: BTreeMap<u64, Accounting>,
    deliveries: Vec<DeliveryRecord>,
}

impl<P> Simulator<P> {
    pub fn new(latency: LatencyModel) -> Self {
        Self {
            latency,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            endpoints: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            faults: BTreeMap::new(),
            accounting: BTreeMap::new(),
            deliveries: Vec::new(),
        }
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn register(&mut self, worker: WorkerId, trusted: bool) {
        self.endpoints.insert(worker, trusted);
    }

    pub fn is_registered(&self, worker: WorkerId) -> bool {
        self.endpoints.contains_key(&worker)
    }

    fn push(&mut self, time: SimTime, kind: EventKind<P>) -> EventId {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { time, seq, kind }));
        EventId(seq)
    }

    /// Enqueues delivery at `send_time + transit`, held back behind earlier
    /// messages on the same pair. Transit is charged to the message's job.
    pub fn send(&mut self, msg: Message<P>) -> Result<SimTime, SimError> {
        for w in [msg.src, msg.dst] {
            if !self.is_registered(w) {
                return Err(SimError::UnknownEndpoint(w));
            }
        }
        if msg.send_time < self.now {
            return Err(SimError::SendInPast {
                send_time: msg.send_time,
                now: self.now,
            });
        }
        let transit = self.latency.transit(msg.size_bytes);
        let pair = (msg.src, msg.dst);
        let at = (msg.send_time + transit).max(self.last_delivery.get(&pair).copied().unwrap_or(0));
        self.last_delivery.insert(pair, at);
        let acct = self.accounting.entry(msg.job).or_default();
        acct.comm_ns += transit;
        acct.messages += 1;
        acct.bytes += msg.size_bytes;
        self.push(at, EventKind::Deliver(msg));
        Ok(at)
    }

    pub fn set_timer(&mut self, node: WorkerId, at: SimTime, job: u64, payload: P) -> EventId {
        debug_assert!(at >= self.now, "timer in the past");
        self.push(at.max(self.now), EventKind::Timer { node, job, payload })
    }

    /// A cancelled event is dropped without advancing the clock.
    pub fn cancel(&mut self, id: EventId) {
        self.cancelled.insert(id.0);
    }

    pub fn charge_compute(&mut self, job: u64, ns: u64) {
        self.accounting.entry(job).or_default().compute_ns += ns;
    }

    pub fn charge_scheduling(&mut self, job: u64, ns: u64) {
        self.accounting.entry(job).or_default().scheduling_ns += ns;
    }

    pub fn accounting(&self, job: u64) -> Accounting {
        self.accounting.get(&job).copied().unwrap_or_default()
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<(), SimError> {
        match self.endpoints.get(&spec.worker) {
            None => Err(SimError::UnknownEndpoint(spec.worker)),
            Some(true) => Err(SimError::TrustedWorkerFault(spec.worker)),
            Some(false) if self.faults.contains_key(&spec.worker) => {
                Err(SimError::DuplicateFault(spec.worker))
            }
            Some(false) => {
                self.faults.insert(spec.worker, spec);
                Ok(())
            }
        }
    }

    pub fn fault(&self, worker: WorkerId) -> Option<&FaultSpec> {
        self.faults.get(&worker)
    }

    pub fn faults(&self) -> impl Iterator<Item = &FaultSpec> {
        self.faults.values()
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.deliveries
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn pop(&mut self) -> Option<Event<P>> {
        while let Some(Reverse(q)) = self.queue.pop() {
            if self.cancelled.remove(&q.seq) {
                continue;
            }
            self.now = q.time;
            if let EventKind::Deliver(m) = &q.kind {
                self.deliveries.push(DeliveryRecord {
                    src: m.src,
                    dst: m.dst,
                    kind: m.kind,
                    send_time: m.send_time,
                    deliver_time: q.time,
                    seq: q.seq,
                });
            }
            return Some(Event {
                id: EventId(q.seq),
                time: q.time,
                kind: q.kind,
            });
        }
        None
    }

    /// Processes events until the queue is empty.
    pub fn run_until_idle<H: Handler<P>>(
        &mut self,
        handler: &mut H,
    ) -> Result<RunSummary, H::Error> {
        while let Some(event) = self.pop() {
            handler.handle(self, event)?;
        }
        if let Some(what) = handler.unfinished() {
            return Err(SimError::Deadlock(what).into());
        }
        Ok(RunSummary {
            end_time: self.now,
            accounting: self.accounting.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Recorder {
        seen: Vec<(SimTime, u32)>,
        unfinished: bool,
    }

    impl Handler<u32> for Recorder {
        type Error = SimError;

        fn handle(&mut self, _sim: &mut Simulator<u32>, event: Event<u32>) -> Result<(), SimError> {
            let tag = match event.kind {
                EventKind::Deliver(m) => m.payload,
                EventKind::Timer { payload, .. } => payload,
            };
            self.seen.push((event.time, tag));
            Ok(())
        }

        fn unfinished(&self) -> Option<String> {
            self.unfinished.then(|| "job 1".to_string())
        }
    }

    fn msg(src: u32, dst: u32, size: u64, at: SimTime, tag: u32) -> Message<u32> {
        Message {
            src: WorkerId(src),
            dst: WorkerId(dst),
            kind: MessageKind::Activation,
            job: 1,
            size_bytes: size,
            send_time: at,
            payload: tag,
        }
    }

    fn sim(fixed_ns: u64, bandwidth: u64) -> Simulator<u32> {
        let mut s = Simulator::new(LatencyModel {
            bandwidth,
            per_message_fixed_ns: fixed_ns,
            sgx_scheduling_overhead_ns: 0,
        });
        for w in 0..3 {
            s.register(WorkerId(w), w == 0);
        }
        s
    }

    #[test]
    fn transit_formula() {
        let l = LatencyModel {
            bandwidth: 125_000_000,
            per_message_fixed_ns: 0,
            sgx_scheduling_overhead_ns: 0,
        };
        assert_eq!(l.transit(125_000_000), 1_000 * NANOS_PER_MS);
        let l = LatencyModel {
            per_message_fixed_ns: NANOS_PER_MS,
            ..l
        };
        assert_eq!(l.transit(0), NANOS_PER_MS);
        assert_eq!(
            LatencyModel::default().sgx_scheduling_overhead_ns,
            176_660_000
        );
    }

    #[test]
    fn empty_run_ends_at_zero() {
        let mut s = sim(0, 1);
        let mut r = Recorder {
            seen: vec![],
            unfinished: false,
        };
        assert_eq!(s.run_until_idle(&mut r).unwrap().end_time, 0);
    }

    #[test]
    fn same_tick_messages_keep_sequence_order() {
        let mut s = sim(NANOS_PER_MS, 1_000_000_000);
        s.send(msg(1, 2, 0, 0, 10)).unwrap();
        s.send(msg(2, 1, 0, 0, 11)).unwrap();
        s.set_timer(WorkerId(1), NANOS_PER_MS, 1, 12);
        let mut r = Recorder {
            seen: vec![],
            unfinished: false,
        };
        let summary = s.run_until_idle(&mut r).unwrap();
        assert_eq!(
            r.seen,
            vec![(NANOS_PER_MS, 10), (NANOS_PER_MS, 11), (NANOS_PER_MS, 12)]
        );
        assert_eq!(summary.end_time, NANOS_PER_MS);
        assert_eq!(summary.accounting[&1].comm_ns, 2 * NANOS_PER_MS);
    }

    #[test]
    fn fifo_holds_per_pair() {
        // A large message followed by a tiny one on the same pair.
        let mut s = sim(0, 1_000);
        let first = s.send(msg(1, 2, 1_000, 0, 1)).unwrap();
        let second = s.send(msg(1, 2, 1, 0, 2)).unwrap();
        assert_eq!(first, 1_000_000_000);
        assert_eq!(second, first);
        let mut r = Recorder {
            seen: vec![],
            unfinished: false,
        };
        s.run_until_idle(&mut r).unwrap();
        assert_eq!(r.seen.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn cancelled_timers_do_not_advance_clock() {
        let mut s = sim(0, 1);
        let id = s.set_timer(WorkerId(1), 500, 1, 1);
        s.set_timer(WorkerId(1), 100, 1, 2);
        s.cancel(id);
        let mut r = Recorder {
            seen: vec![],
            unfinished: false,
        };
        assert_eq!(s.run_until_idle(&mut r).unwrap().end_time, 100);
    }

    #[test]
    fn deadlock_and_endpoint_errors() {
        let mut s = sim(0, 1);
        let mut r = Recorder {
            seen: vec![],
            unfinished: true,
        };
        assert!(matches!(
            s.run_until_idle(&mut r),
            Err(SimError::Deadlock(_))
        ));
        assert_eq!(
            s.send(msg(1, 9, 0, 0, 0)).unwrap_err(),
            SimError::UnknownEndpoint(WorkerId(9))
        );
    }

    #[test]
    fn fault_injection_rules() {
        let mut s = sim(0, 1);
        let spec = |w| FaultSpec {
            worker: WorkerId(w),
            kind: FaultKind::Crash,
            epoch: 0,
            step: 0,
        };
        assert_eq!(
            s.inject_fault(spec(0)),
            Err(SimError::TrustedWorkerFault(WorkerId(0)))
        );
        assert_eq!(
            s.inject_fault(spec(7)),
            Err(SimError::UnknownEndpoint(WorkerId(7)))
        );
        s.inject_fault(spec(1)).unwrap();
        assert_eq!(
            s.inject_fault(spec(1)),
            Err(SimError::DuplicateFault(WorkerId(1)))
        );
        assert_eq!(s.fault(WorkerId(1)).unwrap().trigger(), (0, 0));
    }
}
