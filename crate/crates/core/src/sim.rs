//! Deterministic discrete-event core.
//!
//! A [`Scheduler`] owns the virtual clock, a priority queue of pending
//! events and the run's [`SimLog`]. Events are ordered by `(at, seq)`, so two
//! events scheduled for the same instant are delivered in insertion order.
//! Nothing here reads the wall clock; a run is a pure function of its inputs
//! and the RNG seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Microseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VirtualTime(u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub const fn from_micros(micros: u64) -> Self {
        VirtualTime(micros)
    }

    pub const fn from_millis(millis: u64) -> Self {
        VirtualTime(millis * 1_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        VirtualTime(secs * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, earlier: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_sub(earlier.0))
    }
}

impl std::ops::Add for VirtualTime {
    type Output = VirtualTime;

    fn add(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 + rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Name of a simulated component; used as event target and log column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId(pub &'static str);

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<P> {
    pub at: VirtualTime,
    pub target: ComponentId,
    pub payload: P,
    /// Insertion order, assigned by the scheduler.
    pub seq: u64,
}

impl<P> Event<P> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.at == other.0.at && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub at: VirtualTime,
    pub component: ComponentId,
    pub kind: String,
    pub detail: String,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {} {}", self.at, self.component, self.kind)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Ordered record of everything that happened during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimLog {
    entries: Vec<LogEntry>,
}

impl SimLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        at: VirtualTime,
        component: ComponentId,
        kind: impl Into<String>,
        detail: impl Into<String>,
    ) {
        debug_assert!(self.entries.last().is_none_or(|e| e.at <= at));
        self.entries.push(LogEntry {
            at,
            component,
            kind: kind.into(),
            detail: detail.into(),
        });
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose event kind equals `kind`.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogEntry> + 'a {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn first_of_kind(&self, kind: &str) -> Option<&LogEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    /// One line per entry: `t=<micros> <component> <event-kind> <detail>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&entry.to_string());
            out.push('\n');
        }
        out
    }
}

/// Current time plus the log, handed to component state machines.
pub struct Ctx<'a> {
    pub now: VirtualTime,
    log: &'a mut SimLog,
}

impl<'a> Ctx<'a> {
    pub fn new(now: VirtualTime, log: &'a mut SimLog) -> Self {
        Self { now, log }
    }

    pub fn log(&mut self, component: ComponentId, kind: impl Into<String>, detail: impl Into<String>) {
        self.log.record(self.now, component, kind, detail);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLimit {
    Deadline(VirtualTime),
    Quiescent,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("causality violation: event at t={at} scheduled when now is t={now}")]
    Causality { at: VirtualTime, now: VirtualTime },
}

/// Receives events popped off the queue.
pub trait Handler<P> {
    fn handle(&mut self, event: Event<P>, sched: &mut Scheduler<P>);
}

impl<P, F> Handler<P> for F
where
    F: FnMut(Event<P>, &mut Scheduler<P>),
{
    fn handle(&mut self, event: Event<P>, sched: &mut Scheduler<P>) {
        self(event, sched)
    }
}

pub struct Scheduler<P> {
    now: VirtualTime,
    next_seq: u64,
    queue: BinaryHeap<Queued<P>>,
    delivered: u64,
    log: SimLog,
    rng: ChaCha8Rng,
}

impl<P> Scheduler<P> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: VirtualTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            delivered: 0,
            log: SimLog::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn schedule(
        &mut self,
        at: VirtualTime,
        target: ComponentId,
        payload: P,
    ) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::Causality { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            at,
            target,
            payload,
            seq,
        }));
        Ok(EventId(seq))
    }

    /// Schedules `delay` after now; cannot violate causality.
    pub fn schedule_in(&mut self, delay: VirtualTime, target: ComponentId, payload: P) -> EventId {
        let at = self.now + delay;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    pub fn log(&mut self, component: ComponentId, kind: impl Into<String>, detail: impl Into<String>) {
        let now = self.now;
        self.log.record(now, component, kind, detail);
    }

    pub fn ctx(&mut self) -> Ctx<'_> {
        Ctx::new(self.now, &mut self.log)
    }

    pub fn sim_log(&self) -> &SimLog {
        &self.log
    }

    pub fn sim_log_mut(&mut self) -> &mut SimLog {
        &mut self.log
    }

    pub fn into_log(self) -> SimLog {
        self.log
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Processes every event with `at <= deadline` (or all events, for
    /// [`RunLimit::Quiescent`]). If events remain beyond the deadline the
    /// clock stops at the deadline; otherwise it rests at the last event.
    pub fn run_until<H: Handler<P>>(&mut self, limit: RunLimit, handler: &mut H) -> &SimLog {
        loop {
            let due = match (self.queue.peek(), limit) {
                (None, _) => false,
                (Some(_), RunLimit::Quiescent) => true,
                (Some(Queued(ev)), RunLimit::Deadline(d)) => ev.at <= d,
            };
            if !due {
                break;
            }
            let Queued(event) = self.queue.pop().expect("peeked");
            self.now = event.at;
            self.delivered += 1;
            handler.handle(event, self);
        }
        if let RunLimit::Deadline(d) = limit {
            if !self.queue.is_empty() && d > self.now {
                self.now = d;
            }
        }
        &self.log
    }
}
