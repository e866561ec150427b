//! Discrete-event engine: virtual clock, ordered event queue, and keyed
//! deterministic RNG streams.
//!
//! Events fire in `(fire_time, sequence)` order, where `sequence` is a
//! per-run insertion counter. Handlers may schedule further events,
//! including at the current instant; those run in the same pass after all
//! previously queued same-instant events.

mod rng;
mod time;

pub use rng::RngStream;
pub use time::SimTime;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

/// How many events may fire at a single instant before the run is aborted.
/// Guards against accidental zero-delay scheduling loops.
pub const INSTANT_EVENT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("cannot schedule event at {at} in the past (clock is {now})")]
    PastEvent { at: SimTime, now: SimTime },
    #[error("more than {budget} events fired at instant {at}; aborting (zero-delay loop?)")]
    InstantOverflow { at: SimTime, budget: u64 },
    #[error("rng draw with zero bound")]
    ZeroBound,
}

/// Identifier of a scheduled event; equals its insertion sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

struct Queued<A> {
    at: SimTime,
    seq: u64,
    action: A,
}

// BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
impl<A> Ord for Queued<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}
impl<A> PartialOrd for Queued<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> PartialEq for Queued<A> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<A> Eq for Queued<A> {}

/// Receives events as the scheduler dispatches them. The handler may
/// schedule new events through the scheduler it is given.
pub trait Handler<A> {
    fn handle(&mut self, sched: &mut Scheduler<A>, now: SimTime, action: A);
}

impl<A, F: FnMut(&mut Scheduler<A>, SimTime, A)> Handler<A> for F {
    fn handle(&mut self, sched: &mut Scheduler<A>, now: SimTime, action: A) {
        self(sched, now, action)
    }
}

/// Event queue plus virtual clock. The clock only moves inside
/// [`Scheduler::run_until`] and never goes backwards.
pub struct Scheduler<A> {
    clock: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Queued<A>>,
    instant_budget: u64,
}

impl<A> Default for Scheduler<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> Scheduler<A> {
    pub fn new() -> Self {
        Scheduler {
            clock: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            instant_budget: INSTANT_EVENT_BUDGET,
        }
    }

    /// Current virtual time.
    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    /// Enqueue `action` to fire at `at`. Events scheduled for the same
    /// instant dequeue in scheduling order.
    pub fn schedule(&mut self, at: SimTime, action: A) -> Result<EventId, EngineError> {
        if at < self.clock {
            return Err(EngineError::PastEvent {
                at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued { at, seq, action });
        Ok(EventId(seq))
    }

    /// Schedule relative to the current clock.
    pub fn schedule_in(&mut self, delay: SimTime, action: A) -> Result<EventId, EngineError> {
        self.schedule(self.clock + delay, action)
    }

    /// Process every event with `fire_time <= end` in `(fire_time, sequence)`
    /// order, then advance the clock to `end`. Returns the number of events
    /// processed.
    pub fn run_until<H: Handler<A>>(
        &mut self,
        end: SimTime,
        world: &mut H,
    ) -> Result<u64, EngineError> {
        let mut processed = 0u64;
        let mut instant = self.clock;
        let mut at_instant = 0u64;
        while let Some(head) = self.heap.peek() {
            if head.at > end {
                break;
            }
            let ev = self.heap.pop().expect("peeked");
            debug_assert!(ev.at >= self.clock, "event queue went backwards");
            if ev.at == instant {
                at_instant += 1;
                if at_instant > self.instant_budget {
                    return Err(EngineError::InstantOverflow {
                        at: instant,
                        budget: self.instant_budget,
                    });
                }
            } else {
                instant = ev.at;
                at_instant = 1;
            }
            self.clock = ev.at;
            world.handle(self, ev.at, ev.action);
            processed += 1;
        }
        self.clock = end;
        Ok(processed)
    }

    #[cfg(test)]
    fn with_instant_budget(budget: u64) -> Self {
        Scheduler {
            instant_budget: budget,
            ..Scheduler::new()
        }
    }
}
