//! Virtual clock and ordered event queue.

use std::collections::BTreeMap;

use thiserror::Error;

use super::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    PastEvent { at: SimTime, now: SimTime },
}

/// Cancellation token returned by [`Kernel::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    fire_at: SimTime,
    sequence: u64,
}

impl EventHandle {
    pub fn fire_at(&self) -> SimTime {
        self.fire_at
    }
}

/// A fired event. Events are totally ordered by `(fire_at, sequence)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<K> {
    pub fire_at: SimTime,
    pub sequence: u64,
    pub kind: K,
}

/// Discrete-event core: a clock plus a queue keyed by `(time, sequence)`.
///
/// Sequence numbers are handed out at scheduling time and never reused, so two
/// events for the same instant fire in the order they were scheduled.
#[derive(Debug)]
pub struct Kernel<K> {
    now: SimTime,
    next_sequence: u64,
    queue: BTreeMap<(SimTime, u64), K>,
}

impl<K> Default for Kernel<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Kernel<K> {
    pub fn new() -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_sequence: 0,
            queue: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, kind: K) -> Result<EventHandle, KernelError> {
        if fire_at < self.now {
            return Err(KernelError::PastEvent {
                at: fire_at,
                now: self.now,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.insert((fire_at, sequence), kind);
        Ok(EventHandle { fire_at, sequence })
    }

    /// Schedules relative to the current clock; never fails.
    pub fn schedule_in(&mut self, delay: super::time::SimDuration, kind: K) -> EventHandle {
        self.schedule(self.now + delay, kind)
            .expect("now + delay is never in the past")
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue
            .remove(&(handle.fire_at, handle.sequence))
            .is_some()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Pops the earliest event if it fires no later than `until`, moving the
    /// clock to its firing time.
    pub fn pop_due(&mut self, until: SimTime) -> Option<SimEvent<K>> {
        let (&(fire_at, sequence), _) = self.queue.iter().next()?;
        if fire_at > until {
            return None;
        }
        let kind = self.queue.remove(&(fire_at, sequence))?;
        self.now = fire_at;
        Some(SimEvent {
            fire_at,
            sequence,
            kind,
        })
    }

    /// Moves the clock forward without firing anything. Earlier targets are ignored.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Fires every event with `fire_at <= t_end` in order, then sets the clock
    /// to `t_end`. The handler may schedule or cancel further events.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, SimEvent<K>),
    {
        let mut fired = 0;
        while let Some(ev) = self.pop_due(t_end) {
            handler(self, ev);
            fired += 1;
        }
        self.advance_to(t_end);
        fired
    }
}
