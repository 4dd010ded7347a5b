//! Time-ordered event queue and fixed-point simulation time.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

/// Simulation time in whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Micros(pub u64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    /// Rounds to the nearest microsecond; negative inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        Micros((secs * 1e6).round().max(0.0) as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_add(self, other: Micros) -> Micros {
        Micros(self.0.saturating_add(other.0))
    }
}

impl std::ops::Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

struct Entry<T, P> {
    time: T,
    seq: u64,
    payload: P,
}

impl<T: Ord, P> PartialEq for Entry<T, P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<T: Ord, P> Eq for Entry<T, P> {}

impl<T: Ord, P> PartialOrd for Entry<T, P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Ord, P> Ord for Entry<T, P> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue on `(time, insertion sequence)`: equal-time events pop FIFO.
pub struct EventQueue<T, P> {
    heap: BinaryHeap<Entry<T, P>>,
    next_seq: u64,
}

impl<T: Ord + Copy, P> Default for EventQueue<T, P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Ord + Copy, P> EventQueue<T, P> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }

    /// Schedule `payload` at `time`; returns its sequence number.
    pub fn push(&mut self, time: T, payload: P) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, payload });
        seq
    }

    pub fn pop(&mut self) -> Option<(T, P)> {
        self.heap.pop().map(|e| (e.time, e.payload))
    }

    pub fn peek_time(&self) -> Option<T> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
