//! Per-block operation log, recorded only when the cluster runs with the
//! event log enabled.
//!
//! One line per block operation:
//!
//! ```text
//! <wall_ns> <seq> <rank> <op> <I> <J> <K>
//! ```
//!
//! `wall_ns` is nanoseconds since cluster start, `seq` a logical clock that
//! respects causality across workers (a block's consumer always logs a larger
//! `seq` than its producer), `I J K` are 1-based block indices (`K` is the
//! elimination step for updates and partial products, 0 when meaningless).

use std::fmt;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventOp {
    Construct,
    Rnorm,
    Factor,
    Solve,
    Update,
    VecSolve,
    Partial,
    Reduce,
    Crossprod,
    LogDet,
    SumSquares,
    Apply,
}

impl EventOp {
    pub fn label(&self) -> &'static str {
        match self {
            EventOp::Construct => "construct",
            EventOp::Rnorm => "rnorm",
            EventOp::Factor => "factor",
            EventOp::Solve => "solve",
            EventOp::Update => "update",
            EventOp::VecSolve => "vsolve",
            EventOp::Partial => "partial",
            EventOp::Reduce => "reduce",
            EventOp::Crossprod => "crossprod",
            EventOp::LogDet => "logdet",
            EventOp::SumSquares => "sumsq",
            EventOp::Apply => "apply",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub wall_ns: u64,
    pub seq: u64,
    pub rank: usize,
    pub op: EventOp,
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {} {}", self.wall_ns, self.seq, self.rank, self.op.label(), self.i, self.j, self.k)
    }
}

pub(crate) fn unix_ns() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
}

/// Worker-side recorder.
#[derive(Debug)]
pub(crate) struct EventLog {
    rank: usize,
    enabled: bool,
    // Monotonic anchor so timestamps never run backwards within a worker.
    anchor: Instant,
    anchor_offset_ns: u64,
    events: Vec<Event>,
}

impl EventLog {
    pub fn new(rank: usize, enabled: bool, start_unix_ns: u64) -> Self {
        let anchor = Instant::now();
        let anchor_offset_ns = unix_ns().saturating_sub(start_unix_ns);
        EventLog { rank, enabled, anchor, anchor_offset_ns, events: Vec::new() }
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    pub fn record(&mut self, seq: u64, op: EventOp, i: usize, j: usize, k: usize) {
        if !self.enabled {
            return;
        }
        let wall_ns = self.anchor_offset_ns + self.anchor.elapsed().as_nanos() as u64;
        self.events.push(Event { wall_ns, seq, rank: self.rank, op, i, j, k });
    }

    pub fn take(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }
}
