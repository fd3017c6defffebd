//! The worker side of the runtime, shared by both backends.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use super::events::{EventLog, EventOp};
use super::exchange::{Exchange, ExchangeError};
use super::protocol::*;
use crate::error::Fault;
use crate::grid::{Coord, ObjectKind, ObjectLayout, ProcessGrid};
use crate::registry::Registry;
use crate::rng::{StreamFamily, WorkerStreams};

/// How a worker reaches the exchanges of its peers.
pub(crate) trait PeerLink: Send {
    /// Requests `tag` from `owner` and blocks until it is delivered.
    fn fetch(&mut self, me: usize, owner: usize, epoch: u64, tag: &Tag) -> Result<Message, Fault>;
}

/// Distributed-object piece resident on a worker. Finished blocks are shared
/// with the exchange so exposing them costs no copy.
#[derive(Debug, Clone)]
pub(crate) struct DistLocal {
    pub layout: ObjectLayout,
    pub blocks: BTreeMap<(usize, usize), Arc<Vec<f64>>>,
}

impl DistLocal {
    pub fn to_piece(&self) -> LocalPiece {
        LocalPiece {
            layout: self.layout,
            blocks: self
                .blocks
                .iter()
                .map(|(&(i, j), d)| BlockData { i, j, data: d.as_ref().clone() })
                .collect(),
        }
    }

    pub fn from_piece(piece: LocalPiece) -> Self {
        DistLocal {
            layout: piece.layout,
            blocks: piece.blocks.into_iter().map(|b| ((b.i, b.j), Arc::new(b.data))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Entry {
    Value(StoreValue),
    Dist(DistLocal),
}

pub(crate) struct Worker {
    pub rank: usize,
    pub coord: Coord,
    pub grid: ProcessGrid,
    pub store: BTreeMap<String, Entry>,
    pub streams: WorkerStreams,
    pub events: EventLog,
    pub registry: Arc<Registry>,
    pub exchange: Arc<Exchange>,
    link: Box<dyn PeerLink>,
    pub clock: u64,
    pub epoch: u64,
}

impl Worker {
    pub fn new(info: &InitInfo, registry: Arc<Registry>, exchange: Arc<Exchange>, link: Box<dyn PeerLink>) -> Self {
        let grid = ProcessGrid::with_order(info.grid_order).expect("grid order validated by the master");
        let coord = grid.rank_to_coord(info.rank).expect("rank validated by the master");
        let mut store = BTreeMap::new();
        store.insert(
            GRID_OBJECT.to_owned(),
            Entry::Value(StoreValue::Meta(RuntimeMeta {
                rank: info.rank,
                coord,
                grid_order: info.grid_order,
                process_count: grid.process_count(),
                seed: info.seed,
            })),
        );
        Worker {
            rank: info.rank,
            coord,
            grid,
            store,
            streams: WorkerStreams::initialized(StreamFamily::new(info.seed), info.rank),
            events: EventLog::new(info.rank, info.event_log, info.start_unix_ns),
            registry,
            exchange,
            link,
            clock: 0,
            epoch: 0,
        }
    }

    /// Executes one command. Any failure marks this worker's exchange as
    /// failed so peers blocked on it abort instead of waiting forever.
    pub fn handle(&mut self, env: Envelope) -> WorkerResult {
        self.epoch = env.epoch;
        self.exchange.begin(env.epoch);
        let result = match catch_unwind(AssertUnwindSafe(|| self.dispatch(env.command))) {
            Ok(r) => r,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown panic".into());
                Err(Fault::Panicked(msg))
            }
        };
        if result.is_err() {
            self.exchange.fail(self.epoch);
        }
        result
    }

    fn dispatch(&mut self, cmd: Command) -> WorkerResult {
        match cmd {
            Command::Init(_) => Err(Fault::Protocol("worker already initialized".into())),
            Command::Push { name, value } => {
                self.store.insert(name, Entry::Value(value));
                Ok(Reply::Ack)
            }
            Command::Pull { name } => match self.store.get(&name) {
                Some(Entry::Value(v)) => Ok(Reply::Value(v.clone())),
                Some(Entry::Dist(d)) => Ok(Reply::Value(StoreValue::Piece(d.to_piece()))),
                None => Err(Fault::NoSuchObject(name)),
            },
            Command::Ls => Ok(Reply::Names(self.store.keys().cloned().collect())),
            Command::Rm { name } => {
                self.store.remove(&name);
                Ok(Reply::Ack)
            }
            Command::Put { name, piece } => {
                self.store.insert(name, Entry::Dist(DistLocal::from_piece(piece)));
                Ok(Reply::Ack)
            }
            Command::Collect { name } => Ok(Reply::Piece(self.dist(&name)?.to_piece())),
            Command::CollectDiagonal { name } => self.collect_diagonal(&name),
            Command::Kernel(k) => self.run_kernel(k),
            Command::Normals { count } => self
                .streams
                .worker_standard_normals(count)
                .map(Reply::Numbers)
                .map_err(|_| Fault::StreamsUninitialized),
            Command::SetEventLog(on) => {
                self.events.set_enabled(on);
                Ok(Reply::Ack)
            }
            Command::TakeEvents => Ok(Reply::Events(self.events.take())),
            Command::Shutdown => Ok(Reply::Ack),
        }
    }

    fn collect_diagonal(&self, name: &str) -> WorkerResult {
        let d = self.dist(name)?;
        if d.layout.kind != ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch(format!("`{name}` is not triangular")));
        }
        let bs = d.layout.rows.block_size();
        let out = d
            .blocks
            .iter()
            .filter(|((i, j), _)| i == j)
            .map(|(&(i, _), blk)| (i, (0..bs).map(|r| blk[r + r * bs]).collect()))
            .collect();
        Ok(Reply::Diagonal(out))
    }

    pub fn dist(&self, name: &str) -> Result<&DistLocal, Fault> {
        match self.store.get(name) {
            Some(Entry::Dist(d)) => Ok(d),
            Some(Entry::Value(_)) => Err(Fault::DimensionMismatch(format!("`{name}` is not a distributed object"))),
            None => Err(Fault::NoSuchObject(name.to_owned())),
        }
    }

    pub fn inputs(&self, name: &str) -> Result<&Inputs, Fault> {
        match self.store.get(name) {
            Some(Entry::Value(StoreValue::Inputs(i))) => Ok(i),
            Some(_) => Err(Fault::DimensionMismatch(format!("`{name}` does not hold generator inputs"))),
            None => Err(Fault::NoSuchObject(name.to_owned())),
        }
    }

    pub fn rank_of(&self, c: Coord) -> usize {
        self.grid.rank_of(c)
    }

    /// Fetches an exposed block from the worker at `owner`. A block this
    /// worker exposed itself is handed back without a copy.
    pub fn fetch(&mut self, owner: Coord, tag: &Tag) -> Result<Fetched, Fault> {
        let owner_rank = self.rank_of(owner);
        if owner_rank == self.rank {
            let (data, _) = self.exchange.take(self.epoch, tag).map_err(|e| match e {
                ExchangeError::Aborted => Fault::PeerAborted { peer: self.rank },
                ExchangeError::Stale => Fault::Protocol(format!("stale self-fetch of {tag}")),
            })?;
            return Ok(Fetched { data, remote: false });
        }
        let msg = self.link.fetch(self.rank, owner_rank, self.epoch, tag)?;
        debug_assert_eq!(msg.tag, *tag);
        self.clock = self.clock.max(msg.clock) + 1;
        Ok(Fetched { data: Arc::new(msg.payload), remote: true })
    }

    /// Exposes a block to peers for the rest of this collective, or for
    /// `consumers` fetches.
    pub fn publish(&mut self, tag: Tag, data: Arc<Vec<f64>>, consumers: Option<usize>) {
        self.clock += 1;
        self.exchange.publish(self.epoch, tag, data, self.clock, consumers);
    }

    /// Logs a block operation with 0-based block indices.
    pub fn record(&mut self, op: EventOp, i: usize, j: usize, k: usize) {
        self.clock += 1;
        self.events.record(self.clock, op, i + 1, j + 1, k + 1);
    }
}

/// A fetched block and whether it is a new buffer on this worker.
pub(crate) struct Fetched {
    pub data: Arc<Vec<f64>>,
    pub remote: bool,
}
