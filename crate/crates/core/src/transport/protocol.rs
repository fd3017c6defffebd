//! Messages exchanged between the master and the workers, and between
//! workers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dense::Matrix;
use crate::error::Fault;
use crate::grid::{Coord, ObjectLayout};

/// Phase labels carried in a [`Tag`]. The low 8 bits hold the kind, the
/// upper 24 bits an optional step index (the elimination step a partial
/// product belongs to).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phase(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PhaseKind {
    /// A block of an operand, exposed unchanged.
    Input = 1,
    /// A finished block of a Cholesky factor.
    Factor = 2,
    /// A finished block of a solve result.
    Solved = 3,
    /// A partial product destined for a single consumer.
    Partial = 4,
}

impl Phase {
    pub fn new(kind: PhaseKind, step: usize) -> Self {
        debug_assert!(step < (1 << 24));
        Phase(kind as u32 | ((step as u32) << 8))
    }

    pub fn kind_bits(&self) -> u8 {
        (self.0 & 0xff) as u8
    }

    pub fn step(&self) -> usize {
        (self.0 >> 8) as usize
    }
}

/// Identifies one exposed block: object name, phase, 0-based block indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub name: String,
    pub phase: Phase,
    pub i: u32,
    pub j: u32,
}

impl Tag {
    pub fn new(name: &str, phase: Phase, i: usize, j: usize) -> Self {
        Tag { name: name.to_owned(), phase, i: i as u32, j: j as u32 }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{:x}({},{})", self.name, self.phase.0, self.i, self.j)
    }
}

/// A point-to-point data message. `clock` is the sender's logical clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub tag: Tag,
    pub clock: u64,
    pub payload: Vec<f64>,
}

/// Opaque auxiliary data handed to entrywise generators: named arrays and
/// named scalars.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub arrays: BTreeMap<String, Matrix>,
    pub scalars: BTreeMap<String, f64>,
}

impl Inputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_array(mut self, name: &str, m: Matrix) -> Self {
        self.arrays.insert(name.to_owned(), m);
        self
    }

    pub fn with_scalar(mut self, name: &str, v: f64) -> Self {
        self.scalars.insert(name.to_owned(), v);
        self
    }

    pub fn array(&self, name: &str) -> Option<&Matrix> {
        self.arrays.get(name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }
}

/// One block of a distributed object, 0-based block indices, column-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockData {
    pub i: usize,
    pub j: usize,
    pub data: Vec<f64>,
}

/// The piece of a distributed object resident on one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPiece {
    pub layout: ObjectLayout,
    pub blocks: Vec<BlockData>,
}

/// Runtime metadata every worker keeps under [`GRID_OBJECT`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeMeta {
    pub rank: usize,
    pub coord: Coord,
    pub grid_order: usize,
    pub process_count: usize,
    pub seed: u64,
}

/// Name of the runtime metadata object present on every worker.
pub const GRID_OBJECT: &str = ".grid";

/// A value held in a worker's object store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StoreValue {
    Numbers(Vec<f64>),
    Inputs(Inputs),
    Piece(LocalPiece),
    Meta(RuntimeMeta),
}

impl StoreValue {
    pub fn as_numbers(&self) -> Option<&[f64]> {
        match self {
            StoreValue::Numbers(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `L x = b`
    Forward,
    /// `L^T x = b`
    Back,
}

/// Distributed kernels the master can start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Construct { name: String, layout: ObjectLayout, generator: String, params: Vec<f64>, inputs: Option<String> },
    Rnorm { name: String, layout: ObjectLayout, zero: bool },
    Cholesky { input: String, output: String },
    Solve { factor: String, rhs: String, output: String, side: Side },
    MultChol { factor: String, x: String, output: String },
    CrossprodMatVec { v: String, u: String, output: String },
    CrossprodSelf { v: String, output: String },
    CrossprodSelfDiag { v: String, output: String },
    LogDet { factor: String },
    SumSquares { name: String },
    Apply { func: String, inputs: Vec<String>, output: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitInfo {
    pub rank: usize,
    pub grid_order: usize,
    pub seed: u64,
    pub event_log: bool,
    /// Peer server addresses, indexed by rank - 1 (socket backend only).
    pub peers: Vec<String>,
    /// Wall-clock origin of event timestamps, nanoseconds since the epoch.
    pub start_unix_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    Init(InitInfo),
    Push { name: String, value: StoreValue },
    Pull { name: String },
    Ls,
    Rm { name: String },
    Put { name: String, piece: LocalPiece },
    Collect { name: String },
    CollectDiagonal { name: String },
    Kernel(Kernel),
    Normals { count: usize },
    SetEventLog(bool),
    TakeEvents,
    Shutdown,
}

/// A command stamped with the collective sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub epoch: u64,
    pub command: Command,
}

/// Peak memory figures a worker reports after a Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CholStats {
    pub rank: usize,
    pub coord: Coord,
    /// Blocks of the factor owned by this worker.
    pub owned_blocks: usize,
    /// Largest number of blocks simultaneously resident (owned plus
    /// received temporaries).
    pub peak_resident: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reply {
    Ack,
    Hello { rank: usize, peer_addr: String },
    Value(StoreValue),
    Names(Vec<String>),
    Piece(LocalPiece),
    Diagonal(Vec<(usize, Vec<f64>)>),
    Scalar(f64),
    Numbers(Vec<f64>),
    Events(Vec<super::events::Event>),
    Chol(CholStats),
}

pub type WorkerResult = Result<Reply, Fault>;
