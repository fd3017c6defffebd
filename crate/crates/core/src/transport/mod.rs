//! The worker runtime: a master-side [`Cluster`] handle driving P workers,
//! each with a private named object store.
//!
//! The master issues one command batch at a time and waits for every
//! addressed worker to answer. During a distributed kernel the workers
//! exchange blocks among themselves: a producer exposes a finished block
//! under a [`Tag`](protocol::Tag) and consumers fetch it from the owner.
//! The in-process backend runs workers on threads and deep-copies every
//! fetched payload; the socket backend runs them as child processes.

pub mod events;
pub(crate) mod exchange;
mod inproc;
pub mod protocol;
mod socket;
pub mod wire;
pub(crate) mod worker;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Fault, Result};
use crate::grid::{ObjectLayout, ProcessGrid};
use crate::registry::Registry;
use events::Event;
use protocol::{CholStats, Command, Envelope, Reply, StoreValue, WorkerResult};

pub use socket::run_socket_worker;

/// Where the workers run.
#[derive(Debug, Clone, Default)]
pub enum Backend {
    /// One thread per worker inside the current process.
    #[default]
    InProcess,
    /// One child process per worker, talking over TCP on the loopback
    /// interface.
    Socket(SocketConfig),
}

/// How to launch socket workers. Each worker is started as
/// `<program> <args...> worker --master <addr> --rank <r>`.
#[derive(Debug, Clone)]
pub struct SocketConfig {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// How long to wait for all workers to connect back.
    pub startup_timeout: Duration,
}

impl SocketConfig {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        SocketConfig { program: program.into(), args: Vec::new(), startup_timeout: Duration::from_secs(30) }
    }

    /// Launches workers from the running executable, which must understand
    /// the `worker` subcommand (the `distgp` binary does).
    pub fn current_exe() -> Result<Self> {
        let exe = std::env::current_exe().map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(Self::new(exe))
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub processes: usize,
    pub backend: Backend,
    pub seed: u64,
    /// Record per-block operations from the start.
    pub event_log: bool,
    /// Functions and generators available to workers. Defaults to
    /// [`Registry::builtin`]. Only the in-process backend accepts a custom one.
    pub registry: Option<Registry>,
}

impl ClusterOptions {
    pub fn new(processes: usize, seed: u64) -> Self {
        ClusterOptions { processes, backend: Backend::InProcess, seed, event_log: false, registry: None }
    }

    pub fn backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn event_log(mut self, on: bool) -> Self {
        self.event_log = on;
        self
    }

    pub fn registry(mut self, registry: Registry) -> Self {
        self.registry = Some(registry);
        self
    }
}

/// Which workers a command addresses (1-based ranks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    All,
    Ranks(Vec<usize>),
}

impl From<usize> for Targets {
    fn from(rank: usize) -> Self {
        Targets::Ranks(vec![rank])
    }
}

pub(crate) trait BackendHandle: Send {
    /// Delivers each envelope to its worker and returns the answers in the
    /// same order.
    fn dispatch(&mut self, batch: Vec<(usize, Envelope)>) -> Result<Vec<(usize, WorkerResult)>>;
    fn shutdown(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Running,
    Down,
}

/// Master-side handle of a running set of workers.
pub struct Cluster {
    grid: ProcessGrid,
    seed: u64,
    backend: Box<dyn BackendHandle>,
    epoch: u64,
    state: State,
    catalog: HashMap<String, ObjectLayout>,
    kernel_launches: u64,
    last_cholesky: Vec<CholStats>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("processes", &self.grid.process_count())
            .field("seed", &self.seed)
            .field("state", &self.state)
            .finish()
    }
}

impl Cluster {
    pub fn spawn(options: ClusterOptions) -> Result<Self> {
        let grid = ProcessGrid::from_process_count(options.processes)?;
        let backend: Box<dyn BackendHandle> = match &options.backend {
            Backend::InProcess => {
                let registry = Arc::new(options.registry.clone().unwrap_or_else(Registry::builtin));
                Box::new(inproc::InProcBackend::spawn(grid, options.seed, options.event_log, registry)?)
            }
            Backend::Socket(cfg) => {
                if options.registry.is_some() {
                    return Err(Error::BackendUnavailable(
                        "custom registries require the in-process backend".into(),
                    ));
                }
                Box::new(socket::SocketBackend::spawn(grid, options.seed, options.event_log, cfg)?)
            }
        };
        Ok(Cluster {
            grid,
            seed: options.seed,
            backend,
            epoch: 0,
            state: State::Running,
            catalog: HashMap::new(),
            kernel_launches: 0,
            last_cholesky: Vec::new(),
        })
    }

    /// Shorthand for an in-process cluster with the built-in registry.
    pub fn in_process(processes: usize, seed: u64) -> Result<Self> {
        Self::spawn(ClusterOptions::new(processes, seed))
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    pub fn process_count(&self) -> usize {
        self.grid.process_count()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_running(&self) -> bool {
        self.state == State::Running
    }

    /// Number of distributed kernels launched so far.
    pub fn kernel_launches(&self) -> u64 {
        self.kernel_launches
    }

    /// Per-worker memory figures of the most recent Cholesky factorization,
    /// indexed by rank - 1.
    pub fn last_cholesky_stats(&self) -> &[CholStats] {
        &self.last_cholesky
    }

    fn ranks(&self, targets: &Targets) -> Result<Vec<usize>> {
        match targets {
            Targets::All => Ok((1..=self.grid.process_count()).collect()),
            Targets::Ranks(r) => {
                for &rank in r {
                    self.grid.rank_to_coord(rank)?;
                }
                Ok(r.clone())
            }
        }
    }

    /// Sends one batch and resolves the answers. A failing batch reports
    /// the lowest-ranked worker whose fault is not a mere reaction to
    /// another worker's failure.
    pub(crate) fn run(&mut self, batch: Vec<(usize, Command)>) -> Result<Vec<(usize, Reply)>> {
        if self.state != State::Running {
            return Err(Error::ClusterDown);
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let batch = batch.into_iter().map(|(r, command)| (r, Envelope { epoch, command })).collect();
        let results = match self.backend.dispatch(batch) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, Error::WorkerLost { .. } | Error::Transport(_)) {
                    self.state = State::Down;
                    let _ = self.backend.shutdown();
                }
                return Err(e);
            }
        };
        let mut root: Option<(usize, Fault)> = None;
        let mut echo: Option<(usize, Fault)> = None;
        let mut out = Vec::with_capacity(results.len());
        for (rank, r) in results {
            match r {
                Ok(reply) => out.push((rank, reply)),
                Err(f @ Fault::PeerAborted { .. }) => {
                    if echo.as_ref().is_none_or(|(r0, _)| rank < *r0) {
                        echo = Some((rank, f));
                    }
                }
                Err(f) => {
                    if root.as_ref().is_none_or(|(r0, _)| rank < *r0) {
                        root = Some((rank, f));
                    }
                }
            }
        }
        if let Some((rank, fault)) = root.or(echo) {
            return Err(Error::Worker { rank, fault });
        }
        Ok(out)
    }

    pub(crate) fn run_all(&mut self, command: Command) -> Result<Vec<Reply>> {
        let batch = (1..=self.grid.process_count()).map(|r| (r, command.clone())).collect();
        Ok(self.run(batch)?.into_iter().map(|(_, reply)| reply).collect())
    }

    pub(crate) fn run_one(&mut self, rank: usize, command: Command) -> Result<Reply> {
        self.grid.rank_to_coord(rank)?;
        Ok(self.run(vec![(rank, command)])?.pop().expect("one reply per command").1)
    }

    pub(crate) fn run_kernel(&mut self, kernel: protocol::Kernel) -> Result<Vec<Reply>> {
        self.kernel_launches += 1;
        self.run_all(Command::Kernel(kernel))
    }

    pub(crate) fn register(&mut self, name: &str, layout: ObjectLayout) {
        self.catalog.insert(name.to_owned(), layout);
    }

    pub(crate) fn forget(&mut self, name: &str) {
        self.catalog.remove(name);
    }

    /// Layout of a distributed object known to the master.
    pub fn layout_of(&self, name: &str) -> Result<ObjectLayout> {
        if self.state != State::Running {
            return Err(Error::ClusterDown);
        }
        self.catalog.get(name).copied().ok_or_else(|| Error::NoSuchObject(name.to_owned()))
    }

    pub(crate) fn set_cholesky_stats(&mut self, stats: Vec<CholStats>) {
        self.last_cholesky = stats;
    }

    /// Copies `value` into the store of every target worker.
    pub fn push(&mut self, name: &str, value: StoreValue, targets: &Targets) -> Result<()> {
        let ranks = self.ranks(targets)?;
        let batch = ranks.into_iter().map(|r| (r, Command::Push { name: name.to_owned(), value: value.clone() }));
        self.run(batch.collect())?;
        self.forget(name);
        Ok(())
    }

    /// A copy of `name` from the store of worker `source`. Distributed
    /// objects come back as the worker's local piece.
    pub fn pull(&mut self, name: &str, source: usize) -> Result<StoreValue> {
        match self.run_one(source, Command::Pull { name: name.to_owned() })? {
            Reply::Value(v) => Ok(v),
            other => Err(unexpected(other)),
        }
    }

    pub fn remote_ls(&mut self, rank: usize) -> Result<Vec<String>> {
        match self.run_one(rank, Command::Ls)? {
            Reply::Names(n) => Ok(n),
            other => Err(unexpected(other)),
        }
    }

    /// Removes `name` from the targets. Removing an absent name succeeds.
    pub fn remote_rm(&mut self, name: &str, targets: &Targets) -> Result<()> {
        let ranks = self.ranks(targets)?;
        self.run(ranks.into_iter().map(|r| (r, Command::Rm { name: name.to_owned() })).collect())?;
        if *targets == Targets::All {
            self.forget(name);
        }
        Ok(())
    }

    /// Applies a registered elementwise function to one or two objects on
    /// every worker and stores the result under `output`.
    pub fn remote_apply(&mut self, func: &str, inputs: &[&str], output: &str) -> Result<()> {
        if inputs.is_empty() || inputs.len() > 2 {
            return Err(Error::DimensionMismatch(format!("remote_apply takes 1 or 2 inputs, got {}", inputs.len())));
        }
        let layout = self.catalog.get(inputs[0]).copied();
        self.run_kernel(protocol::Kernel::Apply {
            func: func.to_owned(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_owned(),
        })?;
        match layout {
            Some(l) => self.register(output, l),
            None => self.forget(output),
        }
        Ok(())
    }

    /// `count` standard normal draws from the stream of worker `rank`.
    pub fn worker_standard_normals(&mut self, rank: usize, count: usize) -> Result<Vec<f64>> {
        match self.run_one(rank, Command::Normals { count })? {
            Reply::Numbers(v) => Ok(v),
            other => Err(unexpected(other)),
        }
    }

    pub fn set_event_log(&mut self, on: bool) -> Result<()> {
        self.run_all(Command::SetEventLog(on)).map(|_| ())
    }

    /// Drains the event logs of all workers, ordered by logical clock.
    pub fn take_events(&mut self) -> Result<Vec<Event>> {
        let mut all = Vec::new();
        for reply in self.run_all(Command::TakeEvents)? {
            match reply {
                Reply::Events(e) => all.extend(e),
                other => return Err(unexpected(other)),
            }
        }
        all.sort_by_key(|e| (e.seq, e.rank, e.wall_ns));
        Ok(all)
    }

    /// Stops all workers. Every later operation fails with
    /// [`Error::ClusterDown`].
    pub fn shutdown(&mut self) -> Result<()> {
        if self.state == State::Down {
            return Ok(());
        }
        self.state = State::Down;
        self.catalog.clear();
        self.backend.shutdown()
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

pub(crate) fn unexpected(reply: Reply) -> Error {
    Error::Transport(format!("unexpected reply {reply:?}"))
}
