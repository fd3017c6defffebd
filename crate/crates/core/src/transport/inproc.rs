//! Workers as threads of the current process.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::events::unix_ns;
use super::exchange::{Exchange, ExchangeError};
use super::protocol::{Command, Envelope, InitInfo, Message, Tag, WorkerResult};
use super::worker::{PeerLink, Worker};
use super::BackendHandle;
use crate::error::{Error, Fault, Result};
use crate::grid::ProcessGrid;
use crate::registry::Registry;

/// Fetches straight from the peer's exchange. The payload is copied so no
/// buffer is ever shared between two workers.
struct InProcLink {
    exchanges: Arc<Vec<Arc<Exchange>>>,
}

impl PeerLink for InProcLink {
    fn fetch(&mut self, me: usize, owner: usize, epoch: u64, tag: &Tag) -> Result<Message, Fault> {
        match self.exchanges[owner - 1].take(epoch, tag) {
            Ok((data, clock)) => {
                Ok(Message { src: owner, dst: me, tag: tag.clone(), clock, payload: data.as_ref().clone() })
            }
            Err(ExchangeError::Aborted) => Err(Fault::PeerAborted { peer: owner }),
            Err(ExchangeError::Stale) => Err(Fault::Protocol(format!("stale fetch of {tag} from worker {owner}"))),
        }
    }
}

struct Slot {
    tx: Sender<Envelope>,
    rx: Receiver<WorkerResult>,
    handle: Option<JoinHandle<()>>,
}

pub(crate) struct InProcBackend {
    slots: Vec<Slot>,
}

impl InProcBackend {
    pub fn spawn(grid: ProcessGrid, seed: u64, event_log: bool, registry: Arc<Registry>) -> Result<Self> {
        let p = grid.process_count();
        let exchanges: Arc<Vec<Arc<Exchange>>> = Arc::new((0..p).map(|_| Arc::new(Exchange::new())).collect());
        let start = unix_ns();
        let mut slots = Vec::with_capacity(p);
        for rank in 1..=p {
            let info = InitInfo { rank, grid_order: grid.order(), seed, event_log, peers: Vec::new(), start_unix_ns: start };
            let (cmd_tx, cmd_rx) = channel::<Envelope>();
            let (res_tx, res_rx) = channel::<WorkerResult>();
            let exchanges = Arc::clone(&exchanges);
            let registry = Arc::clone(&registry);
            let handle = thread::Builder::new()
                .name(format!("worker-{rank}"))
                .spawn(move || {
                    let exchange = Arc::clone(&exchanges[rank - 1]);
                    let mut worker = Worker::new(&info, registry, exchange, Box::new(InProcLink { exchanges }));
                    while let Ok(env) = cmd_rx.recv() {
                        let stop = matches!(env.command, Command::Shutdown);
                        if res_tx.send(worker.handle(env)).is_err() || stop {
                            break;
                        }
                    }
                })
                .map_err(|e| Error::BackendUnavailable(format!("cannot start worker thread: {e}")))?;
            slots.push(Slot { tx: cmd_tx, rx: res_rx, handle: Some(handle) });
        }
        Ok(InProcBackend { slots })
    }
}

impl BackendHandle for InProcBackend {
    fn dispatch(&mut self, batch: Vec<(usize, Envelope)>) -> Result<Vec<(usize, WorkerResult)>> {
        let ranks: Vec<usize> = batch.iter().map(|(r, _)| *r).collect();
        for (rank, env) in batch {
            self.slots[rank - 1]
                .tx
                .send(env)
                .map_err(|_| Error::WorkerLost { rank, reason: "worker thread has exited".into() })?;
        }
        ranks
            .into_iter()
            .map(|rank| {
                self.slots[rank - 1]
                    .rx
                    .recv()
                    .map(|r| (rank, r))
                    .map_err(|_| Error::WorkerLost { rank, reason: "worker thread has exited".into() })
            })
            .collect()
    }

    fn shutdown(&mut self) -> Result<()> {
        for slot in &self.slots {
            let _ = slot.tx.send(Envelope { epoch: u64::MAX, command: Command::Shutdown });
        }
        for slot in &mut self.slots {
            let _ = slot.rx.recv();
            if let Some(h) = slot.handle.take() {
                let _ = h.join();
            }
        }
        Ok(())
    }
}
