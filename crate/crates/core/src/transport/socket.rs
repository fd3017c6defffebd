//! Workers as child processes connected over loopback TCP.
//!
//! Startup: the master listens on an ephemeral port and launches P children.
//! Each child opens its own peer listener, connects to the master and sends
//! `Hello` with its rank and peer address. Once all have checked in the
//! master sends every worker `Init` with the full peer table. From then on
//! the master connection carries commands and results as control frames,
//! and each worker serves block fetches from its peers on a separate
//! listener thread.

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::process::{Child, Command as Process, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::events::unix_ns;
use super::exchange::{Exchange, ExchangeError};
use super::protocol::{Command, Envelope, InitInfo, Message, Reply, Tag, WorkerResult};
use super::wire::{read_frame, write_frame, Frame, FrameKind, Payload};
use super::worker::{PeerLink, Worker};
use super::{BackendHandle, SocketConfig};
use crate::error::{Error, Fault, Result};
use crate::grid::ProcessGrid;
use crate::registry::Registry;

fn to_bytes<T: serde::Serialize>(v: &T) -> io::Result<Vec<u8>> {
    bincode::serialize(v).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn from_bytes<T: serde::de::DeserializeOwned>(b: &[u8]) -> io::Result<T> {
    bincode::deserialize(b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn send_control<T: serde::Serialize>(stream: &mut TcpStream, epoch: u64, v: &T) -> io::Result<()> {
    write_frame(stream, &Frame::control(epoch, to_bytes(v)?))
}

fn recv_control<T: serde::de::DeserializeOwned>(stream: &mut TcpStream) -> io::Result<T> {
    let frame = read_frame(stream)?;
    if frame.kind != FrameKind::Control {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "expected a control frame"));
    }
    from_bytes(&frame.into_bytes())
}

struct Conn {
    stream: TcpStream,
    child: Child,
}

pub(crate) struct SocketBackend {
    conns: Vec<Conn>,
}

impl SocketBackend {
    pub fn spawn(grid: ProcessGrid, seed: u64, event_log: bool, cfg: &SocketConfig) -> Result<Self> {
        let p = grid.process_count();
        let listener =
            TcpListener::bind("127.0.0.1:0").map_err(|e| Error::BackendUnavailable(format!("bind: {e}")))?;
        let addr = listener.local_addr()?.to_string();

        let mut children = Vec::with_capacity(p);
        for rank in 1..=p {
            let child = Process::new(&cfg.program)
                .args(&cfg.args)
                .args(["worker", "--master", &addr, "--rank", &rank.to_string()])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::inherit())
                .spawn();
            match child {
                Ok(c) => children.push(c),
                Err(e) => {
                    kill_all(&mut children);
                    return Err(Error::BackendUnavailable(format!("cannot launch {}: {e}", cfg.program.display())));
                }
            }
        }

        let mut slots: Vec<Option<(TcpStream, String)>> = (0..p).map(|_| None).collect();
        let deadline = Instant::now() + cfg.startup_timeout;
        listener.set_nonblocking(true)?;
        let mut joined = 0;
        while joined < p {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let hello: WorkerResult = recv_control(&mut stream)
                        .map_err(|e| Error::BackendUnavailable(format!("worker handshake: {e}")))?;
                    match hello {
                        Ok(Reply::Hello { rank, peer_addr }) if (1..=p).contains(&rank) && slots[rank - 1].is_none() => {
                            slots[rank - 1] = Some((stream, peer_addr));
                            joined += 1;
                        }
                        other => {
                            kill_all(&mut children);
                            return Err(Error::BackendUnavailable(format!("bad worker greeting {other:?}")));
                        }
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    for (idx, c) in children.iter_mut().enumerate() {
                        if let Ok(Some(status)) = c.try_wait() {
                            kill_all(&mut children);
                            return Err(Error::BackendUnavailable(format!(
                                "worker {} exited during startup ({status})",
                                idx + 1
                            )));
                        }
                    }
                    if Instant::now() > deadline {
                        kill_all(&mut children);
                        return Err(Error::BackendUnavailable(format!("only {joined} of {p} workers connected")));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    kill_all(&mut children);
                    return Err(Error::BackendUnavailable(format!("accept: {e}")));
                }
            }
        }

        let slots: Vec<(TcpStream, String)> = slots.into_iter().map(|s| s.expect("all workers joined")).collect();
        let peers: Vec<String> = slots.iter().map(|(_, a)| a.clone()).collect();
        let start = unix_ns();
        let mut conns = Vec::with_capacity(p);
        for ((stream, _), child) in slots.into_iter().zip(children) {
            conns.push(Conn { stream, child });
        }
        let mut backend = SocketBackend { conns };
        let batch = (1..=p)
            .map(|rank| {
                let info =
                    InitInfo { rank, grid_order: grid.order(), seed, event_log, peers: peers.clone(), start_unix_ns: start };
                (rank, Envelope { epoch: 0, command: Command::Init(info) })
            })
            .collect();
        for (rank, r) in backend.dispatch(batch)? {
            if let Err(f) = r {
                return Err(Error::BackendUnavailable(format!("worker {rank} failed to initialize: {f}")));
            }
        }
        Ok(backend)
    }
}

fn kill_all(children: &mut [Child]) {
    for c in children {
        let _ = c.kill();
        let _ = c.wait();
    }
}

impl BackendHandle for SocketBackend {
    fn dispatch(&mut self, batch: Vec<(usize, Envelope)>) -> Result<Vec<(usize, WorkerResult)>> {
        let ranks: Vec<usize> = batch.iter().map(|(r, _)| *r).collect();
        for (rank, env) in &batch {
            send_control(&mut self.conns[rank - 1].stream, env.epoch, env)
                .map_err(|e| Error::WorkerLost { rank: *rank, reason: e.to_string() })?;
        }
        ranks
            .into_iter()
            .map(|rank| {
                recv_control::<WorkerResult>(&mut self.conns[rank - 1].stream)
                    .map(|r| (rank, r))
                    .map_err(|e| Error::WorkerLost { rank, reason: e.to_string() })
            })
            .collect()
    }

    fn shutdown(&mut self) -> Result<()> {
        for conn in &mut self.conns {
            let env = Envelope { epoch: u64::MAX, command: Command::Shutdown };
            if send_control(&mut conn.stream, env.epoch, &env).is_ok() {
                let _ = recv_control::<WorkerResult>(&mut conn.stream);
            }
            let _ = conn.stream.shutdown(Shutdown::Both);
        }
        for conn in &mut self.conns {
            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                match conn.child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                    _ => {
                        let _ = conn.child.kill();
                        let _ = conn.child.wait();
                        break;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One persistent connection per peer, opened on first use.
struct SocketLink {
    peers: Vec<String>,
    conns: HashMap<usize, TcpStream>,
}

impl SocketLink {
    fn request(&mut self, owner: usize, epoch: u64, tag: &Tag) -> io::Result<Frame> {
        let stream = match self.conns.entry(owner) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let s = TcpStream::connect(&self.peers[owner - 1])?;
                s.set_nodelay(true)?;
                v.insert(s)
            }
        };
        write_frame(stream, &Frame::fetch(epoch, tag.clone()))?;
        read_frame(stream)
    }
}

impl PeerLink for SocketLink {
    fn fetch(&mut self, me: usize, owner: usize, epoch: u64, tag: &Tag) -> Result<Message, Fault> {
        let frame = self.request(owner, epoch, tag).map_err(|e| {
            self.conns.remove(&owner);
            Fault::Protocol(format!("fetch of {tag} from worker {owner}: {e}"))
        })?;
        match (frame.kind, frame.payload) {
            (FrameKind::Data, Payload::Floats(payload)) => {
                Ok(Message { src: owner, dst: me, tag: frame.tag, clock: frame.clock, payload })
            }
            (FrameKind::Abort, _) => Err(Fault::PeerAborted { peer: owner }),
            (kind, _) => Err(Fault::Protocol(format!("unexpected {kind:?} frame from worker {owner}"))),
        }
    }
}

fn serve_peer(mut stream: TcpStream, exchange: Arc<Exchange>) {
    let _ = stream.set_nodelay(true);
    loop {
        let req = match read_frame(&mut stream) {
            Ok(f) if f.kind == FrameKind::Fetch => f,
            _ => return,
        };
        let reply = match exchange.take(req.epoch, &req.tag) {
            Ok((data, clock)) => Frame::data(req.epoch, clock, req.tag, data.as_ref().clone()),
            Err(ExchangeError::Aborted) => Frame::abort(req.epoch, req.tag, "owner failed"),
            Err(ExchangeError::Stale) => Frame::abort(req.epoch, req.tag, "stale request"),
        };
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

/// Entry point of a worker process: connects to the master at
/// `master_addr`, serves commands until shutdown, then returns.
pub fn run_socket_worker(master_addr: &str, rank: usize) -> Result<()> {
    let peer_listener = TcpListener::bind("127.0.0.1:0")?;
    let peer_addr = peer_listener.local_addr()?.to_string();
    let mut master = TcpStream::connect(master_addr)?;
    master.set_nodelay(true)?;
    send_control(&mut master, 0, &WorkerResult::Ok(Reply::Hello { rank, peer_addr }))?;

    let env: Envelope = recv_control(&mut master)?;
    let info = match env.command {
        Command::Init(info) if info.rank == rank => info,
        other => return Err(Error::Transport(format!("expected Init, got {other:?}"))),
    };
    let exchange = Arc::new(Exchange::new());
    {
        let exchange = Arc::clone(&exchange);
        thread::Builder::new().name("peer-server".into()).spawn(move || {
            for stream in peer_listener.incoming().flatten() {
                let exchange = Arc::clone(&exchange);
                let _ = thread::Builder::new().name("peer-conn".into()).spawn(move || serve_peer(stream, exchange));
            }
        })?;
    }
    let link = SocketLink { peers: info.peers.clone(), conns: HashMap::new() };
    let mut worker = Worker::new(&info, Arc::new(Registry::builtin()), exchange, Box::new(link));
    send_control(&mut master, env.epoch, &WorkerResult::Ok(Reply::Ack))?;

    loop {
        let env: Envelope = match recv_control(&mut master) {
            Ok(e) => e,
            // The master went away; nothing left to serve.
            Err(_) => return Ok(()),
        };
        let stop = matches!(env.command, Command::Shutdown);
        let epoch = env.epoch;
        let result = worker.handle(env);
        send_control(&mut master, epoch, &result)?;
        if stop {
            return Ok(());
        }
    }
}
