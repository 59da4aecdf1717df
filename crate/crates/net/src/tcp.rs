//! Loopback TCP transport: one thread per server, frames of a 4-byte
//! big-endian length followed by the envelope bytes.

use std::cmp::Reverse;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use tfc_core::model::Timestamp;
use tfc_core::protocol::client::{ClientNode, ClientOutput};
use tfc_core::protocol::messages::{Endpoint, ExecOp};
use tfc_core::protocol::{Cluster, Event, Output, Server};

use crate::NetError;

pub const MAX_FRAME: usize = 64 << 20;

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<(), NetError> {
    if bytes.len() > MAX_FRAME {
        return Err(NetError::FrameTooLarge(bytes.len()));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, NetError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(NetError::FrameTooLarge(len));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

enum Inbox {
    Frame(Vec<u8>),
    Stop,
}

/// Accepts connections and forwards every frame into `inbox`.
fn spawn_listener(listener: TcpListener, inbox: Sender<Inbox>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut conn) = conn else { continue };
            let inbox = inbox.clone();
            thread::spawn(move || loop {
                match read_frame(&mut conn) {
                    Ok(Some(f)) => {
                        if inbox.send(Inbox::Frame(f)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!(%e, "connection closed");
                        break;
                    }
                }
            });
        }
    })
}

struct Links {
    addrs: Arc<HashMap<Endpoint, SocketAddr>>,
    open: HashMap<Endpoint, TcpStream>,
}

impl Links {
    fn send(&mut self, to: Endpoint, bytes: &[u8]) -> Result<(), NetError> {
        let addr = *self.addrs.get(&to).ok_or(NetError::UnknownDestination(to))?;
        let stream = match self.open.entry(to) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let s = TcpStream::connect(addr)?;
                s.set_nodelay(true)?;
                e.insert(s)
            }
        };
        let res = write_frame(stream, bytes);
        if res.is_err() {
            self.open.remove(&to);
        }
        res
    }
}

fn run_server(mut server: Server, inbox: Receiver<Inbox>, mut links: Links, events: Sender<Event>) -> Server {
    let mut timers: BinaryHeap<Reverse<(Instant, u64)>> = BinaryHeap::new();
    loop {
        let msg = match timers.peek() {
            Some(Reverse((deadline, _))) => {
                match inbox.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            None => match inbox.recv() {
                Ok(m) => Some(m),
                Err(_) => break,
            },
        };
        let out = match msg {
            Some(Inbox::Frame(f)) => server.receive(&f),
            Some(Inbox::Stop) => break,
            None => {
                let Reverse((_, id)) = timers.pop().unwrap();
                server.on_timer(id)
            }
        };
        for o in out {
            match o {
                Output::Send { to, bytes, .. } => {
                    if let Err(e) = links.send(to, &bytes) {
                        warn!(server = server.id(), ?to, %e, "send failed");
                    }
                }
                Output::Timer { id, after } => timers.push(Reverse((Instant::now() + after, id))),
                Output::Event(e) => {
                    let _ = events.send(e);
                }
            }
        }
    }
    server
}

/// A running cluster. The client lives on the caller's thread.
pub struct TcpNet {
    client: ClientNode,
    client_inbox: Receiver<Inbox>,
    links: Links,
    events: Receiver<Event>,
    stops: Vec<Sender<Inbox>>,
    stop_flag: Arc<AtomicBool>,
    workers: Vec<JoinHandle<Server>>,
    listeners: Vec<JoinHandle<()>>,
}

impl TcpNet {
    pub fn start(cluster: Cluster) -> Result<TcpNet, NetError> {
        let stop_flag = Arc::new(AtomicBool::new(false));
        let mut addrs = HashMap::new();
        let mut listeners = Vec::new();
        let mut inboxes = Vec::new();
        let ids: Vec<Endpoint> =
            (0..cluster.servers.len() as u32).map(Endpoint::Server).chain(std::iter::once(Endpoint::Client)).collect();
        for id in &ids {
            let l = TcpListener::bind("127.0.0.1:0")?;
            addrs.insert(*id, l.local_addr()?);
            let (tx, rx) = mpsc::channel();
            listeners.push(spawn_listener(l, tx.clone(), stop_flag.clone()));
            inboxes.push((tx, rx));
        }
        let addrs = Arc::new(addrs);
        let (ev_tx, ev_rx) = mpsc::channel();
        let (client_tx, client_rx) = inboxes.pop().unwrap();
        drop(client_tx);
        let mut stops = Vec::new();
        let mut workers = Vec::new();
        for (server, (tx, rx)) in cluster.servers.into_iter().zip(inboxes) {
            stops.push(tx);
            let links = Links { addrs: addrs.clone(), open: HashMap::new() };
            let ev = ev_tx.clone();
            workers.push(thread::spawn(move || run_server(server, rx, links, ev)));
        }
        Ok(TcpNet {
            client: cluster.client,
            client_inbox: client_rx,
            links: Links { addrs, open: HashMap::new() },
            events: ev_rx,
            stops,
            stop_flag,
            workers,
            listeners,
        })
    }

    fn client_outputs(&mut self, out: Vec<ClientOutput>) -> Result<Vec<ClientOutput>, NetError> {
        let mut rest = Vec::new();
        for o in out {
            match o {
                ClientOutput::Send { to, bytes, .. } => self.links.send(to, &bytes)?,
                other => rest.push(other),
            }
        }
        Ok(rest)
    }

    pub fn begin(&mut self, ops: Vec<ExecOp>) -> Result<(Timestamp, Vec<ClientOutput>), NetError> {
        let (ts, out) = self.client.begin(ops);
        Ok((ts, self.client_outputs(out)?))
    }

    /// Waits up to `timeout` for the next client-visible output.
    pub fn next(&mut self, timeout: Duration) -> Result<Vec<ClientOutput>, NetError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.client_inbox.recv_timeout(left) {
                Ok(Inbox::Frame(f)) => {
                    let out = self.client.receive(&f);
                    let rest = self.client_outputs(out)?;
                    if !rest.is_empty() {
                        return Ok(rest);
                    }
                }
                Ok(Inbox::Stop) | Err(_) => return Ok(vec![]),
            }
        }
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.try_iter().collect()
    }

    /// Stops every node and hands the servers back.
    pub fn shutdown(self) -> Vec<Server> {
        self.stop_flag.store(true, Ordering::SeqCst);
        for s in &self.stops {
            let _ = s.send(Inbox::Stop);
        }
        let servers = self.workers.into_iter().map(|w| w.join().expect("server thread")).collect();
        // Wake the acceptors so they notice the flag.
        for addr in self.links.addrs.values() {
            let _ = TcpStream::connect(addr);
        }
        for l in self.listeners {
            let _ = l.join();
        }
        servers
    }
}
