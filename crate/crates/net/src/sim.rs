//! Discrete-event network simulation.
//!
//! Two clocks run side by side. The scheduling clock orders deliveries and
//! depends only on the seed, so a seed fixes the whole delivery schedule.
//! The timed clock replays that schedule with each handler's measured
//! compute time and per-node queueing added; latencies and throughput are
//! read from it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use cpu_time::ThreadTime;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use tfc_core::model::{ServerId, Timestamp};
use tfc_core::protocol::client::{ClientNode, ClientOutput};
use tfc_core::protocol::messages::{Endpoint, ExecOp, Kind};
use tfc_core::protocol::{Cluster, Event, Output, Server};

use crate::NetError;

#[derive(Clone, Debug)]
pub struct NetConfig {
    pub seed: u64,
    pub base_delay: Duration,
    /// Uniform extra delay in `[0, jitter]`.
    pub jitter: Duration,
    pub bandwidth_bps: u64,
    /// Charge measured handler time on the timed clock. Off means handlers
    /// are free and both clocks agree.
    pub measure_compute: bool,
    /// Treat client work as spread over many independent clients: client
    /// handlers start when their message arrives instead of queueing
    /// behind each other.
    pub parallel_client: bool,
    pub record_trace: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            seed: 0,
            base_delay: Duration::from_micros(250),
            jitter: Duration::from_micros(50),
            bandwidth_bps: 10_000_000_000,
            measure_compute: true,
            parallel_client: true,
            record_trace: false,
        }
    }
}

/// Returns true to drop the envelope.
pub type DropHook = Box<dyn FnMut(Endpoint, Endpoint, Kind) -> bool + Send>;
/// May rewrite the envelope bytes; returns true if it did.
pub type TamperHook = Box<dyn FnMut(Endpoint, Endpoint, Kind, &mut Vec<u8>) -> bool + Send>;

#[derive(Clone, Debug)]
pub enum SimEvent {
    Server {
        at: Duration,
        event: Event,
    },
    /// Only `Submitted` and `Finished` outputs surface here.
    Client {
        at: Duration,
        output: ClientOutput,
    },
}

#[derive(Clone, Debug, Default)]
pub struct SimStats {
    pub delivered: u64,
    pub dropped: u64,
    pub tampered: u64,
    pub undeliverable: u64,
    pub bytes: u64,
    pub compute: HashMap<Endpoint, Duration>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub at_ns: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: Kind,
}

enum Pending {
    Deliver { from: Endpoint, to: Endpoint, kind: Kind, bytes: Arc<Vec<u8>> },
    Timer { node: ServerId, id: u64 },
}

struct Queued {
    at: u64,
    seq: u64,
    timed: u64,
    what: Pending,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl Ord for Queued {
    // Reversed so the heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn ns(d: Duration) -> u64 {
    d.as_nanos() as u64
}

pub struct Sim {
    cfg: NetConfig,
    servers: Vec<Server>,
    client: ClientNode,
    queue: BinaryHeap<Queued>,
    seq: u64,
    rng: ChaCha8Rng,
    link_sched: HashMap<(Endpoint, Endpoint), u64>,
    link_timed: HashMap<(Endpoint, Endpoint), u64>,
    busy: HashMap<Endpoint, u64>,
    now: u64,
    drop_hook: Option<DropHook>,
    tamper_hook: Option<TamperHook>,
    stats: SimStats,
    trace: Vec<TraceEntry>,
}

impl Sim {
    pub fn new(cluster: Cluster, cfg: NetConfig) -> Sim {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Sim {
            cfg,
            servers: cluster.servers,
            client: cluster.client,
            queue: BinaryHeap::new(),
            seq: 0,
            rng,
            link_sched: HashMap::new(),
            link_timed: HashMap::new(),
            busy: HashMap::new(),
            now: 0,
            drop_hook: None,
            tamper_hook: None,
            stats: SimStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn set_drop_hook(&mut self, hook: DropHook) {
        self.drop_hook = Some(hook);
    }

    pub fn set_tamper_hook(&mut self, hook: TamperHook) {
        self.tamper_hook = Some(hook);
    }

    pub fn clear_hooks(&mut self) {
        self.drop_hook = None;
        self.tamper_hook = None;
    }

    pub fn servers(&self) -> &[Server] {
        &self.servers
    }

    pub fn servers_mut(&mut self) -> &mut [Server] {
        &mut self.servers
    }

    pub fn client(&self) -> &ClientNode {
        &self.client
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Current time on the scheduling clock.
    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.now)
    }

    /// Time at which the client is next free on the timed clock.
    pub fn client_time(&self) -> Duration {
        Duration::from_nanos(self.busy.get(&Endpoint::Client).copied().unwrap_or(0))
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Server>, ClientNode) {
        (self.servers, self.client)
    }

    fn push(&mut self, at: u64, timed: u64, what: Pending) {
        self.seq += 1;
        self.queue.push(Queued { at, seq: self.seq, timed, what });
    }

    fn known(&self, e: Endpoint) -> bool {
        match e {
            Endpoint::Client => true,
            Endpoint::Server(s) => (s as usize) < self.servers.len(),
        }
    }

    fn link_delay(&mut self, len: usize) -> u64 {
        let jitter = ns(self.cfg.jitter);
        let extra = if jitter == 0 { 0 } else { self.rng.gen_range(0..=jitter) };
        let wire = (len as u128 * 8 * 1_000_000_000 / self.cfg.bandwidth_bps.max(1) as u128) as u64;
        ns(self.cfg.base_delay) + extra + wire
    }

    /// Puts an envelope on the `from -> to` link, applying the hooks.
    pub fn send(&mut self, from: Endpoint, to: Endpoint, kind: Kind, bytes: Arc<Vec<u8>>) -> Result<(), NetError> {
        let timed = self.busy.get(&from).copied().unwrap_or(0);
        self.send_at(from, to, kind, bytes, timed)
    }

    fn send_at(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        kind: Kind,
        mut bytes: Arc<Vec<u8>>,
        timed: u64,
    ) -> Result<(), NetError> {
        if !self.known(to) {
            self.stats.undeliverable += 1;
            return Err(NetError::UnknownDestination(to));
        }
        if let Some(hook) = self.drop_hook.as_mut() {
            if hook(from, to, kind) {
                self.stats.dropped += 1;
                return Ok(());
            }
        }
        if let Some(hook) = self.tamper_hook.as_mut() {
            let mut copy = bytes.as_ref().clone();
            if hook(from, to, kind, &mut copy) {
                self.stats.tampered += 1;
                bytes = Arc::new(copy);
            }
        }
        let d = self.link_delay(bytes.len());
        let link = (from, to);
        let at = (self.now + d).max(self.link_sched.get(&link).copied().unwrap_or(0));
        let timed_at = (timed + d).max(self.link_timed.get(&link).copied().unwrap_or(0));
        self.link_sched.insert(link, at);
        self.link_timed.insert(link, timed_at);
        self.stats.bytes += bytes.len() as u64;
        self.push(at, timed_at, Pending::Deliver { from, to, kind, bytes });
        Ok(())
    }

    /// Runs `f` on the timed clock of `node`, starting no earlier than
    /// `arrival`. Returns the finish time.
    fn timed<T>(&mut self, node: Endpoint, arrival: u64, f: impl FnOnce(&mut Self) -> T) -> (T, u64) {
        let busy = self.busy.get(&node).copied().unwrap_or(0);
        let start = if node == Endpoint::Client && self.cfg.parallel_client { arrival } else { arrival.max(busy) };
        // Thread CPU time, so preemption by other processes is not charged.
        let clock = ThreadTime::now();
        let out = f(self);
        let spent = if self.cfg.measure_compute { clock.elapsed() } else { Duration::ZERO };
        *self.stats.compute.entry(node).or_default() += spent;
        let end = start + ns(spent);
        self.busy.insert(node, end.max(busy));
        (out, end)
    }

    fn client_outputs(&mut self, out: Vec<ClientOutput>, at: u64, events: &mut Vec<SimEvent>) {
        for o in out {
            match o {
                ClientOutput::Send { to, kind, bytes } => {
                    if let Err(e) = self.send_at(Endpoint::Client, to, kind, bytes, at) {
                        warn!(%e, "client send failed");
                    }
                }
                other => events.push(SimEvent::Client { at: Duration::from_nanos(at), output: other }),
            }
        }
    }

    fn server_outputs(&mut self, from: ServerId, out: Vec<Output>, at: u64, events: &mut Vec<SimEvent>) {
        for o in out {
            match o {
                Output::Send { to, kind, bytes } => {
                    if let Err(e) = self.send_at(Endpoint::Server(from), to, kind, bytes, at) {
                        warn!(%e, server = from, "send failed");
                    }
                }
                Output::Timer { id, after } => {
                    let when = self.now + ns(after);
                    self.push(when, at + ns(after), Pending::Timer { node: from, id });
                }
                Output::Event(event) => events.push(SimEvent::Server { at: Duration::from_nanos(at), event }),
            }
        }
    }

    /// Starts a client transaction as soon as the client is free.
    pub fn client_begin(&mut self, ops: Vec<ExecOp>) -> (Timestamp, Vec<SimEvent>) {
        let now = self.busy.get(&Endpoint::Client).copied().unwrap_or(0);
        self.client_begin_at(ops, Duration::from_nanos(now))
    }

    /// Starts a client transaction at timed-clock instant `at` (or later if
    /// a serialized client is busy).
    pub fn client_begin_at(&mut self, ops: Vec<ExecOp>, at: Duration) -> (Timestamp, Vec<SimEvent>) {
        let ((ts, out), end) = self.timed(Endpoint::Client, ns(at), |s| s.client.begin(ops));
        let mut events = Vec::new();
        self.client_outputs(out, end, &mut events);
        (ts, events)
    }

    /// Processes the next scheduled event; `None` once nothing is left.
    pub fn step(&mut self) -> Option<Vec<SimEvent>> {
        let q = self.queue.pop()?;
        self.now = q.at;
        let mut events = Vec::new();
        match q.what {
            Pending::Deliver { from, to, kind, bytes } => {
                self.stats.delivered += 1;
                if self.cfg.record_trace {
                    self.trace.push(TraceEntry { at_ns: q.at, from, to, kind });
                }
                match to {
                    Endpoint::Client => {
                        let (out, end) = self.timed(to, q.timed, |s| s.client.receive(&bytes));
                        self.client_outputs(out, end, &mut events);
                    }
                    Endpoint::Server(id) => {
                        let (out, end) = self.timed(to, q.timed, |s| s.servers[id as usize].receive(&bytes));
                        self.server_outputs(id, out, end, &mut events);
                    }
                }
            }
            Pending::Timer { node, id } => {
                // Stale timers are no-ops and must not move the node's clock.
                let out = self.servers[node as usize].on_timer(id);
                if !out.is_empty() {
                    let who = Endpoint::Server(node);
                    let end = q.timed.max(self.busy.get(&who).copied().unwrap_or(0));
                    self.busy.insert(who, end);
                    self.server_outputs(node, out, end, &mut events);
                }
            }
        }
        Some(events)
    }

    /// Runs until the queue drains, pending timers included.
    pub fn run_until_idle(&mut self) -> Vec<SimEvent> {
        let mut all = Vec::new();
        while let Some(ev) = self.step() {
            all.extend(ev);
        }
        all
    }
}
