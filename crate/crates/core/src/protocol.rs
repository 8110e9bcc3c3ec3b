//! Guest/host process-creation protocol.
//!
//! A spawn runs through four phases over a single open connection:
//!
//! 1. `Init`: the guest sends a connect token and its identity; the host
//!    kernel allocates a hardware thread (FIFO-queued if all are busy) and
//!    acknowledges.
//! 2. `TransmitClosure`: the encoded closure is sent; the host allocates heap
//!    space for arguments and procedure images and points its jump table at
//!    the received images.
//! 3. `ExecuteWait`: the host runs the procedure; the guest thread blocks.
//! 4. `ResultsTeardown`: referenced arrays and variables go back to the
//!    guest, the host frees the closure memory and yields its thread.
//!
//! Charged time is `(overhead + C_w (n + m + o)) * multiplier`, where the
//! multiplier is the sum of per-hop link multipliers along the route.

use std::fmt;

use thiserror::Error;

use crate::closure::{Argument, Closure, ClosureError, Word};
use crate::engine::{
    Channel, EngineError, JumpEntry, LocalBoxFuture, Location, MemHandle, Sim, ThreadSlot, VirtualTime,
};
use crate::topology::{Hypercube, NodeId, TopologyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("protocol abort: {0}")]
    Closure(#[from] ClosureError),
    #[error("spawn to host {host} failed: out of memory ({requested} bytes)")]
    HostOutOfMemory { host: NodeId, requested: u64 },
    #[error("remote spawn from core {0} to itself")]
    LocalSpawn(NodeId),
    #[error("phase {to:?} cannot follow {from:?}")]
    OutOfOrder {
        from: Option<ProtocolPhase>,
        to: ProtocolPhase,
    },
    #[error("connection is closed")]
    Closed,
    #[error("unexpected control token {0:#04x}")]
    BadToken(u8),
    #[error("procedure result does not match its arguments")]
    ResultShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProtocolPhase {
    Init,
    TransmitClosure,
    ExecuteWait,
    ResultsTeardown,
}

impl ProtocolPhase {
    pub const ALL: [ProtocolPhase; 4] = [
        ProtocolPhase::Init,
        ProtocolPhase::TransmitClosure,
        ProtocolPhase::ExecuteWait,
        ProtocolPhase::ResultsTeardown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolPhase::Init => "init",
            ProtocolPhase::TransmitClosure => "transmit",
            ProtocolPhase::ExecuteWait => "execute",
            ProtocolPhase::ResultsTeardown => "results",
        }
    }

    fn successor_of(prev: Option<ProtocolPhase>) -> Option<ProtocolPhase> {
        match prev {
            None => Some(ProtocolPhase::Init),
            Some(ProtocolPhase::Init) => Some(ProtocolPhase::TransmitClosure),
            Some(ProtocolPhase::TransmitClosure) => Some(ProtocolPhase::ExecuteWait),
            Some(ProtocolPhase::ExecuteWait) => Some(ProtocolPhase::ResultsTeardown),
            Some(ProtocolPhase::ResultsTeardown) => None,
        }
    }
}

impl fmt::Display for ProtocolPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-byte control tokens exchanged on a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ControlToken {
    Connect = 0x01,
    Ack = 0x02,
    Completed = 0x03,
    Close = 0x04,
}

impl TryFrom<u8> for ControlToken {
    type Error = ProtocolError;
    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0x01 => Ok(ControlToken::Connect),
            0x02 => Ok(ControlToken::Ack),
            0x03 => Ok(ControlToken::Completed),
            0x04 => Ok(ControlToken::Close),
            other => Err(ProtocolError::BadToken(other)),
        }
    }
}

/// Phase bookkeeping for one guest/host connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub guest: Location,
    pub host: NodeId,
    phase: Option<ProtocolPhase>,
    open: bool,
}

impl Connection {
    pub fn new(guest: Location, host: NodeId) -> Self {
        Connection {
            guest,
            host,
            phase: None,
            open: true,
        }
    }

    pub fn phase(&self) -> Option<ProtocolPhase> {
        self.phase
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Moves to `to`, which must be the next phase in order.
    pub fn advance(&mut self, to: ProtocolPhase) -> Result<(), ProtocolError> {
        if !self.open {
            return Err(ProtocolError::Closed);
        }
        if ProtocolPhase::successor_of(self.phase) != Some(to) {
            return Err(ProtocolError::OutOfOrder { from: self.phase, to });
        }
        self.phase = Some(to);
        Ok(())
    }

    pub fn close(&mut self) {
        self.open = false;
    }
}

#[derive(Debug, Clone)]
pub struct SpawnRequest {
    pub guest: Location,
    pub host: NodeId,
    pub closure: Closure,
}

/// Cost parameters for one spawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnCost {
    /// Fixed initialisation and termination overhead, before the path multiplier.
    pub overhead_ns: f64,
    /// Per-word transfer cost over one off-chip hop.
    pub word_ns: f64,
}

/// Outcome of a completed spawn, as seen by the guest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnOutcome {
    /// Final values of the write-back arguments, in argument order.
    pub results: Vec<Vec<Word>>,
    pub host_thread: ThreadSlot,
    pub sizes: crate::closure::PayloadSizes,
    pub multiplier: f64,
    pub requested_at: VirtualTime,
    /// When the host started executing the procedure.
    pub started_at: VirtualTime,
    pub finished_at: VirtualTime,
}

/// Procedure body run on the host. Receives its location and the decoded
/// arguments, and returns the arguments' final values.
pub type HostBody<E> =
    Box<dyn FnOnce(Location, Vec<Argument>) -> LocalBoxFuture<'static, Result<Vec<Argument>, E>>>;

/// Host kernel side of connection set-up: waits for a free hardware thread
/// and acknowledges. Distinct concurrent guests get distinct threads.
pub async fn host_accept(
    sim: &Sim,
    guest: Location,
    host: NodeId,
    token: u8,
) -> Result<(Location, ControlToken), ProtocolError> {
    match ControlToken::try_from(token)? {
        ControlToken::Connect => {}
        other => return Err(ProtocolError::BadToken(other as u8)),
    }
    let slot = sim.acquire_thread(host).await?;
    sim.protocol_trace(guest, host, "ack");
    Ok((Location::new(host, slot), ControlToken::Ack))
}

struct Installed {
    heap: Vec<MemHandle>,
    jumps: Vec<(usize, JumpEntry, MemHandle)>,
}

fn install(sim: &Sim, host: NodeId, closure: &Closure) -> Result<Installed, ProtocolError> {
    let mut inst = Installed {
        heap: Vec::new(),
        jumps: Vec::new(),
    };
    let alloc = |bytes: u64, inst: &mut Installed| -> Result<MemHandle, ProtocolError> {
        match sim.with_core_mut(host, |c| c.alloc_mem(bytes))? {
            Ok(h) => {
                inst.heap.push(h);
                Ok(h)
            }
            Err(EngineError::OutOfMemory { .. }) => Err(ProtocolError::HostOutOfMemory {
                host,
                requested: bytes,
            }),
            Err(e) => Err(e.into()),
        }
    };
    let result = (|| {
        for a in &closure.args {
            if a.heap_bytes() > 0 {
                alloc(a.heap_bytes(), &mut inst)?;
            }
        }
        for p in &closure.procs {
            let h = alloc(p.length_bytes() as u64, &mut inst)?;
            let index = p.index as usize;
            let prev = sim.with_core_mut(host, |c| c.set_jump(index, JumpEntry::Heap(h)))??;
            inst.jumps.push((index, prev, h));
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(inst),
        Err(e) => {
            uninstall(sim, host, inst)?;
            Err(e)
        }
    }
}

fn uninstall(sim: &Sim, host: NodeId, inst: Installed) -> Result<(), ProtocolError> {
    sim.with_core_mut(host, |c| -> Result<(), EngineError> {
        for (index, prev, h) in inst.jumps.into_iter().rev() {
            if c.jump(index)? == JumpEntry::Heap(h) {
                c.set_jump(index, prev)?;
            }
        }
        for h in inst.heap {
            c.free_mem(h)?;
        }
        Ok(())
    })??;
    Ok(())
}

fn results_of(sent: &[Argument], returned: &[Argument]) -> Result<Vec<Vec<Word>>, ProtocolError> {
    if sent.len() != returned.len() {
        return Err(ProtocolError::ResultShape);
    }
    let mut out = Vec::new();
    for (s, r) in sent.iter().zip(returned) {
        if s.tag() != r.tag() || s.result_words() != r.result_words() {
            return Err(ProtocolError::ResultShape);
        }
        if let Some(v) = r.result_values() {
            out.push(v);
        }
    }
    Ok(out)
}

/// Runs a remote spawn to completion. The calling task is the guest thread
/// and stays blocked for the whole exchange.
pub async fn spawn_remote<E>(
    sim: &Sim,
    topo: &Hypercube,
    req: SpawnRequest,
    cost: SpawnCost,
    body: HostBody<E>,
) -> Result<SpawnOutcome, E>
where
    E: From<ProtocolError> + 'static,
{
    let SpawnRequest { guest, host, closure } = req;
    if guest.core == host {
        return Err(ProtocolError::LocalSpawn(host).into());
    }
    topo.check(host).map_err(ProtocolError::from)?;
    let multiplier = topo
        .path_multiplier(guest.core, host)
        .map_err(ProtocolError::from)?;
    let requested_at = sim.now();
    let mut conn = Connection::new(guest, host);

    // Phase 1: connect, wait for a host thread, pay the fixed overhead.
    conn.advance(ProtocolPhase::Init)?;
    sim.protocol_trace(guest, host, ProtocolPhase::Init.name());
    let (host_loc, ack) = host_accept(sim, guest, host, ControlToken::Connect as u8).await?;
    debug_assert_eq!(ack, ControlToken::Ack);
    let mut channel = Channel::open(guest, host_loc, multiplier, cost.word_ns);
    sim.sleep(VirtualTime::from_ns(cost.overhead_ns * multiplier), "spawn-init")
        .await;

    // Phase 2: ship the closure; the host decodes what arrived on the wire.
    conn.advance(ProtocolPhase::TransmitClosure)?;
    sim.protocol_trace(guest, host, ProtocolPhase::TransmitClosure.name());
    let sizes = closure.payload_sizes();
    let received = closure
        .encode()
        .and_then(|w| Closure::decode(&w))
        .map_err(ProtocolError::from);
    let received = match received {
        Ok(c) => c,
        Err(e) => {
            sim.release_thread(host, host_loc.thread)
                .map_err(ProtocolError::from)?;
            return Err(e.into());
        }
    };
    let installed = match install(sim, host, &received) {
        Ok(i) => i,
        Err(e) => {
            sim.release_thread(host, host_loc.thread)
                .map_err(ProtocolError::from)?;
            sim.protocol_trace(guest, host, "abort");
            return Err(e.into());
        }
    };
    sim.transfer(&channel, sizes.n + sizes.m, "closure-words")
        .await
        .map_err(ProtocolError::from)?;

    // Phase 3: execute on the host thread.
    conn.advance(ProtocolPhase::ExecuteWait)?;
    sim.protocol_trace(guest, host, ProtocolPhase::ExecuteWait.name());
    let started_at = sim.now();
    let sent_args = received.args.clone();
    let outcome = sim
        .spawn(host_loc, "host-exec", body(host_loc, received.args))
        .await;

    // Phase 4: results back to the guest, then teardown.
    conn.advance(ProtocolPhase::ResultsTeardown)?;
    sim.protocol_trace(guest, host, ProtocolPhase::ResultsTeardown.name());
    let shaped = outcome.and_then(|args| results_of(&sent_args, &args).map_err(E::from));
    if let Ok(results) = &shaped {
        let words: usize = results.iter().map(Vec::len).sum();
        sim.transfer(&channel, words, "result-words")
            .await
            .map_err(ProtocolError::from)?;
    }
    uninstall(sim, host, installed)?;
    sim.release_thread(host, host_loc.thread)
        .map_err(ProtocolError::from)?;
    channel.close();
    conn.close();
    sim.protocol_trace(guest, host, "closed");
    let results = shaped?;
    Ok(SpawnOutcome {
        results,
        host_thread: host_loc.thread,
        sizes,
        multiplier,
        requested_at,
        started_at,
        finished_at: sim.now(),
    })
}
