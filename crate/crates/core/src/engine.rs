//! Deterministic discrete-event simulation core.
//!
//! Simulated threads are `async` tasks driven by a single-threaded executor.
//! Every resumption of a task goes through the event queue, which is ordered
//! by `(time, seq)`; the sequence number is a global insertion counter, so
//! identical inputs always replay the same trace. Leaf futures (sleeps,
//! joins, thread grants) remember which task is waiting on them and schedule
//! a wake-up event instead of relying on `Waker`s.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::ops::{Add, AddAssign, Sub};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::topology::NodeId;

/// Length of one virtual clock tick.
pub const TICK_NS: u64 = 10;
pub const DEFAULT_MEM_CAPACITY: u64 = 64 * 1024;
pub const THREADS_PER_CORE: usize = 8;
pub const DEFAULT_JUMP_TABLE_SIZE: usize = 64;

pub type LocalBoxFuture<'a, T> = Pin<Box<dyn Future<Output = T> + 'a>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("event scheduled at {at} which is before the clock ({now})")]
    ScheduledInPast { at: VirtualTime, now: VirtualTime },
    #[error("core {core}: out of memory ({requested} bytes requested, {used}/{capacity} used)")]
    OutOfMemory {
        core: NodeId,
        requested: u64,
        used: u64,
        capacity: u64,
    },
    #[error("send on a closed channel")]
    ChannelClosed,
    #[error("no such core {0}")]
    UnknownCore(NodeId),
    #[error("core {core}: thread {slot} released but not held")]
    ThreadNotHeld { core: NodeId, slot: ThreadSlot },
    #[error("core {core}: unknown memory handle {handle}")]
    BadMemHandle { core: NodeId, handle: u64 },
    #[error("core {core}: jump table index {index} out of range")]
    JumpIndex { core: NodeId, index: usize },
    #[error("simulation stalled with {0} task(s) blocked")]
    Deadlock(usize),
}

/// Virtual time in 10ns ticks. Used both for instants and for durations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_ticks(ticks: u64) -> Self {
        VirtualTime(ticks)
    }

    /// Rounds to the nearest tick; negative and NaN inputs clamp to zero.
    pub fn from_ns(ns: f64) -> Self {
        if ns.is_nan() || ns <= 0.0 {
            return VirtualTime(0);
        }
        VirtualTime((ns / TICK_NS as f64).round() as u64)
    }

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn as_ns(self) -> u64 {
        self.0 * TICK_NS
    }

    pub fn as_micros(self) -> f64 {
        self.as_ns() as f64 / 1000.0
    }

    pub fn saturating_sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 + rhs.0)
    }
}

impl AddAssign for VirtualTime {
    fn add_assign(&mut self, rhs: VirtualTime) {
        self.0 += rhs.0;
    }
}

impl Sub for VirtualTime {
    type Output = VirtualTime;
    fn sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 - rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.as_ns())
    }
}

pub type ThreadSlot = u8;

/// A hardware thread on a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub core: NodeId,
    pub thread: ThreadSlot,
}

impl Location {
    pub fn new(core: NodeId, thread: ThreadSlot) -> Self {
        Location { core, thread }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Resume a task.
    Wake(TaskId),
    /// Trace-only marker.
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: VirtualTime,
    pub seq: u64,
    pub target: Location,
    pub kind: &'static str,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemHandle(pub u64);

/// What a jump-table slot points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpEntry {
    Absent,
    /// Loaded with the program image at boot.
    Static,
    /// Installed from a received closure.
    Heap(MemHandle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaiterId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadGrant {
    Granted(ThreadSlot),
    Queued(WaiterId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreStats {
    pub thread_grants: u64,
    pub thread_releases: u64,
    pub peak_threads: usize,
    pub busy_ticks_granted: u64,
    pub peak_mem: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub mem_capacity: u64,
    pub threads: usize,
    pub jump_table_size: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            mem_capacity: DEFAULT_MEM_CAPACITY,
            threads: THREADS_PER_CORE,
            jump_table_size: DEFAULT_JUMP_TABLE_SIZE,
        }
    }
}

/// One simulated core: private memory, a fixed pool of hardware threads
/// with a FIFO queue for overflow, and a jump table.
#[derive(Debug, Clone)]
pub struct Core {
    id: NodeId,
    mem_capacity: u64,
    mem_used: u64,
    allocations: BTreeMap<MemHandle, u64>,
    next_handle: u64,
    threads: Vec<Option<VirtualTime>>,
    waiters: VecDeque<WaiterId>,
    next_waiter: u64,
    jump_table: Vec<JumpEntry>,
    stats: CoreStats,
}

impl Core {
    pub fn new(id: NodeId, config: CoreConfig) -> Self {
        Core {
            id,
            mem_capacity: config.mem_capacity,
            mem_used: 0,
            allocations: BTreeMap::new(),
            next_handle: 0,
            threads: vec![None; config.threads],
            waiters: VecDeque::new(),
            next_waiter: 0,
            jump_table: vec![JumpEntry::Absent; config.jump_table_size],
            stats: CoreStats::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn mem_used(&self) -> u64 {
        self.mem_used
    }

    pub fn mem_capacity(&self) -> u64 {
        self.mem_capacity
    }

    pub fn active_threads(&self) -> usize {
        self.threads.iter().filter(|t| t.is_some()).count()
    }

    pub fn queued_requests(&self) -> usize {
        self.waiters.len()
    }

    pub fn stats(&self) -> CoreStats {
        self.stats
    }

    pub fn alloc_mem(&mut self, bytes: u64) -> Result<MemHandle, EngineError> {
        if self.mem_used + bytes > self.mem_capacity {
            return Err(EngineError::OutOfMemory {
                core: self.id,
                requested: bytes,
                used: self.mem_used,
                capacity: self.mem_capacity,
            });
        }
        let h = MemHandle(self.next_handle);
        self.next_handle += 1;
        self.mem_used += bytes;
        self.stats.peak_mem = self.stats.peak_mem.max(self.mem_used);
        self.allocations.insert(h, bytes);
        Ok(h)
    }

    pub fn free_mem(&mut self, handle: MemHandle) -> Result<(), EngineError> {
        let bytes = self
            .allocations
            .remove(&handle)
            .ok_or(EngineError::BadMemHandle {
                core: self.id,
                handle: handle.0,
            })?;
        self.mem_used -= bytes;
        Ok(())
    }

    /// Claims the lowest free slot, or joins the FIFO queue.
    pub fn request_thread(&mut self, now: VirtualTime) -> ThreadGrant {
        if self.waiters.is_empty() {
            if let Some(slot) = self.threads.iter().position(Option::is_none) {
                self.grant(slot, now);
                return ThreadGrant::Granted(slot as ThreadSlot);
            }
        }
        let w = WaiterId(self.next_waiter);
        self.next_waiter += 1;
        self.waiters.push_back(w);
        ThreadGrant::Queued(w)
    }

    fn grant(&mut self, slot: usize, now: VirtualTime) {
        self.threads[slot] = Some(now);
        self.stats.thread_grants += 1;
        self.stats.peak_threads = self.stats.peak_threads.max(self.active_threads());
    }

    /// Frees `slot`. If a request is queued, the slot passes straight to the
    /// head of the queue and that waiter is returned.
    pub fn release_thread(
        &mut self,
        slot: ThreadSlot,
        now: VirtualTime,
    ) -> Result<Option<(WaiterId, ThreadSlot)>, EngineError> {
        let since = self
            .threads
            .get_mut(slot as usize)
            .and_then(Option::take)
            .ok_or(EngineError::ThreadNotHeld { core: self.id, slot })?;
        self.stats.thread_releases += 1;
        self.stats.busy_ticks_granted += now.saturating_sub(since).ticks();
        Ok(self.waiters.pop_front().map(|w| {
            self.grant(slot as usize, now);
            (w, slot)
        }))
    }

    pub fn jump_table_size(&self) -> usize {
        self.jump_table.len()
    }

    pub fn jump(&self, index: usize) -> Result<JumpEntry, EngineError> {
        self.jump_table
            .get(index)
            .copied()
            .ok_or(EngineError::JumpIndex { core: self.id, index })
    }

    /// Sets `jump[index]`, returning the previous entry.
    pub fn set_jump(&mut self, index: usize, entry: JumpEntry) -> Result<JumpEntry, EngineError> {
        let slot = self
            .jump_table
            .get_mut(index)
            .ok_or(EngineError::JumpIndex { core: self.id, index })?;
        Ok(std::mem::replace(slot, entry))
    }
}

/// A synchronous point-to-point channel. Both endpoints are occupied until a
/// transfer completes.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub a: Location,
    pub b: Location,
    multiplier: f64,
    word_ns: f64,
    open: bool,
}

impl Channel {
    pub fn open(a: Location, b: Location, multiplier: f64, word_ns: f64) -> Self {
        Channel {
            a,
            b,
            multiplier,
            word_ns,
            open: true,
        }
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    /// Completion time of a `count`-word transfer started at `now`.
    pub fn send_words(&self, now: VirtualTime, count: usize) -> Result<VirtualTime, EngineError> {
        if !self.open {
            return Err(EngineError::ChannelClosed);
        }
        Ok(now + VirtualTime::from_ns(count as f64 * self.word_ns * self.multiplier))
    }
}

type TaskFuture = LocalBoxFuture<'static, ()>;
type SlotWaiter = (TaskId, Rc<Cell<Option<ThreadSlot>>>);

struct TraceLog {
    hasher: Sha256,
    events: Option<Vec<String>>,
    protocol: Option<Vec<String>>,
    dispatched: u64,
}

impl TraceLog {
    fn record(&mut self, stream: u8, line: String, keep: fn(&mut Self) -> &mut Option<Vec<String>>) {
        self.hasher.update([stream]);
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        if let Some(v) = keep(self) {
            v.push(line);
        }
    }
}

struct State {
    now: VirtualTime,
    seq: u64,
    queue: BTreeMap<(VirtualTime, u64), Event>,
    cores: Vec<Core>,
    current: Option<TaskId>,
    task_locs: Vec<Location>,
    live_tasks: usize,
    thread_waiters: BTreeMap<(NodeId, u64), SlotWaiter>,
    trace: TraceLog,
}

struct Inner {
    state: RefCell<State>,
    tasks: RefCell<Vec<Option<TaskFuture>>>,
}

/// Handle to a simulation. Cheap to clone; all clones share one world.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<Inner>,
}

impl fmt::Debug for Sim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.inner.state.borrow();
        f.debug_struct("Sim")
            .field("now", &s.now)
            .field("cores", &s.cores.len())
            .field("queued", &s.queue.len())
            .finish()
    }
}

impl Sim {
    pub fn new(cores: u32, config: CoreConfig) -> Self {
        Sim {
            inner: Rc::new(Inner {
                state: RefCell::new(State {
                    now: VirtualTime::ZERO,
                    seq: 0,
                    queue: BTreeMap::new(),
                    cores: (0..cores).map(|i| Core::new(NodeId(i), config)).collect(),
                    current: None,
                    task_locs: Vec::new(),
                    live_tasks: 0,
                    thread_waiters: BTreeMap::new(),
                    trace: TraceLog {
                        hasher: Sha256::new(),
                        events: None,
                        protocol: None,
                        dispatched: 0,
                    },
                }),
                tasks: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Keep trace lines in memory (the hash is always maintained).
    pub fn record_trace(&self, on: bool) {
        let mut s = self.inner.state.borrow_mut();
        s.trace.events = on.then(Vec::new);
        s.trace.protocol = on.then(Vec::new);
    }

    pub fn now(&self) -> VirtualTime {
        self.inner.state.borrow().now
    }

    pub fn core_count(&self) -> u32 {
        self.inner.state.borrow().cores.len() as u32
    }

    pub fn with_core<R>(&self, id: NodeId, f: impl FnOnce(&Core) -> R) -> Result<R, EngineError> {
        let s = self.inner.state.borrow();
        s.cores
            .get(id.0 as usize)
            .map(f)
            .ok_or(EngineError::UnknownCore(id))
    }

    pub fn with_core_mut<R>(&self, id: NodeId, f: impl FnOnce(&mut Core) -> R) -> Result<R, EngineError> {
        let mut s = self.inner.state.borrow_mut();
        s.cores
            .get_mut(id.0 as usize)
            .map(f)
            .ok_or(EngineError::UnknownCore(id))
    }

    pub fn cores(&self) -> Vec<Core> {
        self.inner.state.borrow().cores.clone()
    }

    /// Enqueues an event with a fresh sequence number.
    pub fn schedule(
        &self,
        time: VirtualTime,
        target: Location,
        kind: &'static str,
        action: Action,
    ) -> Result<u64, EngineError> {
        let mut s = self.inner.state.borrow_mut();
        if time < s.now {
            return Err(EngineError::ScheduledInPast { at: time, now: s.now });
        }
        let seq = s.seq;
        s.seq += 1;
        s.queue.insert(
            (time, seq),
            Event {
                time,
                seq,
                target,
                kind,
                action,
            },
        );
        Ok(seq)
    }

    fn wake_at(&self, task: TaskId, time: VirtualTime, kind: &'static str) {
        let target = self.inner.state.borrow().task_locs[task.0];
        self.schedule(time, target, kind, Action::Wake(task))
            .expect("wake-ups are never in the past");
    }

    fn current_task(&self) -> TaskId {
        self.inner
            .state
            .borrow()
            .current
            .expect("simulation futures must be polled by the engine")
    }

    /// Starts a task at `loc`; it first runs at the current time.
    pub fn spawn<T: 'static>(
        &self,
        loc: Location,
        kind: &'static str,
        fut: impl Future<Output = T> + 'static,
    ) -> JoinHandle<T> {
        let slot = Rc::new(RefCell::new(JoinSlot {
            result: None,
            waiter: None,
        }));
        let done = slot.clone();
        let sim = self.clone();
        let task: TaskFuture = Box::pin(async move {
            let out = fut.await;
            let waiter = {
                let mut d = done.borrow_mut();
                d.result = Some(out);
                d.waiter.take()
            };
            if let Some(w) = waiter {
                sim.wake_at(w, sim.now(), "join");
            }
        });
        let id = {
            let mut tasks = self.inner.tasks.borrow_mut();
            tasks.push(Some(task));
            TaskId(tasks.len() - 1)
        };
        {
            let mut s = self.inner.state.borrow_mut();
            s.task_locs.push(loc);
            s.live_tasks += 1;
        }
        self.wake_at(id, self.now(), kind);
        JoinHandle {
            sim: self.clone(),
            slot,
        }
    }

    /// Dispatches events until the queue drains. Returns the final clock.
    pub fn run(&self) -> Result<VirtualTime, EngineError> {
        loop {
            let ev = {
                let mut s = self.inner.state.borrow_mut();
                let Some((_, ev)) = s.queue.pop_first() else {
                    break;
                };
                debug_assert!(ev.time >= s.now, "clock went backwards");
                s.now = ev.time;
                s.trace.dispatched += 1;
                let line = format!(
                    "{},{},{},{}",
                    ev.time.as_ns(),
                    ev.target.core,
                    ev.target.thread,
                    ev.kind
                );
                s.trace.record(b'E', line, |t| &mut t.events);
                ev
            };
            if let Action::Wake(id) = ev.action {
                self.poll_task(id);
            }
        }
        let live = self.inner.state.borrow().live_tasks;
        if live > 0 {
            return Err(EngineError::Deadlock(live));
        }
        Ok(self.now())
    }

    fn poll_task(&self, id: TaskId) {
        let Some(mut fut) = self.inner.tasks.borrow_mut()[id.0].take() else {
            return;
        };
        self.inner.state.borrow_mut().current = Some(id);
        let mut cx = Context::from_waker(Waker::noop());
        let done = fut.as_mut().poll(&mut cx).is_ready();
        let mut s = self.inner.state.borrow_mut();
        s.current = None;
        if done {
            s.live_tasks -= 1;
        } else {
            drop(s);
            self.inner.tasks.borrow_mut()[id.0] = Some(fut);
        }
    }

    /// Suspends the calling task for `dur`.
    pub fn sleep(&self, dur: VirtualTime, kind: &'static str) -> Sleep {
        Sleep {
            sim: self.clone(),
            deadline: self.now() + dur,
            kind,
            registered: false,
        }
    }

    pub fn sleep_until(&self, deadline: VirtualTime, kind: &'static str) -> Sleep {
        Sleep {
            sim: self.clone(),
            deadline,
            kind,
            registered: false,
        }
    }

    /// Transfers `count` words over `ch`, suspending until completion.
    pub async fn transfer(
        &self,
        ch: &Channel,
        count: usize,
        kind: &'static str,
    ) -> Result<VirtualTime, EngineError> {
        let done = ch.send_words(self.now(), count)?;
        self.sleep_until(done, kind).await;
        Ok(done)
    }

    /// Claims a hardware thread on `core`, waiting FIFO when all are busy.
    pub fn acquire_thread(&self, core: NodeId) -> AcquireThread {
        AcquireThread {
            sim: self.clone(),
            core,
            cell: None,
        }
    }

    pub fn release_thread(&self, core: NodeId, slot: ThreadSlot) -> Result<(), EngineError> {
        let now = self.now();
        let handoff = self.with_core_mut(core, |c| c.release_thread(slot, now))??;
        if let Some((w, slot)) = handoff {
            let (task, cell) = self
                .inner
                .state
                .borrow_mut()
                .thread_waiters
                .remove(&(core, w.0))
                .expect("queued thread request has a waiter");
            cell.set(Some(slot));
            self.wake_at(task, now, "thread-grant");
        }
        Ok(())
    }

    /// Appends a protocol trace line `time_ns,guest,host,phase`.
    pub fn protocol_trace(&self, guest: Location, host: NodeId, phase: &str) {
        let mut s = self.inner.state.borrow_mut();
        let line = format!("{},{},{},{}", s.now.as_ns(), guest.core, host, phase);
        s.trace.record(b'P', line, |t| &mut t.protocol);
    }

    pub fn event_trace(&self) -> Vec<String> {
        self.inner.state.borrow().trace.events.clone().unwrap_or_default()
    }

    pub fn protocol_lines(&self) -> Vec<String> {
        self.inner
            .state
            .borrow()
            .trace
            .protocol
            .clone()
            .unwrap_or_default()
    }

    pub fn events_dispatched(&self) -> u64 {
        self.inner.state.borrow().trace.dispatched
    }

    /// SHA-256 over every trace line emitted so far, hex encoded.
    pub fn trace_hash(&self) -> String {
        hex::encode(self.inner.state.borrow().trace.hasher.clone().finalize())
    }
}

struct JoinSlot<T> {
    result: Option<T>,
    waiter: Option<TaskId>,
}

/// Completes with the spawned task's output.
pub struct JoinHandle<T> {
    sim: Sim,
    slot: Rc<RefCell<JoinSlot<T>>>,
}

impl<T> Future for JoinHandle<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<T> {
        let mut slot = self.slot.borrow_mut();
        match slot.result.take() {
            Some(v) => Poll::Ready(v),
            None => {
                slot.waiter = Some(self.sim.current_task());
                Poll::Pending
            }
        }
    }
}

pub struct Sleep {
    sim: Sim,
    deadline: VirtualTime,
    kind: &'static str,
    registered: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.sim.now() >= self.deadline {
            return Poll::Ready(());
        }
        if !self.registered {
            let task = self.sim.current_task();
            self.sim.wake_at(task, self.deadline, self.kind);
            self.registered = true;
        }
        Poll::Pending
    }
}

pub struct AcquireThread {
    sim: Sim,
    core: NodeId,
    cell: Option<Rc<Cell<Option<ThreadSlot>>>>,
}

impl Future for AcquireThread {
    type Output = Result<ThreadSlot, EngineError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let Some(cell) = &self.cell {
            return match cell.get() {
                Some(slot) => Poll::Ready(Ok(slot)),
                None => Poll::Pending,
            };
        }
        let now = self.sim.now();
        let core = self.core;
        let grant = match self.sim.with_core_mut(core, |c| c.request_thread(now)) {
            Ok(g) => g,
            Err(e) => return Poll::Ready(Err(e)),
        };
        match grant {
            ThreadGrant::Granted(slot) => Poll::Ready(Ok(slot)),
            ThreadGrant::Queued(w) => {
                let cell = Rc::new(Cell::new(None));
                let task = self.sim.current_task();
                self.sim
                    .inner
                    .state
                    .borrow_mut()
                    .thread_waiters
                    .insert((core, w.0), (task, cell.clone()));
                self.cell = Some(cell);
                Poll::Pending
            }
        }
    }
}
