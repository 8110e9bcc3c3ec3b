//! Programming surface for simulated programs: sequential code is ordinary
//! `async` Rust, `par` forks onto hardware threads of the current core and
//! joins, `on` runs a registered procedure on another core through the
//! spawn protocol, and `ArraySlice` gives aliasing views of arrays.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::closure::{Argument, Closure, ClosureError, PayloadSizes, ProcedureImage, Word};
use crate::costmodel::{CostConstants, CostModel, SeqCostMode};
use crate::engine::{CoreConfig, EngineError, JumpEntry, LocalBoxFuture, Location, Sim, VirtualTime};
use crate::protocol::{spawn_remote, HostBody, ProtocolError, SpawnCost, SpawnRequest};
use crate::topology::{Hypercube, NodeId, TopologyError};

pub type ProcIndex = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error("no procedure registered at index {0}")]
    UnknownProcedure(ProcIndex),
    #[error("procedure index {0} registered twice")]
    DuplicateProcedure(ProcIndex),
    #[error("procedure index {index} does not fit a jump table of {size} entries")]
    IndexOutOfTable { index: ProcIndex, size: usize },
    #[error("procedure {index} is not resident on core {core}")]
    NotResident { core: NodeId, index: ProcIndex },
    #[error("alias range {start}..{end} outside an array of length {len}")]
    AliasOutOfBounds { start: usize, end: usize, len: usize },
    #[error("closure of procedure {index} needs {needed_ns}ns of fixed transfer but its spawn overhead is {overhead_ns}ns")]
    ClosureTooLarge {
        index: ProcIndex,
        needed_ns: f64,
        overhead_ns: f64,
    },
    #[error("bad argument: {0}")]
    BadArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// A view of `len` words of a shared array starting at `start`. Writes
/// through any view are visible through every other view of the same base.
#[derive(Clone)]
pub struct ArraySlice {
    base: Rc<RefCell<Vec<Word>>>,
    start: usize,
    len: usize,
}

impl fmt::Debug for ArraySlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArraySlice")
            .field("start", &self.start)
            .field("len", &self.len)
            .field("data", &self.to_vec())
            .finish()
    }
}

impl ArraySlice {
    pub fn new(data: Vec<Word>) -> Self {
        let len = data.len();
        ArraySlice {
            base: Rc::new(RefCell::new(data)),
            start: 0,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// A sub-view covering `range` of this view (relative indices).
    pub fn alias(&self, range: Range<usize>) -> Result<ArraySlice, RuntimeError> {
        if range.start > range.end || range.end > self.len {
            return Err(RuntimeError::AliasOutOfBounds {
                start: range.start,
                end: range.end,
                len: self.len,
            });
        }
        Ok(ArraySlice {
            base: self.base.clone(),
            start: self.start + range.start,
            len: range.end - range.start,
        })
    }

    /// Splits into `[0, len/2)` and `[len/2, len)`.
    pub fn halves(&self) -> (ArraySlice, ArraySlice) {
        let mid = self.len / 2;
        (
            self.alias(0..mid).expect("in bounds"),
            self.alias(mid..self.len).expect("in bounds"),
        )
    }

    pub fn to_vec(&self) -> Vec<Word> {
        self.base.borrow()[self.start..self.start + self.len].to_vec()
    }

    pub fn get(&self, i: usize) -> Option<Word> {
        (i < self.len).then(|| self.base.borrow()[self.start + i])
    }

    pub fn set(&self, i: usize, v: Word) -> Result<(), RuntimeError> {
        if i >= self.len {
            return Err(RuntimeError::AliasOutOfBounds {
                start: i,
                end: i + 1,
                len: self.len,
            });
        }
        self.base.borrow_mut()[self.start + i] = v;
        Ok(())
    }

    pub fn write(&self, data: &[Word]) -> Result<(), RuntimeError> {
        if data.len() != self.len {
            return Err(RuntimeError::BadArgument(format!(
                "write of {} words into a view of {}",
                data.len(),
                self.len
            )));
        }
        self.with_mut(|s| s.copy_from_slice(data));
        Ok(())
    }

    pub fn with_mut<R>(&self, f: impl FnOnce(&mut [Word]) -> R) -> R {
        let mut b = self.base.borrow_mut();
        f(&mut b[self.start..self.start + self.len])
    }

    pub fn shares_base(&self, other: &ArraySlice) -> bool {
        Rc::ptr_eq(&self.base, &other.base)
    }
}

/// A procedure argument as seen by running code.
#[derive(Debug, Clone)]
pub enum Value {
    Const(Word),
    /// Single referenced variable (a one-word view).
    Var(ArraySlice),
    Array(ArraySlice),
}

impl Value {
    pub fn as_const(&self) -> Result<Word, RuntimeError> {
        match self {
            Value::Const(w) => Ok(*w),
            other => Err(RuntimeError::BadArgument(format!(
                "expected a constant, got {other:?}"
            ))),
        }
    }

    pub fn as_array(&self) -> Result<&ArraySlice, RuntimeError> {
        match self {
            Value::Array(a) | Value::Var(a) => Ok(a),
            other => Err(RuntimeError::BadArgument(format!(
                "expected an array, got {other:?}"
            ))),
        }
    }

    fn to_argument(&self) -> Argument {
        match self {
            Value::Const(w) => Argument::ConstVal(*w),
            Value::Var(s) => Argument::SingleVar(s.get(0).unwrap_or(0)),
            Value::Array(s) => Argument::ArrayRef(s.to_vec()),
        }
    }

    fn from_argument(a: Argument) -> Value {
        match a {
            Argument::ConstVal(w) => Value::Const(w),
            Argument::SingleVar(w) => Value::Var(ArraySlice::new(vec![w])),
            Argument::ArrayRef(v) => Value::Array(ArraySlice::new(v)),
        }
    }
}

pub type ProcResult = Result<(), RuntimeError>;
pub type Behavior = Rc<dyn Fn(Ctx, Vec<Value>) -> LocalBoxFuture<'static, ProcResult>>;
pub type Block = Box<dyn FnOnce(Ctx) -> LocalBoxFuture<'static, ProcResult>>;

#[derive(Clone)]
pub struct Procedure {
    pub index: ProcIndex,
    pub name: String,
    pub image_bytes: usize,
    /// Procedures this one calls directly; they travel in its closure.
    pub callees: Vec<ProcIndex>,
    /// Total fixed cost of spawning this procedure remotely with empty
    /// arrays, over a single off-chip hop.
    pub spawn_overhead_ns: f64,
    pub behavior: Behavior,
}

impl fmt::Debug for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Procedure")
            .field("index", &self.index)
            .field("name", &self.name)
            .field("image_bytes", &self.image_bytes)
            .field("callees", &self.callees)
            .finish()
    }
}

/// Procedures keyed by jump-table index, identical on every core.
#[derive(Debug, Clone, Default)]
pub struct ProcedureRegistry {
    procs: BTreeMap<ProcIndex, Procedure>,
}

impl ProcedureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, p: Procedure) -> Result<(), RuntimeError> {
        if self.procs.contains_key(&p.index) {
            return Err(RuntimeError::DuplicateProcedure(p.index));
        }
        ProcedureImage::synthetic(p.index, p.image_bytes)?;
        self.procs.insert(p.index, p);
        Ok(())
    }

    pub fn get(&self, index: ProcIndex) -> Result<&Procedure, RuntimeError> {
        self.procs
            .get(&index)
            .ok_or(RuntimeError::UnknownProcedure(index))
    }

    pub fn indices(&self) -> impl Iterator<Item = ProcIndex> + '_ {
        self.procs.keys().copied()
    }

    /// `index` followed by its transitive callees, breadth first, each once.
    pub fn closure_procs(&self, index: ProcIndex) -> Result<Vec<ProcIndex>, RuntimeError> {
        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        let mut queue = VecDeque::from([index]);
        while let Some(i) = queue.pop_front() {
            if !seen.insert(i) {
                continue;
            }
            order.push(i);
            queue.extend(self.get(i)?.callees.iter().copied());
        }
        Ok(order)
    }

    pub fn image(&self, index: ProcIndex) -> Result<ProcedureImage, RuntimeError> {
        let p = self.get(index)?;
        Ok(ProcedureImage::synthetic(index, p.image_bytes)?)
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub topology: Hypercube,
    pub constants: CostConstants,
    pub seq_mode: SeqCostMode,
    pub core: CoreConfig,
    /// Run every `on` as a local call.
    pub force_local: bool,
    pub keep_trace: bool,
}

impl RuntimeConfig {
    pub fn new(topology: Hypercube) -> Self {
        RuntimeConfig {
            topology,
            constants: CostConstants::default(),
            seq_mode: SeqCostMode::Closed,
            core: CoreConfig::default(),
            force_local: false,
            keep_trace: false,
        }
    }
}

/// One remote spawn, as observed by the runtime.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpawnRecord {
    pub guest: NodeId,
    pub host: NodeId,
    pub proc: ProcIndex,
    pub hops: u32,
    pub multiplier: f64,
    pub sizes: PayloadSizes,
    pub requested_at: VirtualTime,
    pub started_at: VirtualTime,
    pub finished_at: VirtualTime,
}

/// Summary of one finished simulation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub elapsed: VirtualTime,
    pub spawns: Vec<SpawnRecord>,
    /// `(label, time)` pairs recorded by programs.
    pub marks: Vec<(u32, VirtualTime)>,
    pub cores_used: usize,
    pub events: u64,
    pub trace_hash: String,
    /// Event lines then protocol lines, when the trace is kept.
    pub trace: Vec<String>,
}

pub struct Runtime {
    sim: Sim,
    config: RuntimeConfig,
    model: CostModel,
    registry: ProcedureRegistry,
    spawns: RefCell<Vec<SpawnRecord>>,
    marks: RefCell<Vec<(u32, VirtualTime)>>,
    busy_cores: RefCell<BTreeSet<NodeId>>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("config", &self.config)
            .field("registry", &self.registry)
            .finish()
    }
}

impl Runtime {
    /// Boots every core: node 0 holds the whole program, the rest only
    /// the kernel.
    pub fn new(config: RuntimeConfig, registry: ProcedureRegistry) -> Result<Rc<Self>, RuntimeError> {
        config
            .constants
            .validate()
            .map_err(|e| RuntimeError::Domain(e.to_string()))?;
        let sim = Sim::new(config.topology.node_count(), config.core);
        sim.record_trace(config.keep_trace);
        for index in registry.indices() {
            if index as usize >= config.core.jump_table_size {
                return Err(RuntimeError::IndexOutOfTable {
                    index,
                    size: config.core.jump_table_size,
                });
            }
            sim.with_core_mut(NodeId(0), |c| c.set_jump(index as usize, JumpEntry::Static))??;
        }
        Ok(Rc::new(Runtime {
            sim,
            model: CostModel::new(config.constants),
            config,
            registry,
            spawns: RefCell::new(Vec::new()),
            marks: RefCell::new(Vec::new()),
            busy_cores: RefCell::new(BTreeSet::new()),
        }))
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn registry(&self) -> &ProcedureRegistry {
        &self.registry
    }

    pub fn topology(&self) -> &Hypercube {
        &self.config.topology
    }

    /// Calls `proc` on node 0 and runs the simulation to completion.
    pub fn execute(self: &Rc<Self>, proc: ProcIndex, args: Vec<Value>) -> Result<RunReport, RuntimeError> {
        let out: Rc<RefCell<Option<ProcResult>>> = Rc::new(RefCell::new(None));
        let (rt, o) = (self.clone(), out.clone());
        let root = NodeId(0);
        self.sim.spawn(Location::new(root, 0), "boot", async move {
            let r = async {
                let slot = rt.sim.acquire_thread(root).await?;
                let ctx = Ctx {
                    rt: rt.clone(),
                    loc: Location::new(root, slot),
                };
                let r = ctx.call(proc, args).await;
                rt.sim.release_thread(root, slot)?;
                r
            }
            .await;
            *o.borrow_mut() = Some(r);
        });
        self.sim.run()?;
        let result = out.borrow_mut().take().expect("root task finished");
        result?;
        Ok(self.report())
    }

    fn report(&self) -> RunReport {
        let spawns = self.spawns.borrow().clone();
        let mut busy = self.busy_cores.borrow().clone();
        busy.insert(NodeId(0));
        RunReport {
            elapsed: self.sim.now(),
            cores_used: busy.len(),
            spawns,
            marks: self.marks.borrow().clone(),
            events: self.sim.events_dispatched(),
            trace_hash: self.sim.trace_hash(),
            trace: self
                .sim
                .event_trace()
                .into_iter()
                .map(|l| format!("event,{l}"))
                .chain(
                    self.sim
                        .protocol_lines()
                        .into_iter()
                        .map(|l| format!("protocol,{l}")),
                )
                .collect(),
        }
    }

    /// Checks that every thread was returned, every heap allocation freed
    /// and every jump table restored to its boot state.
    pub fn check_conservation(&self) -> Result<(), String> {
        for core in self.sim.cores() {
            let s = core.stats();
            if core.active_threads() != 0 || s.thread_grants != s.thread_releases {
                return Err(format!(
                    "core {}: {} threads still active ({} grants, {} releases)",
                    core.id(),
                    core.active_threads(),
                    s.thread_grants,
                    s.thread_releases
                ));
            }
            if core.mem_used() != 0 {
                return Err(format!("core {}: {} bytes leaked", core.id(), core.mem_used()));
            }
            for i in 0..core.jump_table_size() {
                let e = core.jump(i).map_err(|e| e.to_string())?;
                let boot = if core.id() == NodeId(0) && self.registry.get(i as ProcIndex).is_ok() {
                    JumpEntry::Static
                } else {
                    JumpEntry::Absent
                };
                if e != boot {
                    return Err(format!("core {}: jump[{i}] left as {e:?}", core.id()));
                }
            }
        }
        Ok(())
    }
}

/// Execution context of a simulated thread.
#[derive(Clone)]
pub struct Ctx {
    rt: Rc<Runtime>,
    loc: Location,
}

impl fmt::Debug for Ctx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ctx").field("loc", &self.loc).finish()
    }
}

impl Ctx {
    pub fn location(&self) -> Location {
        self.loc
    }

    pub fn core(&self) -> NodeId {
        self.loc.core
    }

    pub fn runtime(&self) -> &Rc<Runtime> {
        &self.rt
    }

    pub fn model(&self) -> &CostModel {
        &self.rt.model
    }

    pub fn now(&self) -> VirtualTime {
        self.rt.sim.now()
    }

    /// Advances this thread's clock by `ns` of sequential work.
    pub async fn compute(&self, ns: f64, kind: &'static str) {
        self.rt.sim.sleep(VirtualTime::from_ns(ns), kind).await;
    }

    /// Records `(label, now)` in the run's measurement log.
    pub fn mark(&self, label: u32) {
        self.rt.marks.borrow_mut().push((label, self.now()));
    }

    /// Calls a resident procedure on this thread.
    pub async fn call(&self, index: ProcIndex, args: Vec<Value>) -> ProcResult {
        let proc = self.rt.registry.get(index)?;
        if self.rt.sim.with_core(self.core(), |c| c.jump(index as usize))?? == JumpEntry::Absent {
            return Err(RuntimeError::NotResident {
                core: self.core(),
                index,
            });
        }
        let behavior = proc.behavior.clone();
        behavior(self.clone(), args).await
    }

    /// Synchronous fork-join: every block starts at the same virtual time on
    /// its own hardware thread of this core, and the construct completes when
    /// the last block does. Forking two or more blocks costs one level
    /// overhead up front.
    pub async fn par(&self, mut blocks: Vec<Block>) -> ProcResult {
        if blocks.is_empty() {
            return Ok(());
        }
        let first = blocks.remove(0);
        if blocks.is_empty() {
            return first(self.clone()).await;
        }
        self.compute(self.rt.config.constants.level_overhead_ns, "fork")
            .await;
        let mut handles = Vec::with_capacity(blocks.len());
        for block in blocks {
            let slot = self.rt.sim.acquire_thread(self.core()).await?;
            let child = Ctx {
                rt: self.rt.clone(),
                loc: Location::new(self.core(), slot),
            };
            let sim = self.rt.sim.clone();
            handles.push(self.rt.sim.spawn(child.loc, "fork", async move {
                let core = child.core();
                let r = block(child).await;
                sim.release_thread(core, slot)?;
                r
            }));
        }
        let mut result = first(self.clone()).await;
        for h in handles {
            let r = h.await;
            if result.is_ok() {
                result = r;
            }
        }
        result
    }

    /// Runs `index` on `target` with `args`, writing referenced arguments
    /// back when it completes. Targeting this core is a plain local call.
    pub async fn on(&self, target: NodeId, index: ProcIndex, args: Vec<Value>) -> ProcResult {
        let rt = &self.rt;
        rt.config.topology.check(target)?;
        if target == self.core() || rt.config.force_local {
            return self.call(index, args).await;
        }
        let procs = rt.registry.closure_procs(index)?;
        for &p in &procs {
            let entry = rt.sim.with_core(self.core(), |c| c.jump(p as usize))??;
            if entry == JumpEntry::Absent {
                return Err(RuntimeError::NotResident {
                    core: self.core(),
                    index: p,
                });
            }
        }
        let images = procs
            .iter()
            .map(|&p| rt.registry.image(p))
            .collect::<Result<Vec<_>, _>>()?;
        let closure = Closure::new(args.iter().map(Value::to_argument).collect(), images)?;

        // The procedure's spawn overhead covers its fixed-size closure; only
        // array contents are charged on top of it.
        let sizes = closure.payload_sizes();
        let array_words: usize = closure
            .args
            .iter()
            .filter_map(|a| match a {
                Argument::ArrayRef(v) => Some(v.len()),
                _ => None,
            })
            .sum();
        let word_ns = rt.config.constants.word_ns;
        let fixed_ns = word_ns * (sizes.total() - 2 * array_words) as f64;
        let overhead_ns = rt.registry.get(index)?.spawn_overhead_ns;
        if fixed_ns > overhead_ns {
            return Err(RuntimeError::ClosureTooLarge {
                index,
                needed_ns: fixed_ns,
                overhead_ns,
            });
        }
        let cost = SpawnCost {
            overhead_ns: overhead_ns - fixed_ns,
            word_ns,
        };

        let host_rt = rt.clone();
        let body: HostBody<RuntimeError> = Box::new(move |loc, received| {
            Box::pin(async move {
                host_rt.busy_cores.borrow_mut().insert(loc.core);
                let ctx = Ctx { rt: host_rt, loc };
                let values: Vec<Value> = received.into_iter().map(Value::from_argument).collect();
                ctx.call(index, values.clone()).await?;
                Ok(values.iter().map(Value::to_argument).collect())
            })
        });
        let req = SpawnRequest {
            guest: self.loc,
            host: target,
            closure,
        };
        let out = spawn_remote(&rt.sim, &rt.config.topology, req, cost, body).await?;

        let mut results = out.results.into_iter();
        for v in &args {
            match v {
                Value::Const(_) => {}
                Value::Var(s) | Value::Array(s) => {
                    let words = results.next().ok_or(ProtocolError::ResultShape)?;
                    s.write(&words)?;
                }
            }
        }
        rt.spawns.borrow_mut().push(SpawnRecord {
            guest: self.core(),
            host: target,
            proc: index,
            hops: rt.config.topology.hop_distance(self.core(), target)?,
            multiplier: out.multiplier,
            sizes: out.sizes,
            requested_at: out.requested_at,
            started_at: out.started_at,
            finished_at: out.finished_at,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOOP: ProcIndex = 1;
    const DOUBLE: ProcIndex = 2;
    const HELPER: ProcIndex = 3;
    const SPIN: ProcIndex = 4;

    fn registry() -> ProcedureRegistry {
        let mut r = ProcedureRegistry::new();
        r.register(Procedure {
            index: NOOP,
            name: "noop".into(),
            image_bytes: 16,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|_ctx, _args| Box::pin(async { Ok(()) })),
        })
        .unwrap();
        r.register(Procedure {
            index: HELPER,
            name: "helper".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|_ctx, args| {
                Box::pin(async move {
                    args[0]
                        .as_array()?
                        .with_mut(|s| s.iter_mut().for_each(|x| *x *= 2));
                    Ok(())
                })
            }),
        })
        .unwrap();
        r.register(Procedure {
            index: DOUBLE,
            name: "double".into(),
            image_bytes: 32,
            callees: vec![HELPER],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|ctx, args| Box::pin(async move { ctx.call(HELPER, args).await })),
        })
        .unwrap();
        r.register(Procedure {
            index: SPIN,
            name: "spin".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|ctx, args| {
                Box::pin(async move {
                    let us = args[0].as_const()?;
                    ctx.compute(f64::from(us) * 1000.0, "spin").await;
                    Ok(())
                })
            }),
        })
        .unwrap();
        r
    }

    fn runtime(d: u32) -> Rc<Runtime> {
        Runtime::new(RuntimeConfig::new(Hypercube::uniform(d).unwrap()), registry()).unwrap()
    }

    /// Registers a one-off driver at index 10 and runs it.
    fn drive(
        d: u32,
        force_local: bool,
        f: impl Fn(Ctx) -> LocalBoxFuture<'static, ProcResult> + 'static,
    ) -> (Rc<Runtime>, Result<RunReport, RuntimeError>) {
        let mut reg = registry();
        reg.register(Procedure {
            index: 10,
            name: "driver".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(move |ctx, _| f(ctx)),
        })
        .unwrap();
        let mut cfg = RuntimeConfig::new(Hypercube::uniform(d).unwrap());
        cfg.force_local = force_local;
        let rt = Runtime::new(cfg, reg).unwrap();
        let r = rt.execute(10, vec![]);
        (rt, r)
    }

    #[test]
    fn alias_views() {
        let a = ArraySlice::new(vec![1, 2, 3, 4, 5]);
        let full = a.alias(0..5).unwrap();
        assert_eq!(full.to_vec(), a.to_vec());
        let head = a.alias(0..2).unwrap();
        head.write(&[9, 8]).unwrap();
        assert_eq!(a.to_vec(), vec![9, 8, 3, 4, 5]);
        let mid = a.alias(1..5).unwrap();
        let inner = mid.alias(1..3).unwrap();
        inner.set(0, 42).unwrap();
        assert_eq!(a.get(2), Some(42));
        assert_eq!(inner.to_vec(), vec![42, 4]);
        assert!(a.alias(3..6).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let backwards = a.alias(3..2);
        assert!(backwards.is_err());
        let (l, r) = a.halves();
        assert_eq!((l.len(), r.len()), (2, 3));
        assert!(l.shares_base(&r));
    }

    #[test]
    fn closure_procs_are_transitive() {
        let r = registry();
        assert_eq!(r.closure_procs(DOUBLE).unwrap(), vec![DOUBLE, HELPER]);
        assert_eq!(r.closure_procs(NOOP).unwrap(), vec![NOOP]);
        assert!(r.closure_procs(99).is_err());
        let mut r2 = registry();
        assert!(r2
            .register(Procedure {
                index: NOOP,
                ..r.get(NOOP).unwrap().clone()
            })
            .is_err());
    }

    #[test]
    fn boot_state() {
        let rt = runtime(2);
        let cores = rt.sim().cores();
        assert_eq!(cores[0].jump(DOUBLE as usize).unwrap(), JumpEntry::Static);
        assert_eq!(cores[1].jump(DOUBLE as usize).unwrap(), JumpEntry::Absent);
        let mut cfg = RuntimeConfig::new(Hypercube::uniform(1).unwrap());
        cfg.core.jump_table_size = 2;
        assert!(matches!(
            Runtime::new(cfg, registry()),
            Err(RuntimeError::IndexOutOfTable { .. })
        ));
    }

    #[test]
    fn par_of_one_block_is_sequential() {
        let (_rt, r) = drive(0, false, |ctx| {
            Box::pin(async move {
                let b: Block = Box::new(|c| {
                    Box::pin(async move {
                        c.compute(5_000.0, "w").await;
                        Ok(())
                    })
                });
                ctx.par(vec![b]).await
            })
        });
        assert_eq!(r.unwrap().elapsed.as_ns(), 5_000);
    }

    #[test]
    fn par_joins_at_the_slowest_block() {
        let (rt, r) = drive(0, false, |ctx| {
            Box::pin(async move {
                let a: Block = Box::new(|c| {
                    Box::pin(async move {
                        c.compute(10_000.0, "w").await;
                        Ok(())
                    })
                });
                let b: Block = Box::new(|c| {
                    Box::pin(async move {
                        c.compute(20_000.0, "w").await;
                        Ok(())
                    })
                });
                ctx.par(vec![a, b]).await
            })
        });
        assert_eq!(r.unwrap().elapsed.as_ns(), 20_000 + 60);
        rt.check_conservation().unwrap();
        assert_eq!(rt.sim().cores()[0].stats().peak_threads, 2);
    }

    #[test]
    fn par_of_noops_finishes_after_fork_overhead() {
        let (_rt, r) = drive(0, false, |ctx| {
            Box::pin(async move {
                let a: Block = Box::new(|_| Box::pin(async { Ok(()) }));
                let b: Block = Box::new(|_| Box::pin(async { Ok(()) }));
                ctx.par(vec![a, b]).await
            })
        });
        assert_eq!(r.unwrap().elapsed.as_ns(), 60);
    }

    #[test]
    fn on_self_is_a_local_call() {
        let (_rt, r) = drive(1, false, |ctx| {
            Box::pin(async move {
                let arr = ArraySlice::new(vec![1, 2, 3]);
                ctx.on(NodeId(0), DOUBLE, vec![Value::Array(arr.clone())]).await?;
                assert_eq!(arr.to_vec(), vec![2, 4, 6]);
                Ok(())
            })
        });
        let rep = r.unwrap();
        assert_eq!(rep.elapsed, VirtualTime::ZERO);
        assert!(rep.spawns.is_empty());
    }

    #[test]
    fn spawn_without_data_costs_the_overhead() {
        let (rt, r) = drive(1, false, |ctx| {
            Box::pin(async move { ctx.on(NodeId(1), NOOP, vec![]).await })
        });
        let rep = r.unwrap();
        assert_eq!(rep.elapsed.as_ns(), 28_000);
        assert_eq!(rep.spawns.len(), 1);
        assert_eq!(rep.spawns[0].multiplier, 1.0);
        rt.check_conservation().unwrap();
    }

    #[test]
    fn remote_write_back_matches_local() {
        let run = |force_local| {
            let (rt, r) = drive(2, force_local, |ctx| {
                Box::pin(async move {
                    let arr = ArraySlice::new((0..16).collect());
                    let view = arr.alias(4..12).unwrap();
                    ctx.on(NodeId(2), DOUBLE, vec![Value::Array(view)]).await?;
                    let want: Vec<Word> = (0..16)
                        .map(|i| if (4..12).contains(&i) { 2 * i } else { i })
                        .collect();
                    assert_eq!(arr.to_vec(), want);
                    Ok(())
                })
            });
            rt.check_conservation().unwrap();
            r.unwrap()
        };
        let remote = run(false);
        let local = run(true);
        assert_eq!(remote.spawns.len(), 1);
        // 8 words out, 8 back, on top of the fixed spawn overhead.
        assert_eq!(remote.elapsed.as_ns(), 28_000 + 150 * 16);
        assert!(local.spawns.is_empty());
        assert_eq!(local.elapsed, VirtualTime::ZERO);
    }

    #[test]
    fn sixteen_word_write_back() {
        let (_rt, r) = drive(1, false, |ctx| {
            Box::pin(async move {
                let arr = ArraySlice::new(vec![7; 16]);
                let var = ArraySlice::new(vec![5]);
                ctx.on(
                    NodeId(1),
                    DOUBLE,
                    vec![Value::Array(arr.clone()), Value::Var(var.clone())],
                )
                .await?;
                assert_eq!(arr.to_vec(), vec![14; 16]);
                assert_eq!(var.to_vec(), vec![5]);
                Ok(())
            })
        });
        r.unwrap();
    }

    #[test]
    fn overlapped_local_and_remote_work() {
        let (_rt, r) = drive(1, false, |ctx| {
            Box::pin(async move {
                let local: Block = Box::new(|c| {
                    Box::pin(async move {
                        c.compute(50_000.0, "p1").await;
                        Ok(())
                    })
                });
                let remote: Block = Box::new(|c| {
                    Box::pin(async move { c.on(NodeId(1), SPIN, vec![Value::Const(40)]).await })
                });
                ctx.par(vec![local, remote]).await
            })
        });
        let rep = r.unwrap();
        // max(50us, 28us + 2 const words + image + 40us) + fork
        let s = rep.spawns[0].sizes;
        let fixed = 150.0 * s.total() as f64;
        let remote = (28_000.0 - fixed) + fixed + 40_000.0;
        assert_eq!(rep.elapsed.as_ns() as f64, 60.0 + remote.max(50_000.0));
    }

    #[test]
    fn procedures_must_be_resident() {
        // Node 1 only has what it was sent; it cannot forward NOOP.
        let (_rt, r) = drive(2, false, |ctx| {
            Box::pin(async move {
                let arr = ArraySlice::new(vec![1]);
                ctx.on(NodeId(1), DOUBLE, vec![Value::Array(arr)]).await?;
                Ok(())
            })
        });
        r.unwrap();

        let mut reg = registry();
        reg.register(Procedure {
            index: 11,
            name: "forwarder".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|ctx, _| Box::pin(async move { ctx.on(NodeId(3), NOOP, vec![]).await })),
        })
        .unwrap();
        reg.register(Procedure {
            index: 10,
            name: "driver".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|ctx, _| Box::pin(async move { ctx.on(NodeId(1), 11, vec![]).await })),
        })
        .unwrap();
        let rt = Runtime::new(RuntimeConfig::new(Hypercube::uniform(2).unwrap()), reg).unwrap();
        assert_eq!(
            rt.execute(10, vec![]).unwrap_err(),
            RuntimeError::NotResident {
                core: NodeId(1),
                index: NOOP
            }
        );
        rt.check_conservation().unwrap();
    }

    #[test]
    fn oversized_closure_is_rejected() {
        let mut reg = registry();
        reg.register(Procedure {
            index: 12,
            name: "huge".into(),
            image_bytes: 4096,
            callees: vec![],
            spawn_overhead_ns: 1_000.0,
            behavior: Rc::new(|_, _| Box::pin(async { Ok(()) })),
        })
        .unwrap();
        reg.register(Procedure {
            index: 10,
            name: "driver".into(),
            image_bytes: 8,
            callees: vec![],
            spawn_overhead_ns: 28_000.0,
            behavior: Rc::new(|ctx, _| Box::pin(async move { ctx.on(NodeId(1), 12, vec![]).await })),
        })
        .unwrap();
        let rt = Runtime::new(RuntimeConfig::new(Hypercube::uniform(1).unwrap()), reg).unwrap();
        assert!(matches!(
            rt.execute(10, vec![]),
            Err(RuntimeError::ClosureTooLarge { .. })
        ));
    }

    #[test]
    fn host_memory_exhaustion_surfaces() {
        let (rt, r) = drive(1, false, |ctx| {
            Box::pin(async move {
                let arr = ArraySlice::new(vec![0; 17_000]);
                ctx.on(NodeId(1), NOOP, vec![Value::Array(arr)]).await
            })
        });
        assert!(matches!(
            r,
            Err(RuntimeError::Protocol(ProtocolError::HostOutOfMemory { .. }))
        ));
        rt.check_conservation().unwrap();
    }
}
