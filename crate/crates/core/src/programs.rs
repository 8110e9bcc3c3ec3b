//! The demonstration programs: `distribute`/`node`, `merge`, `seq_msort`
//! and `par_msort`, plus drivers that run them and check their invariants.

use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::closure::Word;
use crate::costmodel::{CostConstants, MeasuredModel, Measurement, SeqCostMode};
use crate::engine::{CoreConfig, VirtualTime};
use crate::runtime::{
    ArraySlice, Block, Ctx, ProcIndex, ProcResult, Procedure, ProcedureRegistry, RunReport, Runtime,
    RuntimeConfig, RuntimeError, SpawnRecord, Value,
};
use crate::topology::{Hypercube, NodeId};

pub const DISTRIBUTE: ProcIndex = 1;
pub const NODE: ProcIndex = 2;
pub const PAR_MSORT: ProcIndex = 3;
pub const MERGE: ProcIndex = 4;
pub const SEQ_MSORT: ProcIndex = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProgramError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("spawn from {guest} to {host} crosses {hops} hops")]
    NonNeighbourSpawn { guest: NodeId, host: NodeId, hops: u32 },
    #[error("resource conservation violated: {0}")]
    Conservation(String),
    #[error("coverage violated: {0}")]
    Coverage(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Procedure image sizes in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImageSizes {
    pub distribute: usize,
    pub node: usize,
    pub par_msort: usize,
    pub merge: usize,
    pub seq_msort: usize,
}

impl Default for ImageSizes {
    fn default() -> Self {
        ImageSizes {
            distribute: 256,
            node: 64,
            par_msort: 256,
            merge: 192,
            seq_msort: 128,
        }
    }
}

/// Sub-array size at or below which `par_msort` stops spawning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    /// `n / p`.
    Auto,
    Words(usize),
}

impl Threshold {
    pub fn resolve(self, n: usize, p: usize) -> Result<usize, ProgramError> {
        match self {
            Threshold::Auto => Ok((n / p.max(1)).max(1)),
            Threshold::Words(0) => Err(ProgramError::BadInput("threshold must be at least 1".into())),
            Threshold::Words(w) => Ok(w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProgramConfig {
    pub topology: Hypercube,
    pub constants: CostConstants,
    pub seq_mode: SeqCostMode,
    pub images: ImageSizes,
    pub core: CoreConfig,
    pub keep_trace: bool,
    pub force_local: bool,
}

impl ProgramConfig {
    pub fn new(topology: Hypercube) -> Self {
        ProgramConfig {
            topology,
            constants: CostConstants::default(),
            seq_mode: SeqCostMode::Closed,
            images: ImageSizes::default(),
            core: CoreConfig::default(),
            keep_trace: false,
            force_local: false,
        }
    }

    fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            topology: self.topology.clone(),
            constants: self.constants,
            seq_mode: self.seq_mode,
            core: self.core,
            force_local: self.force_local,
            keep_trace: self.keep_trace,
        }
    }
}

/// Stable two-way merge: takes from `a` while `a[i] <= b[j]`.
pub fn merge_into(out: &mut [Word], a: &[Word], b: &[Word]) {
    assert_eq!(out.len(), a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    for slot in out.iter_mut() {
        if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            *slot = a[i];
            i += 1;
        } else {
            *slot = b[j];
            j += 1;
        }
    }
}

/// Top-down mergesort splitting at `len / 2`.
pub fn merge_sort(data: &mut [Word]) {
    if data.len() <= 1 {
        return;
    }
    let mid = data.len() / 2;
    merge_sort(&mut data[..mid]);
    merge_sort(&mut data[mid..]);
    let (a, b) = (data[..mid].to_vec(), data[mid..].to_vec());
    merge_into(data, &a, &b);
}

fn word(v: &Value) -> Result<u32, RuntimeError> {
    v.as_const()
}

fn arg<'a>(args: &'a [Value], i: usize, proc: &str) -> Result<&'a Value, RuntimeError> {
    args.get(i)
        .ok_or_else(|| RuntimeError::BadArgument(format!("{proc}: missing argument {i}")))
}

async fn distribute(ctx: Ctx, args: Vec<Value>) -> ProcResult {
    let t = word(arg(&args, 0, "distribute")?)?;
    let n = word(arg(&args, 1, "distribute")?)?;
    if n <= 1 {
        return ctx.call(NODE, vec![Value::Const(t)]).await;
    }
    let half = n / 2;
    let local: Block = Box::new(move |c| {
        Box::pin(async move {
            c.call(DISTRIBUTE, vec![Value::Const(t), Value::Const(half)])
                .await
        })
    });
    let remote: Block = Box::new(move |c| {
        Box::pin(async move {
            c.on(
                NodeId(t + half),
                DISTRIBUTE,
                vec![Value::Const(t + half), Value::Const(half)],
            )
            .await
        })
    });
    ctx.par(vec![local, remote]).await
}

async fn node(ctx: Ctx, args: Vec<Value>) -> ProcResult {
    let t = word(arg(&args, 0, "node")?)?;
    ctx.mark(t);
    Ok(())
}

async fn merge(ctx: Ctx, args: Vec<Value>) -> ProcResult {
    let r = arg(&args, 0, "merge")?.as_array()?;
    let a = arg(&args, 1, "merge")?.as_array()?.to_vec();
    let b = arg(&args, 2, "merge")?.as_array()?.to_vec();
    if r.len() != a.len() + b.len() {
        return Err(RuntimeError::Domain(format!(
            "merge of {} and {} words into {}",
            a.len(),
            b.len(),
            r.len()
        )));
    }
    r.with_mut(|out| merge_into(out, &a, &b));
    ctx.compute(ctx.model().t_m(r.len() as f64), "merge").await;
    Ok(())
}

/// Sorts in place and charges the sequential sort time in one step.
async fn seq_sort_leaf(ctx: &Ctx, a: &ArraySlice, mode: SeqCostMode) {
    a.with_mut(merge_sort);
    ctx.compute(ctx.model().t_seq(a.len() as u64, mode), "seq-msort")
        .await;
}

async fn seq_msort(ctx: Ctx, args: Vec<Value>, mode: SeqCostMode) -> ProcResult {
    let a = arg(&args, 0, "seq-msort")?.as_array()?;
    seq_sort_leaf(&ctx, a, mode).await;
    Ok(())
}

async fn par_msort(ctx: Ctx, args: Vec<Value>, threshold: usize, mode: SeqCostMode) -> ProcResult {
    let t = word(arg(&args, 0, "par-msort")?)?;
    let n = word(arg(&args, 1, "par-msort")?)?;
    let a = arg(&args, 2, "par-msort")?.as_array()?.clone();
    // With a single processor left there is nowhere to branch to, so the
    // sub-array is sorted sequentially whatever its size.
    if a.len() <= threshold || n < 2 {
        seq_sort_leaf(&ctx, &a, mode).await;
        return Ok(());
    }
    let half = n / 2;
    let (lo, hi) = a.halves();
    let (lo2, hi2) = (lo.clone(), hi.clone());
    let local: Block = Box::new(move |c| {
        Box::pin(async move {
            c.call(
                PAR_MSORT,
                vec![Value::Const(t), Value::Const(half), Value::Array(lo2)],
            )
            .await
        })
    });
    let remote: Block = Box::new(move |c| {
        Box::pin(async move {
            c.on(
                NodeId(t + half),
                PAR_MSORT,
                vec![Value::Const(t + half), Value::Const(half), Value::Array(hi2)],
            )
            .await
        })
    });
    ctx.par(vec![local, remote]).await?;
    ctx.call(MERGE, vec![Value::Array(a), Value::Array(lo), Value::Array(hi)])
        .await
}

/// The program's procedures. `threshold` is baked into `par_msort`.
pub fn registry(cfg: &ProgramConfig, threshold: usize) -> Result<ProcedureRegistry, RuntimeError> {
    let c = cfg.constants;
    let mode = cfg.seq_mode;
    let mut r = ProcedureRegistry::new();
    r.register(Procedure {
        index: DISTRIBUTE,
        name: "distribute".into(),
        image_bytes: cfg.images.distribute,
        callees: vec![NODE],
        spawn_overhead_ns: c.distribute_init_ns,
        behavior: Rc::new(|ctx, args| Box::pin(distribute(ctx, args))),
    })?;
    r.register(Procedure {
        index: NODE,
        name: "node".into(),
        image_bytes: cfg.images.node,
        callees: vec![],
        spawn_overhead_ns: c.distribute_init_ns,
        behavior: Rc::new(|ctx, args| Box::pin(node(ctx, args))),
    })?;
    r.register(Procedure {
        index: PAR_MSORT,
        name: "par-msort".into(),
        image_bytes: cfg.images.par_msort,
        callees: vec![MERGE],
        spawn_overhead_ns: c.spawn_init_ns,
        behavior: Rc::new(move |ctx, args| Box::pin(par_msort(ctx, args, threshold, mode))),
    })?;
    r.register(Procedure {
        index: MERGE,
        name: "merge".into(),
        image_bytes: cfg.images.merge,
        callees: vec![],
        spawn_overhead_ns: c.spawn_init_ns,
        behavior: Rc::new(|ctx, args| Box::pin(merge(ctx, args))),
    })?;
    r.register(Procedure {
        index: SEQ_MSORT,
        name: "seq-msort".into(),
        image_bytes: cfg.images.seq_msort,
        callees: vec![],
        spawn_overhead_ns: c.spawn_init_ns,
        behavior: Rc::new(move |ctx, args| Box::pin(seq_msort(ctx, args, mode))),
    })?;
    Ok(r)
}

/// Recursion level at which node `u` of a `d`-cube is reached.
pub fn level_of(u: u32, d: u32) -> u32 {
    if u == 0 {
        0
    } else {
        d - u.trailing_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Arrival {
    pub node: NodeId,
    pub level: u32,
    pub arrival: VirtualTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelRow {
    pub level: u32,
    pub max_arrival: VirtualTime,
    /// Latest arrival at this level minus the latest at the level before.
    pub level_time: VirtualTime,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributeReport {
    pub p: u32,
    pub time: VirtualTime,
    pub spawns: Vec<SpawnRecord>,
    pub arrivals: Vec<Arrival>,
    pub levels: Vec<LevelRow>,
    pub trace_hash: String,
    pub events: u64,
    #[serde(skip)]
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SortReport {
    pub n: usize,
    pub p: u32,
    pub threshold: usize,
    pub cores_used: usize,
    pub time: VirtualTime,
    pub spawns: Vec<SpawnRecord>,
    pub output: Vec<Word>,
    pub sorted: bool,
    pub permutation: bool,
    pub trace_hash: String,
    pub events: u64,
    #[serde(skip)]
    pub trace: Vec<String>,
}

fn check_run(rt: &Runtime, report: &RunReport) -> Result<(), ProgramError> {
    for s in &report.spawns {
        if s.hops != 1 {
            return Err(ProgramError::NonNeighbourSpawn {
                guest: s.guest,
                host: s.host,
                hops: s.hops,
            });
        }
    }
    rt.check_conservation().map_err(ProgramError::Conservation)
}

/// Runs `distribute(0, p)` from node 0 over the whole cube.
pub fn run_distribute(cfg: &ProgramConfig) -> Result<DistributeReport, ProgramError> {
    let p = cfg.topology.node_count();
    let d = cfg.topology.dimension();
    let rt = Runtime::new(cfg.runtime_config(), registry(cfg, 1)?)?;
    let report = rt.execute(DISTRIBUTE, vec![Value::Const(0), Value::Const(p)])?;
    check_run(&rt, &report)?;

    let mut arrivals: Vec<Arrival> = report
        .marks
        .iter()
        .map(|&(u, t)| Arrival {
            node: NodeId(u),
            level: level_of(u, d),
            arrival: t,
        })
        .collect();
    arrivals.sort_by_key(|a| a.node);
    let nodes: Vec<u32> = arrivals.iter().map(|a| a.node.0).collect();
    if nodes != (0..p).collect::<Vec<_>>() {
        return Err(ProgramError::Coverage(format!(
            "node log {nodes:?} is not a permutation of 0..{p}"
        )));
    }
    let max_at = |level: u32| {
        arrivals
            .iter()
            .filter(|a| a.level == level)
            .map(|a| a.arrival)
            .max()
            .unwrap_or(VirtualTime::ZERO)
    };
    let levels = (1..=d)
        .map(|i| LevelRow {
            level: i,
            max_arrival: max_at(i),
            level_time: max_at(i).saturating_sub(max_at(i - 1)),
        })
        .collect();
    Ok(DistributeReport {
        p,
        time: report.elapsed,
        spawns: report.spawns,
        arrivals,
        levels,
        trace_hash: report.trace_hash,
        events: report.events,
        trace: report.trace,
    })
}

/// Sorts `data` with `par_msort(0, p, data)` from node 0.
pub fn run_msort(
    cfg: &ProgramConfig,
    data: Vec<Word>,
    threshold: Threshold,
) -> Result<SortReport, ProgramError> {
    let p = cfg.topology.node_count();
    let n = data.len();
    if n == 0 {
        return Err(ProgramError::BadInput("nothing to sort".into()));
    }
    if n < p as usize {
        return Err(ProgramError::BadInput(format!(
            "{n} words cannot be spread over {p} processors"
        )));
    }
    let threshold = threshold.resolve(n, p as usize)?;
    let rt = Runtime::new(cfg.runtime_config(), registry(cfg, threshold)?)?;
    let a = ArraySlice::new(data.clone());
    let report = rt.execute(
        PAR_MSORT,
        vec![Value::Const(0), Value::Const(p), Value::Array(a.clone())],
    )?;
    check_run(&rt, &report)?;
    let output = a.to_vec();
    let mut expected = data;
    expected.sort_unstable();
    let mut got = output.clone();
    got.sort_unstable();
    Ok(SortReport {
        n,
        p,
        threshold,
        cores_used: report.cores_used,
        time: report.elapsed,
        sorted: output.windows(2).all(|w| w[0] <= w[1]),
        permutation: got == expected,
        output,
        spawns: report.spawns,
        trace_hash: report.trace_hash,
        events: report.events,
        trace: report.trace,
    })
}

/// Runs a single `merge` of two sorted halves of length `len` in total and
/// returns its simulated time.
pub fn time_merge(cfg: &ProgramConfig, len: usize) -> Result<VirtualTime, ProgramError> {
    let one = ProgramConfig {
        topology: Hypercube::uniform(0).expect("0-cube"),
        ..cfg.clone()
    };
    let rt = Runtime::new(one.runtime_config(), registry(&one, 1)?)?;
    let mid = len / 2;
    let data: Vec<Word> = (0..mid as Word).chain(0..(len - mid) as Word).collect();
    let r = ArraySlice::new(data);
    let (a, b) = r.halves();
    let report = rt.execute(MERGE, vec![Value::Array(r), Value::Array(a), Value::Array(b)])?;
    check_run(&rt, &report)?;
    Ok(report.elapsed)
}

/// Sequential sort time for `len` words on one core.
pub fn time_seq_msort(cfg: &ProgramConfig, len: usize) -> Result<VirtualTime, ProgramError> {
    let one = ProgramConfig {
        topology: Hypercube::uniform(0).expect("0-cube"),
        ..cfg.clone()
    };
    let rt = Runtime::new(one.runtime_config(), registry(&one, 1)?)?;
    let data: Vec<Word> = (0..len as Word).rev().collect();
    let report = rt.execute(SEQ_MSORT, vec![Value::Array(ArraySlice::new(data))])?;
    check_run(&rt, &report)?;
    Ok(report.elapsed)
}

/// Measures merge, distribute and sequential sort times in simulation for
/// calibrating the cost model. Distribute runs use uniform links.
pub fn calibration_measurements(cfg: &ProgramConfig) -> Result<Vec<Measurement>, ProgramError> {
    let mut rows = Vec::new();
    for len in [16usize, 64, 256, 1024, 4096] {
        rows.push(Measurement {
            model: MeasuredModel::Merge,
            x: len as f64,
            time_ns: time_merge(cfg, len)?.as_ns() as f64,
        });
    }
    for d in 1..=6 {
        let c = ProgramConfig {
            topology: Hypercube::uniform(d).map_err(RuntimeError::from)?,
            ..cfg.clone()
        };
        rows.push(Measurement {
            model: MeasuredModel::Distribute,
            x: f64::from(1u32 << d),
            time_ns: run_distribute(&c)?.time.as_ns() as f64,
        });
    }
    let closed = ProgramConfig {
        seq_mode: SeqCostMode::Closed,
        ..cfg.clone()
    };
    for len in [16usize, 64, 256, 1024, 4096] {
        rows.push(Measurement {
            model: MeasuredModel::SeqSort,
            x: len as f64,
            time_ns: time_seq_msort(&closed, len)?.as_ns() as f64,
        });
    }
    Ok(rows)
}
