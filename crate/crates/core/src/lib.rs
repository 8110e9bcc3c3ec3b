//! Deterministic simulation of closure-based remote process creation on a
//! hypercube of cores, together with the analytical cost model it is
//! checked against.

pub mod closure;
pub mod costmodel;
pub mod engine;
pub mod programs;
pub mod protocol;
pub mod runtime;
pub mod topology;

pub use closure::{Argument, Closure, ClosureError, PayloadSizes, ProcedureImage, Word};
pub use costmodel::{CostConstants, CostModel, CostModelError, Formula, SeqCostMode};
pub use engine::{CoreConfig, EngineError, Location, Sim, VirtualTime};
pub use programs::{ProgramConfig, ProgramError, Threshold};
pub use runtime::{ArraySlice, Ctx, Runtime, RuntimeConfig, RuntimeError, Value};
pub use topology::{Hypercube, LinkCosts, NodeId, TopologyError};
