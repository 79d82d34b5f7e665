//! Zero-skipping convolution kernels.
//!
//! All three components share one shape: a task grid from
//! [`decompose`](crate::plan::decompose), a row sweep per task that
//! zero-checks one `V`-lane vector at a time, and a popcount-bounded walk
//! over the set lanes of the resulting [`LaneMask`](crate::simd::LaneMask).
//! Each task accumulates into its own buffer; buffers are scattered into
//! the output tensor after the parallel phase, so no two workers ever write
//! the same memory.
//!
//! [`Mode::Dense`] runs the identical loop nest with a plain lane loop in
//! place of the zero check and serves as the speedup baseline.

mod bwi;
mod bww;
mod fwd;
mod ring;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plan::{CheckOn, Component, KernelPlan};
use crate::shape::ConvShape;
use crate::tensor::{BlockedTensor, Layout};

pub use ring::AccumulatorRing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    #[default]
    Sparse,
    Dense,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Sparse => "sparse",
            Mode::Dense => "dense",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sparse" => Ok(Mode::Sparse),
            "dense" => Ok(Mode::Dense),
            other => Err(format!("unknown mode {other:?} (expected sparse or dense)")),
        }
    }
}

/// Work done by one launch. Every field but `ring_peak` adds up across
/// tasks; `ring_peak` is the largest number of accumulator vectors any task
/// held live at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelCounters {
    pub checked_vectors: u64,
    pub nonzero_lanes: u64,
    pub executed_vector_fmas: u64,
    pub output_vector_loads: u64,
    pub output_vector_stores: u64,
    pub ring_peak: u64,
}

impl KernelCounters {
    pub fn merge(&mut self, other: &KernelCounters) {
        self.checked_vectors += other.checked_vectors;
        self.nonzero_lanes += other.nonzero_lanes;
        self.executed_vector_fmas += other.executed_vector_fmas;
        self.output_vector_loads += other.output_vector_loads;
        self.output_vector_stores += other.output_vector_stores;
        self.ring_peak = self.ring_peak.max(other.ring_peak);
    }
}

/// Operands of one launch, tagged with the component they feed.
#[derive(Debug, Clone, Copy)]
pub enum KernelInputs<'a> {
    /// Input `D` (`Nchwc`) and filter `G` (`KcrsBlocked`).
    Fwd {
        input: &'a BlockedTensor,
        filter: &'a BlockedTensor,
    },
    /// Output gradient (`Nchwc`) and filter (`KcrsBlocked`).
    Bwi {
        output_grad: &'a BlockedTensor,
        filter: &'a BlockedTensor,
    },
    /// Input and output gradient. The operand named by the plan's
    /// `check_on` is in `Chwn`, the other in `Nchwc`.
    Bww {
        input: &'a BlockedTensor,
        output_grad: &'a BlockedTensor,
    },
}

impl KernelInputs<'_> {
    pub fn component(&self) -> Component {
        match self {
            KernelInputs::Fwd { .. } => Component::Fwd,
            KernelInputs::Bwi { .. } => Component::Bwi,
            KernelInputs::Bww { .. } => Component::Bww,
        }
    }
}

/// A fixed pool of workers. With one worker, tasks run inline on the
/// calling thread.
pub struct Executor {
    workers: usize,
    pool: Option<rayon::ThreadPool>,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::PlanMismatch("worker count must be at least 1".into()));
        }
        let pool = if workers == 1 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::PlanMismatch(format!("cannot start worker pool: {e}")))?;
            Some(pool)
        };
        Ok(Self { workers, pool })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `task(0..count)` and returns the results in task order.
    fn map<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..count).map(task).collect(),
            Some(pool) => pool.install(|| (0..count).into_par_iter().map(task).collect()),
        }
    }

    /// Validates the operands against `shape` and `plan`, then runs the
    /// launch.
    pub fn run(
        &self,
        inputs: KernelInputs<'_>,
        shape: &ConvShape,
        plan: &KernelPlan,
        mode: Mode,
    ) -> Result<(BlockedTensor, KernelCounters)> {
        check_plan(shape, plan, inputs.component())?;
        let lanes = plan.lanes;
        match inputs {
            KernelInputs::Fwd { input, filter } => {
                input.expect("input", Layout::Nchwc, shape.input_dims(), lanes)?;
                filter.expect("filter", Layout::KcrsBlocked, shape.filter_dims(), lanes)?;
                match lanes {
                    4 => Ok(fwd::run::<4>(self, input, filter, shape, plan, mode)),
                    8 => Ok(fwd::run::<8>(self, input, filter, shape, plan, mode)),
                    16 => Ok(fwd::run::<16>(self, input, filter, shape, plan, mode)),
                    other => Err(Error::VectorWidth(other)),
                }
            }
            KernelInputs::Bwi { output_grad, filter } => {
                output_grad.expect("output gradient", Layout::Nchwc, shape.output_dims(), lanes)?;
                filter.expect("filter", Layout::KcrsBlocked, shape.filter_dims(), lanes)?;
                match lanes {
                    4 => Ok(bwi::run::<4>(self, output_grad, filter, shape, plan, mode)),
                    8 => Ok(bwi::run::<8>(self, output_grad, filter, shape, plan, mode)),
                    16 => Ok(bwi::run::<16>(self, output_grad, filter, shape, plan, mode)),
                    other => Err(Error::VectorWidth(other)),
                }
            }
            KernelInputs::Bww { input, output_grad } => {
                let (input_layout, grad_layout) = match plan.check_on {
                    CheckOn::Input => (Layout::Chwn, Layout::Nchwc),
                    CheckOn::OutputGrad => (Layout::Nchwc, Layout::Chwn),
                };
                input.expect("input", input_layout, shape.input_dims(), lanes)?;
                output_grad.expect("output gradient", grad_layout, shape.output_dims(), lanes)?;
                match lanes {
                    4 => Ok(bww::run::<4>(self, input, output_grad, shape, plan, mode)),
                    8 => Ok(bww::run::<8>(self, input, output_grad, shape, plan, mode)),
                    16 => Ok(bww::run::<16>(self, input, output_grad, shape, plan, mode)),
                    other => Err(Error::VectorWidth(other)),
                }
            }
        }
    }
}

fn check_plan(shape: &ConvShape, plan: &KernelPlan, component: Component) -> Result<()> {
    shape.validate()?;
    shape.check_channel_blocking(plan.lanes)?;
    if plan.component != component {
        return Err(Error::PlanMismatch(format!(
            "plan is for {}, operands are for {component}",
            plan.component
        )));
    }
    let tiled = match (component, plan.check_on) {
        (Component::Fwd, _) | (Component::Bww, CheckOn::Input) => shape.out_channels,
        (Component::Bwi, _) | (Component::Bww, CheckOn::OutputGrad) => shape.in_channels,
    };
    let tile_ok = plan.tile > 0 && plan.tile % plan.lanes == 0 && tiled % plan.tile == 0;
    if plan.tiled_channels != tiled || !tile_ok {
        return Err(Error::PlanMismatch(format!(
            "tile {} over {} channels does not fit this shape ({tiled} channels)",
            plan.tile, plan.tiled_channels
        )));
    }
    let ring_columns = shape.filter_w + plan.pipelined as usize;
    if plan.ring_size != ring_columns * plan.tile_vectors() {
        return Err(Error::PlanMismatch(format!(
            "ring of {} vectors does not match filter width {}",
            plan.ring_size, shape.filter_w
        )));
    }
    Ok(())
}

/// One-shot launch on a fresh pool of `workers` workers.
pub fn run_parallel(
    inputs: KernelInputs<'_>,
    shape: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
    workers: usize,
) -> Result<(BlockedTensor, KernelCounters)> {
    Executor::new(workers)?.run(inputs, shape, plan, mode)
}

/// Single-worker FWD: returns `Y` in `Nchwc`.
pub fn sparse_fwd(
    input: &BlockedTensor,
    filter: &BlockedTensor,
    shape: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
) -> Result<(BlockedTensor, KernelCounters)> {
    run_parallel(KernelInputs::Fwd { input, filter }, shape, plan, mode, 1)
}

/// Single-worker BWI: returns `dL/dD` in `Nchwc`.
pub fn sparse_bwi(
    output_grad: &BlockedTensor,
    filter: &BlockedTensor,
    shape: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
) -> Result<(BlockedTensor, KernelCounters)> {
    run_parallel(KernelInputs::Bwi { output_grad, filter }, shape, plan, mode, 1)
}

/// Single-worker BWW: returns `dL/dG` in `KcrsBlocked`. The plan's
/// `check_on` picks the zero-checked operand.
pub fn sparse_bww(
    input: &BlockedTensor,
    output_grad: &BlockedTensor,
    shape: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
) -> Result<(BlockedTensor, KernelCounters)> {
    run_parallel(KernelInputs::Bww { input, output_grad }, shape, plan, mode, 1)
}

/// Layouts each operand needs for `plan`: `(first, second, output)` in the
/// order of the matching [`KernelInputs`] variant.
pub fn operand_layouts(plan: &KernelPlan) -> (Layout, Layout, Layout) {
    match (plan.component, plan.check_on) {
        (Component::Fwd, _) => (Layout::Nchwc, Layout::KcrsBlocked, Layout::Nchwc),
        (Component::Bwi, _) => (Layout::Nchwc, Layout::KcrsBlocked, Layout::Nchwc),
        (Component::Bww, CheckOn::Input) => (Layout::Chwn, Layout::Nchwc, Layout::KcrsBlocked),
        (Component::Bww, CheckOn::OutputGrad) => (Layout::Nchwc, Layout::Chwn, Layout::KcrsBlocked),
    }
}

/// Task-local results, merged in task order.
fn merge_counters<T>(results: &[(T, KernelCounters)]) -> KernelCounters {
    let mut total = KernelCounters::default();
    for (_, c) in results {
        total.merge(c);
    }
    total
}
