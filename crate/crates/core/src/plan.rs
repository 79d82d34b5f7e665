//! Kernel planning: output-channel tiling, accumulator ring sizing and the
//! parallel task decomposition.
//!
//! For FWD and BWI a row sweep keeps `R * Q / V` output vectors live in an
//! accumulator ring (one more column, `(R + 1) * Q / V`, when loads are
//! pipelined). The planner picks the tile `Q` and the pipelining flag that
//! fill the accumulator budget as far as possible:
//!
//! * candidates are every `Q` that is a multiple of `V` and divides the tiled
//!   channel count, each with and without pipelining;
//! * a candidate is feasible when its ring fits the budget;
//! * the largest ring wins, ties go to the larger `Q`, then to the
//!   non-pipelined variant;
//! * 1x1 filters cap `Q` at 128.
//!
//! BWW keeps its `R * Q / V` accumulators resident for a whole sweep, so it
//! never pipelines and never tiles the minibatch.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::shape::ConvShape;
use crate::simd::VectorSpec;

pub const DEFAULT_REGISTER_BUDGET: usize = 30;
pub const DEFAULT_MINIBATCH_TILE: usize = 16;
const ONE_BY_ONE_TILE_CAP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Fwd,
    Bwi,
    Bww,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Fwd, Component::Bwi, Component::Bww];

    pub fn tag(self) -> &'static str {
        match self {
            Component::Fwd => "fwd",
            Component::Bwi => "bwi",
            Component::Bww => "bww",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fwd" => Ok(Component::Fwd),
            "bwi" => Ok(Component::Bwi),
            "bww" => Ok(Component::Bww),
            other => Err(format!("unknown component {other:?} (expected fwd, bwi or bww)")),
        }
    }
}

/// Which operand a kernel zero-checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckOn {
    /// The layer input `D`.
    Input,
    /// The output gradient `dL/dY`.
    OutputGrad,
}

impl CheckOn {
    pub fn tag(self) -> &'static str {
        match self {
            CheckOn::Input => "input",
            CheckOn::OutputGrad => "output_grad",
        }
    }
}

impl FromStr for CheckOn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "input" => Ok(CheckOn::Input),
            "output_grad" => Ok(CheckOn::OutputGrad),
            other => Err(format!("unknown operand {other:?} (expected input or output_grad)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelPlan {
    pub component: Component,
    pub check_on: CheckOn,
    pub lanes: usize,
    /// Channel count that `tile` divides (K for FWD and BWW on the input,
    /// C for BWI and BWW on the output gradient).
    pub tiled_channels: usize,
    /// Output-channel tile `Q`.
    pub tile: usize,
    /// Vector FMAs skipped per zero lane, `R * Q / V`.
    pub skippable: usize,
    pub pipelined: bool,
    /// Accumulator vectors live during a sweep.
    pub ring_size: usize,
    pub minibatch_tile: usize,
    pub register_budget: usize,
    /// Row-sweep unroll factor. Advisory only; the kernels do not use it.
    pub unroll: usize,
    /// Software prefetch hint. Advisory only.
    pub prefetch: bool,
}

impl KernelPlan {
    /// Vectors per tile, `Q / V`.
    pub fn tile_vectors(&self) -> usize {
        self.tile / self.lanes
    }

    /// Accumulator columns held by the ring (`R` or `R + 1`).
    pub fn ring_columns(&self) -> usize {
        self.ring_size / self.tile_vectors()
    }

    /// Text block of `key=value` lines.
    pub fn to_key_values(&self, tasks: &TaskDecomposition) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("component", self.component.to_string());
        line("check_on", self.check_on.tag().to_string());
        line("lanes", self.lanes.to_string());
        line("tiled_channels", self.tiled_channels.to_string());
        line("q", self.tile.to_string());
        line("t", self.skippable.to_string());
        line("pipelined", self.pipelined.to_string());
        line("ring_size", self.ring_size.to_string());
        line("minibatch_tile", self.minibatch_tile.to_string());
        line("register_budget", self.register_budget.to_string());
        line("unroll", self.unroll.to_string());
        line("prefetch", self.prefetch.to_string());
        let axes: Vec<String> = tasks.axes.iter().map(|(n, c)| format!("{n}:{c}")).collect();
        line("task_axes", axes.join(","));
        line("tasks", tasks.count().to_string());
        out
    }
}

/// Independent tasks of one kernel launch. Tasks write disjoint outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDecomposition {
    pub component: Component,
    pub axes: [(&'static str, usize); 3],
}

impl TaskDecomposition {
    pub fn count(&self) -> usize {
        self.axes.iter().map(|&(_, n)| n).product()
    }

    /// Row-major coordinates of task `index`.
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [(_, _), (_, b), (_, c)] = self.axes;
        [index / (b * c), index / c % b, index % c]
    }
}

/// Picks `(Q, pipelined)` for a sweep touching `filter_w` columns.
fn select_tile(
    filter_w: usize,
    channels: usize,
    lanes: usize,
    budget: usize,
    allow_pipelining: bool,
    cap: usize,
) -> Option<(usize, bool)> {
    let mut best: Option<(usize, usize, bool)> = None;
    for tile in (lanes..=channels.min(cap)).step_by(lanes) {
        if channels % tile != 0 {
            continue;
        }
        for pipelined in [false, true] {
            if pipelined && !allow_pipelining {
                continue;
            }
            let ring = (filter_w + pipelined as usize) * tile / lanes;
            if ring > budget {
                continue;
            }
            let better = match best {
                None => true,
                Some((r, q, p)) => (ring, tile, !pipelined) > (r, q, !p),
            };
            if better {
                best = Some((ring, tile, pipelined));
            }
        }
    }
    best.map(|(_, q, p)| (q, p))
}

/// Plans FWD, BWI or BWW (zero-checking the input) for `shape`.
pub fn plan(
    shape: &ConvShape,
    component: Component,
    spec: VectorSpec,
    register_budget: usize,
) -> Result<KernelPlan> {
    match component {
        Component::Bww => plan_bww(shape, CheckOn::Input, spec, register_budget),
        Component::Fwd | Component::Bwi => {
            shape.validate()?;
            let lanes = spec.lanes();
            let (tiled_channels, check_on) = if component == Component::Fwd {
                (shape.out_channels, CheckOn::Input)
            } else {
                (shape.in_channels, CheckOn::OutputGrad)
            };
            require_blocked(component, tiled_channels, lanes)?;
            let cap = if shape.filter_w == 1 {
                ONE_BY_ONE_TILE_CAP
            } else {
                usize::MAX
            };
            let (tile, pipelined) = select_tile(
                shape.filter_w,
                tiled_channels,
                lanes,
                register_budget,
                true,
                cap,
            )
            .ok_or_else(|| infeasible(shape, lanes, register_budget))?;
            let ring_columns = shape.filter_w + pipelined as usize;
            Ok(KernelPlan {
                component,
                check_on,
                lanes,
                tiled_channels,
                tile,
                skippable: shape.filter_w * tile / lanes,
                pipelined,
                ring_size: ring_columns * tile / lanes,
                minibatch_tile: DEFAULT_MINIBATCH_TILE.min(shape.batch),
                register_budget,
                unroll: ring_columns,
                prefetch: false,
            })
        }
    }
}

/// Plans BWW zero-checking either the input or the output gradient. The
/// tile splits the channel dimension of the non-checked operand.
pub fn plan_bww(
    shape: &ConvShape,
    check_on: CheckOn,
    spec: VectorSpec,
    register_budget: usize,
) -> Result<KernelPlan> {
    shape.validate()?;
    let lanes = spec.lanes();
    let tiled_channels = match check_on {
        CheckOn::Input => shape.out_channels,
        CheckOn::OutputGrad => shape.in_channels,
    };
    require_blocked(Component::Bww, tiled_channels, lanes)?;
    let (tile, _) = select_tile(
        shape.filter_w,
        tiled_channels,
        lanes,
        register_budget,
        false,
        usize::MAX,
    )
    .ok_or_else(|| infeasible(shape, lanes, register_budget))?;
    Ok(KernelPlan {
        component: Component::Bww,
        check_on,
        lanes,
        tiled_channels,
        tile,
        skippable: shape.filter_w * tile / lanes,
        pipelined: false,
        ring_size: shape.filter_w * tile / lanes,
        minibatch_tile: 1,
        register_budget,
        unroll: 1,
        prefetch: false,
    })
}

fn require_blocked(component: Component, channels: usize, lanes: usize) -> Result<()> {
    if channels % lanes != 0 {
        return Err(Error::Divisibility {
            what: match component {
                Component::Bwi => "in_channels",
                _ => "tiled channels",
            },
            value: channels,
            lanes,
        });
    }
    Ok(())
}

fn infeasible(shape: &ConvShape, lanes: usize, budget: usize) -> Error {
    Error::Planning(format!(
        "filter width {} needs at least {} accumulators per {lanes}-lane tile, budget is {budget}",
        shape.filter_w, shape.filter_w
    ))
}

/// Task grid for `plan` on `shape`.
pub fn decompose(shape: &ConvShape, plan: &KernelPlan) -> TaskDecomposition {
    let image_tiles = shape.batch.div_ceil(plan.minibatch_tile.clamp(1, shape.batch));
    let tiles = plan.tiled_channels / plan.tile;
    let axes = match (plan.component, plan.check_on) {
        (Component::Fwd, _) => [
            ("image_tiles", image_tiles),
            ("out_rows", shape.out_height()),
            ("k_tiles", tiles),
        ],
        (Component::Bwi, _) => [
            ("image_tiles", image_tiles),
            ("in_rows", shape.height),
            ("c_tiles", tiles),
        ],
        (Component::Bww, CheckOn::Input) => [
            ("filter_rows", shape.filter_h),
            ("in_channels", shape.in_channels),
            ("k_tiles", tiles),
        ],
        (Component::Bww, CheckOn::OutputGrad) => [
            ("filter_rows", shape.filter_h),
            ("out_channels", shape.out_channels),
            ("c_tiles", tiles),
        ],
    };
    TaskDecomposition {
        component: plan.component,
        axes,
    }
}
