//! Zero-skipping direct convolution kernels for CNN training.
//!
//! Activations produced by ReLU are dynamically sparse. The kernels in this
//! crate keep every tensor in a dense, vector-blocked layout and skip the
//! vector FMAs fed by zero elements, detecting the zeros with a vector
//! compare and walking the resulting lane mask with popcount/trailing-zero
//! iteration. Forward propagation, backward propagation by input and
//! backward propagation by weights are all covered, each with a dense mode
//! that serves as the in-house baseline.
//!
//! Module map:
//!
//! * [`simd`] – lane masks, zero checks and broadcast FMA on `[f32; V]`.
//! * [`shape`] / [`tensor`] – convolution geometry and blocked layouts.
//! * [`oracle`] – 64-bit dense reference convolutions, a finite-difference
//!   gradient checker and the analytical FMA-count simulator.
//! * [`plan`] – output-channel tiling, accumulator ring sizing and task
//!   decomposition.
//! * [`kernels`] – the sparse kernels and their worker pool.
//! * [`sparsity`] – synthetic sparse data, ReLU and sparsity profiles.
//! * [`harness`] – layer registry, verification runs and timed sweeps.
//! * [`projector`] – end-to-end training-time projection from measured curves.

pub mod error;
pub mod harness;
pub mod kernels;
pub mod oracle;
pub mod plan;
pub mod projector;
pub mod shape;
pub mod simd;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::{run_parallel, sparse_bwi, sparse_bww, sparse_fwd, Executor, KernelCounters, KernelInputs, Mode};
pub use plan::{plan, plan_bww, CheckOn, Component, KernelPlan, TaskDecomposition};
pub use shape::ConvShape;
pub use simd::{LaneMask, VectorSpec};
pub use tensor::{BlockedTensor, Layout, PlainTensor};
