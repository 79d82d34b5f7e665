//! Fixtures shared by the criterion benchmarks: desk-scale problems for a
//! few representative layers.

use sparseconv_core::harness::{find_layer, Problem, ProblemSpec, DESK_BATCH, DESK_SCALE};
use sparseconv_core::{Component, Result};

/// 3×3 stride 1, 1×1, and 3×3 stride 2 layers.
pub const BENCH_LAYERS: [&str; 3] = ["vgg3_1", "resnet3_1b", "resnet4_2/r"];

pub const BENCH_SPARSITIES: [f64; 4] = [0.0, 0.5, 0.8, 0.9];

/// Desk-scale problem for a registry layer, scaled down by `extra_scale`
/// on top of the default.
pub fn fixture(layer: &str, component: Component, sparsity: f64, extra_scale: usize) -> Result<Problem> {
    let config = find_layer(layer).unwrap_or_else(|| panic!("unknown bench layer {layer}"));
    let shape = config.scaled(DESK_BATCH, DESK_SCALE * extra_scale.max(1));
    Problem::build(&ProblemSpec {
        seed: 7,
        ..ProblemSpec::new(shape, component, sparsity)
    })
}
