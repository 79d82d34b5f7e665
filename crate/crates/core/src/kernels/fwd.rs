//! Forward propagation, zero-checking the input.
//!
//! Task `(image tile, output row yo, K tile)`. For every filter row `v` and
//! input-channel block the task sweeps input row `yo * P + v - pad` of each
//! image in the tile. A non-zero lane `c` at column `x` feeds the
//! `(u, xo)` pairs of [`affected_outputs`], each a run of `Q / V` FMAs into
//! the ring.

use super::{merge_counters, AccumulatorRing, Executor, KernelCounters, Mode};
use crate::plan::{decompose, KernelPlan};
use crate::shape::{affected_outputs, ConvShape};
use crate::simd::{broadcast_fma, cmp_neq_zero};
use crate::tensor::{BlockedTensor, Layout};

struct Sweep<'a, const V: usize> {
    /// `(u, xo)` targets per input column.
    targets: &'a [Vec<(usize, usize)>],
    /// Last input column that feeds each output column.
    last_input: &'a [usize],
    filter: &'a [[f32; V]],
    /// Distance between consecutive K vectors in `filter`.
    filter_stride: usize,
    stride: usize,
    pad: usize,
    out_w: usize,
    tile_vectors: usize,
    pipelined: bool,
}

impl<const V: usize> Sweep<'_, V> {
    /// One row sweep; `filter_row` indexes the first K vector of the tile
    /// at filter row `v`, tap 0, lane 0.
    #[inline(always)]
    fn run<const SPARSE: bool>(
        &self,
        row_in: &[[f32; V]],
        row_out: &mut [[f32; V]],
        filter_row: usize,
        ring: &mut AccumulatorRing<V>,
        counters: &mut KernelCounters,
    ) {
        let qv = self.tile_vectors;
        ring.restart();
        for (x, pixel) in row_in.iter().enumerate() {
            let newest = ((x + self.pad) / self.stride).min(self.out_w - 1);
            let ahead = if self.pipelined {
                (newest + 1).min(self.out_w - 1)
            } else {
                newest
            };
            ring.load_through(ahead, row_out);

            let targets = &self.targets[x];
            let mut accumulate = |lane: usize| {
                let value = pixel[lane];
                for &(u, xo) in targets {
                    let acc = ring.column_mut(xo);
                    let base = filter_row + u * V + lane;
                    for (j, a) in acc.iter_mut().enumerate() {
                        broadcast_fma(a, value, &self.filter[base + j * self.filter_stride]);
                    }
                }
            };
            let fmas_per_lane = (targets.len() * qv) as u64;
            if SPARSE {
                let mask = cmp_neq_zero(pixel);
                let set = mask.popcount() as u64;
                counters.checked_vectors += 1;
                counters.nonzero_lanes += set;
                counters.executed_vector_fmas += set * fmas_per_lane;
                for lane in mask.iter() {
                    accumulate(lane);
                }
            } else {
                counters.executed_vector_fmas += V as u64 * fmas_per_lane;
                for lane in 0..V {
                    accumulate(lane);
                }
            }

            ring.retire_while(row_out, |col| self.last_input[col] <= x);
        }
        ring.finish(row_out);
    }
}

pub(super) fn run<const V: usize>(
    exec: &Executor,
    input: &BlockedTensor,
    filter: &BlockedTensor,
    s: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
) -> (BlockedTensor, KernelCounters) {
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let qv = plan.tile_vectors();
    let (c_blocks, k_blocks) = (s.in_channels / V, s.out_channels / V);
    let images_per_task = plan.minibatch_tile.clamp(1, s.batch);
    let tasks = decompose(s, plan);

    let targets: Vec<Vec<(usize, usize)>> = (0..s.width).map(|x| affected_outputs(s, x)).collect();
    let last_input: Vec<usize> = (0..out_w)
        .map(|xo| (xo * s.stride_w + s.filter_w - 1 - s.pad_w).min(s.width - 1))
        .collect();
    let d = input.vectors::<V>();
    let sweep = Sweep::<V> {
        targets: &targets,
        last_input: &last_input,
        filter: filter.vectors::<V>(),
        filter_stride: c_blocks * s.filter_h * s.filter_w * V,
        stride: s.stride_w,
        pad: s.pad_w,
        out_w,
        tile_vectors: qv,
        pipelined: plan.pipelined,
    };

    let results = exec.map(tasks.count(), |t| {
        let [image_tile, yo, k_tile] = tasks.coords(t);
        let first = image_tile * images_per_task;
        let images = first..s.batch.min(first + images_per_task);
        let kb0 = k_tile * qv;
        let mut out = vec![[0.0f32; V]; images.len() * out_w * qv];
        let mut ring = AccumulatorRing::<V>::new(plan.ring_columns(), qv);
        let mut counters = KernelCounters::default();
        for v in 0..s.filter_h {
            let Some(y) = s.input_row(yo, v) else { continue };
            for cb in 0..c_blocks {
                let filter_row = ((kb0 * c_blocks + cb) * s.filter_h + v) * s.filter_w * V;
                for (mi, m) in images.clone().enumerate() {
                    let row_in = &d[((m * c_blocks + cb) * s.height + y) * s.width..][..s.width];
                    let row_out = &mut out[mi * out_w * qv..][..out_w * qv];
                    match mode {
                        Mode::Sparse => sweep.run::<true>(row_in, row_out, filter_row, &mut ring, &mut counters),
                        Mode::Dense => sweep.run::<false>(row_in, row_out, filter_row, &mut ring, &mut counters),
                    }
                }
            }
        }
        counters.output_vector_loads = ring.loads;
        counters.output_vector_stores = ring.stores;
        counters.ring_peak = ring.peak as u64;
        (out, counters)
    });

    let counters = merge_counters(&results);
    let mut y = BlockedTensor::zeros(Layout::Nchwc, s.output_dims(), V).expect("K is blocked");
    let yv = y.vectors_mut::<V>();
    for (t, (out, _)) in results.iter().enumerate() {
        let [image_tile, yo, k_tile] = tasks.coords(t);
        let first = image_tile * images_per_task;
        for (mi, column_block) in out.chunks_exact(out_w * qv).enumerate() {
            let m = first + mi;
            for (xo, vectors) in column_block.chunks_exact(qv).enumerate() {
                for (j, vector) in vectors.iter().enumerate() {
                    let kb = k_tile * qv + j;
                    yv[((m * k_blocks + kb) * out_h + yo) * out_w + xo] = *vector;
                }
            }
        }
    }
    (y, counters)
}
