//! Backward propagation by input, zero-checking the output gradient.
//!
//! The same sweep as FWD with the filter transposed so that input channels
//! sit in the vector lanes. Task `(image tile, input row y, C tile)`; each
//! sweep walks one output-gradient row and scatters every non-zero lane
//! into the input columns of its window. A window starts `O` columns after
//! the previous one, so interior steps bring `O * Qc / V` new vectors into
//! the ring.

use super::{merge_counters, AccumulatorRing, Executor, KernelCounters, Mode};
use crate::plan::{decompose, KernelPlan};
use crate::shape::{input_columns, ConvShape};
use crate::simd::{broadcast_fma, cmp_neq_zero};
use crate::tensor::{BlockedTensor, Layout};

/// Filter with C vectors innermost: vector `(((cb * KB + kb) * S + v) * R + u) * V + k`
/// holds `G[kb * V + k][cb * V ..][v][u]`.
fn transpose_filter<const V: usize>(filter: &BlockedTensor, s: &ConvShape) -> Vec<[f32; V]> {
    let (c_blocks, k_blocks) = (s.in_channels / V, s.out_channels / V);
    let taps = s.filter_h * s.filter_w;
    let g = filter.vectors::<V>();
    let mut gt = vec![[0.0f32; V]; g.len()];
    for kb in 0..k_blocks {
        for cb in 0..c_blocks {
            for tap in 0..taps {
                for c in 0..V {
                    let src = g[((kb * c_blocks + cb) * taps + tap) * V + c];
                    for (k, &w) in src.iter().enumerate() {
                        gt[((cb * k_blocks + kb) * taps + tap) * V + k][c] = w;
                    }
                }
            }
        }
    }
    gt
}

struct Sweep<'a, const V: usize> {
    /// `(u, x)` targets per output-gradient column.
    targets: &'a [Vec<(usize, usize)>],
    filter: &'a [[f32; V]],
    filter_stride: usize,
    filter_w: usize,
    stride: usize,
    pad: usize,
    width: usize,
    tile_vectors: usize,
    pipelined: bool,
}

impl<const V: usize> Sweep<'_, V> {
    /// Input columns `[first, last]` read by output column `xo`.
    #[inline(always)]
    fn window(&self, xo: usize) -> (usize, usize) {
        let start = xo * self.stride;
        let first = start.saturating_sub(self.pad);
        let last = (start + self.filter_w - 1 - self.pad).min(self.width - 1);
        (first, last)
    }

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
        let out_w = row_in.len();
        ring.restart();
        for (xo, grad) in row_in.iter().enumerate() {
            let (first, last) = self.window(xo);
            ring.skip_to(first);
            ring.load_through(last, row_out);
            let next = (xo + 1 < out_w).then(|| self.window(xo + 1));
            if let Some((next_first, next_last)) = next {
                if self.pipelined && last + 1 >= next_first && last + 1 <= next_last {
                    ring.load_through(last + 1, row_out);
                }
            }

            let targets = &self.targets[xo];
            let mut accumulate = |lane: usize| {
                let value = grad[lane];
                for &(u, x) in targets {
                    let acc = ring.column_mut(x);
                    let base = filter_row + u * V + lane;
                    for (j, a) in acc.iter_mut().enumerate() {
                        broadcast_fma(a, value, &self.filter[base + j * self.filter_stride]);
                    }
                }
            };
            let fmas_per_lane = (targets.len() * qv) as u64;
            if SPARSE {
                let mask = cmp_neq_zero(grad);
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

            match next {
                Some((next_first, _)) => ring.retire_while(row_out, |col| col < next_first),
                None => ring.finish(row_out),
            }
        }
        ring.finish(row_out);
    }
}

pub(super) fn run<const V: usize>(
    exec: &Executor,
    output_grad: &BlockedTensor,
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

    let gt = transpose_filter::<V>(filter, s);
    let targets: Vec<Vec<(usize, usize)>> = (0..out_w).map(|xo| input_columns(s, xo)).collect();
    let dy = output_grad.vectors::<V>();
    let sweep = Sweep::<V> {
        targets: &targets,
        filter: &gt,
        filter_stride: k_blocks * s.filter_h * s.filter_w * V,
        filter_w: s.filter_w,
        stride: s.stride_w,
        pad: s.pad_w,
        width: s.width,
        tile_vectors: qv,
        pipelined: plan.pipelined,
    };

    let results = exec.map(tasks.count(), |t| {
        let [image_tile, y, c_tile] = tasks.coords(t);
        let first = image_tile * images_per_task;
        let images = first..s.batch.min(first + images_per_task);
        let cb0 = c_tile * qv;
        let mut out = vec![[0.0f32; V]; images.len() * s.width * qv];
        let mut ring = AccumulatorRing::<V>::new(plan.ring_columns(), qv);
        let mut counters = KernelCounters::default();
        for v in 0..s.filter_h {
            let Some(yo) = s.output_row(y, v) else { continue };
            for kb in 0..k_blocks {
                let filter_row = ((cb0 * k_blocks + kb) * s.filter_h + v) * s.filter_w * V;
                for (mi, m) in images.clone().enumerate() {
                    let row_in = &dy[((m * k_blocks + kb) * out_h + yo) * out_w..][..out_w];
                    let row_out = &mut out[mi * s.width * qv..][..s.width * qv];
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
    let mut dd = BlockedTensor::zeros(Layout::Nchwc, s.input_dims(), V).expect("C is blocked");
    let dv = dd.vectors_mut::<V>();
    for (t, (out, _)) in results.iter().enumerate() {
        let [image_tile, y, c_tile] = tasks.coords(t);
        let first = image_tile * images_per_task;
        for (mi, column_block) in out.chunks_exact(s.width * qv).enumerate() {
            let m = first + mi;
            for (x, vectors) in column_block.chunks_exact(qv).enumerate() {
                for (j, vector) in vectors.iter().enumerate() {
                    let cb = c_tile * qv + j;
                    dv[((m * c_blocks + cb) * s.height + y) * s.width + x] = *vector;
                }
            }
        }
    }
    (dd, counters)
}
