//! Backward propagation by weights.
//!
//! The zero-checked operand is stored minibatch-innermost (`Chwn`), so one
//! compare covers `V` images at one pixel. The other operand supplies
//! channel vectors from its usual `Nchwc` layout.
//!
//! Checking the input: task `(v, c, K tile)`, accumulators hold
//! `dG[K tile][c][v][0..R]` as K vectors. Checking the output gradient:
//! task `(v, k, C tile)`, accumulators hold `dG[k][C tile][v][0..R]` as C
//! vectors. In both cases the `R * Q / V` accumulators stay resident for a
//! whole row sweep: cleared when it starts, added to the task buffer once
//! when it ends.

use super::{merge_counters, Executor, KernelCounters, Mode};
use crate::plan::{decompose, CheckOn, KernelPlan};
use crate::shape::{affected_outputs, input_columns, ConvShape};
use crate::simd::{broadcast_fma, cmp_neq_zero, LaneMask};
use crate::tensor::{BlockedTensor, Layout};

struct Sweep<'a, const V: usize> {
    /// `(u, partner column)` pairs per checked column.
    targets: &'a [Vec<(usize, usize)>],
    /// Channel vectors of the non-checked operand.
    other: &'a [[f32; V]],
    /// Index distance between consecutive tile vectors in `other`.
    other_stride: usize,
    tile_vectors: usize,
}

impl<const V: usize> Sweep<'_, V> {
    /// Sweeps one checked row of a minibatch block. `partner(lane, col)`
    /// is the index in `other` of the first tile vector paired with image
    /// `lane` at partner column `col`.
    #[inline(always)]
    fn run<const SPARSE: bool>(
        &self,
        row: &[[f32; V]],
        valid: usize,
        partner: impl Fn(usize, usize) -> usize,
        acc: &mut [[f32; V]],
        counters: &mut KernelCounters,
    ) {
        let qv = self.tile_vectors;
        let lanes_in_range = LaneMask::first(valid);
        for (col, pixel) in row.iter().enumerate() {
            let targets = &self.targets[col];
            let mut accumulate = |lane: usize| {
                let value = pixel[lane];
                for &(u, partner_col) in targets {
                    let base = partner(lane, partner_col);
                    let dst = &mut acc[u * qv..][..qv];
                    for (j, a) in dst.iter_mut().enumerate() {
                        broadcast_fma(a, value, &self.other[base + j * self.other_stride]);
                    }
                }
            };
            let fmas_per_lane = (targets.len() * qv) as u64;
            if SPARSE {
                let mask = cmp_neq_zero(pixel).and(lanes_in_range);
                let set = mask.popcount() as u64;
                counters.checked_vectors += 1;
                counters.nonzero_lanes += set;
                counters.executed_vector_fmas += set * fmas_per_lane;
                for lane in mask.iter() {
                    accumulate(lane);
                }
            } else {
                counters.executed_vector_fmas += valid as u64 * fmas_per_lane;
                for lane in 0..valid {
                    accumulate(lane);
                }
            }
        }
    }
}

/// Adds the sweep's accumulators into the task buffer.
#[inline]
fn merge_into<const V: usize>(out: &mut [[f32; V]], acc: &[[f32; V]], counters: &mut KernelCounters) {
    for (o, a) in out.iter_mut().zip(acc) {
        for (x, y) in o.iter_mut().zip(a) {
            *x += *y;
        }
    }
    counters.output_vector_loads += acc.len() as u64;
    counters.output_vector_stores += acc.len() as u64;
}

pub(super) fn run<const V: usize>(
    exec: &Executor,
    input: &BlockedTensor,
    output_grad: &BlockedTensor,
    s: &ConvShape,
    plan: &KernelPlan,
    mode: Mode,
) -> (BlockedTensor, KernelCounters) {
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let qv = plan.tile_vectors();
    let (c_blocks, k_blocks) = (s.in_channels / V, s.out_channels / V);
    let blocks = s.batch.div_ceil(V);
    let accumulators = s.filter_w * qv;
    let tasks = decompose(s, plan);
    let sparse = mode == Mode::Sparse;

    let mut dg = BlockedTensor::zeros(Layout::KcrsBlocked, s.filter_dims(), V).expect("C and K are blocked");

    match plan.check_on {
        CheckOn::Input => {
            let targets: Vec<Vec<(usize, usize)>> = (0..s.width).map(|x| affected_outputs(s, x)).collect();
            let d = input.vectors::<V>();
            let sweep = Sweep::<V> {
                targets: &targets,
                other: output_grad.vectors::<V>(),
                other_stride: out_h * out_w,
                tile_vectors: qv,
            };
            let results = exec.map(tasks.count(), |t| {
                let [v, c, k_tile] = tasks.coords(t);
                let kb0 = k_tile * qv;
                let mut out = vec![[0.0f32; V]; accumulators];
                let mut acc = vec![[0.0f32; V]; accumulators];
                let mut counters = KernelCounters::default();
                for ib in 0..blocks {
                    let valid = V.min(s.batch - ib * V);
                    for yo in 0..out_h {
                        let Some(y) = s.input_row(yo, v) else { continue };
                        acc.fill([0.0; V]);
                        let row = &d[((ib * s.in_channels + c) * s.height + y) * s.width..][..s.width];
                        let partner = |lane: usize, xo: usize| {
                            let i = ib * V + lane;
                            ((i * k_blocks + kb0) * out_h + yo) * out_w + xo
                        };
                        if sparse {
                            sweep.run::<true>(row, valid, partner, &mut acc, &mut counters);
                        } else {
                            sweep.run::<false>(row, valid, partner, &mut acc, &mut counters);
                        }
                        merge_into(&mut out, &acc, &mut counters);
                    }
                }
                counters.ring_peak = accumulators as u64;
                (out, counters)
            });
            let counters = merge_counters(&results);
            let taps = s.filter_h * s.filter_w;
            let gv = dg.vectors_mut::<V>();
            for (t, (out, _)) in results.iter().enumerate() {
                let [v, c, k_tile] = tasks.coords(t);
                let (cb, lane) = (c / V, c % V);
                for u in 0..s.filter_w {
                    for j in 0..qv {
                        let kb = k_tile * qv + j;
                        gv[((kb * c_blocks + cb) * taps + v * s.filter_w + u) * V + lane] = out[u * qv + j];
                    }
                }
            }
            (dg, counters)
        }
        CheckOn::OutputGrad => {
            let targets: Vec<Vec<(usize, usize)>> = (0..out_w).map(|xo| input_columns(s, xo)).collect();
            let dy = output_grad.vectors::<V>();
            let sweep = Sweep::<V> {
                targets: &targets,
                other: input.vectors::<V>(),
                other_stride: s.height * s.width,
                tile_vectors: qv,
            };
            let results = exec.map(tasks.count(), |t| {
                let [v, k, c_tile] = tasks.coords(t);
                let cb0 = c_tile * qv;
                let mut out = vec![[0.0f32; V]; accumulators];
                let mut acc = vec![[0.0f32; V]; accumulators];
                let mut counters = KernelCounters::default();
                for ib in 0..blocks {
                    let valid = V.min(s.batch - ib * V);
                    for yo in 0..out_h {
                        let Some(y) = s.input_row(yo, v) else { continue };
                        acc.fill([0.0; V]);
                        let row = &dy[((ib * s.out_channels + k) * out_h + yo) * out_w..][..out_w];
                        let partner = |lane: usize, x: usize| {
                            let i = ib * V + lane;
                            ((i * c_blocks + cb0) * s.height + y) * s.width + x
                        };
                        if sparse {
                            sweep.run::<true>(row, valid, partner, &mut acc, &mut counters);
                        } else {
                            sweep.run::<false>(row, valid, partner, &mut acc, &mut counters);
                        }
                        merge_into(&mut out, &acc, &mut counters);
                    }
                }
                counters.ring_peak = accumulators as u64;
                (out, counters)
            });
            let counters = merge_counters(&results);
            let dims = s.filter_dims();
            let data = dg.data_mut();
            for (t, (out, _)) in results.iter().enumerate() {
                let [v, k, c_tile] = tasks.coords(t);
                for u in 0..s.filter_w {
                    for j in 0..qv {
                        for (lane, &value) in out[u * qv + j].iter().enumerate() {
                            let c = (c_tile * qv + j) * V + lane;
                            data[Layout::KcrsBlocked.offset(dims, V, [k, c, v, u])] = value;
                        }
                    }
                }
            }
            (dg, counters)
        }
    }
}
