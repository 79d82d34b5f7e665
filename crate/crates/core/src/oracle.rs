//! Ground truth for the kernels.
//!
//! The dense convolutions accumulate in `f64` and round to `f32` once at the
//! end. They do no zero skipping of any kind. The `*_f64` variants work on
//! plain row-major `f64` buffers and are what the finite-difference and
//! adjointness checks run on.

use rayon::prelude::*;

use crate::error::Result;
use crate::plan::{decompose, CheckOn, Component, KernelPlan};
use crate::shape::ConvShape;
use crate::sparsity::gen_signed;
use crate::tensor::PlainTensor;

pub fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&x| x as f64).collect()
}

fn to_plain(dims: [usize; 4], values: Vec<f64>) -> PlainTensor {
    PlainTensor::from_vec(dims, values.into_iter().map(|x| x as f32).collect())
        .expect("oracle output matches dims")
}

/// Input coordinate read by output coordinate `out` through filter tap
/// `tap`, or `None` inside the padding.
#[inline]
fn source(out: usize, tap: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (out * stride + tap).checked_sub(pad).filter(|&x| x < extent)
}

/// `(v, u, yi, xi)` for every filter tap of output pixel `(yo, xo)` that
/// reads a real input pixel.
fn taps_of(s: &ConvShape, yo: usize, xo: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
    (0..s.filter_h).flat_map(move |v| {
        (0..s.filter_w).filter_map(move |u| {
            let yi = source(yo, v, s.stride_h, s.pad_h, s.height)?;
            let xi = source(xo, u, s.stride_w, s.pad_w, s.width)?;
            Some((v, u, yi, xi))
        })
    })
}

/// `acc[j] += scale * row[j]`.
#[inline]
fn axpy(acc: &mut [f64], scale: f64, row: &[f64]) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a += scale * r;
    }
}

/// Moves axis 1 of a 4-d array innermost: `[a][b][c][d]` to `[a][c][d][b]`.
fn channels_last(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for p in 0..c * d {
                out[(i * c * d + p) * b + j] = x[(i * b + j) * c * d + p];
            }
        }
    }
    out
}

/// Inverse of [`channels_last`] for the `[a][b][c][d]` shape.
fn channels_first(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for p in 0..c * d {
                out[(i * b + j) * c * d + p] = x[(i * c * d + p) * b + j];
            }
        }
    }
    out
}

/// `Y = conv(D, G)`.
pub fn dense_fwd(d: &PlainTensor, g: &PlainTensor, shape: &ConvShape) -> Result<PlainTensor> {
    shape.validate()?;
    d.require_dims("input", shape.input_dims())?;
    g.require_dims("filter", shape.filter_dims())?;
    let y = fwd_f64(&to_f64(d.data()), &to_f64(g.data()), shape);
    Ok(to_plain(shape.output_dims(), y))
}

/// `dL/dD` from `dL/dY`.
pub fn dense_bwi(dy: &PlainTensor, g: &PlainTensor, shape: &ConvShape) -> Result<PlainTensor> {
    shape.validate()?;
    dy.require_dims("output gradient", shape.output_dims())?;
    g.require_dims("filter", shape.filter_dims())?;
    let dd = bwi_f64(&to_f64(dy.data()), &to_f64(g.data()), shape);
    Ok(to_plain(shape.input_dims(), dd))
}

/// `dL/dG` from the input and `dL/dY`.
pub fn dense_bww(d: &PlainTensor, dy: &PlainTensor, shape: &ConvShape) -> Result<PlainTensor> {
    shape.validate()?;
    d.require_dims("input", shape.input_dims())?;
    dy.require_dims("output gradient", shape.output_dims())?;
    let dg = bww_f64(&to_f64(d.data()), &to_f64(dy.data()), shape);
    Ok(to_plain(shape.filter_dims(), dg))
}

/// Direct summation with channels moved innermost so every accumulation
/// is a contiguous axpy.
pub fn fwd_f64(d: &[f64], g: &[f64], s: &ConvShape) -> Vec<f64> {
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let (c_in, k_out) = (s.in_channels, s.out_channels);
    let taps = s.filter_h * s.filter_w;
    // [v][u][c][k]
    let mut g_t = vec![0.0; g.len()];
    for k in 0..k_out {
        for c in 0..c_in {
            for tap in 0..taps {
                g_t[(tap * c_in + c) * k_out + k] = g[(k * c_in + c) * taps + tap];
            }
        }
    }
    let g_t = |v: usize, u: usize, c: usize| &g_t[((v * s.filter_w + u) * c_in + c) * k_out..][..k_out];
    let d_t = channels_last(d, s.input_dims());
    let mut y_t = vec![0.0; s.batch * out_h * out_w * k_out];
    y_t.par_chunks_mut(out_w * k_out).enumerate().for_each(|(row, out)| {
        let (i, yo) = (row / out_h, row % out_h);
        for (xo, acc) in out.chunks_exact_mut(k_out).enumerate() {
            for (v, u, yi, xi) in taps_of(s, yo, xo) {
                let pixel = &d_t[((i * s.height + yi) * s.width + xi) * c_in..][..c_in];
                for (c, &x) in pixel.iter().enumerate() {
                    axpy(acc, x, g_t(v, u, c));
                }
            }
        }
    });
    channels_first(&y_t, s.output_dims())
}

pub fn bwi_f64(dy: &[f64], g: &[f64], s: &ConvShape) -> Vec<f64> {
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let (c_in, k_out) = (s.in_channels, s.out_channels);
    let taps = s.filter_h * s.filter_w;
    // [v][u][k][c]
    let mut g_t = vec![0.0; g.len()];
    for k in 0..k_out {
        for c in 0..c_in {
            for tap in 0..taps {
                g_t[(tap * k_out + k) * c_in + c] = g[(k * c_in + c) * taps + tap];
            }
        }
    }
    let dy_t = channels_last(dy, s.output_dims());
    let mut dd_t = vec![0.0; s.batch * s.height * s.width * c_in];
    // Scatter from each output-gradient pixel; one image per task so the
    // writes never race.
    dd_t.par_chunks_mut(s.height * s.width * c_in).enumerate().for_each(|(i, out)| {
        for yo in 0..out_h {
            for xo in 0..out_w {
                let grad = &dy_t[((i * out_h + yo) * out_w + xo) * k_out..][..k_out];
                for (v, u, yi, xi) in taps_of(s, yo, xo) {
                    let acc = &mut out[(yi * s.width + xi) * c_in..][..c_in];
                    for (k, &e) in grad.iter().enumerate() {
                        axpy(acc, e, &g_t[((v * s.filter_w + u) * k_out + k) * c_in..][..c_in]);
                    }
                }
            }
        }
    });
    channels_first(&dd_t, s.input_dims())
}

pub fn bww_f64(d: &[f64], dy: &[f64], s: &ConvShape) -> Vec<f64> {
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let (c_in, k_out) = (s.in_channels, s.out_channels);
    let taps = s.filter_h * s.filter_w;
    let d_t = channels_last(d, s.input_dims());
    let dy_t = channels_last(dy, s.output_dims());
    // [v][u][k][c], one (tap, k) row per task
    let mut dg_t = vec![0.0; taps * k_out * c_in];
    dg_t.par_chunks_mut(c_in).enumerate().for_each(|(row, acc)| {
        let (tap, k) = (row / k_out, row % k_out);
        let (v, u) = (tap / s.filter_w, tap % s.filter_w);
        for i in 0..s.batch {
            for yo in 0..out_h {
                let Some(yi) = source(yo, v, s.stride_h, s.pad_h, s.height) else { continue };
                for xo in 0..out_w {
                    let Some(xi) = source(xo, u, s.stride_w, s.pad_w, s.width) else { continue };
                    let e = dy_t[((i * out_h + yo) * out_w + xo) * k_out + k];
                    axpy(acc, e, &d_t[((i * s.height + yi) * s.width + xi) * c_in..][..c_in]);
                }
            }
        }
    });
    let mut dg = vec![0.0; dg_t.len()];
    for tap in 0..taps {
        for k in 0..k_out {
            for c in 0..c_in {
                dg[(k * c_in + c) * taps + tap] = dg_t[(tap * k_out + k) * c_in + c];
            }
        }
    }
    dg
}

/// `max |a - r| / (|r| + 1e-6)` over all elements; infinite if any
/// difference is NaN or the lengths differ.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    if actual.len() != reference.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (&a, &r) in actual.iter().zip(reference) {
        let err = (a as f64 - r as f64).abs() / ((r as f64).abs() + 1e-6);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar loss on the layer output used by the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `½‖Y‖²`, so `dL/dY = Y`.
    HalfSquare,
    /// `Σ Y³ / 3`, so `dL/dY = Y²`. Its central differences have a
    /// non-vanishing second-order error term.
    Cubic,
    /// `Σ Y`, so `dL/dY = 1`.
    Sum,
}

impl Loss {
    pub fn value(self, y: &[f64]) -> f64 {
        match self {
            Loss::HalfSquare => 0.5 * dot(y, y),
            Loss::Cubic => y.iter().map(|v| v * v * v / 3.0).sum(),
            Loss::Sum => y.iter().sum(),
        }
    }

    pub fn output_grad(self, y: &[f64]) -> Vec<f64> {
        match self {
            Loss::HalfSquare => y.to_vec(),
            Loss::Cubic => y.iter().map(|v| v * v).collect(),
            Loss::Sum => vec![1.0; y.len()],
        }
    }
}

/// Central-difference check with `½‖Y‖²` and seed 0.
///
/// For BWI and BWW every gradient element is compared against the central
/// difference of the loss along that coordinate; for FWD the directional
/// derivative of `Y` along a random input direction is compared against
/// `conv(direction, G)`. Returns the maximum relative error, with the
/// denominator floored at `1e-6 · max|analytic|`.
pub fn finite_diff_check(component: Component, shape: &ConvShape, epsilon: f64) -> Result<f64> {
    finite_diff_check_with(component, shape, epsilon, Loss::HalfSquare, 0)
}

pub fn finite_diff_check_with(
    component: Component,
    shape: &ConvShape,
    epsilon: f64,
    loss: Loss,
    seed: u64,
) -> Result<f64> {
    shape.validate()?;
    let d = to_f64(gen_signed(shape.input_dims(), seed, 0).data());
    let g = to_f64(gen_signed(shape.filter_dims(), seed, 1).data());
    let (analytic, numeric): (Vec<f64>, Vec<f64>) = match component {
        Component::Fwd => {
            let dir = to_f64(gen_signed(shape.input_dims(), seed, 2).data());
            let analytic = fwd_f64(&dir, &g, shape);
            let shifted = |sign: f64| {
                let moved: Vec<f64> = d.iter().zip(&dir).map(|(x, t)| x + sign * epsilon * t).collect();
                fwd_f64(&moved, &g, shape)
            };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            let numeric = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect();
            (analytic, numeric)
        }
        Component::Bwi => {
            let dy = loss.output_grad(&fwd_f64(&d, &g, shape));
            let analytic = bwi_f64(&dy, &g, shape);
            let numeric = central_differences(&d, epsilon, |x| loss.value(&fwd_f64(x, &g, shape)));
            (analytic, numeric)
        }
        Component::Bww => {
            let dy = loss.output_grad(&fwd_f64(&d, &g, shape));
            let analytic = bww_f64(&d, &dy, shape);
            let numeric = central_differences(&g, epsilon, |x| loss.value(&fwd_f64(&d, x, shape)));
            (analytic, numeric)
        }
    };
    Ok(relative_gap(&analytic, &numeric))
}

fn central_differences(at: &[f64], epsilon: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            x[i] = at[i] + epsilon;
            let plus = f(&x);
            x[i] = at[i] - epsilon;
            let minus = f(&x);
            x[i] = at[i];
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

fn relative_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Analytical instrumentation of one kernel launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FmaCountReport {
    pub checked_vectors: u64,
    pub nonzero_elements: u64,
    pub executed_vector_fmas: u64,
    pub skipped_vector_fmas: u64,
    /// FMAs the same loop structure issues with every lane treated as
    /// non-zero (dense mode).
    pub dense_total: u64,
    pub output_vector_loads: u64,
    pub output_vector_stores: u64,
}

/// Number of `(tap, partner)` pairs with `partner * stride + tap == col + pad`,
/// found by exhaustive search. Indexed by `col`.
fn pair_counts_by_input(width: usize, out_w: usize, filter: usize, stride: usize, pad: usize) -> Vec<u64> {
    (0..width)
        .map(|x| {
            let mut n = 0;
            for u in 0..filter {
                for xo in 0..out_w {
                    n += (xo * stride + u == x + pad) as u64;
                }
            }
            n
        })
        .collect()
}

/// Same relation indexed by output column.
fn pair_counts_by_output(width: usize, out_w: usize, filter: usize, stride: usize, pad: usize) -> Vec<u64> {
    (0..out_w)
        .map(|xo| {
            let mut n = 0;
            for u in 0..filter {
                for x in 0..width {
                    n += (xo * stride + u == x + pad) as u64;
                }
            }
            n
        })
        .collect()
}

fn matching_row(out_row: usize, tap: usize, stride: usize, pad: usize, height: usize) -> Option<usize> {
    (0..height).find(|&y| out_row * stride + tap == y + pad)
}

/// Simulates the loop structure of the kernel described by `plan` and
/// counts every zero check, set lane, vector FMA and accumulator load/store
/// it must perform. `mask_source` is the zero-checked tensor: the input for
/// FWD and BWW on the input, the output gradient for BWI and BWW on the
/// output gradient.
pub fn expected_fma_counts(
    shape: &ConvShape,
    plan: &KernelPlan,
    mask_source: &PlainTensor,
) -> Result<FmaCountReport> {
    shape.validate()?;
    let s = shape;
    let lanes = plan.lanes;
    let qv = plan.tile_vectors() as u64;
    let (out_w, out_h) = (s.out_width(), s.out_height());
    let tasks = decompose(s, plan);
    let by_input = pair_counts_by_input(s.width, out_w, s.filter_w, s.stride_w, s.pad_w);
    let by_output = pair_counts_by_output(s.width, out_w, s.filter_w, s.stride_w, s.pad_w);
    let mut r = FmaCountReport::default();
    let mut sweeps = 0u64;
    let nonzero = |idx: [usize; 4]| (mask_source.get(idx) != 0.0) as u64;

    match (plan.component, plan.check_on) {
        (Component::Fwd, _) => {
            mask_source.require_dims("input", s.input_dims())?;
            let tile = plan.minibatch_tile.clamp(1, s.batch);
            for t in 0..tasks.count() {
                let [image_tile, yo, _] = tasks.coords(t);
                for v in 0..s.filter_h {
                    let Some(y) = matching_row(yo, v, s.stride_h, s.pad_h, s.height) else { continue };
                    for cb in 0..s.in_channels / lanes {
                        for m in image_tile * tile..s.batch.min((image_tile + 1) * tile) {
                            sweeps += 1;
                            for x in 0..s.width {
                                let nz: u64 = (0..lanes).map(|l| nonzero([m, cb * lanes + l, y, x])).sum();
                                r.checked_vectors += 1;
                                r.nonzero_elements += nz;
                                r.executed_vector_fmas += nz * by_input[x] * qv;
                                r.dense_total += lanes as u64 * by_input[x] * qv;
                            }
                        }
                    }
                }
            }
            r.output_vector_loads = sweeps * out_w as u64 * qv;
        }
        (Component::Bwi, _) => {
            mask_source.require_dims("output gradient", s.output_dims())?;
            let tile = plan.minibatch_tile.clamp(1, s.batch);
            let touched = (0..s.width)
                .filter(|&x| (0..out_w).any(|xo| (0..s.filter_w).any(|u| xo * s.stride_w + u == x + s.pad_w)))
                .count() as u64;
            for t in 0..tasks.count() {
                let [image_tile, y, _] = tasks.coords(t);
                for v in 0..s.filter_h {
                    let Some(yo) = (0..out_h).find(|&yo| yo * s.stride_h + v == y + s.pad_h) else { continue };
                    for kb in 0..s.out_channels / lanes {
                        for m in image_tile * tile..s.batch.min((image_tile + 1) * tile) {
                            sweeps += 1;
                            for xo in 0..out_w {
                                let nz: u64 = (0..lanes).map(|l| nonzero([m, kb * lanes + l, yo, xo])).sum();
                                r.checked_vectors += 1;
                                r.nonzero_elements += nz;
                                r.executed_vector_fmas += nz * by_output[xo] * qv;
                                r.dense_total += lanes as u64 * by_output[xo] * qv;
                            }
                        }
                    }
                }
            }
            r.output_vector_loads = sweeps * touched * qv;
        }
        (Component::Bww, check_on) => {
            let (checked_channels, cols, pairs) = match check_on {
                CheckOn::Input => {
                    mask_source.require_dims("input", s.input_dims())?;
                    (s.in_channels, s.width, &by_input)
                }
                CheckOn::OutputGrad => {
                    mask_source.require_dims("output gradient", s.output_dims())?;
                    (s.out_channels, out_w, &by_output)
                }
            };
            let blocks = s.batch.div_ceil(lanes);
            for t in 0..tasks.count() {
                let [v, ch, _] = tasks.coords(t);
                debug_assert!(ch < checked_channels);
                for ib in 0..blocks {
                    let valid = lanes.min(s.batch - ib * lanes);
                    for yo in 0..out_h {
                        let Some(y) = matching_row(yo, v, s.stride_h, s.pad_h, s.height) else { continue };
                        let row = if check_on == CheckOn::Input { y } else { yo };
                        sweeps += 1;
                        for col in 0..cols {
                            let nz: u64 = (0..valid).map(|l| nonzero([ib * lanes + l, ch, row, col])).sum();
                            r.checked_vectors += 1;
                            r.nonzero_elements += nz;
                            r.executed_vector_fmas += nz * pairs[col] * qv;
                            r.dense_total += valid as u64 * pairs[col] * qv;
                        }
                    }
                }
            }
            r.output_vector_loads = sweeps * s.filter_w as u64 * qv;
        }
    }
    r.output_vector_stores = r.output_vector_loads;
    r.skipped_vector_fmas = r.dense_total - r.executed_vector_fmas;
    Ok(r)
}
