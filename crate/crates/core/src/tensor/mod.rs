//! Plain and vector-blocked tensors.
//!
//! [`PlainTensor`] is the row-major `[d0][d1][rows][cols]` interchange form
//! every oracle works on. [`BlockedTensor`] stores the same logical values in
//! one of three kernel layouts, each with a contiguous `V`-lane run
//! innermost:
//!
//! | layout | logical dims | storage order |
//! |---|---|---|
//! | [`Layout::Nchwc`] | `[N][C][H][W]` | `[N][C/V][H][W][V_c]` |
//! | [`Layout::KcrsBlocked`] | `[K][C][S][R]` | `[K/V][C/V][S][R][V_c][V_k]` |
//! | [`Layout::Chwn`] | `[N][C][H][W]` | `[ceil(N/V)][C][H][W][V_n]` |
//!
//! `Chwn` pads a ragged minibatch with zero lanes; the other layouts require
//! exact divisibility.

mod io;

use std::fmt;

use crate::error::{Error, Result};

pub use io::{dump_blocked, dump_plain, load_tensor, LoadedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Activations and their gradients, channel tile innermost.
    Nchwc,
    /// Filters and filter gradients, output-channel vector innermost.
    KcrsBlocked,
    /// Minibatch tile innermost; used for the checked operand of BWW.
    Chwn,
}

impl Layout {
    pub fn tag(self) -> &'static str {
        match self {
            Layout::Nchwc => "nchwc",
            Layout::KcrsBlocked => "kcrs-blocked",
            Layout::Chwn => "chwn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "nchwc" => Some(Layout::Nchwc),
            "kcrs-blocked" => Some(Layout::KcrsBlocked),
            "chwn" => Some(Layout::Chwn),
            _ => None,
        }
    }

    /// Number of stored floats for the given logical dims.
    pub fn storage_len(self, dims: [usize; 4], lanes: usize) -> usize {
        match self {
            Layout::Chwn => dims[0].div_ceil(lanes) * lanes * dims[1] * dims[2] * dims[3],
            _ => dims.iter().product(),
        }
    }

    /// Storage offset of logical element `[a][b][row][col]`.
    #[inline]
    pub fn offset(self, dims: [usize; 4], lanes: usize, idx: [usize; 4]) -> usize {
        let [_, d1, rows, cols] = dims;
        let [a, b, row, col] = idx;
        match self {
            Layout::Nchwc => {
                let blocks = d1 / lanes;
                (((a * blocks + b / lanes) * rows + row) * cols + col) * lanes + b % lanes
            }
            Layout::KcrsBlocked => {
                let c_blocks = d1 / lanes;
                let vec = (((a / lanes) * c_blocks + b / lanes) * rows + row) * cols + col;
                (vec * lanes + b % lanes) * lanes + a % lanes
            }
            Layout::Chwn => (((a / lanes * d1 + b) * rows + row) * cols + col) * lanes + a % lanes,
        }
    }

    fn check_dims(self, dims: [usize; 4], lanes: usize) -> Result<()> {
        let require = |what, value: usize| {
            if value % lanes == 0 {
                Ok(())
            } else {
                Err(Error::Divisibility { what, value, lanes })
            }
        };
        match self {
            Layout::Nchwc => require("channels", dims[1]),
            Layout::KcrsBlocked => {
                require("out_channels", dims[0])?;
                require("in_channels", dims[1])
            }
            Layout::Chwn => Ok(()),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Row-major 4-d tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainTensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl PlainTensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values do not fill dims {dims:?} ({expected} elements)",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for r in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f([a, b, r, c]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f32) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn require_dims(&self, operand: &'static str, expected: [usize; 4]) -> Result<()> {
        if self.dims == expected {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                operand,
                expected,
                found: self.dims,
            })
        }
    }
}

/// A tensor in one of the kernel layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedTensor {
    layout: Layout,
    dims: [usize; 4],
    lanes: usize,
    data: Vec<f32>,
}

impl BlockedTensor {
    pub fn zeros(layout: Layout, dims: [usize; 4], lanes: usize) -> Result<Self> {
        layout.check_dims(dims, lanes)?;
        Ok(Self {
            layout,
            dims,
            lanes,
            data: vec![0.0; layout.storage_len(dims, lanes)],
        })
    }

    /// Wraps already-blocked storage.
    pub fn from_raw(layout: Layout, dims: [usize; 4], lanes: usize, data: Vec<f32>) -> Result<Self> {
        layout.check_dims(dims, lanes)?;
        let expected = layout.storage_len(dims, lanes);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values do not fill {layout} dims {dims:?} ({expected} stored)",
                data.len()
            )));
        }
        Ok(Self {
            layout,
            dims,
            lanes,
            data,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        self.layout.offset(self.dims, self.lanes, idx)
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    /// Relabels the storage without moving data. Only useful for negative
    /// tests that need a tensor whose layout tag lies.
    pub fn with_layout_tag(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    /// Fails unless this tensor has the given layout, dims and lane count.
    pub fn expect(
        &self,
        operand: &'static str,
        layout: Layout,
        dims: [usize; 4],
        lanes: usize,
    ) -> Result<()> {
        if self.layout != layout {
            return Err(Error::LayoutMismatch {
                operand,
                expected: layout,
                found: self.layout,
            });
        }
        if self.dims != dims {
            return Err(Error::DimMismatch {
                operand,
                expected: dims,
                found: self.dims,
            });
        }
        if self.lanes != lanes {
            return Err(Error::PlanMismatch(format!(
                "{operand} is blocked for {} lanes, plan uses {lanes}",
                self.lanes
            )));
        }
        Ok(())
    }

    /// Storage viewed as `V`-lane vectors.
    #[inline]
    pub fn vectors<const V: usize>(&self) -> &[[f32; V]] {
        assert_eq!(self.lanes, V, "vector view width differs from tensor lanes");
        self.data.as_chunks::<V>().0
    }

    #[inline]
    pub fn vectors_mut<const V: usize>(&mut self) -> &mut [[f32; V]] {
        assert_eq!(self.lanes, V, "vector view width differs from tensor lanes");
        self.data.as_chunks_mut::<V>().0
    }
}

/// Converts a plain tensor into a blocked layout.
pub fn pack(t: &PlainTensor, layout: Layout, lanes: usize) -> Result<BlockedTensor> {
    let mut out = BlockedTensor::zeros(layout, t.dims(), lanes)?;
    let dims = t.dims();
    let mut src = t.data().iter();
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for r in 0..dims[2] {
                for c in 0..dims[3] {
                    let off = layout.offset(dims, lanes, [a, b, r, c]);
                    out.data[off] = *src.next().expect("plain tensor length matches dims");
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack`]; padding lanes of a `Chwn` tensor are dropped.
pub fn unpack(b: &BlockedTensor) -> PlainTensor {
    PlainTensor::from_fn(b.dims, |idx| b.get(idx))
}
