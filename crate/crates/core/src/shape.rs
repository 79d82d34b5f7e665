//! Convolution geometry.

use crate::error::{Error, Result};

/// Dimensions of one convolution layer.
///
/// Width-direction quantities (`width`, `filter_w`, `stride_w`, `pad_w`) index
/// columns; height-direction quantities index rows. Padding is symmetric,
/// virtual zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvShape {
    /// Square filter and stride with "same" padding: `(k - 1) / 2` for odd
    /// filters, none for even ones.
    pub fn same(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        filter: usize,
        stride: usize,
    ) -> Self {
        let pad = if filter % 2 == 1 { (filter - 1) / 2 } else { 0 };
        Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            filter_h: filter,
            filter_w: filter,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("batch", self.batch),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("height", self.height),
            ("width", self.width),
            ("filter_h", self.filter_h),
            ("filter_w", self.filter_w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Shape(format!("{name} must be positive")));
            }
        }
        if self.pad_w >= self.filter_w || self.pad_h >= self.filter_h {
            return Err(Error::Shape(format!(
                "padding ({}, {}) must be smaller than the filter ({}, {})",
                self.pad_h, self.pad_w, self.filter_h, self.filter_w
            )));
        }
        if self.width + 2 * self.pad_w < self.filter_w
            || self.height + 2 * self.pad_h < self.filter_h
        {
            return Err(Error::Shape(format!(
                "padded input {}x{} is smaller than the filter {}x{}",
                self.height + 2 * self.pad_h,
                self.width + 2 * self.pad_w,
                self.filter_h,
                self.filter_w
            )));
        }
        Ok(())
    }

    /// Output width; trailing input columns that do not complete a stride
    /// step are dropped.
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad_w - self.filter_w) / self.stride_w + 1
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad_h - self.filter_h) / self.stride_h + 1
    }

    /// `(out_width, out_height)` after validating the shape.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((self.out_width(), self.out_height()))
    }

    /// Requires both channel counts to be multiples of `lanes`.
    pub fn check_channel_blocking(&self, lanes: usize) -> Result<()> {
        for (what, value) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ] {
            if value % lanes != 0 {
                return Err(Error::Divisibility { what, value, lanes });
            }
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height(),
            self.out_width(),
        ]
    }

    /// Plain filter dims: `[out_channels][in_channels][filter_h][filter_w]`.
    pub fn filter_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.filter_h,
            self.filter_w,
        ]
    }

    /// Input row read by output row `out_row` at filter row `filter_row`,
    /// or `None` if it falls into the padding.
    #[inline]
    pub fn input_row(&self, out_row: usize, filter_row: usize) -> Option<usize> {
        (out_row * self.stride_h + filter_row)
            .checked_sub(self.pad_h)
            .filter(|&y| y < self.height)
    }

    /// Output row that reads input row `in_row` through filter row
    /// `filter_row`, if any.
    #[inline]
    pub fn output_row(&self, in_row: usize, filter_row: usize) -> Option<usize> {
        let shifted = (in_row + self.pad_h).checked_sub(filter_row)?;
        if shifted % self.stride_h != 0 {
            return None;
        }
        Some(shifted / self.stride_h).filter(|&y| y < self.out_height())
    }
}

/// Every `(filter column, output column)` pair that input column `x` feeds,
/// ordered by descending filter column (ascending output column).
pub fn affected_outputs(shape: &ConvShape, x: usize) -> Vec<(usize, usize)> {
    let out_w = shape.out_width();
    (0..shape.filter_w)
        .rev()
        .filter_map(|u| {
            let shifted = (x + shape.pad_w).checked_sub(u)?;
            if shifted % shape.stride_w != 0 {
                return None;
            }
            let xo = shifted / shape.stride_w;
            (xo < out_w).then_some((u, xo))
        })
        .collect()
}

/// Every `(filter column, input column)` pair that output column `xo`
/// reads, ordered by ascending filter column. This is the scatter target
/// set for one output-gradient element.
pub fn input_columns(shape: &ConvShape, xo: usize) -> Vec<(usize, usize)> {
    (0..shape.filter_w)
        .filter_map(|u| {
            let x = (xo * shape.stride_w + u).checked_sub(shape.pad_w)?;
            (x < shape.width).then_some((u, x))
        })
        .collect()
}
