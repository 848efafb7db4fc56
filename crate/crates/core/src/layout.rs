//! Grid layouts: packing a frame sequence into one image and back.
//!
//! Frames are placed in row-major order: frame `k` lives in cell
//! `(k / cols, k % cols)`. Cells are contiguous, with no padding between them.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3, ArrayViewMut3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame, shaped `(height, width, channels)`.
pub type Frame = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
}

impl LayoutSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        frame_h: usize,
        frame_w: usize,
        channels: usize,
    ) -> Result<Self> {
        let spec = LayoutSpec {
            rows,
            cols,
            frame_h,
            frame_w,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidLayout(format!(
                "grid must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.frame_h == 0 || self.frame_w == 0 || self.channels == 0 {
            return Err(Error::InvalidLayout(format!(
                "frame shape {}x{}x{} is empty",
                self.frame_h, self.frame_w, self.channels
            )));
        }
        Ok(())
    }

    /// Same frame geometry with a different grid.
    pub fn with_grid(&self, rows: usize, cols: usize) -> Result<Self> {
        LayoutSpec::new(rows, cols, self.frame_h, self.frame_w, self.channels)
    }

    pub fn frame_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn grid_h(&self) -> usize {
        self.rows * self.frame_h
    }

    pub fn grid_w(&self) -> usize {
        self.cols * self.frame_w
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        [self.grid_h(), self.grid_w(), self.channels]
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.frame_h, self.frame_w, self.channels]
    }

    pub fn cell_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(row * self.cols + col)
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Pixel rectangle `(y0, x0)` of a cell's top-left corner.
    fn cell_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.frame_h, col * self.frame_w)
    }
}

pub fn cell_index(row: usize, col: usize, layout: &LayoutSpec) -> Result<usize> {
    layout.cell_index(row, col)
}

/// `"4x6"` style grid size, rows first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for GridSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidLayout(format!("expected ROWSxCOLS, got '{s}'"));
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(GridSize { rows, cols })
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// A packed grid image together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    data: Array3<f64>,
    layout: LayoutSpec,
}

impl GridTensor {
    pub fn new(data: Array3<f64>, layout: LayoutSpec) -> Result<Self> {
        if data.shape() != layout.grid_shape() {
            return Err(Error::ShapeMismatch(format!(
                "grid data {:?} does not match layout {:?}",
                data.shape(),
                layout.grid_shape()
            )));
        }
        Ok(GridTensor { data, layout })
    }

    pub fn zeros(layout: LayoutSpec) -> Self {
        Self::full(layout, 0.0)
    }

    pub fn full(layout: LayoutSpec, value: f64) -> Self {
        GridTensor {
            data: Array3::from_elem(layout.grid_shape(), value),
            layout,
        }
    }

    pub fn from_fn(layout: LayoutSpec, mut f: impl FnMut() -> f64) -> Self {
        GridTensor {
            data: Array3::from_shape_simple_fn(layout.grid_shape(), &mut f),
            layout,
        }
    }

    pub fn layout(&self) -> &LayoutSpec {
        &self.layout
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView3<'_, f64> {
        let (y, x) = self.layout.cell_origin(row, col);
        self.data.slice(s![
            y..y + self.layout.frame_h,
            x..x + self.layout.frame_w,
            ..
        ])
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> ArrayViewMut3<'_, f64> {
        let (y, x) = self.layout.cell_origin(row, col);
        let (h, w) = (self.layout.frame_h, self.layout.frame_w);
        self.data.slice_mut(s![y..y + h, x..x + w, ..])
    }

    /// Cell by row-major linear index.
    pub fn cell_at(&self, index: usize) -> ArrayView3<'_, f64> {
        let (r, c) = self.layout.cell_coords(index);
        self.cell(r, c)
    }

    pub fn cell_at_mut(&mut self, index: usize) -> ArrayViewMut3<'_, f64> {
        let (r, c) = self.layout.cell_coords(index);
        self.cell_mut(r, c)
    }

    pub fn ensure_same_shape(&self, other: &GridTensor) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::ShapeMismatch(format!(
                "layouts differ: {:?} vs {:?}",
                self.layout, other.layout
            )));
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn lerp_with(&self, a: f64, other: &GridTensor, b: f64) -> Result<GridTensor> {
        self.ensure_same_shape(other)?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&x, &y| a * x + b * y);
        Ok(GridTensor {
            data,
            layout: self.layout,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

pub fn pack(frames: &[Frame], layout: &LayoutSpec) -> Result<GridTensor> {
    layout.validate()?;
    if frames.len() != layout.frame_count() {
        return Err(Error::FrameCountMismatch {
            expected: layout.frame_count(),
            got: frames.len(),
        });
    }
    let expected = layout.frame_shape();
    let mut grid = GridTensor::zeros(*layout);
    for (k, frame) in frames.iter().enumerate() {
        if frame.shape() != expected {
            let sh = frame.shape();
            return Err(Error::FrameShapeMismatch {
                index: k,
                expected,
                got: [sh[0], sh[1], sh[2]],
            });
        }
        grid.cell_at_mut(k).assign(frame);
    }
    Ok(grid)
}

pub fn unpack(grid: &GridTensor) -> Result<Vec<Frame>> {
    if grid.data.shape() != grid.layout.grid_shape() {
        return Err(Error::ShapeMismatch(format!(
            "grid data {:?} does not match layout {:?}",
            grid.data.shape(),
            grid.layout.grid_shape()
        )));
    }
    Ok((0..grid.layout.frame_count())
        .map(|k| grid.cell_at(k).to_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(rows: usize, cols: usize, h: usize, w: usize, c: usize) -> LayoutSpec {
        LayoutSpec::new(rows, cols, h, w, c).unwrap()
    }

    #[test]
    fn pack_places_frames_row_major() {
        let l = layout(2, 2, 2, 2, 1);
        let frames: Vec<Frame> = (0..4)
            .map(|k| Array3::from_elem((2, 2, 1), k as f64))
            .collect();
        let grid = pack(&frames, &l).unwrap();
        assert_eq!(grid.data().shape(), &[4, 4, 1]);
        assert_eq!(grid.data()[[0, 0, 0]], 0.0);
        assert_eq!(grid.data()[[0, 3, 0]], 1.0);
        assert_eq!(grid.data()[[3, 0, 0]], 2.0);
        assert_eq!(grid.data()[[3, 3, 0]], 3.0);
    }

    #[test]
    fn single_cell_is_identity() {
        let l = layout(1, 1, 3, 5, 2);
        let frame = Array3::from_shape_fn((3, 5, 2), |(y, x, c)| (y * 10 + x + c * 100) as f64);
        let grid = pack(std::slice::from_ref(&frame), &l).unwrap();
        assert_eq!(grid.data(), &frame);
    }

    #[test]
    fn pack_rejects_bad_inputs() {
        let l = layout(2, 2, 2, 2, 1);
        let three = vec![Array3::zeros((2, 2, 1)); 3];
        assert!(matches!(
            pack(&three, &l),
            Err(Error::FrameCountMismatch {
                expected: 4,
                got: 3
            })
        ));
        let mut four = vec![Array3::zeros((2, 2, 1)); 4];
        four[2] = Array3::zeros((2, 3, 1));
        assert!(matches!(
            pack(&four, &l),
            Err(Error::FrameShapeMismatch { index: 2, .. })
        ));
    }

    #[test]
    fn unpack_constant_grid() {
        let l = layout(3, 2, 4, 4, 3);
        let frames = unpack(&GridTensor::full(l, 0.5)).unwrap();
        assert_eq!(frames.len(), 6);
        assert!(frames.iter().all(|f| f.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn cell_index_examples() {
        let l = layout(4, 6, 1, 1, 1);
        assert_eq!(cell_index(0, 0, &l).unwrap(), 0);
        assert_eq!(cell_index(1, 0, &l).unwrap(), 6);
        assert!(matches!(
            cell_index(4, 0, &l),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(cell_index(0, 6, &l).is_err());
    }

    #[test]
    fn cell_index_is_a_bijection() {
        let l = layout(3, 5, 1, 1, 1);
        let mut seen = [false; 15];
        for i in 0..3 {
            for j in 0..5 {
                let k = l.cell_index(i, j).unwrap();
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(l.cell_coords(k), (i, j));
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn grid_size_parse() {
        assert_eq!(
            "4x6".parse::<GridSize>().unwrap(),
            GridSize { rows: 4, cols: 6 }
        );
        assert!("4".parse::<GridSize>().is_err());
        assert!("0x3".parse::<GridSize>().is_err());
    }

    #[test]
    fn invalid_layouts() {
        assert!(LayoutSpec::new(0, 1, 1, 1, 1).is_err());
        assert!(LayoutSpec::new(1, 1, 0, 1, 1).is_err());
    }
}
