//! Row-major grids, half-open cell rectangles and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "grid data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index_of(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Inverse of [`Grid::index_of`].
    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Axis-aligned rectangle of cells, half-open: columns `[x1, x2)`, rows `[y1, y2)`.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct Rect {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Rect {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Validation(format!(
                "degenerate rectangle [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        (self.x1..self.x2).contains(&col) && (self.y1..self.y2).contains(&row)
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w * h
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0
    }

    /// Grows the rectangle by `margin` cells on every side, clipped at zero
    /// and at `(cols, rows)`.
    pub fn expanded(&self, margin: usize, cols: usize, rows: usize) -> Rect {
        Rect {
            x1: self.x1.saturating_sub(margin),
            y1: self.y1.saturating_sub(margin),
            x2: (self.x2 + margin).min(cols),
            y2: (self.y2 + margin).min(rows),
        }
    }

    pub fn fits_in(&self, cols: usize, rows: usize) -> bool {
        self.x2 <= cols && self.y2 <= rows
    }

    /// Center in cell units (fractional).
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y1..self.y2).flat_map(move |r| (self.x1..self.x2).map(move |c| (r, c)))
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x1, r.y1, r.x2, r.y2]
    }
}

impl TryFrom<[usize; 4]> for Rect {
    type Error = Error;

    fn try_from(v: [usize; 4]) -> Result<Self> {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

/// Binary ground-truth region on the environment's cell grid.
///
/// Serialized with run-length encoded rows: each row is a list of run lengths
/// alternating between 0-cells and 1-cells, starting with 0-cells (a leading
/// run may be zero).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RleMask", try_from = "RleMask")]
pub struct TargetMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl TargetMask {
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Validation(format!(
                "mask has {} cells, expected {rows}x{cols}",
                cells.len()
            )));
        }
        if !cells.iter().any(|&c| c) {
            return Err(Error::Validation("mask has no 1-cells".into()));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn from_rect(rows: usize, cols: usize, rect: &Rect) -> Result<Self> {
        if !rect.fits_in(cols, rows) {
            return Err(Error::Validation(format!(
                "rectangle {rect:?} exceeds {rows}x{cols} grid"
            )));
        }
        let mut cells = vec![false; rows * cols];
        for (r, c) in rect.cells() {
            cells[r * cols + c] = true;
        }
        Self::from_cells(rows, cols, cells)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Mask values as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RleMask {
    rows: usize,
    cols: usize,
    runs: Vec<Vec<usize>>,
}

impl From<TargetMask> for RleMask {
    fn from(m: TargetMask) -> Self {
        let runs = m
            .cells
            .chunks(m.cols.max(1))
            .map(|row| {
                let mut out = Vec::new();
                let mut current = false;
                let mut len = 0;
                for &cell in row {
                    if cell == current {
                        len += 1;
                    } else {
                        out.push(len);
                        current = cell;
                        len = 1;
                    }
                }
                out.push(len);
                out
            })
            .collect();
        RleMask {
            rows: m.rows,
            cols: m.cols,
            runs,
        }
    }
}

impl TryFrom<RleMask> for TargetMask {
    type Error = Error;

    fn try_from(rle: RleMask) -> Result<Self> {
        if rle.runs.len() != rle.rows {
            return Err(Error::Validation(format!(
                "mask declares {} rows but encodes {}",
                rle.rows,
                rle.runs.len()
            )));
        }
        let mut cells = Vec::with_capacity(rle.rows * rle.cols);
        for (r, row) in rle.runs.iter().enumerate() {
            let mut value = false;
            let mut total = 0;
            for &len in row {
                cells.extend(std::iter::repeat_n(value, len));
                total += len;
                value = !value;
            }
            if total != rle.cols {
                return Err(Error::Validation(format!(
                    "mask row {r} encodes {total} cells, expected {}",
                    rle.cols
                )));
            }
        }
        TargetMask::from_cells(rle.rows, rle.cols, cells)
    }
}
