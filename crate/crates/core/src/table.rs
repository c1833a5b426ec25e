use std::ops::{Index, IndexMut};

use serde::Serialize;

use crate::error::{Error, Result};

/// Dense row-major `[state, action]` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Table2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Table2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Table2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "table of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Table2 { rows, cols, data })
    }

    /// Builds a table by evaluating `f(row, col)` in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Table2 { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let cols = self.cols;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| ((i / cols, i % cols), v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Table2<U> {
        Table2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Table2<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Table2<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Table2<f64> {
    /// `max - min` over all finite entries; 0 for an empty table.
    pub fn spread(&self) -> f64 {
        spread(self.data.iter().copied())
    }
}

pub(crate) fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let t = Table2::from_fn(2, 3, |r, c| 10 * r + c);
        assert_eq!(t[(1, 2)], 12);
        assert_eq!(t.row(1), &[10, 11, 12]);
        assert!(Table2::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn spread_ignores_non_finite() {
        let t = Table2::from_vec(1, 4, vec![1.0, f64::NEG_INFINITY, 3.5, 2.0]).unwrap();
        assert_eq!(t.spread(), 2.5);
    }
}
