use std::fmt;

use crate::error::{Error, Result};

/// Number of ARC colors (0 is background).
pub const NUM_COLORS: usize = 10;
/// Output class for canvas cells outside the grid.
pub const PAD_CLASS: usize = NUM_COLORS;
/// Output classes: ten colors plus PAD.
pub const NUM_CLASSES: usize = NUM_COLORS + 1;
/// Largest grid side accepted by the parser.
pub const MAX_GRID: usize = 30;

/// Row-major grid of color indices.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || height > MAX_GRID || width > MAX_GRID {
            return Err(Error::contract(format!(
                "grid dims {height}x{width} outside 1..={MAX_GRID}"
            )));
        }
        if cells.len() != height * width {
            return Err(Error::dim("grid", &[height, width], &[cells.len()]));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c as usize >= NUM_COLORS) {
            return Err(Error::contract(format!("color {bad} out of range")));
        }
        Ok(Grid {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, color: u8) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut cells = Vec::with_capacity(height * width);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != width {
                return Err(Error::Parse {
                    path: format!("row {i}"),
                    message: format!("ragged row: expected {width} cells, got {}", r.as_ref().len()),
                });
            }
            cells.extend_from_slice(r.as_ref());
        }
        Self::new(height, width, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, color: u8) {
        assert!((color as usize) < NUM_COLORS, "color {color} out of range");
        self.cells[r * self.width + c] = color;
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.width).map(<[u8]>::to_vec).collect()
    }

    /// Build a grid with the given dims by evaluating `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                cells.push(f(r, c));
            }
        }
        Self::new(height, width, cells)
    }

    /// Count of cells per color.
    pub fn histogram(&self) -> [usize; NUM_COLORS] {
        let mut h = [0; NUM_COLORS];
        for &c in &self.cells {
            h[c as usize] += 1;
        }
        h
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Grid {}x{}", self.height, self.width)?;
        for row in self.cells.chunks(self.width) {
            let line: String = row.iter().map(|c| char::from(b'0' + c)).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(1, 1, vec![10]).is_err());
        assert!(Grid::new(2, 2, vec![0; 3]).is_err());
        assert!(Grid::new(0, 2, vec![]).is_err());
        assert!(Grid::new(31, 1, vec![0; 31]).is_err());
        assert!(Grid::from_rows(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let g = Grid::from_rows(&[[1, 2, 3], [4, 5, 6]]).unwrap();
        assert_eq!(g.height(), 2);
        assert_eq!(g.width(), 3);
        assert_eq!(g.get(1, 0), 4);
        assert_eq!(Grid::from_rows(&g.rows()).unwrap(), g);
    }
}
