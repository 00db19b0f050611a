use crate::error::{Error, Result};

/// Row-major 2D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("grid with {} values", data.len()),
            });
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Grid::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Grid::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Min-max rescaling to `[0, 1]`; a constant grid becomes all zeros.
    pub fn normalized(&self) -> Grid {
        let (lo, hi) = (self.min(), self.max());
        if hi > lo {
            let span = hi - lo;
            self.map(|x| ((x - lo) / span).clamp(0.0, 1.0))
        } else {
            self.map(|_| 0.0)
        }
    }

    /// Bilinear upsampling with corner-aligned sampling: the four corners of
    /// the output coincide with the four corners of the input.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Grid> {
        if height < self.rows || width < self.cols {
            return Err(Error::Geometry(format!(
                "cannot upsample {}x{} to smaller {height}x{width}",
                self.rows, self.cols
            )));
        }
        Grid::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = aligned(y, height, self.rows);
            let (x0, x1, fx) = aligned(x, width, self.cols);
            let top = lerp(self.get(y0, x0), self.get(y0, x1), fx);
            let bottom = lerp(self.get(y1, x0), self.get(y1, x1), fx);
            lerp(top, bottom, fy)
        })
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Corner-aligned source coordinate for output index `i` of `out` samples
/// over `len` source samples.
fn aligned(i: usize, out: usize, len: usize) -> (usize, usize, f64) {
    if out == 1 || len == 1 {
        return (0, 0, 0.0);
    }
    let s = (i * (len - 1)) as f64 / (out - 1) as f64;
    let lo = (s.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, s - lo as f64)
}
