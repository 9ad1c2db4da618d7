//! Dense row-major 2-D grids used for masks and scalar fields.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Binary mask with values in {0, 1}.
pub type Mask = Grid<u8>;
/// Single-channel float field.
pub type Field = Grid<f32>;

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        ensure_contract!(
            data.len() == height * width,
            "grid data has {} values, expected {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Value at signed coordinates, `None` when outside the grid.
    #[inline]
    pub fn get_signed(&self, y: i64, x: i64) -> Option<T> {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies `self` shifted by `(dy, dx)`; cells shifted in from outside get `T::default()`.
    pub fn shifted(&self, dy: i64, dx: i64) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get_signed(y as i64 - dy, x as i64 - dx)
                .unwrap_or_default()
        })
    }

    /// Window of size `height x width` whose top-left corner sits at `(top, left)`;
    /// cells outside `self` are filled with `fill`.
    pub fn crop(&self, top: i64, left: i64, height: usize, width: usize, fill: T) -> Self {
        Self::from_fn(height, width, |y, x| {
            self.get_signed(top + y as i64, left + x as i64)
                .unwrap_or(fill)
        })
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & (1 - b.min(1)))
    }

    pub fn not(&self) -> Mask {
        self.map(|v| 1 - v.min(1))
    }

    /// True when every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| a == 0 || b != 0)
    }

    /// Bounding box as `(y0, x0, y1, x1)`, inclusive; `None` for an empty mask.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) != 0 {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_field(&self) -> Field {
        self.map(|v| v as f32)
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        debug_assert_eq!(self.shape(), other.shape());
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

impl Field {
    /// Binarizes at `threshold` (strictly greater is foreground).
    pub fn threshold(&self, threshold: f32) -> Mask {
        self.map(|v| u8::from(v > threshold))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}
