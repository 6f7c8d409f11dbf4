use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Class-id raster.
pub type LabelMap = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
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

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Writes `v` at signed coordinates, ignoring points outside the grid.
    #[inline]
    pub fn put(&mut self, y: i64, x: i64, v: T) {
        if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
            self.data[y as usize * self.width + x as usize] = v;
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Nearest-neighbour resampling (pixel-centre aligned); used for label maps.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Grid::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }
}
