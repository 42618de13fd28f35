//! Dense row-major image grids.

use crate::error::{Error, Result};

/// Linear RGB in `[0, 1]`.
pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

pub type RgbImage = Grid<Rgb>;
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "grid of {width}x{height} needs {} values, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> T) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> &T {
        &self.data[self.index(u, v)]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: T) {
        let i = self.index(u, v);
        self.data[i] = value;
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_dims(&self, width: u32, height: u32, what: &str) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// 8-bit value of a linear `[0, 1]` channel.
#[inline]
pub fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(c: u8) -> f32 {
    c as f32 / 255.0
}

/// Rounds every channel to the nearest 8-bit level.
pub fn quantize(img: &RgbImage) -> RgbImage {
    img.map(|p| p.map(|c| from_u8(to_u8(c))))
}
