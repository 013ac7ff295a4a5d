use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-3 array (height x width x channels) of reals, stored
/// row-major and channel-minor: element (y, x, ch) lives at
/// `(y * w + x) * c + ch`. The universal carrier for gain maps, masks,
/// environment rasters and network feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: T) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    /// Build from a flat row-major channel-minor buffer. Rejects length
    /// mismatches and non-finite entries.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(
                "Grid::from_vec",
                format!("{}x{}x{} = {} elements", h, w, c, h * w * c),
                data.len(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Grid::from_vec".into()));
        }
        Ok(Grid { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Grid { h, w, c, data }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Payload bytes, as accounted by the memory ledger.
    pub fn byte_size(&self) -> usize {
        self.data.len() * T::BYTES
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
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

    pub fn map(&self, f: impl Fn(T) -> T) -> Grid<T> {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match.
    pub fn zip_map(&self, other: &Grid<T>, f: impl Fn(T, T) -> T) -> Result<Grid<T>> {
        self.check_same_shape(other, "Grid::zip_map")?;
        Ok(Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Grid<T>) -> Result<Grid<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid<T>) -> Result<Grid<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scaled(&self, s: T) -> Grid<T> {
        self.map(|v| v * s)
    }

    /// self += scale * other
    pub fn add_scaled_assign(&mut self, other: &Grid<T>, scale: T) -> Result<()> {
        self.check_same_shape(other, "Grid::add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Grid<T>, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    /// Inner product accumulated in f64 (used by adjoint and gradient tests).
    pub fn dot_f64(&self, other: &Grid<T>) -> Result<f64> {
        self.check_same_shape(other, "Grid::dot_f64")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    /// max |a - b| over all elements.
    pub fn linf_diff(&self, other: &Grid<T>) -> Result<f64> {
        self.check_same_shape(other, "Grid::linf_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.data {
            let x = v.as_f64();
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Extract one channel as an h x w x 1 grid.
    pub fn channel(&self, ch: usize) -> Result<Grid<T>> {
        if ch >= self.c {
            return Err(Error::InvalidArg(format!(
                "channel {} out of range for {}",
                ch,
                self.shape_str()
            )));
        }
        let mut out = Grid::zeros(self.h, self.w, 1);
        for p in 0..self.h * self.w {
            out.data[p] = self.data[p * self.c + ch];
        }
        Ok(out)
    }

    /// Fill with values from a per-pixel slice iterator, row-major.
    pub fn fill_from(&mut self, src: &[T]) -> Result<()> {
        if src.len() != self.data.len() {
            return Err(Error::shape("Grid::fill_from", self.data.len(), src.len()));
        }
        self.data.copy_from_slice(src);
        Ok(())
    }
}
