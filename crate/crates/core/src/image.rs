//! Minimal row-major raster container shared by every stage of the pipeline.
//!
//! Pixel coordinates are `(u, v)` with `u` the column and `v` the row; the
//! origin is the center of the top-left pixel.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    /// Wraps an existing row-major buffer. Panics if the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
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
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    /// Access with coordinates clamped to the image (replicated borders).
    #[inline]
    pub fn get_clamped(&self, u: isize, v: isize) -> T {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.get(u, v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, v: usize) -> &[T] {
        &self.data[v * self.width..(v + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Copy + Into<f64>> Image<T> {
    /// Bilinear interpolation at a subpixel position. Returns `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let max_u = (self.width - 1) as f64;
        let max_v = (self.height - 1) as f64;
        if u > max_u || v > max_v {
            return None;
        }
        let u0 = u.floor() as usize;
        let v0 = v.floor() as usize;
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let a: f64 = self.get(u0, v0).into();
        let b: f64 = self.get(u1, v0).into();
        let c: f64 = self.get(u0, v1).into();
        let d: f64 = self.get(u1, v1).into();
        let top = a + (b - a) * fu;
        let bottom = c + (d - c) * fu;
        Some(top + (bottom - top) * fv)
    }

    pub fn to_f32(&self) -> Image<f32> {
        self.map(|x| x.into() as f32)
    }

    pub fn to_f64(&self) -> Image<f64> {
        self.map(|x| x.into())
    }
}

impl Image<f32> {
    /// 2x2 box downsampling; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image<f32> {
        self.downsample_area(2)
    }

    /// Area (box) downsampling by an integer factor.
    pub fn downsample_area(&self, factor: usize) -> Image<f32> {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let norm = 1.0 / (factor * factor) as f32;
        Image::from_fn(w, h, |u, v| {
            let mut acc = 0.0f32;
            for dy in 0..factor {
                let row = self.row(v * factor + dy);
                for dx in 0..factor {
                    acc += row[u * factor + dx];
                }
            }
            acc * norm
        })
    }
}

/// Converts an 8-bit image to floating point intensities in `[0, 1]`.
pub fn gray_to_unit(img: &Image<u8>) -> Image<f32> {
    img.map(|x| x as f32 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_integer_and_midpoint() {
        let img = Image::from_vec(2, 2, vec![1.0f32, 3.0, 5.0, 7.0]);
        assert_eq!(img.sample_bilinear(0.0, 0.0), Some(1.0));
        assert_eq!(img.sample_bilinear(1.0, 1.0), Some(7.0));
        assert_eq!(img.sample_bilinear(0.5, 0.0), Some(2.0));
        assert_eq!(img.sample_bilinear(0.5, 0.5), Some(4.0));
        assert_eq!(img.sample_bilinear(1.01, 0.0), None);
        assert_eq!(img.sample_bilinear(-0.01, 0.0), None);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, |u, _| u as f32);
        let half = img.downsample2();
        assert_eq!(half.dims(), (2, 1));
        assert_eq!(half.as_slice(), &[0.5, 2.5]);
    }
}
