use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type LabelMap = Grid<u8>;
pub type Mask = Grid<u8>;
pub type RgbImage = Grid<[f32; 3]>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "grid {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev().cloned());
        }
        Self { height: self.height, width: self.width, data }
    }

    /// Nearest-neighbour resize with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let xs: Vec<usize> = (0..width)
            .map(|x| (((x as f64 + 0.5) * sx) as usize).min(self.width - 1))
            .collect();
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let src = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let row = &self.data[src * self.width..(src + 1) * self.width];
            data.extend(xs.iter().map(|&x| row[x].clone()));
        }
        Self { height, width, data }
    }

    /// Copies the window starting at (top, left) into a `height`x`width`
    /// grid; cells outside the source take `fill`.
    pub fn crop_or_pad(&self, top: usize, left: usize, height: usize, width: usize, fill: T) -> Self {
        let mut out = Self::filled(height, width, fill);
        for y in 0..height {
            let sy = top + y;
            if sy >= self.height {
                break;
            }
            for x in 0..width {
                let sx = left + x;
                if sx >= self.width {
                    break;
                }
                out.data[y * width + x] = self.data[sy * self.width + sx].clone();
            }
        }
        out
    }
}

impl RgbImage {
    /// Bilinear resize, half-pixel centres with edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, (src - i0 as f64) as f32)
                })
                .collect()
        };
        let ty = taps(height, self.height);
        let tx = taps(width, self.width);
        let mut data = Vec::with_capacity(height * width);
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let a = self.get(y0, x0);
                let b = self.get(y0, x1);
                let c = self.get(y1, x0);
                let d = self.get(y1, x1);
                let mut px = [0f32; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - wx) + b[k] * wx;
                    let bot = c[k] * (1.0 - wx) + d[k] * wx;
                    px[k] = top * (1.0 - wy) + bot * wy;
                }
                data.push(px);
            }
        }
        Self { height, width, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_identity_at_same_size() {
        let g = Grid::from_vec(2, 3, vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(g.resize_nearest(2, 3), g);
        assert_eq!(g.resize_nearest(4, 6).resize_nearest(2, 3), g);
    }

    #[test]
    fn flip_is_involution() {
        let g = Grid::from_vec(2, 3, vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(g.flip_horizontal().data, vec![3, 2, 1, 6, 5, 4]);
        assert_eq!(g.flip_horizontal().flip_horizontal(), g);
    }

    #[test]
    fn crop_pads_with_fill() {
        let g = Grid::from_vec(2, 2, vec![1u8, 2, 3, 4]).unwrap();
        let c = g.crop_or_pad(1, 0, 2, 3, 9);
        assert_eq!(c.data, vec![3, 4, 9, 9, 9, 9]);
    }

    #[test]
    fn bilinear_constant_image_stays_constant() {
        let img = RgbImage::filled(5, 7, [0.25, 0.5, 0.75]);
        let r = img.resize_bilinear(11, 3);
        assert!(r.data.iter().all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
    }
}
