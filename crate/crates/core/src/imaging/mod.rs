//! Raster containers and the correlation kernels the rest of the pipeline
//! is built on.
//!
//! Coordinates are `(x, y)` = `(column, row)` with the origin at the top-left
//! pixel. All rasters are stored row-major.

mod correlate;
mod fft;
mod io;
mod ncc;
mod nms;

pub use correlate::{auto_correlation, cross_correlate_binary, cross_correlate_sparse};
pub use io::{decode_image, encode_png, load_image, save_pgm, save_png};
pub use ncc::{ncc_map, ncc_map_direct, NccEngine};
pub use nms::non_max_suppress;

pub(crate) use fft::{fast_len, Fft2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sub-pixel location in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::InvalidImage(format!("{}x{} image with {} samples", width, height, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    /// Build an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Robust estimate of additive noise from the median absolute horizontal
    /// difference. Edges are a minority of pixels and barely move the median.
    pub fn noise_sigma(&self) -> f64 {
        let mut d: Vec<f64> =
            self.data.chunks(self.width).flat_map(|row| row.windows(2).map(|p| (p[1] - p[0]).abs())).collect();
        if d.is_empty() {
            return 0.0;
        }
        let mid = d.len() / 2;
        let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
        *m / (0.6745 * std::f64::consts::SQRT_2)
    }

    /// Cut a `side x side` patch centred at `(cx, cy)`.
    pub fn patch(&self, cx: usize, cy: usize, side: usize) -> Result<Patch> {
        let h = side / 2;
        if cx < h || cy < h || cx + h >= self.width || cy + h >= self.height {
            return Err(Error::InvalidImage(format!("patch at ({cx}, {cy}) of side {side} leaves the image")));
        }
        let mut data = Vec::with_capacity(side * side);
        for y in cy - h..=cy + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + cx - h..=row + cx + h]);
        }
        Ok(Patch::new(side, data))
    }

    /// Bilinear resampling to `new_width x new_height`, pixel-centre aligned.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> GrayImage {
        if new_width == self.width && new_height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        GrayImage::from_fn(new_width, new_height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
            let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
            top * (1.0 - ty) + bottom * ty
        })
    }

    /// Copy of the rectangle `[x0, x0 + w) x [y0, y0 + h)`; pixels outside the
    /// image read as 0.
    pub fn crop_padded(&self, x0: i64, y0: i64, w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let sx = x0 + x as i64;
            let sy = y0 + y as i64;
            if sx < 0 || sy < 0 || sx >= self.width as i64 || sy >= self.height as i64 {
                0.0
            } else {
                self.get(sx as usize, sy as usize)
            }
        })
    }

    /// Quantized 8-bit copy of the intensities.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// A square window of intensities with cached first and second moments.
///
/// `deviation` is the L2 norm of the mean-subtracted samples, so the
/// normalized correlation of a patch with itself is exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    side: usize,
    data: Vec<f64>,
    mean: f64,
    deviation: f64,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f64>) -> Self {
        assert_eq!(side * side, data.len(), "patch data must be side^2 samples");
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let deviation = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
        Patch { side, data, mean, deviation }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn deviation(&self) -> f64 {
        self.deviation
    }

    /// Per-sample variance, `deviation^2 / side^2`.
    pub fn variance(&self) -> f64 {
        self.deviation * self.deviation / self.data.len() as f64
    }
}

/// Dense per-pixel scores. Used both for normalized correlation maps
/// (undefined border band set to -1) and for filtered responses.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len());
        CorrelationMap { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        CorrelationMap { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Binary occurrence indicator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMap { width, height, data: vec![false; width * height] }
    }

    pub fn from_points(width: usize, height: usize, points: &[(usize, usize)]) -> Self {
        let mut m = BinaryMap::new(width, height);
        for &(x, y) in points {
            m.set(x, y, true);
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (i % self.width, i / self.width)).collect()
    }

    /// Translate by `(dx, dy)`, dropping pixels that leave the frame.
    pub fn translated(&self, dx: i64, dy: i64) -> BinaryMap {
        let mut out = BinaryMap::new(self.width, self.height);
        for (x, y) in self.points() {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                out.set(nx as usize, ny as usize, true);
            }
        }
        out
    }
}

/// A map indexed by integer lag `(dx, dy)` with `|dx| <= half_width` and
/// `|dy| <= half_height`; zero lag sits at the centre.
#[derive(Debug, Clone, PartialEq)]
pub struct LagMap {
    half_width: usize,
    half_height: usize,
    data: Vec<f64>,
}

impl LagMap {
    pub fn zeros(half_width: usize, half_height: usize) -> Self {
        LagMap { half_width, half_height, data: vec![0.0; (2 * half_width + 1) * (2 * half_height + 1)] }
    }

    pub fn from_fn(half_width: usize, half_height: usize, mut f: impl FnMut(i64, i64) -> f64) -> Self {
        let mut m = LagMap::zeros(half_width, half_height);
        let (hw, hh) = (half_width as i64, half_height as i64);
        for dy in -hh..=hh {
            for dx in -hw..=hw {
                let i = m.index(dx, dy);
                m.data[i] = f(dx, dy);
            }
        }
        m
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn half_height(&self) -> usize {
        self.half_height
    }

    pub fn side_width(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn side_height(&self) -> usize {
        2 * self.half_height + 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn contains(&self, dx: i64, dy: i64) -> bool {
        dx.unsigned_abs() as usize <= self.half_width && dy.unsigned_abs() as usize <= self.half_height
    }

    #[inline]
    fn index(&self, dx: i64, dy: i64) -> usize {
        let col = (dx + self.half_width as i64) as usize;
        let row = (dy + self.half_height as i64) as usize;
        row * self.side_width() + col
    }

    /// Value at lag `(dx, dy)`; zero outside the stored range.
    #[inline]
    pub fn get(&self, dx: i64, dy: i64) -> f64 {
        if self.contains(dx, dy) {
            self.data[self.index(dx, dy)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn add(&mut self, dx: i64, dy: i64, v: f64) {
        let i = self.index(dx, dy);
        self.data[i] += v;
    }

    #[inline]
    pub fn set(&mut self, dx: i64, dy: i64, v: f64) {
        let i = self.index(dx, dy);
        self.data[i] = v;
    }

    /// Iterate `(dx, dy, value)` in row-major lag order.
    pub fn iter(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        let w = self.side_width();
        let (hw, hh) = (self.half_width as i64, self.half_height as i64);
        self.data.iter().enumerate().map(move |(i, v)| ((i % w) as i64 - hw, (i / w) as i64 - hh, *v))
    }

    /// Restrict to a smaller centred window.
    pub fn cropped(&self, half_width: usize, half_height: usize) -> LagMap {
        let hw = half_width.min(self.half_width);
        let hh = half_height.min(self.half_height);
        LagMap::from_fn(hw, hh, |dx, dy| self.get(dx, dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noise_estimate_ignores_sparse_edges() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.03).unwrap();
        let img = GrayImage::from_fn(200, 200, |x, _| if x % 50 < 25 { 0.3 } else { 0.7 } + n.sample(&mut rng));
        assert!((img.noise_sigma() - 0.03).abs() < 0.003, "{}", img.noise_sigma());
        assert_eq!(GrayImage::filled(10, 10, 0.5).noise_sigma(), 0.0);
    }
}
