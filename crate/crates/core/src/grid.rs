use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels × height × width` field of finite reals, row-major per channel.
///
/// Grids carry noise samples, data samples, intermediate flow states and
/// velocity fields alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

impl Grid {
    /// Build a grid, checking the length and finiteness invariants.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "grid extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                t: f64::NAN,
                message: format!("grid value at index {i} is not finite"),
            });
        }
        Ok(Self { channels, height, width, data })
    }

    /// Internal constructor for data produced by arithmetic on valid grids.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2);
        Self { channels: shape.0, height: shape.1, width: shape.2, data }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self::from_parts(shape, vec![value; shape.0 * shape.1 * shape.2])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Grid whose value at `(c, y, x)` is `f(c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let (c, h, w) = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self::from_parts(shape, data)
    }

    /// Unit white noise.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of stored values, `channels · height · width`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid::from_parts(self.shape(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two grids of identical shape.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Grid::from_parts(
            self.shape(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Grid {
        self.map(|v| v * k)
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, k: f64, other: &Grid) -> Result<()> {
        self.ensure_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Mean square per value.
    pub fn mean_sq(&self) -> f64 {
        self.sum_sq() / self.len() as f64
    }

    /// Root mean square per value.
    pub fn rms(&self) -> f64 {
        self.mean_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Root mean square of `self − other`.
    pub fn rms_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other, "rms_diff")?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s / self.len() as f64).sqrt())
    }

    /// Pearson correlation between the flattened values of two grids.
    pub fn correlation(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other, "correlation")?;
        let (ma, mb) = (self.mean(), other.mean());
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (da, db) = (a - ma, b - mb);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        Ok(sab / (saa * sbb).sqrt())
    }
}
