//! Samples, file formats, sparse-input synthesis and synthetic scenes.

pub mod dataset;
pub mod kitti;
pub mod nyu;
pub mod sampling;
pub mod scene;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default depth ceiling for outdoor data, meters.
pub const MAX_DEPTH_OUTDOOR: f32 = 100.0;
/// Default depth ceiling for indoor data, meters.
pub const MAX_DEPTH_INDOOR: f32 = 10.0;

/// Per-pixel depth in meters with an explicit validity mask. Invalid entries
/// hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Marks positive finite values valid and zeroes the rest.
    pub fn from_meters(height: usize, width: usize, mut values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(
                "depth map",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        let valid: Vec<bool> = values.iter().map(|&v| v.is_finite() && v > 0.0).collect();
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            values: vec![0.0; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Flat indices of valid pixels, ascending.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    /// Copy keeping only the flat indices in `keep`.
    pub fn restricted_to(&self, keep: &[usize]) -> Self {
        let mut out = DepthMap::empty(self.height, self.width);
        for &i in keep {
            if self.valid[i] {
                out.values[i] = self.values[i];
                out.valid[i] = true;
            }
        }
        out
    }

    /// Rows `top..top+h`, columns `left..left+w`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid(
                "crop",
                format!("{h}x{w} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut out = DepthMap::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let src = (top + y) * self.width + left + x;
                out.values[y * w + x] = self.values[src];
                out.valid[y * w + x] = self.valid[src];
            }
        }
        Ok(out)
    }

    pub fn min_max_valid(&self) -> Option<(f32, f32)> {
        let mut it = self.values.iter().zip(&self.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec([1, 1, self.height, self.width], data).expect("length matches")
    }
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `[3][height][width]`.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid(
                "crop",
                format!("{h}x{w} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut out = RgbImage::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::invalid("rgb image", format!("{} bytes for {height}x{width}", bytes.len())));
        }
        let mut out = RgbImage::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    out.set(c, y, x, bytes[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("length matches")
    }
}

/// Guidance image, sparse input and ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthSample {
    pub image: RgbImage,
    pub sparse: DepthMap,
    pub gt: DepthMap,
}

impl SparseDepthSample {
    pub fn new(image: RgbImage, sparse: DepthMap, gt: DepthMap) -> Result<Self> {
        let dims = (image.height, image.width);
        if (sparse.height, sparse.width) != dims || (gt.height, gt.width) != dims {
            return Err(Error::invalid(
                "sample",
                format!(
                    "image {}x{}, sparse {}x{}, ground truth {}x{} differ",
                    image.height, image.width, sparse.height, sparse.width, gt.height, gt.width
                ),
            ));
        }
        Ok(SparseDepthSample { image, sparse, gt })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Checks the value invariants against `max_depth`.
    pub fn validate(&self, max_depth: f32) -> Result<()> {
        for (name, map) in [("sparse", &self.sparse), ("ground truth", &self.gt)] {
            for (&v, &ok) in map.values.iter().zip(&map.valid) {
                if ok && !(v.is_finite() && v > 0.0 && v < max_depth) {
                    return Err(Error::invalid("sample", format!("{name} depth {v} outside (0, {max_depth})")));
                }
                if !ok && v != 0.0 {
                    return Err(Error::invalid("sample", format!("{name} invalid pixel holds {v}")));
                }
            }
        }
        if self.gt.valid_count() == 0 {
            return Err(Error::invalid("sample", "ground truth has no valid pixel"));
        }
        Ok(())
    }
}

/// Stacked network inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub sparse: Tensor<T>,
    pub gt: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&SparseDepthSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("batch", "no samples"))?;
        let (h, w) = (first.height(), first.width());
        if samples.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(Error::invalid("batch", "samples differ in size"));
        }
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.to_tensor()).collect();
        let sparse: Vec<Tensor<T>> = samples.iter().map(|s| s.sparse.to_tensor()).collect();
        let gt: Vec<Tensor<T>> = samples.iter().map(|s| s.gt.to_tensor()).collect();
        Ok(Batch {
            image: Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            sparse: Tensor::stack(&sparse.iter().collect::<Vec<_>>())?,
            gt: Tensor::stack(&gt.iter().collect::<Vec<_>>())?,
            mask: samples.iter().flat_map(|s| s.gt.valid.iter().copied()).collect(),
        })
    }
}
