//! Indoor preprocessing: half-resolution downsample, center crop, zero pad.
//! Input depth is expected to be already in-painted.

use super::{DepthMap, RgbImage, SparseDepthSample};
use crate::error::{Error, Result};

/// Sizes are `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NyuPipeline {
    pub downsample: bool,
    pub crop: (usize, usize),
    pub pad: (usize, usize),
}

impl Default for NyuPipeline {
    fn default() -> Self {
        NyuPipeline {
            downsample: true,
            crop: (228, 304),
            pad: (256, 320),
        }
    }
}

/// 2x2 box average; odd trailing rows and columns are dropped.
pub fn half_image(img: &RgbImage) -> RgbImage {
    let (h, w) = (img.height / 2, img.width / 2);
    let mut out = RgbImage::new(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let s = img.get(c, 2 * y, 2 * x)
                    + img.get(c, 2 * y, 2 * x + 1)
                    + img.get(c, 2 * y + 1, 2 * x)
                    + img.get(c, 2 * y + 1, 2 * x + 1);
                out.set(c, y, x, s / 4.0);
            }
        }
    }
    out
}

/// Nearest (top-left) sample, so no depth is invented across edges.
pub fn half_depth(d: &DepthMap) -> DepthMap {
    let (h, w) = (d.height / 2, d.width / 2);
    let mut out = DepthMap::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let src = 2 * y * d.width + 2 * x;
            out.values[y * w + x] = d.values[src];
            out.valid[y * w + x] = d.valid[src];
        }
    }
    out
}

fn center_origin(h: usize, w: usize, crop: (usize, usize)) -> Result<(usize, usize)> {
    if crop.0 > h || crop.1 > w {
        return Err(Error::invalid(
            "center crop",
            format!("{}x{} crop exceeds {h}x{w}", crop.0, crop.1),
        ));
    }
    Ok(((h - crop.0) / 2, (w - crop.1) / 2))
}

fn pad_origin(h: usize, w: usize, pad: (usize, usize)) -> Result<(usize, usize)> {
    if pad.0 < h || pad.1 < w {
        return Err(Error::invalid("pad", format!("{}x{} pad is smaller than {h}x{w}", pad.0, pad.1)));
    }
    Ok(((pad.0 - h) / 2, (pad.1 - w) / 2))
}

/// Centers `d` in a larger invalid canvas.
pub fn pad_depth(d: &DepthMap, pad: (usize, usize)) -> Result<DepthMap> {
    let (top, left) = pad_origin(d.height, d.width, pad)?;
    let mut out = DepthMap::empty(pad.0, pad.1);
    for y in 0..d.height {
        for x in 0..d.width {
            let dst = (top + y) * pad.1 + left + x;
            out.values[dst] = d.values[y * d.width + x];
            out.valid[dst] = d.valid[y * d.width + x];
        }
    }
    Ok(out)
}

/// Centers `img` in a larger black canvas.
pub fn pad_image(img: &RgbImage, pad: (usize, usize)) -> Result<RgbImage> {
    let (top, left) = pad_origin(img.height, img.width, pad)?;
    let mut out = RgbImage::new(pad.0, pad.1);
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, top + y, left + x, img.get(c, y, x));
            }
        }
    }
    Ok(out)
}

impl NyuPipeline {
    pub fn apply(&self, sample: &SparseDepthSample) -> Result<SparseDepthSample> {
        let (mut image, mut sparse, mut gt) = (sample.image.clone(), sample.sparse.clone(), sample.gt.clone());
        if self.downsample {
            image = half_image(&image);
            sparse = half_depth(&sparse);
            gt = half_depth(&gt);
        }
        let (top, left) = center_origin(image.height, image.width, self.crop)?;
        let (ch, cw) = self.crop;
        image = pad_image(&image.crop(top, left, ch, cw)?, self.pad)?;
        sparse = pad_depth(&sparse.crop(top, left, ch, cw)?, self.pad)?;
        gt = pad_depth(&gt.crop(top, left, ch, cw)?, self.pad)?;
        SparseDepthSample::new(image, sparse, gt)
    }
}
