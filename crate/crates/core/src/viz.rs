//! Kernel and depth visualization.
//!
//! A 3x3 kernel is reduced to a vector `(<w, Px>, <w, Py>)` with the Prewitt
//! filters `Px[i][j] = j - 1` and `Py[i][j] = i - 1`, row `i` counted
//! downward. Vectors are color coded on an HSV wheel: hue is the angle from
//! `+x` toward `+y` (clockwise on screen, 0 deg red, 120 deg green, 240 deg
//! blue), saturation is the magnitude over the chosen percentile magnitude
//! (clipped at 1), value is 1. Zero vectors are white.
//!
//! Depth uses a jet ramp from blue (near) through green to red (far) over
//! the valid range or a supplied range; invalid pixels are black.

use std::path::Path;

use crate::data::kitti::write_rgb8_png;
use crate::data::DepthMap;
use crate::error::{Error, Result};
use crate::guided::ChannelwiseKernels;
use crate::tensor::Real;

pub const PREWITT_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];
pub const PREWITT_Y: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub height: usize,
    pub width: usize,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl VectorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        VectorField {
            height,
            width,
            vx: vec![0.0; height * width],
            vy: vec![0.0; height * width],
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vx.iter().zip(&self.vy).map(|(x, y)| x.hypot(*y)).collect()
    }
}

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl ColorImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_rgb8_png(path, self.height, self.width, &self.rgb)
    }
}

/// Prewitt responses of one row-major 3x3 kernel.
pub fn prewitt_vector(kernel: &[f64]) -> Result<(f64, f64)> {
    if kernel.len() != 9 {
        return Err(Error::invalid(
            "prewitt reduction",
            format!("kernel has {} entries; the reduction needs 3x3", kernel.len()),
        ));
    }
    let (mut vx, mut vy) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            vx += kernel[i * 3 + j] * PREWITT_X[i][j];
            vy += kernel[i * 3 + j] * PREWITT_Y[i][j];
        }
    }
    Ok((vx, vy))
}

/// Per-pixel Prewitt vectors of channel `channel` of batch item `batch`.
pub fn kernels_to_field<T: Real>(kernels: &ChannelwiseKernels<T>, batch: usize, channel: usize) -> Result<VectorField> {
    if kernels.ksize() != 3 {
        return Err(Error::invalid(
            "kernels_to_field",
            format!("kernel size {} is not 3", kernels.ksize()),
        ));
    }
    if batch >= kernels.batch() || channel >= kernels.channels() {
        return Err(Error::invalid(
            "kernels_to_field",
            format!(
                "item {batch} channel {channel} outside {} items x {} channels",
                kernels.batch(),
                kernels.channels()
            ),
        ));
    }
    let (h, w) = (kernels.height(), kernels.width());
    let mut field = VectorField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let k: Vec<f64> = kernels.kernel_at(batch, channel, y, x).iter().map(|v| v.to_f64_lossy()).collect();
            let (vx, vy) = prewitt_vector(&k)?;
            field.vx[y * w + x] = vx;
            field.vy[y * w + x] = vy;
        }
    }
    Ok(field)
}

/// Nearest-rank percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Hue in degrees `[0, 360)` and saturation in `[0, 1]` of one vector.
pub fn vector_hs(vx: f64, vy: f64, norm: f64) -> (f64, f64) {
    let mag = vx.hypot(vy);
    if mag == 0.0 || norm <= 0.0 {
        return (0.0, 0.0);
    }
    let hue = vy.atan2(vx).to_degrees().rem_euclid(360.0);
    (hue, (mag / norm).min(1.0))
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; 0 for grays.
pub fn rgb_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    60.0 * h
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Flow-style coloring normalized by the `pct` percentile magnitude.
pub fn field_to_color(field: &VectorField, pct: f64) -> ColorImage {
    let norm = percentile(&field.magnitudes(), pct);
    let mut rgb = Vec::with_capacity(3 * field.vx.len());
    for (&vx, &vy) in field.vx.iter().zip(&field.vy) {
        let (h, s) = vector_hs(vx, vy, norm);
        rgb.extend(hsv_to_rgb(h, s, 1.0).map(to_u8));
    }
    ColorImage {
        height: field.height,
        width: field.width,
        rgb,
    }
}

/// Jet ramp at `t` in `[0, 1]`.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let band = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// `range` defaults to the valid min and max.
pub fn depth_to_color(depth: &DepthMap, range: Option<(f32, f32)>) -> ColorImage {
    let (lo, hi) = range.or_else(|| depth.min_max_valid()).unwrap_or((0.0, 1.0));
    let span = (hi - lo) as f64;
    let mut rgb = Vec::with_capacity(3 * depth.len());
    for (&v, &ok) in depth.values.iter().zip(&depth.valid) {
        if ok {
            let t = if span > 0.0 { (v - lo) as f64 / span } else { 0.5 };
            rgb.extend(jet(t).map(to_u8));
        } else {
            rgb.extend([0, 0, 0]);
        }
    }
    ColorImage {
        height: depth.height,
        width: depth.width,
        rgb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_roundtrip() {
        for h in [0.0, 45.0, 130.0, 200.0, 300.0] {
            assert!((rgb_hue(hsv_to_rgb(h, 0.7, 1.0)) - h).abs() < 1e-9);
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[3.0], 50.0), 3.0);
    }
}
