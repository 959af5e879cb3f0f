//! 16-bit depth PNGs (`meters = raw / 256`, raw 0 = invalid) and 8-bit
//! guidance images.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::{DepthMap, RgbImage, SparseDepthSample};
use crate::error::{Error, Result};

/// Raw units per meter.
pub const DEPTH_SCALE: f32 = 256.0;

/// Standard crop height and width.
pub const CROP: (usize, usize) = (256, 1216);

pub fn raw_to_meters(raw: u16) -> f32 {
    raw as f32 / DEPTH_SCALE
}

/// Nearest raw code of a depth; `None` when it does not fit in 16 bits.
pub fn meters_to_raw(m: f32) -> Option<u16> {
    let r = (m * DEPTH_SCALE).round();
    (0.0..=65535.0).contains(&r).then_some(r as u16)
}

/// Decodes a single-channel 16-bit PNG into raw codes.
pub fn decode_raw_png(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<u16>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::format(origin, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(
            origin,
            format!(
                "depth PNG must be 16-bit grayscale, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(origin, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(origin, e.to_string()))?;
    let raw = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect::<Vec<_>>();
    if raw.len() != w * h {
        return Err(Error::format(origin, "unexpected row layout"));
    }
    Ok((h, w, raw))
}

pub fn decode_depth_png(bytes: &[u8], origin: &str) -> Result<DepthMap> {
    let (h, w, raw) = decode_raw_png(bytes, origin)?;
    let mut map = DepthMap::empty(h, w);
    for (i, &r) in raw.iter().enumerate() {
        if r != 0 {
            map.values[i] = raw_to_meters(r);
            map.valid[i] = true;
        }
    }
    Ok(map)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth_png(&bytes, &path.display().to_string())
}

pub fn encode_raw_png(h: usize, w: usize, raw: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::invalid("encode png", e.to_string()))?;
        let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::invalid("encode png", e.to_string()))?;
        writer.finish().map_err(|e| Error::invalid("encode png", e.to_string()))?;
    }
    Ok(out)
}

/// Encodes valid pixels as `round(m * 256)`, invalid ones as 0.
pub fn encode_depth_png(map: &DepthMap) -> Result<Vec<u8>> {
    let raw = map
        .values
        .iter()
        .zip(&map.valid)
        .map(|(&v, &ok)| {
            if !ok {
                return Ok(0);
            }
            match meters_to_raw(v) {
                Some(0) | None => Err(Error::invalid("encode depth", format!("{v} m is not representable"))),
                Some(r) => Ok(r),
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    encode_raw_png(map.height, map.width, &raw)
}

pub fn write_depth_png(path: &Path, map: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth_png(map)?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PNG or PPM as RGB; grayscale is replicated.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path.display(), other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    RgbImage::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid("encode png", e.to_string()))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::invalid("encode png", e.to_string()))?;
        writer.finish().map_err(|e| Error::invalid("encode png", e.to_string()))?;
    }
    Ok(out)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_rgb_png(img)?)
}

/// Writes already-quantized 8-bit RGB rows.
pub fn write_rgb8_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid("encode png", e.to_string()))?;
        writer.write_image_data(rgb).map_err(|e| Error::invalid("encode png", e.to_string()))?;
        writer.finish().map_err(|e| Error::invalid("encode png", e.to_string()))?;
    }
    write_bytes(path, &out)
}

/// Top-left corner of the bottom-anchored, horizontally centered crop.
pub fn bottom_crop_origin(height: usize, width: usize, crop: (usize, usize)) -> Result<(usize, usize)> {
    if crop.0 > height || crop.1 > width {
        return Err(Error::invalid(
            "crop",
            format!("{}x{} crop exceeds {height}x{width}", crop.0, crop.1),
        ));
    }
    Ok((height - crop.0, (width - crop.1) / 2))
}

/// Loads guidance image, sparse input and ground truth; `crop` applies the
/// bottom-anchored crop of the given size.
pub fn load_kitti_sample(
    image_path: &Path,
    sparse_path: &Path,
    gt_path: &Path,
    crop: Option<(usize, usize)>,
) -> Result<SparseDepthSample> {
    let image = read_rgb(image_path)?;
    let sparse = read_depth_png(sparse_path)?;
    let gt = read_depth_png(gt_path)?;
    let sample = SparseDepthSample::new(image, sparse, gt)?;
    match crop {
        None => Ok(sample),
        Some(c) => {
            let (top, left) = bottom_crop_origin(sample.height(), sample.width(), c)?;
            SparseDepthSample::new(
                sample.image.crop(top, left, c.0, c.1)?,
                sample.sparse.crop(top, left, c.0, c.1)?,
                sample.gt.crop(top, left, c.0, c.1)?,
            )
        }
    }
}
