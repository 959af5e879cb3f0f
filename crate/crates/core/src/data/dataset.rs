//! Manifests, the synthetic dataset, and in-memory sample collections.
//!
//! A manifest is a text file with one `image<TAB>sparse<TAB>gt` record per
//! line. Relative paths resolve against the manifest's directory.
//!
//! A synthesized dataset directory holds:
//!
//! ```text
//! dataset.txt                       generation parameters
//! train.tsv, val.tsv                manifests
//! {split}/{index:06}_image.png      8-bit RGB
//! {split}/{index:06}_sparse.png     16-bit depth, sampled from gt
//! {split}/{index:06}_gt.png         16-bit dense depth
//! {split}/{index:06}_scene.txt      scene spec
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::kitti::{self, write_bytes};
use super::sampling::sample_fixed_count;
use super::scene::{generate_scene, SceneSpec};
use super::{DepthMap, RgbImage, SparseDepthSample};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_seed};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub sparse: PathBuf,
    pub gt: PathBuf,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                origin,
                format!("line {}: expected 3 tab-separated paths, found {}", i + 1, fields.len()),
            ));
        }
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            image: resolve(fields[0]),
            sparse: resolve(fields[1]),
            gt: resolve(fields[2]),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

/// Records are written verbatim; callers pass paths relative to the
/// manifest when the directory should stay relocatable.
pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}", e.image.display(), e.sparse.display(), e.gt.display());
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of sparse points per scene.
    pub points: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_count: 512,
            val_count: 64,
            height: 64,
            width: 128,
            points: (256, 400),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synth", "resolution must be positive"));
        }
        if self.points.0 == 0 || self.points.0 > self.points.1 || self.points.1 > self.height * self.width {
            return Err(Error::invalid(
                "synth",
                format!("point range {:?} invalid for {}x{}", self.points, self.height, self.width),
            ));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }

    pub fn scene_spec(&self, split: Split, index: usize) -> SceneSpec {
        SceneSpec::random(stream_seed(self.seed, &format!("scene/{}/{index}", split.name())))
    }

    /// One scene with the same quantization a disk round trip applies:
    /// 8-bit color and depth on the 1/256 m grid.
    pub fn sample(&self, split: Split, index: usize) -> Result<(SceneSpec, SparseDepthSample)> {
        let spec = self.scene_spec(split, index);
        let (image, depth) = generate_scene(&spec, self.height, self.width)?;
        let image = RgbImage::from_rgb8(image.height, image.width, &image.to_rgb8())?;
        let gt = quantize(&depth);
        let name = format!("sparse/{}/{index}", split.name());
        let n = stream(self.seed, &name).random_range(self.points.0..=self.points.1);
        let sparse = sample_fixed_count(&gt, n, stream_seed(self.seed, &name))?;
        Ok((spec, SparseDepthSample::new(image, sparse, gt)?))
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed={}\ntrain_count={}\nval_count={}\nheight={}\nwidth={}\npoints={},{}\n",
            self.seed, self.train_count, self.val_count, self.height, self.width, self.points.0, self.points.1
        )
    }
}

fn quantize(d: &DepthMap) -> DepthMap {
    let values = d
        .values
        .iter()
        .map(|&v| kitti::meters_to_raw(v).map_or(0.0, kitti::raw_to_meters))
        .collect();
    DepthMap::from_meters(d.height, d.width, values).expect("same size")
}

/// Writes both splits under `out`. Output bytes depend only on `cfg`.
pub fn synthesize(cfg: &SynthConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_bytes(&out.join("dataset.txt"), cfg.to_text().as_bytes())?;
    for split in [Split::Train, Split::Val] {
        let mut entries = Vec::new();
        for i in 0..cfg.count(split) {
            let (spec, s) = cfg.sample(split, i)?;
            let stem = format!("{}/{i:06}", split.name());
            let entry = ManifestEntry {
                image: PathBuf::from(format!("{stem}_image.png")),
                sparse: PathBuf::from(format!("{stem}_sparse.png")),
                gt: PathBuf::from(format!("{stem}_gt.png")),
            };
            kitti::write_rgb_png(&out.join(&entry.image), &s.image)?;
            kitti::write_depth_png(&out.join(&entry.sparse), &s.sparse)?;
            kitti::write_depth_png(&out.join(&entry.gt), &s.gt)?;
            write_bytes(&out.join(format!("{stem}_scene.txt")), spec.to_text().as_bytes())?;
            entries.push(entry);
        }
        write_bytes(
            &out.join(format!("{}.tsv", split.name())),
            manifest_text(&entries).as_bytes(),
        )?;
    }
    log::info!(
        "synthesized {} train and {} val scenes into {}",
        cfg.train_count,
        cfg.val_count,
        out.display()
    );
    Ok(())
}

/// Samples held in memory, in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SparseDepthSample>,
}

impl Dataset {
    pub fn new(samples: Vec<SparseDepthSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dims = (first.height(), first.width());
            if samples.iter().any(|s| (s.height(), s.width()) != dims) {
                return Err(Error::invalid("dataset", "samples differ in size"));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn load(manifest: &Path, crop: Option<(usize, usize)>) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::invalid("dataset", format!("{} lists no samples", manifest.display())));
        }
        let samples = entries
            .iter()
            .map(|e| kitti::load_kitti_sample(&e.image, &e.sparse, &e.gt, crop))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    /// Generates a split without touching disk; identical to loading what
    /// [`synthesize`] writes.
    pub fn synthetic(cfg: &SynthConfig, split: Split) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..cfg.count(split))
            .map(|i| cfg.sample(split, i).map(|(_, s)| s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    pub fn validate(&self, max_depth: f32) -> Result<()> {
        self.samples.iter().try_for_each(|s| s.validate(max_depth))
    }
}

/// Sample order for one epoch; depends on the seed and epoch only.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &format!("data-order/{epoch}")));
    order
}
