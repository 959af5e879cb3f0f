use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where image features enter the depth branch and with which operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionScheme {
    /// Guided modules from image-decoder features into the depth encoder.
    DeGuided,
    /// Guided modules from image-encoder features into the depth encoder; the
    /// image branch has no decoder.
    EeGuided,
    /// Guided modules from image-decoder features into the depth decoder.
    DdGuided,
    /// Element-wise addition at every fusion stage.
    Add,
    /// Concatenation plus 1x1 convolution at every fusion stage.
    Concat,
    /// Guided module at the first (highest-resolution) stage only.
    FirstGuide,
    /// Guided module at the last (lowest-resolution) stage only.
    LastGuide,
}

impl FusionScheme {
    pub const ALL: [FusionScheme; 7] = [
        FusionScheme::DeGuided,
        FusionScheme::EeGuided,
        FusionScheme::DdGuided,
        FusionScheme::Add,
        FusionScheme::Concat,
        FusionScheme::FirstGuide,
        FusionScheme::LastGuide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionScheme::DeGuided => "de_guided",
            FusionScheme::EeGuided => "ee_guided",
            FusionScheme::DdGuided => "dd_guided",
            FusionScheme::Add => "add",
            FusionScheme::Concat => "concat",
            FusionScheme::FirstGuide => "first_guide",
            FusionScheme::LastGuide => "last_guide",
        }
    }

    pub fn has_guide_decoder(self) -> bool {
        self != FusionScheme::EeGuided
    }

    /// Fusion happens in the depth decoder rather than the encoder.
    pub fn fuses_in_decoder(self) -> bool {
        self == FusionScheme::DdGuided
    }

    /// Operator at fusion level `level` (1-based) of `stages`.
    pub fn operator(self, level: usize, stages: usize) -> FusionOp {
        match self {
            FusionScheme::DeGuided | FusionScheme::EeGuided | FusionScheme::DdGuided => FusionOp::Guided,
            FusionScheme::Add => FusionOp::Add,
            FusionScheme::Concat => FusionOp::Concat,
            FusionScheme::FirstGuide if level == 1 => FusionOp::Guided,
            FusionScheme::LastGuide if level == stages => FusionOp::Guided,
            FusionScheme::FirstGuide | FusionScheme::LastGuide => FusionOp::Concat,
        }
    }
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let scheme = match norm.as_str() {
            "de_guided" | "de" | "ours" => FusionScheme::DeGuided,
            "ee_guided" | "ee" => FusionScheme::EeGuided,
            "dd_guided" | "dd" => FusionScheme::DdGuided,
            "add" => FusionScheme::Add,
            "concat" => FusionScheme::Concat,
            "first_guide" | "firstguide" => FusionScheme::FirstGuide,
            "last_guide" | "lastguide" => FusionScheme::LastGuide,
            _ => return Err(Error::invalid("fusion scheme", format!("unknown scheme {s:?}"))),
        };
        Ok(scheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionOp {
    Guided,
    Add,
    Concat,
}

/// Shape and fusion configuration of a completion network.
///
/// Level 0 is full resolution with `channels[0]` features; level `i >= 1`
/// is downsampled by `2^i` and holds `channels[i - 1]` features.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub stage_count: usize,
    pub channels: Vec<usize>,
    pub ksize: usize,
    pub fusion: FusionScheme,
    pub input_height: usize,
    pub input_width: usize,
    pub image_channels: usize,
    /// Constant multiplier on the final convolution, in meters per unit.
    pub output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stage_count: 3,
            channels: vec![32, 64, 128],
            ksize: 3,
            fusion: FusionScheme::DeGuided,
            input_height: 64,
            input_width: 128,
            image_channels: 3,
            output_scale: 10.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("network config", reason));
        if self.stage_count == 0 {
            return bad("stage_count must be at least 1".into());
        }
        if self.channels.len() != self.stage_count {
            return bad(format!(
                "{} channel widths given for {} stages",
                self.channels.len(),
                self.stage_count
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.ksize == 0 || self.ksize.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.ksize));
        }
        if self.image_channels == 0 {
            return bad("image_channels must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!("output_scale {} must be positive", self.output_scale));
        }
        self.check_resolution(self.input_height, self.input_width)
    }

    pub fn divisor(&self) -> usize {
        1 << self.stage_count
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::invalid(
                "network config",
                format!("resolution {h}x{w} is not a positive multiple of 2^{} = {d}", self.stage_count),
            ));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels[level.saturating_sub(1)]
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let channels = self.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("stage_count".into(), self.stage_count.to_string()),
            ("channels".into(), channels),
            ("ksize".into(), self.ksize.to_string()),
            ("fusion".into(), self.fusion.to_string()),
            ("input_height".into(), self.input_height.to_string()),
            ("input_width".into(), self.input_width.to_string()),
            ("image_channels".into(), self.image_channels.to_string()),
            ("output_scale".into(), format!("{:?}", self.output_scale)),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid("network config", format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid("network config", format!("{key} is not an integer")))
        };
        let channels = get("channels")?
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid("network config", "channels must be comma-separated integers"))?;
        let cfg = NetConfig {
            stage_count: num("stage_count")?,
            channels,
            ksize: num("ksize")?,
            fusion: get("fusion")?.parse()?,
            input_height: num("input_height")?,
            input_width: num("input_width")?,
            image_channels: num("image_channels")?,
            output_scale: get("output_scale")?
                .parse()
                .map_err(|_| Error::invalid("network config", "output_scale is not a number"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
