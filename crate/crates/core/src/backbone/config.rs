use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{conv_output_dim, ConvKind};

/// One group of inverted residual bottlenecks (`t, c, n, s` in MobileNetV2 terms).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub expansion: usize,
    pub out_channels: usize,
    /// Stride of the first block in the group; the rest use 1.
    pub stride: usize,
    pub repeat: usize,
}

impl BottleneckConfig {
    pub const fn new(expansion: usize, out_channels: usize, stride: usize, repeat: usize) -> Self {
        BottleneckConfig { expansion, out_channels, stride, repeat }
    }
}

/// Which activation `forward_features` returns for retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    /// Pooled activations, before feature norm.
    PreFn,
    /// After feature norm (falls back to the pooled activations when it is disabled).
    #[default]
    PostFn,
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureTap::PreFn => "pre-fn",
            FeatureTap::PostFn => "post-fn",
        })
    }
}

impl FromStr for FeatureTap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-fn" | "pre" => Ok(FeatureTap::PreFn),
            "post-fn" | "post" => Ok(FeatureTap::PostFn),
            _ => Err(Error::Parse(format!("unknown feature tap {s:?} (pre-fn | post-fn)"))),
        }
    }
}

/// A contiguous range of convolution groups (1-based, `Conv1` is the stem) that
/// receive instance norm, written `none`, `3`, or `1-6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InRange {
    pub first: usize,
    pub last: usize,
}

impl InRange {
    pub const NONE: InRange = InRange { first: 1, last: 0 };

    pub fn new(first: usize, last: usize) -> Self {
        InRange { first, last }
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn contains(&self, group: usize) -> bool {
        group >= self.first && group <= self.last
    }

    pub fn mask(&self, groups: usize) -> Vec<bool> {
        (1..=groups).map(|g| self.contains(g)).collect()
    }

    /// Smallest range covering every set group, if the mask is contiguous.
    pub fn from_mask(mask: &[bool]) -> Option<InRange> {
        let set: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i + 1).collect();
        match (set.first(), set.last()) {
            (None, _) => Some(InRange::NONE),
            (Some(&a), Some(&b)) if b - a + 1 == set.len() => Some(InRange::new(a, b)),
            _ => None,
        }
    }
}

impl fmt::Display for InRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            f.write_str("none")
        } else if self.first == self.last {
            write!(f, "{}", self.first)
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

impl FromStr for InRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(InRange::NONE);
        }
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad IN group range {s:?}")))
        };
        let (a, b) = match s.split_once('-') {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let g = parse(s)?;
                (g, g)
            }
        };
        if a == 0 || b < a {
            return Err(Error::Parse(format!("bad IN group range {s:?}")));
        }
        Ok(InRange::new(a, b))
    }
}

impl TryFrom<String> for InRange {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InRange> for String {
    fn from(r: InRange) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Bottleneck groups `Conv2..Conv8`.
    pub groups: Vec<BottleneckConfig>,
    /// Channels of the final 1×1 convolution, i.e. of the pooled feature.
    pub feature_dim: usize,
    /// Instance norm per group, `in_mask[0]` is `Conv1`.
    pub in_mask: Vec<bool>,
    /// Learnable affine on the instance norms.
    pub in_affine: bool,
    /// Bias-free batch norm between pooling and the classifier.
    pub feature_norm: bool,
    pub width_multiplier: f64,
    pub num_identities: usize,
    #[serde(default)]
    pub feature_tap: FeatureTap,
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() as usize * divisor;
    out = out.max(divisor);
    if (out as f64) < 0.9 * v {
        out += divisor;
    }
    out
}

impl BackboneConfig {
    /// CPU-sized network for 3×64×32 inputs, pooled feature of 128 channels.
    pub fn desk(num_identities: usize) -> Self {
        let spec = [
            (1, 8, 1, 1),
            (4, 12, 2, 2),
            (4, 16, 2, 2),
            (4, 24, 2, 2),
            (4, 32, 2, 1),
            (4, 48, 2, 2),
            (4, 64, 1, 1),
        ];
        BackboneConfig {
            input_height: 64,
            input_width: 32,
            stem_channels: 8,
            stem_stride: 2,
            groups: spec.iter().map(|&(t, c, n, s)| BottleneckConfig::new(t, c, s, n)).collect(),
            feature_dim: 128,
            in_mask: InRange::new(1, 6).mask(8),
            in_affine: true,
            feature_norm: true,
            width_multiplier: 1.0,
            num_identities,
            feature_tap: FeatureTap::PostFn,
        }
    }

    /// MobileNetV2 at 256×128 input.
    pub fn full_scale(num_identities: usize, width_multiplier: f64) -> Self {
        let spec = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let scale = |c: usize| {
            if width_multiplier == 1.0 {
                c
            } else {
                make_divisible(c as f64 * width_multiplier, 8)
            }
        };
        BackboneConfig {
            input_height: 256,
            input_width: 128,
            stem_channels: scale(32),
            stem_stride: 2,
            groups: spec
                .iter()
                .map(|&(t, c, n, s)| BottleneckConfig::new(t, scale(c), s, n))
                .collect(),
            feature_dim: if width_multiplier > 1.0 { scale(1280) } else { 1280 },
            in_mask: InRange::new(1, 6).mask(8),
            in_affine: true,
            feature_norm: true,
            width_multiplier,
            num_identities,
            feature_tap: FeatureTap::PostFn,
        }
    }

    pub fn with_in_range(mut self, range: InRange) -> Self {
        self.in_mask = range.mask(self.num_groups());
        self
    }

    pub fn with_feature_norm(mut self, on: bool) -> Self {
        self.feature_norm = on;
        self
    }

    /// `Conv1` plus the bottleneck groups.
    pub fn num_groups(&self) -> usize {
        self.groups.len() + 1
    }

    pub fn in_range(&self) -> Option<InRange> {
        InRange::from_mask(&self.in_mask)
    }

    /// Output `(channels, height, width)` of every group, `Conv1` first.
    pub fn group_outputs(&self) -> Vec<(usize, usize, usize)> {
        let mut h = conv_output_dim(self.input_height, ConvKind::Standard3x3, self.stem_stride);
        let mut w = conv_output_dim(self.input_width, ConvKind::Standard3x3, self.stem_stride);
        let mut out = vec![(self.stem_channels, h, w)];
        for g in &self.groups {
            h = conv_output_dim(h, ConvKind::Depthwise3x3, g.stride);
            w = conv_output_dim(w, ConvKind::Depthwise3x3, g.stride);
            out.push((g.out_channels, h, w));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(config_err("input size must be positive"));
        }
        if self.stem_channels == 0 || self.feature_dim == 0 || self.num_identities == 0 {
            return Err(config_err("channel counts and num_identities must be positive"));
        }
        if self.stem_stride != 1 && self.stem_stride != 2 {
            return Err(config_err("stem stride must be 1 or 2"));
        }
        if self.groups.is_empty() {
            return Err(config_err("at least one bottleneck group is required"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.expansion == 0 || g.out_channels == 0 || g.repeat == 0 {
                return Err(config_err(format!("group Conv{} has a zero field", i + 2)));
            }
            if g.stride != 1 && g.stride != 2 {
                return Err(config_err(format!("group Conv{} stride must be 1 or 2", i + 2)));
            }
        }
        if !(self.width_multiplier > 0.0) {
            return Err(config_err("width multiplier must be positive"));
        }
        if self.in_mask.len() != self.num_groups() {
            return Err(config_err(format!(
                "in_mask has {} entries for {} groups",
                self.in_mask.len(),
                self.num_groups()
            )));
        }
        for (i, ((_, h, w), &on)) in self.group_outputs().iter().zip(&self.in_mask).enumerate() {
            if on && h * w < 2 {
                return Err(config_err(format!(
                    "instance norm on Conv{} is undefined: its planes are {h}x{w}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parse_and_mask() {
        let r: InRange = "1-6".parse().unwrap();
        assert_eq!(r.mask(8), vec![true, true, true, true, true, true, false, false]);
        assert_eq!(r.to_string(), "1-6");
        assert_eq!("none".parse::<InRange>().unwrap(), InRange::NONE);
        assert!(InRange::NONE.mask(8).iter().all(|&m| !m));
        assert_eq!("3".parse::<InRange>().unwrap(), InRange::new(3, 3));
        assert!("6-2".parse::<InRange>().is_err());
        assert!("0-2".parse::<InRange>().is_err());
        assert_eq!(InRange::from_mask(&r.mask(8)), Some(r));
        assert_eq!(InRange::from_mask(&[true, false, true]), None);
    }

    #[test]
    fn desk_plane_sizes() {
        let c = BackboneConfig::desk(10);
        c.validate().unwrap();
        let outs = c.group_outputs();
        assert_eq!(outs[0], (8, 32, 16));
        assert_eq!(outs[1], (8, 32, 16));
        assert_eq!(outs[2], (12, 16, 8));
        assert_eq!(outs[7], (64, 2, 1));
        // every group of the desk net keeps at least two positions
        c.clone().with_in_range(InRange::new(1, 8)).validate().unwrap();
    }

    #[test]
    fn in_on_unit_plane_rejected() {
        let mut c = BackboneConfig::desk(10);
        c.input_height = 32;
        c.input_width = 32;
        c.in_mask = InRange::new(1, 8).mask(8);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn full_scale_feature_dim() {
        let c = BackboneConfig::full_scale(100, 1.0);
        c.validate().unwrap();
        assert_eq!(c.feature_dim, 1280);
        assert_eq!(c.group_outputs()[7], (320, 8, 4));
        assert_eq!(make_divisible(32.0 * 0.5, 8), 16);
    }
}
