//! Model, decoder and distillation configuration with flat `key = value`
//! text serialization. Keys mirror field paths (`encoder.channels`,
//! `decoder.top_t`, `pcsd.lambda`, ...); list values are comma-separated.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder stages / pyramid levels.
pub const LEVELS: usize = 4;

/// Output stride of pyramid level `i` (0-based): 4, 8, 16, 32.
pub fn level_stride(i: usize) -> usize {
    1 << (i + 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMerge {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchMerge {
    pub const STEM: PatchMerge = PatchMerge {
        kernel: 7,
        stride: 4,
        padding: 3,
    };
    pub const DOWN: PatchMerge = PatchMerge {
        kernel: 3,
        stride: 2,
        padding: 1,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: [usize; LEVELS],
    pub depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub reductions: [usize; LEVELS],
    /// Hidden width of Mix-FFN as a multiple of the stage width.
    pub mlp_ratio: usize,
    pub patch: [PatchMerge; LEVELS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 5, 8],
            reductions: [8, 4, 2, 1],
            mlp_ratio: 4,
            patch: [
                PatchMerge::STEM,
                PatchMerge::DOWN,
                PatchMerge::DOWN,
                PatchMerge::DOWN,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Requested number of sorted correlation channels per location.
    pub top_t: usize,
    /// Width `D` of every recalibrated correlation path.
    pub fpn_channels: usize,
    /// Output width of the multi-scale Cycle FC block.
    pub mscfc_channels: usize,
    /// Widths of the three 1×1 convolutions of the mask reconstruction.
    pub recon_channels: [usize; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            top_t: 64,
            fpn_channels: 32,
            mscfc_channels: 64,
            recon_channels: [32, 16, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcsdConfig {
    pub lambda: f64,
    pub cube_spatial_kernels: Vec<usize>,
    pub cube_channel_kernels: Vec<usize>,
    /// Strip-pooling depth `Q` for the predicted mask.
    pub strip_q_mask: usize,
    /// Strip-pooling depth `Q` for the intermediate feature maps.
    pub strip_q_feature: usize,
}

impl Default for PcsdConfig {
    fn default() -> Self {
        PcsdConfig {
            lambda: 1.0,
            cube_spatial_kernels: vec![4, 8, 12, 16, 20, 24],
            cube_channel_kernels: vec![3],
            strip_q_mask: 4,
            strip_q_feature: 2,
        }
    }
}

impl PcsdConfig {
    /// `P = |spatial kernels| + |channel kernels|` before any clamping.
    pub fn num_kernels(&self) -> usize {
        self.cube_spatial_kernels.len() + self.cube_channel_kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("pcsd.lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.cube_spatial_kernels.is_empty() || self.cube_channel_kernels.is_empty() {
            return Err(Error::Config("pcsd kernel lists must be non-empty".into()));
        }
        if self
            .cube_spatial_kernels
            .iter()
            .chain(&self.cube_channel_kernels)
            .any(|&k| k == 0)
        {
            return Err(Error::Config("pcsd kernel sizes must be ≥ 1".into()));
        }
        if self.strip_q_mask == 0 || self.strip_q_feature == 0 {
            return Err(Error::Config("pcsd strip Q must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Nominal input size; fixes the per-level correlation widths.
    pub image_height: usize,
    pub image_width: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pcsd: PcsdConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            pcsd: PcsdConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Compact model (well under 200k parameters) used for training experiments.
    pub fn small(size: usize) -> Self {
        ModelConfig {
            image_height: size,
            image_width: size,
            encoder: EncoderConfig {
                channels: [16, 32, 48, 64],
                depths: [1, 1, 1, 1],
                heads: [1, 1, 2, 2],
                reductions: [8, 4, 2, 1],
                mlp_ratio: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                top_t: 32,
                fpn_channels: 12,
                mscfc_channels: 24,
                recon_channels: [24, 16, 16],
            },
            pcsd: PcsdConfig::default(),
            seed: 0,
        }
    }

    /// Minimal model (a few thousand parameters) for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            encoder: EncoderConfig {
                channels: [4, 4, 8, 8],
                depths: [1, 1, 1, 1],
                heads: [1, 1, 2, 2],
                reductions: [8, 4, 2, 1],
                mlp_ratio: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                top_t: 8,
                fpn_channels: 4,
                mscfc_channels: 4,
                recon_channels: [4, 4, 4],
            },
            pcsd: PcsdConfig::default(),
            seed: 0,
        }
    }

    /// Spatial dims of pyramid level `i` for an `h × w` input.
    pub fn level_dims(h: usize, w: usize, i: usize) -> (usize, usize) {
        (h / level_stride(i), w / level_stride(i))
    }

    /// Correlation width `T_i = min(T, h_i·w_i)` per level at the nominal size.
    /// Level 0 correlates after the extra stride-2 merge, i.e. at stride 8.
    pub fn level_top_t(&self) -> [usize; LEVELS] {
        let mut out = [0; LEVELS];
        for (i, o) in out.iter_mut().enumerate() {
            let (h, w) = Self::level_dims(self.image_height, self.image_width, i.max(1));
            *o = self.decoder.top_t.min(h * w);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % 32 != 0
            || self.image_width % 32 != 0
        {
            return Err(Error::Config(format!(
                "image size {}×{} must be a positive multiple of 32",
                self.image_height, self.image_width
            )));
        }
        for j in 0..LEVELS {
            if e.channels[j] == 0 || e.heads[j] == 0 || e.reductions[j] == 0 {
                return Err(Error::Config(format!("encoder stage {}: zero-sized setting", j + 1)));
            }
            if e.channels[j] % e.heads[j] != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {}: channels {} not divisible by heads {}",
                    j + 1,
                    e.channels[j],
                    e.heads[j]
                )));
            }
            let (h, w) = Self::level_dims(self.image_height, self.image_width, j);
            if (h * w) % e.reductions[j] != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {}: reduction {} does not divide {}·{} tokens",
                    j + 1,
                    e.reductions[j],
                    h,
                    w
                )));
            }
            let expected = if j == 0 { PatchMerge::STEM } else { PatchMerge::DOWN };
            if e.patch[j] != expected {
                return Err(Error::Config(format!(
                    "encoder stage {}: patch merge must be K={} S={} Pa={}",
                    j + 1,
                    expected.kernel,
                    expected.stride,
                    expected.padding
                )));
            }
        }
        if e.mlp_ratio == 0 {
            return Err(Error::Config("encoder.mlp_ratio must be ≥ 1".into()));
        }
        let d = &self.decoder;
        if d.top_t == 0 {
            return Err(Error::Config("decoder.top_t must be ≥ 1".into()));
        }
        if d.fpn_channels == 0 || d.mscfc_channels == 0 || d.recon_channels.contains(&0) {
            return Err(Error::Config("decoder widths must be ≥ 1".into()));
        }
        self.pcsd.validate()
    }

    /// Serialize as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        let d = &self.decoder;
        let p = &self.pcsd;
        let patch = |f: fn(&PatchMerge) -> usize| join(&e.patch.iter().map(f).collect::<Vec<_>>());
        vec![
            ("image_height".into(), self.image_height.to_string()),
            ("image_width".into(), self.image_width.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("encoder.channels".into(), join(&e.channels)),
            ("encoder.depths".into(), join(&e.depths)),
            ("encoder.heads".into(), join(&e.heads)),
            ("encoder.reductions".into(), join(&e.reductions)),
            ("encoder.mlp_ratio".into(), e.mlp_ratio.to_string()),
            ("encoder.patch_kernel".into(), patch(|p| p.kernel)),
            ("encoder.patch_stride".into(), patch(|p| p.stride)),
            ("encoder.patch_padding".into(), patch(|p| p.padding)),
            ("decoder.top_t".into(), d.top_t.to_string()),
            ("decoder.fpn_channels".into(), d.fpn_channels.to_string()),
            ("decoder.mscfc_channels".into(), d.mscfc_channels.to_string()),
            ("decoder.recon_channels".into(), join(&d.recon_channels)),
            ("pcsd.lambda".into(), format_f64(p.lambda)),
            ("pcsd.cube_spatial_kernels".into(), join(&p.cube_spatial_kernels)),
            ("pcsd.cube_channel_kernels".into(), join(&p.cube_channel_kernels)),
            ("pcsd.strip_q_mask".into(), p.strip_q_mask.to_string()),
            ("pcsd.strip_q_feature".into(), p.strip_q_feature.to_string()),
        ]
    }

    /// Set one field by its key path. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let p = &mut self.pcsd;
        match key {
            "image_height" => self.image_height = parse(key, value)?,
            "image_width" => self.image_width = parse(key, value)?,
            "image_size" => {
                let s: usize = parse(key, value)?;
                self.image_height = s;
                self.image_width = s;
            }
            "seed" => self.seed = parse(key, value)?,
            "encoder.channels" => e.channels = parse_array(key, value)?,
            "encoder.depths" => e.depths = parse_array(key, value)?,
            "encoder.heads" => e.heads = parse_array(key, value)?,
            "encoder.reductions" => e.reductions = parse_array(key, value)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "encoder.patch_kernel" => {
                let v: [usize; LEVELS] = parse_array(key, value)?;
                (0..LEVELS).for_each(|i| e.patch[i].kernel = v[i]);
            }
            "encoder.patch_stride" => {
                let v: [usize; LEVELS] = parse_array(key, value)?;
                (0..LEVELS).for_each(|i| e.patch[i].stride = v[i]);
            }
            "encoder.patch_padding" => {
                let v: [usize; LEVELS] = parse_array(key, value)?;
                (0..LEVELS).for_each(|i| e.patch[i].padding = v[i]);
            }
            "decoder.top_t" => d.top_t = parse(key, value)?,
            "decoder.fpn_channels" => d.fpn_channels = parse(key, value)?,
            "decoder.mscfc_channels" => d.mscfc_channels = parse(key, value)?,
            "decoder.recon_channels" => d.recon_channels = parse_array(key, value)?,
            "pcsd.lambda" => p.lambda = parse(key, value)?,
            "pcsd.cube_spatial_kernels" => p.cube_spatial_kernels = parse_list(key, value)?,
            "pcsd.cube_channel_kernels" => p.cube_channel_kernels = parse_list(key, value)?,
            "pcsd.strip_q_mask" => p.strip_q_mask = parse(key, value)?,
            "pcsd.strip_q_feature" => p.strip_q_feature = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` text on top of the defaults and validate.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv_lines(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Split `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_array<V: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[V; N]> {
    let v: Vec<V> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<V>| Error::Config(format!("`{key}`: expected {N} values, got {}", v.len())))
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest round-tripping decimal form.
pub(crate) fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_kv() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::small(64).validate().unwrap();
        ModelConfig::small(128).validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn per_level_top_t_clamps_to_map_size() {
        let cfg = ModelConfig::default();
        // 64×64: correlation maps 8×8, 8×8, 4×4, 2×2
        assert_eq!(cfg.level_top_t(), [64, 64, 16, 4]);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.heads[2] = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ModelConfig::default();
        cfg.image_height = 48;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.encoder.patch[0] = PatchMerge::DOWN;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.pcsd.lambda = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.decoder.top_t = 0;
        assert!(cfg.validate().is_err());

        assert!(ModelConfig::from_kv("encoder.channels = 1,2").is_err());
        assert!(ModelConfig::from_kv("nonsense = 3").is_err());
        assert!(ModelConfig::from_kv("just text").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = ModelConfig::from_kv("# toy\nseed = 9 # trailing\n\npcsd.lambda = 0.25\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pcsd.lambda, 0.25);
    }
}
