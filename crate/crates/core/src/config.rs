//! Model configuration and the flat `key = value` file format.
//!
//! ```text
//! # comment
//! input_size = 384
//! stage1.dim = 64
//! level4.source = previous
//! level4.ratios = 2, 3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// One backbone stage: a convolutional token embedding followed by
/// `num_blocks` convolutional transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub embed: ConvSpec,
    pub num_blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    /// Depthwise kernel of the q/k/v projections; 1 gives plain linear projections.
    pub proj_kernel: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        self.embed.validate()?;
        if self.embed.out_channels != self.dim {
            return Err(Error::Config(format!(
                "stage{index}: embed produces {} channels but dim is {}",
                self.embed.out_channels, self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "stage{index}: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("stage{index}: blocks and mlp_ratio must be positive")));
        }
        if self.proj_kernel == 0 || self.proj_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "stage{index}: proj_kernel {} must be odd to preserve the grid",
                self.proj_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSource {
    /// Backbone stage, 1-based.
    Stage(usize),
    /// Output of the preceding pyramid level.
    Previous,
}

/// One pyramid level and the default boxes attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub source: LevelSource,
    pub channels: usize,
    /// Lateral conv (stage sources) or the spatial conv of an extra layer.
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Residual block on the source feature before the lateral conv.
    pub residual: bool,
    /// Width of the 1x1 bottleneck in an extra layer.
    pub mid_channels: usize,
    pub ratios: Vec<f32>,
    pub min_size: f32,
    pub max_size: f32,
}

impl LevelSpec {
    pub fn anchors_per_location(&self) -> usize {
        2 + 2 * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub levels: Vec<LevelSpec>,
    /// Largest token count for which an attention unit is instantiated.
    pub au_threshold: usize,
    pub eps: f32,
    pub variances: (f32, f32),
}

fn stage(in_ch: usize, dim: usize, kernel: usize, stride: usize, padding: usize, heads: usize, blocks: usize, proj: usize) -> StageConfig {
    StageConfig {
        embed: ConvSpec::new(in_ch, dim, kernel, stride, padding),
        num_blocks: blocks,
        heads,
        dim,
        mlp_ratio: 4,
        proj_kernel: proj,
    }
}

#[allow(clippy::too_many_arguments)]
fn lateral(stage: usize, channels: usize, residual: bool, ratios: &[f32], min: f32, max: f32) -> LevelSpec {
    LevelSpec {
        source: LevelSource::Stage(stage),
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        residual,
        mid_channels: 0,
        ratios: ratios.to_vec(),
        min_size: min,
        max_size: max,
    }
}

fn extra(mid: usize, channels: usize, stride: usize, padding: usize, ratios: &[f32], min: f32, max: f32) -> LevelSpec {
    LevelSpec {
        source: LevelSource::Previous,
        channels,
        kernel: 3,
        stride,
        padding,
        residual: false,
        mid_channels: mid,
        ratios: ratios.to_vec(),
        min_size: min,
        max_size: max,
    }
}

impl ModelConfig {
    /// Full-size detector at 384x384 with 20 classes.
    pub fn paper() -> Self {
        Self {
            input_size: 384,
            in_channels: 3,
            num_classes: 20,
            stages: vec![
                stage(3, 64, 7, 4, 2, 1, 1, 3),
                stage(64, 192, 3, 2, 1, 3, 4, 3),
                stage(192, 384, 3, 2, 1, 6, 16, 3),
            ],
            levels: vec![
                lateral(1, 192, false, &[2.0], 21.0, 42.0),
                lateral(2, 768, false, &[2.0], 42.0, 63.0),
                lateral(3, 1024, true, &[2.0, 3.0], 63.0, 114.0),
                extra(128, 256, 2, 1, &[2.0, 3.0], 114.0, 163.0),
                extra(128, 256, 2, 1, &[2.0, 3.0], 163.0, 214.0),
                extra(128, 256, 2, 1, &[2.0], 214.0, 265.0),
                extra(128, 256, 1, 0, &[2.0], 265.0, 315.0),
            ],
            au_threshold: 1024,
            eps: 1e-5,
            variances: (0.1, 0.2),
        }
    }

    /// Desk-scale detector at 96x96 with three pyramid levels.
    pub fn tiny() -> Self {
        Self {
            input_size: 96,
            in_channels: 3,
            num_classes: 3,
            stages: vec![
                stage(3, 8, 7, 4, 2, 1, 1, 3),
                stage(8, 16, 3, 2, 1, 2, 1, 3),
                stage(16, 32, 3, 2, 1, 4, 1, 3),
            ],
            levels: vec![
                lateral(2, 32, false, &[2.0], 12.0, 24.0),
                lateral(3, 32, true, &[2.0, 3.0], 24.0, 44.0),
                extra(16, 32, 2, 1, &[2.0, 3.0], 44.0, 72.0),
            ],
            au_threshold: 1024,
            eps: 1e-5,
            variances: (0.1, 0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 3 {
            return Err(Error::Config(format!("expected 3 stages, got {}", self.stages.len())));
        }
        let mut in_ch = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i + 1)?;
            if s.embed.in_channels != in_ch {
                return Err(Error::Config(format!(
                    "stage{}: embed expects {} input channels, previous stage gives {in_ch}",
                    i + 1,
                    s.embed.in_channels
                )));
            }
            in_ch = s.dim;
        }
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid has no levels".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            let name = format!("level{}", i + 1);
            match l.source {
                LevelSource::Stage(s) if !(1..=3).contains(&s) => {
                    return Err(Error::Config(format!("{name}: no backbone stage {s}")))
                }
                LevelSource::Previous if i == 0 => {
                    return Err(Error::Config(format!("{name}: first level cannot read a previous level")))
                }
                LevelSource::Previous if l.mid_channels == 0 => {
                    return Err(Error::Config(format!("{name}: extra layer needs mid_channels")))
                }
                _ => {}
            }
            if l.ratios.is_empty() {
                return Err(Error::Config(format!("{name}: empty aspect-ratio list")));
            }
            if l.ratios.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Config(format!("{name}: aspect ratios must be positive")));
            }
            if !(l.min_size > 0.0 && l.max_size >= l.min_size) {
                return Err(Error::Config(format!("{name}: need 0 < min_size <= max_size")));
            }
            if l.channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(format!("{name}: channels, kernel and stride must be positive")));
            }
        }
        self.grids().map(|_| ())
    }

    /// Stage grid sizes `(h, w)` through the three embeddings.
    pub fn stage_grids(&self) -> Result<Vec<(usize, usize)>> {
        let mut hw = (self.input_size, self.input_size);
        let mut out = Vec::with_capacity(3);
        for s in &self.stages {
            hw = s.embed.output_size(hw.0, hw.1)?;
            out.push(hw);
        }
        Ok(out)
    }

    /// Spatial size of every pyramid level.
    pub fn grids(&self) -> Result<Vec<(usize, usize)>> {
        let stages = self.stage_grids()?;
        let mut out: Vec<(usize, usize)> = Vec::with_capacity(self.levels.len());
        for (i, l) in self.levels.iter().enumerate() {
            let hw = match l.source {
                LevelSource::Stage(s) => {
                    let (h, w) = stages[s - 1];
                    ConvSpec::new(1, 1, l.kernel, l.stride, l.padding).output_size(h, w)?
                }
                LevelSource::Previous => {
                    let (h, w) = out[i - 1];
                    ConvSpec::new(1, 1, l.kernel, l.stride, l.padding).output_size(h, w)?
                }
            };
            out.push(hw);
        }
        Ok(out)
    }

    /// Channel count feeding each level's first conv.
    pub fn level_in_channels(&self, index: usize) -> usize {
        match self.levels[index].source {
            LevelSource::Stage(s) => self.stages[s - 1].dim,
            LevelSource::Previous => self.levels[index - 1].channels,
        }
    }

    pub fn anchors_per_location(&self) -> Vec<usize> {
        self.levels.iter().map(LevelSpec::anchors_per_location).collect()
    }

    /// Total default boxes `sum(h * w * a)`.
    pub fn num_anchors(&self) -> Result<usize> {
        Ok(self
            .grids()?
            .iter()
            .zip(&self.levels)
            .map(|(&(h, w), l)| h * w * l.anchors_per_location())
            .sum())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map = parse_kv(&text, &path.display().to_string())?;
        Self::from_map(&map)
    }

    pub fn from_str_kv(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text, "<string>")?)
    }

    /// Builds a config from parsed keys. Missing keys fall back to the `paper` preset
    /// (stage/level keys fall back to the preset entry of the same index when present).
    pub fn from_map(map: &KvMap) -> Result<Self> {
        let base = match map.get("preset").map(String::as_str) {
            None | Some("paper") => Self::paper(),
            Some("tiny") => Self::tiny(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for key in map.keys() {
            if !is_model_key(key) && !key.starts_with("train.") {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        let get = Getter { map };
        let mut cfg = base.clone();
        cfg.input_size = get.usize("input_size", base.input_size)?;
        cfg.in_channels = get.usize("in_channels", base.in_channels)?;
        cfg.num_classes = get.usize("num_classes", base.num_classes)?;
        cfg.au_threshold = get.usize("au_threshold", base.au_threshold)?;
        cfg.eps = get.f32("eps", base.eps)?;
        cfg.variances = (
            get.f32("variance_center", base.variances.0)?,
            get.f32("variance_size", base.variances.1)?,
        );

        let mut in_ch = cfg.in_channels;
        for (i, st) in cfg.stages.iter_mut().enumerate() {
            let p = format!("stage{}.", i + 1);
            let k = |n: &str| format!("{p}{n}");
            let dim = get.usize(&k("dim"), st.dim)?;
            let kernel = get.usize(&k("kernel"), st.embed.kernel.0)?;
            let stride = get.usize(&k("stride"), st.embed.stride.0)?;
            let padding = get.usize(&k("padding"), st.embed.padding.0)?;
            *st = StageConfig {
                embed: ConvSpec::new(in_ch, dim, kernel, stride, padding),
                num_blocks: get.usize(&k("blocks"), st.num_blocks)?,
                heads: get.usize(&k("heads"), st.heads)?,
                dim,
                mlp_ratio: get.usize(&k("mlp_ratio"), st.mlp_ratio)?,
                proj_kernel: get.usize(&k("proj_kernel"), st.proj_kernel)?,
            };
            in_ch = dim;
        }

        let count = get.usize("levels", base.levels.len())?;
        let mut levels = Vec::with_capacity(count);
        for i in 0..count {
            let p = format!("level{}.", i + 1);
            let k = |n: &str| format!("{p}{n}");
            let fallback = base.levels.get(i).cloned();
            let need = |name: &str| Error::Config(format!("missing key `{p}{name}`"));
            let source = match map.get(&k("source")) {
                Some(s) => parse_source(s)?,
                None => fallback.as_ref().ok_or_else(|| need("source"))?.source,
            };
            let fb = |f: fn(&LevelSpec) -> f32, name: &str| -> Result<f32> {
                match &fallback {
                    Some(l) => get.f32(&k(name), f(l)),
                    None => get.required_f32(&k(name)),
                }
            };
            let fbu = |f: fn(&LevelSpec) -> usize, name: &str, default: Option<usize>| -> Result<usize> {
                match (&fallback, default) {
                    (Some(l), _) => get.usize(&k(name), f(l)),
                    (None, Some(d)) => get.usize(&k(name), d),
                    (None, None) => get.required_usize(&k(name)),
                }
            };
            let ratios = match map.get(&k("ratios")) {
                Some(s) => parse_list(s).map_err(|e| Error::Config(format!("{p}ratios: {e}")))?,
                None => fallback.as_ref().ok_or_else(|| need("ratios"))?.ratios.clone(),
            };
            let residual = match map.get(&k("residual")) {
                Some(s) => parse_bool(s).ok_or_else(|| Error::Config(format!("{p}residual: expected true/false")))?,
                None => fallback.as_ref().map(|l| l.residual).unwrap_or(false),
            };
            levels.push(LevelSpec {
                source,
                channels: fbu(|l| l.channels, "channels", None)?,
                kernel: fbu(|l| l.kernel, "kernel", Some(3))?,
                stride: fbu(|l| l.stride, "stride", Some(1))?,
                padding: fbu(|l| l.padding, "padding", Some(1))?,
                residual,
                mid_channels: fbu(|l| l.mid_channels, "mid_channels", Some(0))?,
                ratios,
                min_size: fb(|l| l.min_size, "min_size")?,
                max_size: fb(|l| l.max_size, "max_size")?,
            });
        }
        cfg.levels = levels;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key, loadable by [`ModelConfig::from_str_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "au_threshold = {}", self.au_threshold);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "variance_center = {}", self.variances.0);
        let _ = writeln!(s, "variance_size = {}", self.variances.1);
        for (i, st) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            let _ = writeln!(s, "\n{p}.kernel = {}", st.embed.kernel.0);
            let _ = writeln!(s, "{p}.stride = {}", st.embed.stride.0);
            let _ = writeln!(s, "{p}.padding = {}", st.embed.padding.0);
            let _ = writeln!(s, "{p}.dim = {}", st.dim);
            let _ = writeln!(s, "{p}.heads = {}", st.heads);
            let _ = writeln!(s, "{p}.blocks = {}", st.num_blocks);
            let _ = writeln!(s, "{p}.mlp_ratio = {}", st.mlp_ratio);
            let _ = writeln!(s, "{p}.proj_kernel = {}", st.proj_kernel);
        }
        let _ = writeln!(s, "\nlevels = {}", self.levels.len());
        for (i, l) in self.levels.iter().enumerate() {
            let p = format!("level{}", i + 1);
            let src = match l.source {
                LevelSource::Stage(n) => format!("stage{n}"),
                LevelSource::Previous => "previous".to_string(),
            };
            let _ = writeln!(s, "\n{p}.source = {src}");
            let _ = writeln!(s, "{p}.channels = {}", l.channels);
            let _ = writeln!(s, "{p}.kernel = {}", l.kernel);
            let _ = writeln!(s, "{p}.stride = {}", l.stride);
            let _ = writeln!(s, "{p}.padding = {}", l.padding);
            let _ = writeln!(s, "{p}.residual = {}", l.residual);
            let _ = writeln!(s, "{p}.mid_channels = {}", l.mid_channels);
            let ratios: Vec<String> = l.ratios.iter().map(|r| r.to_string()).collect();
            let _ = writeln!(s, "{p}.ratios = {}", ratios.join(", "));
            let _ = writeln!(s, "{p}.min_size = {}", l.min_size);
            let _ = writeln!(s, "{p}.max_size = {}", l.max_size);
        }
        s
    }
}

fn is_model_key(key: &str) -> bool {
    const TOP: &[&str] = &[
        "preset", "input_size", "in_channels", "num_classes", "au_threshold", "eps",
        "variance_center", "variance_size", "levels",
    ];
    const STAGE: &[&str] = &["kernel", "stride", "padding", "dim", "heads", "blocks", "mlp_ratio", "proj_kernel"];
    const LEVEL: &[&str] = &[
        "source", "channels", "kernel", "stride", "padding", "residual", "mid_channels", "ratios",
        "min_size", "max_size",
    ];
    if TOP.contains(&key) {
        return true;
    }
    let Some((prefix, field)) = key.split_once('.') else { return false };
    let indexed = |name: &str| {
        prefix
            .strip_prefix(name)
            .is_some_and(|n| n.parse::<usize>().is_ok_and(|n| n >= 1))
    };
    (indexed("stage") && STAGE.contains(&field)) || (indexed("level") && LEVEL.contains(&field))
}

fn parse_source(s: &str) -> Result<LevelSource> {
    match s {
        "previous" => Ok(LevelSource::Previous),
        _ => s
            .strip_prefix("stage")
            .and_then(|n| n.parse().ok())
            .map(LevelSource::Stage)
            .ok_or_else(|| Error::Config(format!("invalid level source `{s}`"))),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f32>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f32>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

pub type KvMap = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, origin: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(origin, format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(origin, format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(map)
}

pub(crate) struct Getter<'a> {
    pub map: &'a KvMap,
}

impl Getter<'_> {
    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.map
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("{key} = {v}: {e}"))))
            .transpose()
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn f32(&self, key: &str, default: f32) -> Result<f32> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => parse_bool(v).ok_or_else(|| Error::Config(format!("{key} = {v}: expected true/false"))),
        }
    }

    fn required_usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    fn required_f32(&self, key: &str) -> Result<f32> {
        self.parsed(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn full_size_grids() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.stage_grids().unwrap(), vec![(96, 96), (48, 48), (24, 24)]);
        let sizes: Vec<usize> = cfg.grids().unwrap().iter().map(|g| g.0).collect();
        assert_eq!(sizes, vec![96, 48, 24, 12, 6, 3, 1]);
        assert_eq!(cfg.anchors_per_location(), vec![4, 4, 6, 6, 6, 4, 4]);
        assert_eq!(cfg.num_anchors().unwrap(), 50656);
    }

    #[test]
    fn tiny_grids() {
        let cfg = ModelConfig::tiny();
        assert_eq!(cfg.stage_grids().unwrap(), vec![(24, 24), (12, 12), (6, 6)]);
        assert_eq!(cfg.grids().unwrap(), vec![(12, 12), (6, 6), (3, 3)]);
    }

    #[test]
    fn kv_roundtrip() {
        for cfg in [ModelConfig::paper(), ModelConfig::tiny()] {
            assert_eq!(ModelConfig::from_str_kv(&cfg.to_kv()).unwrap(), cfg);
        }
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = ModelConfig::from_str_kv("preset = tiny\nstage1.proj_kernel = 1 # ablation\n").unwrap();
        assert_eq!(cfg.stages[0].proj_kernel, 1);
        assert_eq!(cfg.stages[1].proj_kernel, 3);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ModelConfig::from_str_kv("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::from_str_kv("stage1.heads = 3"), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::from_str_kv("level1.ratios = "), Err(Error::Config(_))));
        assert!(matches!(parse_kv("no equals sign", "x"), Err(Error::Parse { .. })));
        assert!(matches!(ModelConfig::from_str_kv("input_size = 8"), Err(Error::Config(_))));
    }
}
